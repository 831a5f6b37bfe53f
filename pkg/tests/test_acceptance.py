"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The cascade criteria train the full desk-scale cascade (100 phantoms at
32^3, 2000 iterations per stage, KNoise and LowPass) and, for the
determinism check, train it a second time. Expect roughly 20 minutes on a
single core.
"""
import csv
import hashlib
import json
import math
import os
import time

import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from kspaceqc import cli
from kspaceqc import diffkit as dk
from kspaceqc import kspace_aug as ka
from kspaceqc import losses as L
from kspaceqc import nifti as nf
from kspaceqc.cascade import PhantomData, TrainConfig, run_cascade
from kspaceqc.evaluate import cross_decoupling, student_teacher_correlation, task_dice, teacher_contrast
from kspaceqc.fftkit import dft3_naive, fft3, fftn_array, ifft3, ifftn_array
from kspaceqc.phantom import PhantomSpec
from kspaceqc.toynet import NetConfig, forward, init
from kspaceqc.volume import ComplexVolume, Volume

from conftest import FIXTURES

STAGES = ("task", "teacher-knoise", "teacher-lowpass", "student")


def _run(emit, number, title, check):
    """Evaluate ``check() -> (ok, detail)``; a crash is reported as FAIL too."""
    try:
        ok, detail = check()
    except Exception as exc:
        emit(number, title, False, f"raised {type(exc).__name__}: {exc}")
        raise
    emit(number, title, ok, detail)
    assert ok, detail


# --- 1: FFT ---------------------------------------------------------------------

def test_criterion_1_fft(acceptance_line):
    def check():
        t0 = time.perf_counter()
        rng = np.random.default_rng(1)
        naive = 0.0
        for shape in ((6, 5, 4), (8, 8, 8)):
            x = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
            naive = max(naive, np.abs(fft3(ComplexVolume(x)).data - dft3_naive(ComplexVolume(x)).data).max())
        trip = parseval = 0.0
        for n in (2, 3, 5, 7, 12, 16, 31, 32, 45, 64):
            x = rng.standard_normal((n, n, n))
            k = fftn_array(x)
            trip = max(trip, np.abs(ifftn_array(k) - x).max())
            back = ifft3(fft3(Volume(x))).data
            trip = max(trip, np.abs(back - x).max())
            e_x = (np.abs(x) ** 2).sum()
            parseval = max(parseval, abs((np.abs(k) ** 2).sum() / x.size - e_x) / e_x)
        dt = time.perf_counter() - t0
        ok = naive <= 1e-9 and trip <= 1e-9 and parseval <= 1e-9 and dt < 5
        return ok, (f"naive err {naive:.2e}, roundtrip err {trip:.2e} (to 64^3), "
                    f"Parseval rel {parseval:.2e}, {dt:.2f}s")

    _run(acceptance_line, 1, "FFT correctness", check)


# --- 2: augmentation calibration -------------------------------------------------------

def test_criterion_2_augmentation(acceptance_line):
    def check():
        t0 = time.perf_counter()
        k = fftn_array(np.random.default_rng(5).uniform(0, 1, size=(32, 32, 32)))
        p_sig = np.mean(np.abs(k) ** 2)
        snr_err = 0.0
        for target in (-10.0, 0.0, 10.0, 30.0):
            ratios = [np.mean(np.abs(ka.apply_k_noise(k, target, np.random.default_rng(s)) - k) ** 2) / p_sig
                      for s in range(50)]
            snr_err = max(snr_err, abs(-10 * math.log10(np.mean(ratios)) - target))
        bins_ok = True
        for axis in range(3):
            for ratio in (1.0, 2.0, 3.5, 12.0):
                out = ka.apply_lowpass(k, axis, ratio)
                keep = np.abs(ka.centered_freqs(32)) <= 32 / (2 * ratio)
                keep = keep.reshape([-1 if a == axis else 1 for a in range(3)])
                keep = np.broadcast_to(keep, k.shape)
                bins_ok &= bool(np.all(out[~keep] == 0) and np.array_equal(out[keep], k[keep]))
        img = np.zeros((32, 32, 32))
        img[5, 7, 9] = 1.0
        ghost = np.abs(ifftn_array(ka.apply_wrap(fftn_array(img), 0, 0.5, "regular-interval")))
        peaks = sorted(tuple(int(i) for i in p) for p in np.argwhere(ghost > 1e-9))
        ratio_err = max(abs(ghost[5, 7, 9] - 0.5), abs(ghost[21, 7, 9] - 0.5))
        wrap_ok = peaks == [(5, 7, 9), (21, 7, 9)] and ratio_err <= 1e-9
        cfg = ka.PipelineConfig(rate=0.5, seed=3)
        rng = np.random.default_rng(cfg.seed)
        frac = sum(not ka.draw_record(cfg, (32, 32, 32), rng).clean for _ in range(10000)) / 10000
        dt = time.perf_counter() - t0
        ok = snr_err <= 0.5 and bins_ok and wrap_ok and abs(frac - 0.5) <= 0.03 and dt < 30
        return ok, (f"max SNR error {snr_err:.3f} dB, lowpass bins exact={bins_ok}, "
                    f"wrap ghosts {peaks} amp err {ratio_err:.1e}, rate 0.5 -> {frac:.4f}, {dt:.1f}s")

    _run(acceptance_line, 2, "augmentation calibration", check)


# --- 3: loss analytics --------------------------------------------------------------

def test_criterion_3_losses(acceptance_line):
    def check():
        t0 = time.perf_counter()
        eps = 0.05
        min_err = 0.0
        for ce in (0.05, 0.3, 1.0, 2.5):
            f = lambda s: float(L.weighted_ce(np.array([[ce]]), np.array([[s]]), eps).data)
            res = minimize_scalar(f, bounds=(-12, 6), method="bounded", options={"xatol": 1e-10})
            min_err = max(min_err, abs(math.exp(res.x) - (2 * ce - eps)))
        rng = np.random.default_rng(7)
        shp = (1, 1, 6, 6, 6)
        ce = rng.uniform(0, 2, size=shp)
        ref, fixed = rng.normal(-1, 0.4, size=shp), rng.normal(-1, 0.4, size=shp)
        funcs = {
            "weighted_ce": lambda tape, t: L.weighted_ce(ce, t["s"], eps),
            "combined": lambda tape, t: L.combined_loss(ce, t["s"], [fixed, t["s"] * 0.5], eps)[0],
            "aug": lambda tape, t: L.aug_loss(ce, t["s"], t["s"] * 0.7, ref, eps)[0],
            "match": lambda tape, t: L.uncertainty_match_loss(t["s"], ref)[0],
        }
        errs = {k: dk.grad_check(f, {"s": rng.normal(-1, 0.4, size=shp)}).max_error for k, f in funcs.items()}
        # composite: student loss (combined loss plus one match term per channel) through a small net
        m = init(NetConfig(uncertainty_channels=3, widths=(3,), seed=4))
        x = rng.uniform(size=shp)
        labels = rng.integers(0, 3, size=(1, 6, 6, 6))
        refs = [rng.normal(-1, 0.3, size=shp) for _ in range(3)]

        def composite(tape, ts):
            logits, s = forward(type(m)(m.config, ts), x)
            chans = [dk.take_channel(s, i) for i in range(3)]
            total = L.combined_loss(L.cross_entropy(logits, labels), chans[0], chans[1:], eps)[0]
            for ch, r in zip(chans, refs):
                total = dk.add(total, L.uncertainty_match_loss(ch, r)[0])
            return total

        errs["composite"] = dk.grad_check(composite, m.params).max_error
        z = rng.normal(0, 3, size=(64, 3, 1, 1, 1))
        grid = (0.01, 0.1, 0.5, 1.0, 2.0, 10.0, 100.0)
        hs = [-(p * np.log(np.where(p > 0, p, 1.0))).sum(axis=1) for p in
              (L.scaled_softmax(z, np.full((64, 1, 1, 1, 1), v)) for v in grid)]
        mono = all((b >= a - 1e-12).all() for a, b in zip(hs, hs[1:]))
        dt = time.perf_counter() - t0
        worst = max(errs.values())
        ok = min_err <= 1e-3 and worst <= 1e-4 and mono and dt < 60
        return ok, (f"minimizer err {min_err:.1e}; grad-check errors "
                    + ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
                    + f"; entropy monotone={mono}; {dt:.1f}s")

    _run(acceptance_line, 3, "loss analytics", check)


# --- 4: epsilon schedule --------------------------------------------------------------

def test_criterion_4_schedule(acceptance_line):
    def check():
        t0 = time.perf_counter()
        s = L.EpsilonSchedule(learning_rate=1e-4)
        seen = [s]
        for _ in range(10):
            s = L.epsilon_step(s, [1.0] * (2 * s.window))  # flat losses: every call is a plateau
            seen.append(s)
        eps = [x.epsilon for x in seen]
        lrs = [x.learning_rate for x in seen]
        want = [0.05 / 2 ** i for i in range(7)]
        ok = (eps[:7] == want and all(e == want[-1] for e in eps[7:]) and seen[-1].frozen
              and lrs[:7] == [1e-4 / 2 ** i for i in range(7)] and all(v == lrs[6] for v in lrs[7:]))
        dt = time.perf_counter() - t0
        ok = ok and dt < 1
        return ok, f"epsilon {' -> '.join(f'{e:g}' for e in eps[:8])} (frozen), lr ends {lrs[-1]:g}, {dt * 1e3:.1f} ms"

    _run(acceptance_line, 4, "epsilon schedule", check)


# --- 5-7: cascade ----------------------------------------------------------------------

def _train(out):
    data = PhantomData.generate(PhantomSpec(), 100)
    cfg = TrainConfig()
    t0 = time.perf_counter()
    state = run_cascade(data, cfg, str(out))
    return state, data, cfg, time.perf_counter() - t0


@pytest.fixture(scope="session")
def reference_cascade(tmp_path_factory):
    out = tmp_path_factory.mktemp("cascade_a")
    state, data, cfg, seconds = _train(out)
    return dict(state=state, data=data, cfg=cfg, seconds=seconds, out=out)


def _reference_metrics():
    path = FIXTURES / "reference_run.json"
    return json.loads(path.read_text()) if path.exists() else {}


def test_criterion_5_cascade(acceptance_line, reference_cascade):
    def check():
        st, data, cfg = reference_cascade["state"], reference_cascade["data"], reference_cascade["cfg"]
        ref = _reference_metrics()
        dice, _ = task_dice(st.task, data, cfg)
        parts = [f"(a) Dice {dice:.3f}"]
        ok = dice >= 0.85
        kinds = [k.value for k in cfg.kinds]
        for k in kinds:
            cor, clean = teacher_contrast(st.teachers[ka.AugmentationKind.parse(k)], k, data, cfg)
            ok &= cor >= 2 * clean
            parts.append(f"(b) {k} {cor:.4f}/{clean:.4f}={cor / clean:.2f}x")
        for k in kinds:
            r = student_teacher_correlation(st.student, st.teachers[ka.AugmentationKind.parse(k)], k, data, cfg)
            ok &= r >= 0.5
            parts.append(f"(c) r[{k}] {r:.3f}")
        for a in kinds:
            for b in kinds:
                if a != b:
                    va, vb = cross_decoupling(st.student, a, b, data, cfg)
                    ok &= va > vb
                    parts.append(f"(d) {a}-corrupted s2[{a}] {va:.4f} vs s2[{b}] {vb:.4f}")
        secs = reference_cascade["seconds"]
        ok &= secs <= 600
        parts.append(f"train time {secs:.0f}s on {os.cpu_count()} core(s)")
        if ref:
            # informational: BLAS builds may legitimately change the bits across machines
            same = st.checksums() == ref["checksums"]
            parts.append(f"reference Dice {ref['dice']:.3f}, checksums {'match' if same else 'differ from'} reference")
        return ok, "; ".join(parts)

    _run(acceptance_line, 5, "cascade end to end", check)


def _sweep(run_dir, data, work, tag):
    """CLI infer + two report sweeps on the first test phantom; returns the two CSV row lists."""
    idx = data.split("test")[0]
    img = work / f"phantom_{idx:04d}.nii"
    nf.write_nifti(Volume(data.images[idx]), img)
    inf = work / f"infer_{tag}"
    assert cli.main(["infer", "--model", str(run_dir / "student"), "--in", str(img), "--out", str(inf)]) == 0
    d = inf / img.name[:-4]
    out = {}
    for kind, levels in (("knoise", "30,10,0,-10"), ("lowpass", "1,2,6,12")):
        rep = work / f"report_{tag}_{kind}"
        assert cli.main(["report", "--infer-out", str(d), "--baseline", str(d), "--level-kind", kind,
                         "--levels", levels, "--out", str(rep)]) == 0
        with open(rep / "qc_error_bars.csv") as fh:
            out[kind] = [tuple(map(float, r)) for r in list(csv.reader(fh))[1:]]
        out[kind + "_dir"] = rep
    return out


def test_criterion_6_error_bars(acceptance_line, reference_cascade, tmp_path):
    def check():
        t0 = time.perf_counter()
        res = _sweep(reference_cascade["out"], reference_cascade["data"], tmp_path, "a")
        parts, ok = [], True
        for kind in ("knoise", "lowpass"):
            widths = [hi - lo for _, _, lo, hi in res[kind]]
            mono = all(b >= a for a, b in zip(widths, widths[1:]))
            ok &= mono and len(widths) == 4
            parts.append(f"{kind} widths " + ", ".join(f"{lvl:g}:{w:.2f}" for (lvl, *_), w in zip(res[kind], widths))
                         + f" non-decreasing={mono}")
        dt = time.perf_counter() - t0
        ok &= dt < 120
        return ok, "; ".join(parts) + f"; {dt:.1f}s"

    _run(acceptance_line, 6, "error-bar widening", check)


def _digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_criterion_7_determinism(acceptance_line, reference_cascade, tmp_path):
    def check():
        a = reference_cascade["out"]
        b = tmp_path / "cascade_b"
        state_b, data_b, _, _ = _train(b)
        diffs = []
        for stage in STAGES:
            for f in sorted(os.listdir(a / stage)):
                if _digest(a / stage / f) != _digest(b / stage / f):
                    diffs.append(f"{stage}/{f}")
        same_ck = reference_cascade["state"].checksums() == state_b.checksums()
        ra = _sweep(a, reference_cascade["data"], tmp_path, "a")
        rb = _sweep(b, data_b, tmp_path, "b")
        for kind in ("knoise", "lowpass"):
            for f in ("qc.json", "qc_montage.pgm", "qc_error_bars.csv"):
                if _digest(ra[kind + "_dir"] / f) != _digest(rb[kind + "_dir"] / f):
                    diffs.append(f"report_{kind}/{f}")
        ok = same_ck and not diffs
        n = sum(len(os.listdir(a / s)) for s in STAGES)
        return ok, (f"{n} checkpoint files and 6 report files compared, "
                    f"model checksums equal={same_ck}, differing: {diffs or 'none'}")

    _run(acceptance_line, 7, "determinism", check)


# --- 8: NIfTI -----------------------------------------------------------------------------

def test_criterion_8_nifti(acceptance_line, tmp_path):
    def check():
        golden = np.array([0, 0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 1.0]).reshape((2, 2, 2), order="F")
        nf.write_nifti(Volume(golden, (1.0, 2.0, 3.0)), tmp_path / "g.nii")
        le_bytes = (FIXTURES / "golden_2x2x2_le.nii").read_bytes()
        byte_eq = (tmp_path / "g.nii").read_bytes() == le_bytes
        le = nf.read_nifti(FIXTURES / "golden_2x2x2_le.nii")
        be = nf.read_nifti(FIXTURES / "golden_2x2x2_be.nii")
        swap_ok = np.array_equal(le.data, be.data) and le.spacing == be.spacing
        rng = np.random.default_rng(0)
        crashes = 0
        cases = [le_bytes[:n] for n in range(len(le_bytes))]
        for _ in range(500):
            raw = bytearray(le_bytes[:rng.integers(0, len(le_bytes))])
            if raw:
                raw[rng.integers(len(raw))] = rng.integers(256)
            cases.append(bytes(raw))
        for raw in cases:
            try:
                nf.decode(raw)
                crashes += 1  # every case here is truncated, so success is a failure too
            except nf.NiftiError:
                pass
            except Exception:
                crashes += 1
        ok = byte_eq and swap_ok and crashes == 0
        return ok, (f"golden bytes equal={byte_eq}, byte-swapped read identical={swap_ok}, "
                    f"{len(cases)} truncated/fuzzed inputs -> {crashes} non-NIfTI failures")

    _run(acceptance_line, 8, "NIfTI-1 conformance", check)
