"""``kspaceqc`` command line: phantom, corrupt, train, infer, report.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
The resolved configuration (defaults, then the YAML file, then ``--set``
overrides and dedicated flags) is written to ``<out>/run_config.yaml``
before any work starts.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import shutil
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import yaml

from . import cascade as cz
from . import nifti, qc
from .kspace_aug import (AugmentationError, AugmentationKind, AugmentationRecord, AugmentationStep, KNoiseParams,
                         LowPassParams, apply_record, corrupt_pair, PipelineConfig, volume_rng)
from .phantom import PhantomError, PhantomSpec, dataset, generate, save_manifest, split_indices
from .toynet import CheckpointError, freeze, load_checkpoint
from .volume import LabelVolume, UncertaintyMap, Volume

log = logging.getLogger("kspaceqc")

ENV_PREFIX = "KSPACEQC_"
CONFIG_ECHO = "run_config.yaml"
SECTIONS = ("phantom", "pipeline", "train", "report")


class UsageError(Exception):
    """Bad flags or config; exit code 2."""


# --- configuration -------------------------------------------------------------

def default_config():
    return {
        "phantom": PhantomSpec().to_dict() | {"count": 100, "split": [0.8, 0.1, 0.1]},
        "pipeline": PipelineConfig().to_dict(),
        "train": {k: v for k, v in cz.TrainConfig().to_dict().items() if k != "pipeline"},
        "report": {"thresholds": {}, "levels": [30.0, 10.0, 0.0, -10.0], "level_kind": "knoise",
                   "blur_axis": 0, "error_bar_class": 1, "level_seed": 0},
    }


def _merge(base, over, where="config"):
    for key, val in (over or {}).items():
        if key not in base:
            raise UsageError(f"unknown key {where}.{key}")
        if isinstance(base[key], dict) and isinstance(val, dict) and key != "thresholds" and key != "weights":
            _merge(base[key], val, f"{where}.{key}")
        else:
            base[key] = val
    return base


def resolve_config(path=None, overrides=()):
    cfg = default_config()
    if path:
        try:
            with open(path) as fh:
                loaded = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise UsageError(f"config {path} is not valid YAML: {exc}") from exc
        if not isinstance(loaded, dict):
            raise UsageError(f"config {path} must be a mapping of sections")
        _merge(cfg, loaded)
    for item in overrides:
        key, sep, raw = item.partition("=")
        parts = key.strip().split(".")
        if not sep or len(parts) != 2 or parts[0] not in SECTIONS:
            raise UsageError(f"--set expects section.field=value, got {item!r}")
        if parts[1] not in cfg[parts[0]]:
            raise UsageError(f"unknown key {key}")
        cfg[parts[0]][parts[1]] = yaml.safe_load(raw)
    return cfg


def echo_config(cfg, out):
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, CONFIG_ECHO), "w") as fh:
        yaml.safe_dump(cfg, fh, sort_keys=True, default_flow_style=None)


def phantom_spec(cfg):
    d = {k: v for k, v in cfg["phantom"].items() if k not in ("count", "split")}
    return PhantomSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def pipeline_config(cfg):
    return PipelineConfig.from_dict(cfg["pipeline"])


def train_config(cfg):
    d = dict(cfg["train"])
    pipe = {k: v for k, v in cfg["pipeline"].items() if k not in ("enabled", "rate", "multiple")}
    return cz.TrainConfig.from_dict(d | {"pipeline": pipe})


def validate_config(cfg):
    """Build every section once so config errors surface as usage errors (exit 2)."""
    try:
        phantom_spec(cfg), pipeline_config(cfg), train_config(cfg)
    except (cz.CascadeError, ValueError, TypeError) as exc:
        raise UsageError(f"invalid config: {exc}") from None
    rep = cfg["report"]
    if not isinstance(rep["thresholds"], dict) or not isinstance(rep["levels"], list):
        raise UsageError("report.thresholds must be a mapping and report.levels a list")
    if rep["level_kind"] not in LEVEL_KINDS:
        raise UsageError(f"report.level_kind must be one of {', '.join(LEVEL_KINDS)}, got {rep['level_kind']!r}")


def _parse_kinds(text):
    names = [s.strip() for s in text.split(",") if s.strip()]
    if not names:
        raise UsageError("--kinds is empty")
    try:
        return [AugmentationKind.parse(n).value for n in names]
    except (AugmentationError, ValueError):
        valid = ", ".join(k.value for k in AugmentationKind)
        raise UsageError(f"unknown kind in {text!r}; valid kinds: {valid}") from None


# --- datasets on disk ----------------------------------------------------------

MANIFEST = "manifest.json"


def _write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_manifest(directory):
    path = os.path.join(directory, MANIFEST)
    if not os.path.exists(path):
        raise UsageError(f"no dataset manifest at {path}")
    with open(path) as fh:
        return json.load(fh)


def load_dataset(directory) -> cz.PhantomData:
    manifest = _read_manifest(directory)
    images, labels = {}, {}
    for e in manifest["entries"]:
        idx = e["index"]
        images[idx] = np.ascontiguousarray(nifti.read_nifti(os.path.join(directory, e["image"])).data)
        lab = nifti.read_nifti(os.path.join(directory, e["label"])).data
        labels[idx] = np.ascontiguousarray(np.rint(lab).astype(np.int64))
    splits = {s: split_indices(manifest, s) for s in ("train", "valid", "test")}
    return cz.PhantomData(images, labels, splits, manifest["spec"]["num_classes"])


def _map(fn, items, threads):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# --- subcommands ---------------------------------------------------------------

def cmd_phantom(args, cfg):
    n = int(cfg["phantom"]["count"])
    if n < 1:
        raise UsageError(f"--count must be >= 1, got {n}")
    spec = phantom_spec(cfg)
    manifest = dataset(spec, n, cfg["phantom"]["split"])
    for sub in ("images", "labels"):
        os.makedirs(os.path.join(args.out, sub), exist_ok=True)

    def one(entry):
        i = entry["index"]
        v, lab = generate(spec, i)
        entry["image"] = f"images/phantom_{i:04d}.nii"
        entry["label"] = f"labels/phantom_{i:04d}_label.nii"
        nifti.write_nifti(v, os.path.join(args.out, entry["image"]))
        nifti.write_nifti(Volume(lab.data.astype(np.float64)), os.path.join(args.out, entry["label"]))

    _map(one, manifest["entries"], args.threads)
    _write_json(manifest, os.path.join(args.out, MANIFEST))
    print(f"wrote {n} phantoms to {args.out}")


def cmd_corrupt(args, cfg):
    manifest = _read_manifest(args.input)
    pipe = pipeline_config(cfg)
    seed = int(cfg["pipeline"]["seed"])
    for sub in ("images", "labels"):
        os.makedirs(os.path.join(args.out, sub), exist_ok=True)
    out_manifest = copy.deepcopy(manifest)

    def one(entry):
        i = entry["index"]
        src_img = os.path.join(args.input, entry["image"])
        src_lab = os.path.join(args.input, entry["label"])
        v = nifti.read_nifti(src_img)
        lab = nifti.read_nifti(src_lab)
        labels = LabelVolume(np.rint(lab.data).astype(np.int64), manifest["spec"]["num_classes"])
        out, out_lab, rec = corrupt_pair(v, labels, pipe, volume_rng(seed, i))
        dst_img = os.path.join(args.out, entry["image"])
        dst_lab = os.path.join(args.out, entry["label"])
        if rec.clean:
            shutil.copyfile(src_img, dst_img)
            shutil.copyfile(src_lab, dst_lab)
        else:
            nifti.write_nifti(out, dst_img)
            nifti.write_nifti(Volume(out_lab.data.astype(np.float64), v.spacing), dst_lab)
        return rec.to_dict()

    records = _map(one, out_manifest["entries"], args.threads)
    for e, r in zip(out_manifest["entries"], records):
        e["record"] = r
    out_manifest["corruption"] = {"pipeline": pipe.to_dict(), "source": os.path.abspath(args.input)}
    _write_json(out_manifest, os.path.join(args.out, MANIFEST))
    _write_json({"records": records}, os.path.join(args.out, "records.json"))
    print(f"corrupted {sum(bool(r['steps']) for r in records)} of {len(records)} volumes into {args.out}")


def _require(state, stage, kinds=()):
    if state.task is None:
        raise cz.CascadeError(f"stage {stage!r} needs the task stage; run `train --stage task` first")
    missing = [k.value for k in kinds if k not in state.teachers]
    if missing:
        need = ", ".join(f"teacher:{m}" for m in missing)
        raise cz.CascadeError(f"stage {stage!r} needs {need}; train those stages first")


def cmd_train(args, cfg):
    data = load_dataset(args.data)
    tcfg = train_config(cfg)
    state = cz.load_cascade(args.out)
    stage = args.stage
    if stage == "task":
        model = cz.train_task(data, tcfg, args.out)
    elif stage.startswith("teacher:"):
        kind = stage.split(":", 1)[1]
        try:
            kind = AugmentationKind.parse(kind)
        except (AugmentationError, ValueError):
            raise UsageError(f"unknown kind {kind!r}; valid kinds: "
                             + ", ".join(k.value for k in AugmentationKind)) from None
        _require(state, stage)
        model = cz.train_teacher(state.task, kind, data, tcfg, args.out)
    elif stage == "student":
        _require(state, stage, tcfg.kinds)
        model = cz.train_student(state.task, state.teachers, data, tcfg, args.out)
    elif stage == "all":
        state = cz.run_cascade(data, tcfg, args.out)
        model = state.student
    else:
        raise UsageError(f"--stage must be task, teacher:<kind>, student or all; got {stage!r}")
    model = freeze(model)
    scores, variances = [], {n: [] for n in model.channel_names}
    for idx in data.split("valid"):
        res = cz.infer(model, data.images[idx], tcfg.patch_size)
        scores.append(cz.dice(res.labels, data.labels[idx], 1))
        for n in model.channel_names:
            variances[n].append(float(res.uncertainty.variance(n).mean()))
    print(f"stage {stage}: validation shell Dice {np.mean(scores):.4f}")
    for n, v in variances.items():
        print(f"  mean sigma^2[{n}] = {np.mean(v):.6g}")


def _infer_inputs(path):
    if os.path.isdir(path):
        manifest = _read_manifest(path)
        return [(os.path.splitext(os.path.basename(e["image"]))[0], os.path.join(path, e["image"]))
                for e in manifest["entries"]]
    return [(os.path.basename(path).split(".nii")[0], path)]


def write_inference(out, stem, res: cz.Inference, spacing=(1.0, 1.0, 1.0)):
    d = os.path.join(out, stem)
    os.makedirs(d, exist_ok=True)
    for c in range(res.probabilities.shape[0]):
        nifti.write_nifti(Volume(res.probabilities[c], spacing), os.path.join(d, f"prob_{c}.nii"), 64)
    nifti.write_nifti(Volume(res.labels.astype(np.float64), spacing), os.path.join(d, "labels.nii"))
    for n in res.uncertainty.channels:
        nifti.write_nifti(Volume(res.uncertainty.variance(n), spacing), os.path.join(d, f"var_{n}.nii"), 64)
    return d


def read_inference(d):
    meta_path = os.path.join(d, "inference.json")
    if not os.path.exists(meta_path):
        raise UsageError(f"{d} is not an inference output directory (no inference.json)")
    with open(meta_path) as fh:
        meta = json.load(fh)
    probs = np.stack([nifti.read_nifti(os.path.join(d, f"prob_{c}.nii")).data
                      for c in range(meta["num_classes"])])
    labels = np.rint(nifti.read_nifti(os.path.join(d, "labels.nii")).data).astype(np.int64)
    s = np.stack([np.log(nifti.read_nifti(os.path.join(d, f"var_{n}.nii")).data) for n in meta["channels"]])
    return meta, probs, labels, UncertaintyMap(s, tuple(meta["channels"]))


def cmd_infer(args, cfg):
    model = freeze(load_checkpoint(args.model))
    patch = int(cfg["train"]["patch_size"])
    inputs = _infer_inputs(args.input)

    def one(item):
        stem, path = item
        v = nifti.read_nifti(path)
        res = cz.infer(model, v, patch)
        d = write_inference(args.out, stem, res, v.spacing)
        _write_json({"model": os.path.abspath(args.model), "model_checksum": model.checksum(),
                     "input": os.path.abspath(path), "input_checksum": qc.input_checksum(v),
                     "num_classes": model.config.num_classes, "channels": list(model.channel_names),
                     "patch_size": patch, "mean_entropy": float(qc.entropy_array(res.probabilities).mean())},
                    os.path.join(d, "inference.json"))
        return d

    dirs = _map(one, inputs, args.threads)
    print(f"wrote {len(dirs)} inference result(s) to {args.out}")


def _baseline_entropy(text):
    if text is None:
        raise UsageError("--baseline is required (a number or an inference output directory)")
    try:
        return float(text)
    except ValueError:
        pass
    return float(read_inference(text)[0]["mean_entropy"])


LEVEL_KINDS = ("knoise", "lowpass")


def level_record(kind, level, seed, axis=0):
    """One-step record: KNoise at ``level`` dB SNR, or LowPass with ratio ``level``.

    Every KNoise level reuses ``seed`` so the levels differ only in noise scale.
    """
    if kind == "knoise":
        step = AugmentationStep(AugmentationKind.K_NOISE, KNoiseParams(float(level)), seed)
    else:
        step = AugmentationStep(AugmentationKind.LOW_PASS, LowPassParams(int(axis), float(level)), seed)
    return AugmentationRecord((step,))


def cmd_report(args, cfg):
    meta, probs, labels, u = read_inference(args.infer_out)
    h0 = _baseline_entropy(args.baseline)
    rcfg = cfg["report"]
    report = qc.build_report(probs, u, h0, rcfg["thresholds"],
                             {"model_checksum": meta["model_checksum"], "input_checksum": meta["input_checksum"]})
    image = nifti.read_nifti(meta["input"]).data
    rows = None
    levels = rcfg["levels"]
    if levels:
        model = freeze(load_checkpoint(meta["model"]))
        if model.checksum() != meta["model_checksum"]:
            raise CheckpointError(f"model at {meta['model']} changed since inference")
        cls = int(rcfg["error_bar_class"])
        rows = []
        for level in levels:
            rec = level_record(rcfg["level_kind"], level, int(rcfg["level_seed"]), rcfg["blur_axis"])
            noisy, _ = apply_record(image, rec)
            res = cz.infer(model, noisy, int(meta["patch_size"]))
            bars, _ = qc.volume_error_bars(res.probabilities, h0)
            rows.append((level,) + bars[cls])
    paths = qc.emit_report(args.out, report, image, labels, u, rows)
    flagged = [k for k, v in report.flags.items() if v]
    print(f"mean entropy {report.mean_entropy:.6g} (baseline {h0:.6g}); "
          f"flags: {', '.join(flagged) if flagged else 'all clear'}")
    for k, p in sorted(paths.items()):
        print(f"  {k}: {p}")


# --- entry point ---------------------------------------------------------------

def build_parser():
    env_threads = os.environ.get(ENV_PREFIX + "THREADS")
    env_out = os.environ.get(ENV_PREFIX + "OUT")
    p = argparse.ArgumentParser(prog="kspaceqc", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="YAML run config")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.FIELD=VALUE",
                        help="override any config field (repeatable)")
        sp.add_argument("--out", default=env_out, required=out_required and env_out is None,
                        help="output directory (env KSPACEQC_OUT)")
        sp.add_argument("--threads", type=int, default=int(env_threads) if env_threads else 1,
                        help="worker threads across volumes (env KSPACEQC_THREADS)")

    sp = sub.add_parser("phantom", help="generate a phantom dataset")
    common(sp)
    sp.add_argument("--count", type=int)
    sp.add_argument("--size", type=int)
    sp.add_argument("--seed", type=int)

    sp = sub.add_parser("corrupt", help="apply the k-space augmentation pipeline to a dataset")
    common(sp)
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--kinds")
    sp.add_argument("--rate", type=float)
    sp.add_argument("--seed", type=int)

    sp = sub.add_parser("train", help="train one cascade stage")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--stage", required=True, help="task | teacher:<kind> | student | all")

    sp = sub.add_parser("infer", help="sliding-window inference with a checkpoint")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--in", dest="input", required=True)

    sp = sub.add_parser("report", help="QC report, montage and error bars for one inference")
    common(sp)
    sp.add_argument("--infer-out", required=True)
    sp.add_argument("--baseline", help="clean mean entropy, or a clean inference output directory")
    sp.add_argument("--levels", help="comma-separated corruption levels (SNR in dB, or low-pass ratios)")
    sp.add_argument("--level-kind", choices=LEVEL_KINDS, help="corruption swept by --levels (default knoise)")
    return p


def _apply_flags(args, cfg):
    if args.command == "phantom":
        for flag in ("count", "seed"):
            if getattr(args, flag) is not None:
                cfg["phantom"][flag] = getattr(args, flag)
        if args.size is not None:
            cfg["phantom"]["size"] = [args.size] * 3
    elif args.command == "corrupt":
        if args.kinds is not None:
            cfg["pipeline"]["enabled"] = _parse_kinds(args.kinds)
        if args.rate is not None:
            cfg["pipeline"]["rate"] = args.rate
        if args.seed is not None:
            cfg["pipeline"]["seed"] = args.seed
    elif args.command == "report" and args.level_kind is not None:
        cfg["report"]["level_kind"] = args.level_kind
    if args.command == "report" and args.levels is not None:
        try:
            cfg["report"]["levels"] = [float(x) for x in args.levels.split(",") if x.strip()]
        except ValueError:
            raise UsageError(f"--levels must be comma-separated numbers, got {args.levels!r}") from None
    return cfg


COMMANDS = {"phantom": cmd_phantom, "corrupt": cmd_corrupt, "train": cmd_train,
            "infer": cmd_infer, "report": cmd_report}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 1:
            raise UsageError(f"--threads must be >= 1, got {args.threads}")
        cfg = _apply_flags(args, resolve_config(args.config, args.set))
        validate_config(cfg)
        echo_config(cfg, args.out)
        COMMANDS[args.command](args, cfg)
    except (UsageError, PhantomError, AugmentationError, TypeError) as exc:
        print(f"kspaceqc: error: {exc}", file=sys.stderr)
        return 2
    except cz.CascadeError as exc:
        print(f"kspaceqc: error: {exc}", file=sys.stderr)
        return 1
    except (CheckpointError, nifti.NiftiError, qc.QcError, OSError, ValueError) as exc:
        print(f"kspaceqc: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
