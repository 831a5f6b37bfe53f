import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.ndimage import binary_dilation

from kspaceqc.phantom import (BACKGROUND, CORE, SHELL, PhantomError, PhantomSpec, dataset, generate,
                              load_manifest, save_manifest, spec_from_manifest, split_indices, split_sizes)


def test_generate_is_pure():
    spec = PhantomSpec(seed=4)
    a, la = generate(spec, 17)
    b, lb = generate(spec, 17)
    assert np.array_equal(a.data, b.data) and np.array_equal(la.data, lb.data)
    c, _ = generate(spec, 18)
    assert not np.array_equal(a.data, c.data)


def test_ranges_and_shell_fraction():
    spec = PhantomSpec()
    fracs = []
    for i in range(100):
        v, lab = generate(spec, i)
        assert v.data.min() >= 0 and v.data.max() <= 1
        assert set(np.unique(lab.data)) <= {0, 1, 2}
        fracs.append((lab.data == SHELL).mean())
    assert 0.02 <= min(fracs) and max(fracs) <= 0.25


def test_core_never_touches_background():
    spec = PhantomSpec(seed=1)
    cube = np.ones((3, 3, 3), dtype=bool)  # 26-neighbourhood
    for i in range(30):
        lab = generate(spec, i)[1].data
        grown = binary_dilation(lab == CORE, structure=cube)
        assert not (grown & (lab == BACKGROUND)).any()


def test_intensity_separation():
    spec = PhantomSpec(seed=2)
    for i in range(30):
        v, lab = generate(spec, i)
        d = v.data[lab.data == SHELL].mean() - v.data[lab.data == BACKGROUND].mean()
        assert d >= 0.3


@pytest.mark.parametrize("bad", [
    dict(radius_range=(0.3, 0.2)),
    dict(radius_range=(0.1, 0.5)),
    dict(shell_thickness_range=(0.5, 2.0)),
    dict(size=(8, 8, 8)),
    dict(num_classes=2),
])
def test_spec_rejections(bad):
    with pytest.raises(PhantomError):
        PhantomSpec(**bad)


def test_split_sizes_examples():
    assert split_sizes(100, (0.8, 0.1, 0.1)) == [80, 10, 10]
    assert split_sizes(10, (0.8, 0.1, 0.1)) == [8, 1, 1]
    assert split_sizes(7, (0.5, 0.25, 0.25)) == [3, 2, 2]  # 3.5/1.75/1.75: largest remainders win
    with pytest.raises(PhantomError):
        split_sizes(10, (0.5, 0.2, 0.2))


@given(st.integers(3, 400), st.integers(0, 100))
def test_dataset_partition(n, seed):
    spec = PhantomSpec(seed=seed)
    try:
        m = dataset(spec, n)
    except PhantomError:
        assert 0 in split_sizes(n, (0.8, 0.1, 0.1))
        return
    parts = [set(split_indices(m, s)) for s in ("train", "valid", "test")]
    assert [len(p) for p in parts] == split_sizes(n, (0.8, 0.1, 0.1))
    assert set().union(*parts) == set(range(n))
    assert sum(len(p) for p in parts) == n
    assert dataset(spec, n) == m


def test_dataset_too_small():
    with pytest.raises(PhantomError):
        dataset(PhantomSpec(), 5)
    with pytest.raises(PhantomError):
        dataset(PhantomSpec(), 0)


def test_manifest_roundtrip(tmp_path):
    spec = PhantomSpec(size=(24, 24, 24), seed=9)
    m = dataset(spec, 20)
    save_manifest(m, tmp_path / "m.json")
    back = load_manifest(tmp_path / "m.json")
    assert back == m and spec_from_manifest(back) == spec


def test_throughput():
    spec = PhantomSpec()
    t0 = time.perf_counter()
    for i in range(50):
        generate(spec, i)
    assert time.perf_counter() - t0 <= 1.0
