import numpy as np
import pytest

from hoidesk import kernels
from hoidesk._accel import NUMBA_INSTALLED


def _boxes(rng, n):
    xy = rng.uniform(0, 10, (n, 2))
    wh = rng.uniform(0.5, 5, (n, 2))
    return np.concatenate([xy, xy + wh], axis=1)


@pytest.mark.parametrize("seed", range(20))
def test_hungarian_paths_agree(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 6))
    m = int(rng.integers(n, 9))
    c = rng.standard_normal((n, m))
    a, ua, va = kernels.hungarian_numpy(c)
    b, ub, vb = kernels.hungarian_jit(c)
    assert c[np.arange(n), a].sum() == pytest.approx(c[np.arange(n), b].sum(), abs=1e-12)
    for assign, u, v in ((a, ua, va), (b, ub, vb)):
        reduced = c - u[:, None] - v[None, :]
        assert reduced.min() >= -1e-12
        np.testing.assert_allclose(reduced[np.arange(n), assign], 0, atol=1e-12)
        # unassigned columns carry zero potential (complementary slackness)
        free = np.setdiff1d(np.arange(m), assign)
        np.testing.assert_array_equal(v[free], 0)


def test_hungarian_rejects_tall_cost():
    with pytest.raises(ValueError):
        kernels.hungarian(np.zeros((3, 2)))
    assert list(kernels.hungarian(np.zeros((0, 2)))) == []


@pytest.mark.parametrize("seed", range(10))
def test_iou_paths_bit_identical(seed):
    rng = np.random.default_rng(seed)
    a, b = _boxes(rng, 7), _boxes(rng, 5)
    assert kernels.iou_matrix_numpy(a, b).tobytes() == kernels.iou_matrix_jit(a, b).tobytes()


@pytest.mark.parametrize("seed", range(10))
def test_nms_paths_agree(seed):
    rng = np.random.default_rng(seed)
    n = 30
    h, o = _boxes(rng, n), _boxes(rng, n)
    h[10:20] = h[0] + rng.uniform(-0.3, 0.3, (10, 4))
    o[10:20] = o[0] + rng.uniform(-0.3, 0.3, (10, 4))
    cats = rng.integers(0, 3, n)
    order = np.argsort(-rng.random(n), kind="stable")
    a = kernels.triplet_nms_numpy(h, o, cats, order, 0.5)
    b = kernels.triplet_nms_jit(h, o, cats, order, 0.5)
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("seed", range(10))
def test_match_paths_agree(seed):
    rng = np.random.default_rng(seed)
    gh, go = _boxes(rng, 4), _boxes(rng, 4)
    ph = np.concatenate([gh + rng.uniform(-0.4, 0.4, gh.shape), _boxes(rng, 3)])
    po = np.concatenate([go + rng.uniform(-0.4, 0.4, go.shape), _boxes(rng, 3)])
    perm = rng.permutation(len(ph))
    a = kernels.match_image_numpy(ph[perm], po[perm], gh, go, 0.5)
    b = kernels.match_image_jit(ph[perm], po[perm], gh, go, 0.5)
    np.testing.assert_array_equal(a, b)


def test_numba_is_available():
    assert NUMBA_INSTALLED


def test_disable_flag_selects_numpy(monkeypatch):
    import importlib

    import hoidesk._accel as accel

    monkeypatch.setenv("HOIDESK_DISABLE_NUMBA", "1")
    try:
        importlib.reload(accel)
        assert accel.USE_NUMBA is False and accel.backend_name() == "numpy"
    finally:
        monkeypatch.delenv("HOIDESK_DISABLE_NUMBA")
        importlib.reload(accel)
    assert accel.USE_NUMBA is NUMBA_INSTALLED
