import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hoidesk.errors import DetachedTensor, FormatError, NotScalar, ShapeMismatch, ZeroNorm
from hoidesk.tensor import (
    ComputationTape,
    Tensor,
    abs_,
    backward,
    bce_with_logits,
    binary_cross_entropy,
    concat,
    cross_entropy,
    expand_leading,
    finite_diff_check,
    hctf,
    l2_normalize,
    layer_norm,
    linear,
    log_softmax,
    matmul,
    maximum,
    mean,
    minimum,
    no_grad,
    relu,
    sigmoid,
    sigmoid_focal_loss,
    softmax,
    sum_,
    topk_select,
    transpose,
)


def naive_matmul(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


class TestL2Normalize:
    def test_unit_passthrough(self):
        np.testing.assert_allclose(l2_normalize(Tensor([1.0, 0, 0, 0])).data, [1, 0, 0, 0])

    def test_three_four_five(self):
        np.testing.assert_allclose(l2_normalize(Tensor([3.0, 4.0])).data, [0.6, 0.8], atol=1e-15)

    def test_zero_raises(self):
        with pytest.raises(ZeroNorm):
            l2_normalize(Tensor([0.0, 0.0]))

    @given(arrays(np.float64, (3, 5), elements=st.floats(-10, 10)))
    def test_idempotent_and_unit(self, x):
        if np.any(np.linalg.norm(x, axis=1) < 1e-3):
            return
        once = l2_normalize(Tensor(x), axis=1).data
        np.testing.assert_allclose(np.linalg.norm(once, axis=1), 1.0, atol=1e-6)
        np.testing.assert_allclose(l2_normalize(Tensor(once), axis=1).data, once, atol=1e-6)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)

    def test_against_mpmath(self):
        mpmath.mp.dps = 50
        es = [mpmath.exp(v) for v in (1, 2, 3)]
        tot = sum(es)
        ref = np.array([float(e / tot) for e in es])
        np.testing.assert_allclose(softmax(Tensor([1.0, 2.0, 3.0])).data, ref, rtol=0, atol=1e-9)

    @given(arrays(np.float64, (4, 6), elements=st.floats(-50, 50)), st.floats(-100, 100))
    def test_sum_and_shift(self, x, c):
        y = softmax(Tensor(x), axis=-1).data
        assert np.all(y >= 0)
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)
        np.testing.assert_allclose(softmax(Tensor(x + c), axis=-1).data, y, atol=1e-9)


class TestMatmul:
    def test_identity(self, rng):
        x = rng.standard_normal((3, 4))
        out = linear(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, x)

    def test_small_arithmetic(self):
        out = linear(Tensor([[1.0, 2.0]]), Tensor([[1.0], [1.0]]), Tensor([1.0]))
        np.testing.assert_array_equal(out.data, [[4.0]])

    def test_naive_oracle(self, rng):
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
        np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b), rtol=0, atol=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_no_implicit_rank_expansion(self):
        with pytest.raises(ShapeMismatch):
            Tensor(np.ones((2, 3))) + Tensor(np.ones((2, 1)))


class TestBackward:
    def test_sum_grad_ones(self, rng):
        x = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
        backward(sum_(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_square(self, rng):
        xv = rng.standard_normal(5)
        x = Tensor(xv, requires_grad=True)
        backward(sum_(x * x))
        np.testing.assert_allclose(x.grad, 2 * xv)

    def test_not_scalar(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(NotScalar):
            backward(x * 2.0)

    def test_detached(self):
        x = Tensor([1.0, 2.0])
        with pytest.raises(DetachedTensor):
            backward(sum_(x))
        y = Tensor([1.0], requires_grad=True)
        with no_grad():
            z = sum_(y * 3.0)
        with pytest.raises(DetachedTensor):
            backward(z)

    def test_loss_self_grad_is_one(self, rng):
        x = Tensor(rng.standard_normal(3), requires_grad=True)
        loss = sum_(x)
        backward(loss)
        assert loss.grad == 1.0

    def test_tape_reverse_order(self, rng):
        x = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
        loss = sum_(relu(x @ x) + x)
        tape = ComputationTape.from_output(loss)
        seqs = [r.output for r in tape.records]
        assert seqs == sorted(seqs)
        assert [r.op for r in tape.records] == ["matmul", "relu", "add", "sum"]

    def test_composite_graph_fd(self, rng):
        x = Tensor(rng.standard_normal((3, 4)))
        w = Tensor(rng.standard_normal((4, 5)))
        b = Tensor(rng.standard_normal(5))
        u = Tensor(rng.standard_normal((3, 5)))

        def f(x, w, b):
            return sum_(softmax(relu(linear(x, w, b)), axis=-1) * u)

        assert finite_diff_check(f, [x, w, b]) <= 1e-4


class TestFiniteDiffCheck:
    def test_identity(self, rng):
        assert finite_diff_check(lambda x: x, Tensor(rng.standard_normal(4))) < 1e-9

    def test_sum_of_squares(self):
        x = Tensor([1.0, 2.0, 3.0])
        assert finite_diff_check(lambda x: sum_(x * x), x) < 1e-6
        np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])


def _shift_away_from_kinks(x, margin=1e-3):
    x = x.copy()
    x[np.abs(x) < margin] += 2 * margin
    return x


DIFFERENTIABLE = {
    "add_bias": (lambda a, b: a + b[0], [(3, 4), (1, 4)]),
    "sub": (lambda a, b: a - b, [(3, 4), (3, 4)]),
    "mul": (lambda a, b: a * b, [(3, 4), (3, 4)]),
    "div": (lambda a, b: a / (b * b + 1.0), [(3, 4), (3, 4)]),
    "matmul": (lambda a, b: a @ b, [(3, 4), (4, 2)]),
    "bmm": (lambda a, b: matmul(a, b), [(2, 3, 4), (2, 4, 5)]),
    "relu": (lambda a: relu(a), [(3, 4)]),
    "sigmoid": (lambda a: sigmoid(a), [(3, 4)]),
    "softmax": (lambda a: softmax(a, axis=0), [(3, 4)]),
    "log_softmax": (lambda a: log_softmax(a, axis=-1), [(3, 4)]),
    "l2norm": (lambda a: l2_normalize(a, axis=-1), [(3, 4)]),
    "layer_norm": (lambda a, g, b: layer_norm(a, g[0], b[0]), [(3, 4), (1, 4), (1, 4)]),
    "mean": (lambda a: mean(a, axis=1), [(3, 4)]),
    "concat": (lambda a, b: concat([a, b], axis=1), [(3, 4), (3, 2)]),
    "slice": (lambda a: a[1:, ::2], [(3, 4)]),
    "transpose": (lambda a: transpose(a, (1, 0)), [(3, 4)]),
    "expand": (lambda a: expand_leading(a, (2,)), [(3, 4)]),
    "abs": (lambda a: abs_(a), [(3, 4)]),
    "maximum": (lambda a, b: maximum(a, b), [(3, 4), (3, 4)]),
    "minimum": (lambda a, b: minimum(a, b), [(3, 4), (3, 4)]),
    "bce_logits": (lambda a: bce_with_logits(a, (np.arange(12).reshape(3, 4) % 2).astype(float)), [(3, 4)]),
    "bce": (lambda a: binary_cross_entropy(sigmoid(a), (np.arange(12).reshape(3, 4) % 3 == 0).astype(float)), [(3, 4)]),
    "cross_entropy": (lambda a: cross_entropy(a, np.array([0, 3, 1]), np.array([1.0, 0.5, 2.0, 0.1])), [(3, 4)]),
    "focal": (lambda a: sigmoid_focal_loss(a, (np.arange(12).reshape(3, 4) % 2).astype(float)), [(3, 4)]),
    "topk": (lambda a: topk_select(a, 2), [(3, 4)]),
}


@pytest.mark.parametrize("name", sorted(DIFFERENTIABLE))
def test_every_op_passes_gradcheck_over_seeds(name):
    fn, shapes = DIFFERENTIABLE[name]
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        xs = [Tensor(_shift_away_from_kinks(rng.standard_normal(s))) for s in shapes]
        if name in ("maximum", "minimum"):
            xs[1] = Tensor(xs[0].data + _shift_away_from_kinks(rng.standard_normal(shapes[1])))
        worst = max(worst, finite_diff_check(fn, xs, seed=seed))
    assert worst <= 1e-4, f"{name}: {worst}"


def test_forward_determinism(rng):
    x = rng.standard_normal((4, 6))
    w = rng.standard_normal((6, 3))
    a = softmax(linear(Tensor(x), Tensor(w)), axis=-1).data
    b = softmax(linear(Tensor(x), Tensor(w)), axis=-1).data
    assert a.tobytes() == b.tobytes()


def test_float32_compute():
    from hoidesk.tensor import set_default_dtype

    set_default_dtype(np.float32)
    x = Tensor([[1.0, 2.0]])
    assert x.dtype == np.float32
    assert softmax(x).dtype == np.float32


class TestHctf:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    @pytest.mark.parametrize("shape", [(), (3,), (2, 3, 4), (0, 5)])
    def test_roundtrip(self, tmp_path, rng, dtype, shape):
        arr = rng.standard_normal(shape).astype(dtype)
        p = tmp_path / "x.hctf"
        hctf.save(p, arr)
        back = hctf.load(p)
        assert back.dtype == dtype and back.shape == arr.shape
        assert back.tobytes() == arr.tobytes()
        hctf.save(tmp_path / "y.hctf", back)
        assert (tmp_path / "y.hctf").read_bytes() == p.read_bytes()

    def test_header_layout(self):
        buf = hctf.encode(np.arange(6, dtype=np.float64).reshape(2, 3))
        assert buf[:4] == b"HCTF" and buf[4] == 1 and buf[5] == 1
        assert int.from_bytes(buf[6:10], "little") == 2
        assert int.from_bytes(buf[10:18], "little") == 2
        assert int.from_bytes(buf[18:26], "little") == 3
        assert len(buf) == 26 + 48

    def test_bad_magic_and_truncation(self, tmp_path):
        buf = hctf.encode(np.ones(3))
        with pytest.raises(FormatError, match="magic"):
            hctf.decode(b"XXXX" + buf[4:])
        with pytest.raises(FormatError, match="version"):
            hctf.decode(buf[:4] + b"\x02" + buf[5:])
        with pytest.raises(FormatError):
            hctf.decode(buf[:-1])
