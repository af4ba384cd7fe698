import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as nps

from ascnet.autodiff import Graph, Tensor, backward, detach
from ascnet.errors import DegenerateFeatureError, LabelError, ShapeError
from ascnet.gradcheck import check_gradients, rel_error
from ascnet.model import standardized_kernel


def t64(rng, *shape, scale=1.0):
    return Tensor(rng.normal(size=shape) * scale, requires_grad=True, dtype=np.float64)


def projected(op, out_shape, rng):
    """Scalar loss sum(op(g) * R) for a fixed random R, so every output entry matters."""
    R = rng.normal(size=out_shape)

    def build(g):
        y = op(g)
        return g.sum(g.mul(y, Tensor(R, dtype=np.float64)))
    return build


def away_from_zero(rng, *shape):
    v = rng.normal(size=shape)
    return Tensor(np.where(np.abs(v) < 0.1, 0.1 * np.sign(v) + v, v), requires_grad=True, dtype=np.float64)


# (name, builder(rng) -> (op, out_shape, tensors))
def _cases():
    def binary(kind):
        def make(rng):
            a, b = t64(rng, 3, 4), t64(rng, 3, 4)
            return (lambda g: getattr(g, kind)(a, b)), (3, 4), {"a": a, "b": b}
        return make

    def scale(rng):
        a = t64(rng, 5)
        return (lambda g: g.scale(a, -1.7)), (5,), {"a": a}

    def relu(rng):
        a = away_from_zero(rng, 4, 6)
        return (lambda g: g.relu(a)), (4, 6), {"a": a}

    def reduce_sum(rng):
        a = t64(rng, 2, 3, 4)
        return (lambda g: g.scale(g.sum(a), 1.0)), (), {"a": a}

    def reduce_mean(rng):
        a = t64(rng, 7, 2)
        return (lambda g: g.mean(a)), (), {"a": a}

    def reshape(rng):
        a = t64(rng, 2, 6)
        return (lambda g: g.reshape(a, (3, 4))), (3, 4), {"a": a}

    def rows(rng):
        a = t64(rng, 6, 3)
        return (lambda g: g.rows(a, 2, 5)), (3, 3), {"a": a}

    def matmul(rng):
        a, b = t64(rng, 3, 5), t64(rng, 5, 2)
        return (lambda g: g.matmul(a, b)), (3, 2), {"a": a, "b": b}

    def linear(rng):
        x, w, b = t64(rng, 4, 3), t64(rng, 3, 5), t64(rng, 5)
        return (lambda g: g.linear(x, w, b)), (4, 5), {"x": x, "w": w, "b": b}

    def conv(stride, shape=(2, 3, 5, 6, 7), kshape=(4, 3, 3, 2, 3)):
        def make(rng):
            x, k, b = t64(rng, *shape), t64(rng, *kshape, scale=0.5), t64(rng, kshape[0])
            out = Graph().conv3d(x, k, b, stride).shape
            return (lambda g: g.conv3d(x, k, b, stride)), out, {"x": x, "k": k, "b": b}
        return make

    def pool(rng):
        x = t64(rng, 2, 3, 2, 3, 4)
        return (lambda g: g.global_avg_pool(x)), (2, 3), {"x": x}

    def normalize(rng):
        v = t64(rng, 4, 6)
        return (lambda g: g.l2_normalize(v)), (4, 6), {"v": v}

    def standardize(rng):
        k = t64(rng, 3, 2, 2, 2, 3)
        return (lambda g: standardized_kernel(g, k)), k.shape, {"k": k}

    def xent(rng):
        z = t64(rng, 5, 4, scale=2.0)
        labels = rng.integers(0, 4, 5)
        return (lambda g: g.cross_entropy(z, labels)), (), {"z": z}

    return {
        "add": binary("add"), "sub": binary("sub"), "mul": binary("mul"), "scale": scale,
        "relu": relu, "sum": reduce_sum, "mean": reduce_mean, "reshape": reshape, "rows": rows,
        "matmul": matmul, "linear": linear,
        "conv3d_unit_stride": conv((1, 1, 1)), "conv3d_strided": conv((1, 2, 2)),
        "conv3d_all_strided": conv((2, 2, 3)),
        "global_avg_pool": pool, "l2_normalize": normalize, "cross_entropy": xent,
        "standardized_kernel": standardize,
    }


CASES = _cases()


@pytest.mark.parametrize("name", sorted(CASES))
@pytest.mark.parametrize("seed", range(3))
def test_op_gradient_matches_finite_differences(name, seed):
    rng = np.random.default_rng(seed)
    op, out_shape, tensors = CASES[name](rng)
    errors = check_gradients(projected(op, out_shape, rng), tensors, rng)
    assert max(errors.values()) <= 1e-3, errors


def test_conv3d_matches_direct_loop():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 5, 6, 7))
    k = rng.normal(size=(4, 3, 2, 3, 2))
    b = rng.normal(size=4)
    stride = (2, 1, 2)
    got = Graph().conv3d(Tensor(x, dtype=np.float64), Tensor(k, dtype=np.float64), Tensor(b, dtype=np.float64),
                         stride).values
    To, Ho, Wo = (5 - 2) // 2 + 1, 6 - 3 + 1, (7 - 2) // 2 + 1
    want = np.zeros((2, 4, To, Ho, Wo))
    for n in range(2):
        for o in range(4):
            for t in range(To):
                for i in range(Ho):
                    for j in range(Wo):
                        patch = x[n, :, 2 * t:2 * t + 2, i:i + 3, 2 * j:2 * j + 2]
                        want[n, o, t, i, j] = (patch * k[o]).sum() + b[o]
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_gradients_accumulate_across_uses():
    a = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    g = Graph()
    loss = g.sum(g.add(g.mul(a, a), a))
    backward(loss, g)
    np.testing.assert_allclose(a.grad, 2 * a.values + 1)


def test_detach_blocks_gradient():
    a = Tensor([1.0, 2.0], requires_grad=True)
    g = Graph()
    loss = g.sum(g.mul(a, detach(a)))
    backward(loss, g)
    np.testing.assert_allclose(a.grad, a.values)


def test_constants_are_not_recorded():
    g = Graph()
    y = g.add(Tensor([1.0]), Tensor([2.0]))
    assert not y.requires_grad and g.nodes == []


def test_backward_requires_scalar():
    a = Tensor(np.ones(3), requires_grad=True)
    g = Graph()
    with pytest.raises(ShapeError):
        backward(g.scale(a, 2.0), g)


@pytest.mark.parametrize("bad", [
    lambda g: g.add(Tensor(np.ones(3)), Tensor(np.ones(4))),
    lambda g: g.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3)))),
    lambda g: g.conv3d(Tensor(np.ones((1, 2, 4, 4, 4))), Tensor(np.ones((1, 3, 2, 2, 2))), Tensor(np.ones(1))),
    lambda g: g.conv3d(Tensor(np.ones((1, 1, 2, 4, 4))), Tensor(np.ones((1, 1, 3, 2, 2))), Tensor(np.ones(1))),
    lambda g: g.reshape(Tensor(np.ones(6)), (4, 2)),
])
def test_shape_errors(bad):
    with pytest.raises((ShapeError, ValueError)):
        bad(Graph())


def test_l2_normalize_rejects_zero_rows():
    with pytest.raises(DegenerateFeatureError):
        Graph().l2_normalize(Tensor(np.array([[1.0, 0.0], [0.0, 0.0]])))


def test_cross_entropy_label_range():
    with pytest.raises(LabelError):
        Graph().cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


def test_cross_entropy_uniform_logits_is_log_m():
    for m in (2, 4, 7):
        loss = Graph().cross_entropy(Tensor(np.zeros((5, m)), dtype=np.float64), np.arange(5) % m)
        assert abs(loss.item() - np.log(m)) < 1e-12


def test_float32_stays_float32():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    g = Graph()
    y = g.l2_normalize(g.relu(a))
    assert y.values.dtype == np.float32
    backward(g.sum(y), g)
    assert a.grad.dtype == np.float32


@settings(max_examples=50, deadline=None)
@given(nps.arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
                  elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_normalized_rows_have_unit_norm(v):
    norms = np.linalg.norm(v, axis=1)
    if norms.min() < 1e-6:
        return
    y = Graph().l2_normalize(Tensor(v, dtype=np.float64)).values
    np.testing.assert_allclose(np.linalg.norm(y, axis=1), 1.0, rtol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_linear_backward_matches_closed_form(seed):
    rng = np.random.default_rng(seed)
    x, w, b = (t64(rng, 3, 4), t64(rng, 4, 2), t64(rng, 2))
    g = Graph()
    backward(g.sum(g.linear(x, w, b)), g)
    np.testing.assert_allclose(w.grad, x.values.sum(axis=0)[:, None] * np.ones((1, 2)), rtol=1e-12)
    np.testing.assert_allclose(b.grad, np.full(2, 3.0))
    np.testing.assert_allclose(x.grad, np.ones((3, 1)) * w.values.sum(axis=1)[None, :], rtol=1e-12)


def test_rel_error_floor():
    assert rel_error([1e-9], [2e-9]) < 1e-2
    assert rel_error([1.0], [1.001]) == pytest.approx(0.001 / 1.001)
