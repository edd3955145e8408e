import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wbgnn import autodiff as ad
from wbgnn.autodiff import NormState, Tape, Tensor

from conftest import central_fd, rel_err, tape_grads


def test_tanh_value_and_slope_at_origin():
    assert ad.tanh(Tensor(0.0)).data == 0.0
    (g,) = tape_grads(lambda t: ad.tanh(t[0]), [np.array(0.0)])
    assert g == pytest.approx(1.0)


def test_softmax_examples():
    np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0]), 0.5).data, [0.5, 0.5])
    # e / (e + 1) evaluated independently
    e = np.e
    np.testing.assert_allclose(ad.softmax(Tensor([1.0, 0.0]), 1.0).data, [e / (e + 1), 1 / (e + 1)])
    assert np.round(ad.softmax(Tensor([1.0, 0.0]), 1.0).data, 4).tolist() == [0.7311, 0.2689]


def test_softmax_first_component_gradient():
    (g,) = tape_grads(lambda t: ad.take(ad.softmax(t[0], 1.0), 0, axis=0), [np.zeros(2)])
    np.testing.assert_allclose(g, [0.25, -0.25])


def test_backward_examples():
    (g,) = tape_grads(lambda t: ad.sum_(t[0]), [np.zeros(3)])
    np.testing.assert_array_equal(g, [1, 1, 1])
    (g,) = tape_grads(lambda t: ad.sum_(t[0] * t[0]), [np.array([1.0, 2.0])])
    np.testing.assert_array_equal(g, [2, 4])


def test_unused_leaf_gets_exact_zero():
    x = Tensor(np.ones(3), requires_grad=True)
    y = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_(ad.square(x))
    g = tape.backward(loss, wrt=[x, y])
    assert np.array_equal(g[y.id], np.zeros(2))


def test_backward_errors():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = x * x
    with pytest.raises(ad.ShapeError):
        tape.backward(y)
    with Tape() as tape:
        loss = ad.sum_(x * x)
    tape.backward(loss)
    with pytest.raises(ad.TapeError):
        tape.backward(loss)


def test_domain_and_shape_errors():
    with pytest.raises(ad.DomainError):
        ad.log(Tensor([0.0, 1.0]))
    with pytest.raises(ad.DomainError):
        ad.reciprocal(Tensor([0.0]))
    with pytest.raises(ad.DomainError):
        ad.softmax(Tensor([1.0]), 0.0)
    with pytest.raises(ad.ShapeError):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    with pytest.raises(ad.ShapeError):
        ad.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    with pytest.raises(ad.NonFiniteError):
        ad.exp(Tensor([1000.0]))
    with pytest.raises(ValueError):
        ad.apply_primitive("conv2d", Tensor(1.0))


def test_recording_only_with_requires_grad():
    with Tape() as tape:
        ad.exp(Tensor([1.0]))
    assert len(tape) == 0


# name -> (function of tensors, list of input shapes, sampling range)
PRIMITIVES = {
    "matmul-last-axis": (lambda t: ad.linear(t[0], t[1]), [(2, 3, 4), (5, 4)], (-2, 2)),
    "bmm": (lambda t: ad.bmm(t[0], t[1]), [(2, 3, 4), (2, 4, 2)], (-2, 2)),
    "add": (lambda t: ad.add(t[0], t[1]), [(3, 4), (4,)], (-2, 2)),
    "sub": (lambda t: ad.sub(t[0], t[1]), [(3, 4), ()], (-2, 2)),
    "elementwise-mul": (lambda t: ad.mul(t[0], t[1]), [(3, 4), (3, 4)], (-2, 2)),
    "scalar-mul": (lambda t: ad.scale(t[0], -1.7), [(3, 4)], (-2, 2)),
    "axis-sum": (lambda t: ad.sum_(t[0], axis=(0, 2)), [(2, 3, 4)], (-2, 2)),
    "axis-mean": (lambda t: ad.mean(t[0], axis=1, keepdims=True), [(2, 3, 4)], (-2, 2)),
    "broadcast": (lambda t: ad.broadcast_to(t[0], (2, 3, 4)), [(3, 1)], (-2, 2)),
    "concat-channel": (lambda t: ad.concat([t[0], t[1]], axis=-1), [(2, 3), (2, 2)], (-2, 2)),
    "relu": (lambda t: ad.relu(t[0]), [(3, 4)], (-2, 2)),
    "tanh": (lambda t: ad.tanh(t[0]), [(3, 4)], (-2, 2)),
    "log": (lambda t: ad.log(t[0]), [(3, 4)], (0.2, 2)),
    "exp": (lambda t: ad.exp(t[0]), [(3, 4)], (-2, 2)),
    "softmax-with-temperature": (lambda t: ad.softmax(t[0], 0.7), [(3, 4)], (-2, 2)),
    "square": (lambda t: ad.square(t[0]), [(3, 4)], (-2, 2)),
    "sqrt": (lambda t: ad.sqrt(t[0]), [(3, 4)], (0.2, 2)),
    "reciprocal": (lambda t: ad.reciprocal(t[0]), [(3, 4)], (0.2, 2)),
    "abs": (lambda t: ad.abs_(t[0]), [(3, 4)], (-2, 2)),
    "batch-standardize": (
        lambda t: ad.batch_standardize(t[0], NormState.fresh(3), training=True, update_stats=False),
        [(4, 2, 3)],
        (-2, 2),
    ),
    "reshape": (lambda t: ad.reshape(t[0], (4, 3)), [(3, 4)], (-2, 2)),
    "transpose": (lambda t: ad.transpose(t[0], (2, 0, 1)), [(2, 3, 4)], (-2, 2)),
    "take": (lambda t: ad.take(t[0], np.array([2, 0, 2]), axis=1), [(2, 3)], (-2, 2)),
    "clamp-min": (lambda t: ad.clamp_min(t[0], 0.1), [(3, 4)], (-2, 2)),
}

KINKED = {"relu": 0.0, "abs": 0.0, "clamp-min": 0.1}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    fn, shapes, (lo, hi) = PRIMITIVES[name]
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    weights = None
    for _ in range(100):
        point = [rng.uniform(lo, hi, size=s) for s in shapes]
        if name in KINKED:
            k = KINKED[name]
            point = [np.where(np.abs(p - k) < 0.05, p + 0.1, p) for p in point]
        out_shape = fn([Tensor(p) for p in point]).shape
        if weights is None or weights.shape != out_shape:
            weights = rng.normal(size=out_shape)
        w = Tensor(weights)

        def scalar(t):
            return ad.sum_(ad.mul(fn(t), w))

        assert rel_err(tape_grads(scalar, point), central_fd(scalar, point)) < 1e-5


def test_grad_check_contract():
    assert ad.grad_check(lambda t: ad.tanh(t[0]), [np.array(0.3)], eps=1e-5) < 1e-6
    with pytest.raises(ValueError):
        ad.grad_check(lambda t: ad.tanh(t[0]), [np.array(0.3)], eps=1e-3)


def test_grad_check_detects_a_wrong_vjp():
    def bad(x):
        return ad._finish("bad", x.data * 2, (x,), lambda g: (g * 5,))

    assert ad.grad_check(lambda t: ad.sum_(bad(t[0])), [np.ones(2)]) > 0.5


def test_grad_check_non_finite_perturbation():
    with pytest.raises((ad.NonFiniteError, ad.DomainError)):
        ad.grad_check(lambda t: ad.sum_(ad.log(t[0])), [np.array([1e-6])], eps=1e-5)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.floats(-3, 3))
def test_mean_then_broadcast_is_idempotent_on_constant_axes(a, b, c):
    x = Tensor(np.full((a, b), c))
    once = ad.broadcast_to(ad.mean(x, axis=1, keepdims=True), (a, b))
    # sum then divide may round by an ulp
    np.testing.assert_allclose(once.data, x.data, rtol=4 * np.finfo(float).eps, atol=0)


def test_batch_standardize_statistics_and_running_update():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(2.0, 3.0, size=(5, 4, 3)))
    state = NormState.fresh(3)
    y = ad.batch_standardize(x, state, training=True)
    flat = y.data.reshape(-1, 3)
    np.testing.assert_allclose(flat.mean(0), 0, atol=1e-12)
    np.testing.assert_allclose(flat.var(0), x.data.reshape(-1, 3).var(0) / (x.data.reshape(-1, 3).var(0) + 1e-5))
    np.testing.assert_allclose(state.mean, 0.1 * x.data.reshape(-1, 3).mean(0))
    const = ad.batch_standardize(Tensor(np.zeros((2, 3))), NormState.fresh(3), training=True)
    assert np.all(const.data == 0)


def test_determinism_of_forward_and_backward():
    rng = np.random.default_rng(5)
    pts = [rng.normal(size=(3, 4)), rng.normal(size=(2, 4))]

    def fn(t):
        return ad.sum_(ad.tanh(ad.linear(t[0], t[1])))

    a = tape_grads(fn, pts)
    b = tape_grads(fn, pts)
    for x, y in zip(a, b):
        assert np.array_equal(x, y)
