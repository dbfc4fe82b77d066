import math

import numpy as np
import pytest

from conftest import central_diff, rel, tiny_problem
from nmelab import activations
from nmelab.curvature import CurvatureOperator, nmevp
from nmelab.nn import batch_loss, forward_on_tape, loss_fn, model_forward, record_forward
from nmelab.tape import (
    DerivativeOverride,
    Dual,
    NonFiniteError,
    OverrideRegistry,
    Tape,
    grad,
    hvp,
    jvp,
    value_and_grad,
    vjp,
)
from nmelab import ActivationSpec, Model


def relu_elementwise():
    return ActivationSpec("relu").elementwise()


# record_forward


def test_identity_linear_model_passes_input_through():
    m = Model((2, 2), params=np.eye(2).ravel())
    z, tape = record_forward(m, np.array([[1.0, 2.0]]))
    assert np.array_equal(z.value, [[1.0, 2.0]])
    assert len(tape) > 1


def test_zero_weights_give_zero_output():
    m = Model((3, 5, 2), ActivationSpec("gelu"))
    z, _ = record_forward(m, np.ones((4, 3)))
    assert np.array_equal(z.value, np.zeros((4, 2)))


def test_forward_matches_hand_rolled_recursion():
    m = Model.init((2, 16, 2), ActivationSpec("gelu"), seed=7)
    x = np.random.default_rng(7).standard_normal((5, 2))
    w0 = m.params[:32].reshape(16, 2)
    w1 = m.params[32:].reshape(2, 16)
    h = x @ w0.T
    from scipy.special import erf

    act = 0.5 * h * (1 + erf(h / math.sqrt(2)))
    expected = act @ w1.T
    z, _ = record_forward(m, x)
    np.testing.assert_allclose(z.value, expected, rtol=1e-13, atol=1e-15)


def test_record_forward_matches_eager_bit_exactly():
    m, x, _ = tiny_problem("tanh")
    z, _ = record_forward(m, x)
    z2, _, _ = model_forward(m, x)
    assert np.array_equal(z.value, z2)


def test_shape_mismatch_names_layer():
    m = Model.init((3, 4, 2), seed=0)
    with pytest.raises(ValueError, match="layer 0"):
        record_forward(m, np.ones((2, 5)))


def test_tape_parents_are_topological_and_replay_is_bit_exact():
    m, x, _ = tiny_problem("beta_gelu", beta=3.0)
    z, tape = record_forward(m, x)
    for i, node in enumerate(tape.nodes):
        assert all(p < i for p in node.parents)
    again = tape.replay()
    for a, b in zip(tape.nodes, again.nodes):
        assert np.array_equal(a.value.p, b.value.p)


# grad


def test_grad_of_dot_product():
    t = Tape()
    th = t.leaf([3.0])
    assert np.array_equal(grad((th * th).sum(), th), [6.0])


def test_grad_of_linear_mse_is_residual_outer_input():
    rng = np.random.default_rng(0)
    w = rng.standard_normal((2, 3))
    x = rng.standard_normal(3)
    y = rng.standard_normal(2)
    m = Model((3, 2), params=w.ravel())
    _, g = value_and_grad(loss_fn(m, x, y, "mse"), m.params)
    np.testing.assert_allclose(g.reshape(2, 3), np.outer(w @ x - y, x), rtol=1e-14)


def test_grad_requires_scalar():
    t = Tape()
    th = t.leaf([1.0, 2.0])
    with pytest.raises(ValueError, match="scalar"):
        grad(th * th, th)


@pytest.mark.parametrize("kind", activations.KINDS)
@pytest.mark.parametrize("loss", ["mse", "cross_entropy"])
def test_grad_matches_finite_differences(kind, loss):
    m, x, y = tiny_problem(kind, loss, widths=(2, 8, 8, 2), batch=4, seed=3, beta=2.0)
    _, g = value_and_grad(loss_fn(m, x, y, loss), m.params)
    fd = central_diff(lambda t: batch_loss(m, x, y, loss, t), m.params)
    assert rel(g, fd) < 1e-6


def test_deterministic_gradients():
    m, x, y = tiny_problem()
    a = value_and_grad(loss_fn(m, x, y, "cross_entropy"), m.params)[1]
    b = value_and_grad(loss_fn(m, x, y, "cross_entropy"), m.params)[1]
    assert np.array_equal(a, b)


# jvp / vjp


def test_jvp_zero_tangent():
    m, x, _ = tiny_problem()
    _, jv = jvp(lambda th: forward_on_tape(m, th, x), m.params, np.zeros(m.n_params))
    assert np.array_equal(jv, np.zeros((3, 2)))


def test_jvp_linear_model_is_a_times_x():
    rng = np.random.default_rng(2)
    m = Model.init((3, 2), seed=2)
    x = rng.standard_normal((1, 3))
    a = rng.standard_normal((2, 3))
    _, jv = jvp(lambda th: forward_on_tape(m, th, x), m.params, a.ravel())
    np.testing.assert_allclose(jv, x @ a.T, rtol=1e-14)


def test_jvp_matches_finite_differences(rng):
    m, x, _ = tiny_problem("tanh", widths=(3, 6, 6, 2))
    v = rng.standard_normal(m.n_params)
    _, jv = jvp(lambda th: forward_on_tape(m, th, x), m.params, v)
    eps = 1e-6
    fd = (model_forward(m, x, m.params + eps * v)[0] - model_forward(m, x, m.params - eps * v)[0]) / (2 * eps)
    assert rel(jv, fd) < 1e-5


def test_jvp_length_mismatch():
    m, x, _ = tiny_problem()
    with pytest.raises(ValueError):
        jvp(lambda th: forward_on_tape(m, th, x), m.params, np.ones(m.n_params + 1))


def test_vjp_batched_matches_single(rng):
    m, x, _ = tiny_problem()
    fn = lambda th: forward_on_tape(m, th, x)
    u = rng.standard_normal((4, 3, 2))
    _, batched = vjp(fn, m.params, u)
    for k in range(4):
        _, single = vjp(fn, m.params, u[k])
        np.testing.assert_allclose(batched[k], single, rtol=1e-13, atol=1e-15)


def test_jvp_vjp_adjoint(rng):
    m, x, _ = tiny_problem("gelu")
    fn = lambda th: forward_on_tape(m, th, x)
    v = rng.standard_normal(m.n_params)
    u = rng.standard_normal((3, 2))
    _, jv = jvp(fn, m.params, v)
    _, ju = vjp(fn, m.params, u)
    assert abs(np.sum(jv * u) - ju @ v) < 1e-12 * (1 + abs(ju @ v))


# hvp


def test_hvp_quadratic():
    h = np.array([[2.0, 1.0], [1.0, 3.0]])
    fn = lambda th: 0.5 * (th * (h @ th)).sum()
    assert np.allclose(hvp(fn, [0.3, -0.7], [1.0, 0.0]), [2.0, 1.0], rtol=0, atol=1e-15)


@pytest.mark.parametrize("kind", ["relu", "gelu", "beta_gelu", "tanh"])
@pytest.mark.parametrize("loss", ["mse", "cross_entropy"])
def test_hvp_matches_finite_differences(kind, loss, rng):
    m, x, y = tiny_problem(kind, loss, widths=(2, 8, 8, 2), batch=4, seed=5, beta=2.0)
    fn = loss_fn(m, x, y, loss)
    v = rng.standard_normal(m.n_params)
    eps = 1e-4
    fd = (value_and_grad(fn, m.params + eps * v)[1] - value_and_grad(fn, m.params - eps * v)[1]) / (2 * eps)
    assert rel(hvp(fn, m.params, v), fd) < 1e-5


@pytest.mark.parametrize("kind", ["gelu", "tanh", "beta_gelu"])
def test_hvp_symmetric(kind, rng):
    m, x, y = tiny_problem(kind, "cross_entropy", beta=3.0)
    fn = loss_fn(m, x, y, "cross_entropy")
    u, v = rng.standard_normal((2, m.n_params))
    a, b = u @ hvp(fn, m.params, v), v @ hvp(fn, m.params, u)
    assert abs(a - b) <= 1e-8 * max(abs(a), abs(b))


def test_hvp_batched_directions_match_single(rng):
    m, x, y = tiny_problem()
    fn = loss_fn(m, x, y, "cross_entropy")
    vs = rng.standard_normal((5, m.n_params))
    stacked = hvp(fn, m.params, vs)
    for k in range(5):
        np.testing.assert_allclose(stacked[k], hvp(fn, m.params, vs[k]), rtol=1e-12, atol=1e-14)


def test_non_finite_intermediate_raises():
    fn = lambda th: (th * 1e200 * 1e200).sum()
    with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
        hvp(fn, [1.0], [1.0])


def test_non_finite_leaf_rejected():
    with pytest.raises(NonFiniteError):
        Tape().leaf([np.nan])


# overrides


def scalar_relu_loss(registry):
    fn = relu_elementwise()

    def loss(th):
        return th.tape.activation(fn, th).sum()

    return lambda: hvp(loss, [0.0], [1.0], registry)[0]


def test_override_bump_at_origin():
    reg = OverrideRegistry([DerivativeOverride("relu", 2, activations.gaussian_bump(1.0))])
    assert abs(scalar_relu_loss(reg)() - 1 / math.sqrt(2 * math.pi)) < 1e-15
    assert abs(scalar_relu_loss(reg)() - 0.3989422804014327) < 1e-15


def test_no_override_is_true_derivative():
    assert scalar_relu_loss(OverrideRegistry())() == 0.0


def test_zero_override_removes_second_derivative_terms(rng):
    m, x, y = tiny_problem("gelu", "mse")
    reg = OverrideRegistry([DerivativeOverride("gelu", 2, lambda h: np.zeros_like(h))])
    v = rng.standard_normal(m.n_params)
    via_registry = hvp(loss_fn(m, x, y, "mse"), m.params, v, reg)
    dim = Model(m.widths, ActivationSpec("diminished_gelu"), m.params)
    np.testing.assert_array_equal(via_registry, hvp(loss_fn(dim, x, y, "mse"), m.params, v))
    # no phi'' anywhere: the NME has no same-layer block on the hidden layers
    nme = nmevp(CurvatureOperator("nme", m, x, y, "mse", registry=reg), np.eye(m.n_params), "direct")
    for layer in range(m.depth - 1):
        sl = m.weight_slice(layer)
        assert np.all(nme[sl, sl] == 0.0)


def test_override_keeps_values_and_gradients(rng):
    m, x, y = tiny_problem("gelu", "cross_entropy")
    reg = OverrideRegistry([DerivativeOverride("gelu", 2, lambda h: np.zeros_like(h))])
    fn = loss_fn(m, x, y, "cross_entropy")
    a = value_and_grad(fn, m.params)
    b = value_and_grad(fn, m.params, reg)
    assert a[0] == b[0] and np.array_equal(a[1], b[1])


def test_order_one_override_changes_gradient():
    reg = OverrideRegistry([DerivativeOverride("relu", 1, lambda h: np.full_like(h, 0.5))])
    fn = relu_elementwise()
    _, g = value_and_grad(lambda th: th.tape.activation(fn, th).sum(), [-1.0, 2.0], reg)
    assert np.array_equal(g, [0.5, 0.5])


def test_registry_errors():
    reg = OverrideRegistry()
    ov = DerivativeOverride("relu", 2, np.zeros_like)
    reg.register(ov)
    with pytest.raises(ValueError, match="already registered"):
        reg.register(ov)
    reg.register(ov, replace=True)
    with pytest.raises(ValueError, match="order"):
        reg.register(DerivativeOverride("relu", 3, np.zeros_like))
    with pytest.raises(KeyError):
        reg.register(DerivativeOverride("matmul", 2, np.zeros_like))
    reg.freeze()
    with pytest.raises(RuntimeError):
        reg.register(DerivativeOverride("gelu", 2, np.zeros_like))


def test_dual_tangent_shapes():
    d = Dual(np.ones(3), np.ones((4, 3)))
    assert (d * d).t.shape == (4, 3)
    assert d.sum().t.shape == (4,)
