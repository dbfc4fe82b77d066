import numpy as np
import pytest

from conftest import rel, tiny_problem
from nmelab import ActivationSpec, Model, curvature as cv
from nmelab.activations import KINDS
from nmelab.nn import loss_eval, model_forward
from nmelab.tape import hvp


def dense_gn(model, x, y, loss):
    """J^T H_z J / B assembled from an explicit Jacobian."""
    j = cv.jacobian(model, x)
    z, _, _ = model_forward(model, x)
    hz = cv.output_hessian(loss, z, cv.as_targets(loss, y, model.widths[-1]))
    return j.T @ hz @ j / x.shape[0]


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("loss", ["mse", "cross_entropy"])
def test_decomposition_full_matrices(kind, loss):
    m, x, y = tiny_problem(kind, loss, beta=2.0)
    op = cv.CurvatureOperator("hessian", m, x, y, loss)
    h = cv.full_matrix(op)
    g = cv.full_matrix(op.with_kind("gauss_newton"))
    n_direct = cv.nmevp(op, np.eye(m.n_params), "direct").T
    np.testing.assert_allclose(h, g + n_direct, rtol=1e-8, atol=1e-12)
    assert np.linalg.eigvalsh(g).min() >= -1e-10


def test_hessian_symmetric():
    m, x, y = tiny_problem("tanh")
    h = cv.full_matrix(cv.CurvatureOperator("hessian", m, x, y, "cross_entropy"))
    assert np.abs(h - h.T).max() <= 1e-8


def test_gnvp_matches_dense_assembly(rng):
    m, x, y = tiny_problem("gelu", "cross_entropy")
    op = cv.CurvatureOperator("gauss_newton", m, x, y, "cross_entropy")
    np.testing.assert_allclose(cv.full_matrix(op), dense_gn(m, x, y, "cross_entropy"), rtol=1e-8, atol=1e-14)


def test_linear_model_gn_is_hessian_and_nme_is_zero(rng):
    m = Model.init((3, 2), seed=1)
    x = rng.standard_normal((4, 3))
    y = rng.standard_normal((4, 2))
    op = cv.CurvatureOperator("hessian", m, x, y, "mse")
    v = rng.standard_normal(m.n_params)
    np.testing.assert_allclose(cv.gnvp(op, v), op.apply(v), rtol=1e-14)
    assert np.all(cv.nmevp(op, v, "direct") == 0.0)


def test_zero_direction():
    m, x, y = tiny_problem()
    op = cv.CurvatureOperator("gauss_newton", m, x, y, "cross_entropy")
    assert np.all(cv.gnvp(op, np.zeros(m.n_params)) == 0.0)


def test_nme_vanishes_at_interpolating_point(rng):
    m, x, _ = tiny_problem("gelu", "mse")
    z, _, _ = model_forward(m, x)
    op = cv.CurvatureOperator("nme", m, x, z, "mse")
    v = rng.standard_normal((3, m.n_params))
    assert np.all(cv.nmevp(op, v, "direct") == 0.0)
    assert np.abs(cv.nmevp(op, v)).max() < 1e-14


def test_direct_and_difference_nme_agree(rng):
    m, x, y = tiny_problem("beta_gelu", "cross_entropy", beta=4.0)
    op = cv.CurvatureOperator("nme", m, x, y, "cross_entropy")
    v = rng.standard_normal(m.n_params)
    assert rel(cv.nmevp(op, v, "difference"), cv.nmevp(op, v, "direct")) < 1e-6


def test_relu_same_layer_block_is_zero_away_from_kinks():
    m, x, y = tiny_problem("relu", "mse")
    _, hs, _ = model_forward(m, x)
    assert min(np.abs(h).min() for h in hs) > 1e-6
    nme = cv.nmevp(cv.CurvatureOperator("nme", m, x, y, "mse"), np.eye(m.n_params), "direct")
    for layer in range(m.depth):
        sl = m.weight_slice(layer)
        assert np.all(nme[sl, sl] == 0.0)


@pytest.mark.parametrize("kind", ["hessian", "gauss_newton", "nme"])
def test_operators_are_linear(kind, rng):
    m, x, y = tiny_problem("gelu", "cross_entropy")
    op = cv.CurvatureOperator(kind, m, x, y, "cross_entropy")
    u, v = rng.standard_normal((2, m.n_params))
    lhs = op.apply(2.0 * u - 3.0 * v)
    rhs = 2.0 * op.apply(u) - 3.0 * op.apply(v)
    assert rel(lhs, rhs) < 1e-8


def test_full_matrix_of_quadratic_is_exact():
    h = np.array([[2.0, 1.0, 0.0], [1.0, 3.0, -1.0], [0.0, -1.0, 4.0]])
    op = cv.CurvatureOperator.from_loss(lambda th: 0.5 * (th * (h @ th)).sum(), np.ones(3))
    assert np.array_equal(cv.full_matrix(op), h)


def test_full_matrix_cap():
    m = Model.init((10, 10, 10), seed=0)
    op = cv.CurvatureOperator("hessian", m, np.ones((1, 10)), np.zeros((1, 10)), "mse")
    with pytest.raises(ValueError, match="cap of 150"):
        cv.full_matrix(op, cap=150)


def test_closure_operator_only_supports_hessian():
    with pytest.raises(ValueError):
        cv.CurvatureOperator("nme", fn=lambda th: th.sum(), params=np.zeros(2))


def test_direction_shape_checked():
    m, x, y = tiny_problem()
    op = cv.CurvatureOperator("hessian", m, x, y, "cross_entropy")
    with pytest.raises(ValueError):
        op.apply(np.ones(m.n_params + 1))


# trace estimators


def test_hutchinson_identity():
    op = cv.CurvatureOperator.from_loss(lambda th: 0.5 * (th * th).sum(), np.zeros(3))
    est = cv.hutchinson_trace(op, 4000, seed=0)
    assert abs(est.estimate - 3.0) < 4 * est.stderr
    small = cv.hutchinson_trace(op, 100, seed=0)
    assert est.stderr < small.stderr


def test_hutchinson_tiny_mlp():
    m, x, y = tiny_problem("gelu", "cross_entropy")
    op = cv.CurvatureOperator("hessian", m, x, y, "cross_entropy")
    est = cv.hutchinson_trace(op, 1000, seed=1)
    assert abs(est.estimate - np.trace(cv.full_matrix(op))) <= 4 * est.stderr


def test_hutchinson_independent_of_chunking():
    m, x, y = tiny_problem()
    op = cv.CurvatureOperator("hessian", m, x, y, "cross_entropy")
    a = cv.hutchinson_trace(op, 50, seed=3, chunk=7)
    b = cv.hutchinson_trace(op, 50, seed=3, chunk=50)
    np.testing.assert_allclose(a.samples, b.samples, rtol=1e-12)


def test_gn_trace_sampled_matches_dense():
    m, x, y = tiny_problem("gelu", "cross_entropy", widths=(3, 5, 3), batch=4)
    est = cv.gn_trace_sampled(m, x, 4000, seed=0)
    dense = np.trace(cv.full_matrix(cv.CurvatureOperator("gauss_newton", m, x, y, "cross_entropy")))
    assert abs(est.estimate - dense) <= 4 * est.stderr
    assert np.all(est.samples >= 0)


def test_gn_trace_sampled_degenerate_distribution():
    # a confident model: almost every sampled label is the argmax
    m = Model((2, 2), params=np.array([40.0, 0.0, -40.0, 0.0]))
    x = np.array([[1.0, 0.5]])
    est = cv.gn_trace_sampled(m, x, 20, seed=0)
    _, g, _ = loss_eval("cross_entropy", model_forward(m, x)[0], np.array([0]))
    grad = np.outer(g[0], x[0]).ravel()
    np.testing.assert_allclose(est.samples, np.full(20, grad @ grad), rtol=1e-10)


def test_gn_trace_sampled_requires_cross_entropy():
    m, x, _ = tiny_problem()
    with pytest.raises(ValueError, match="cross_entropy"):
        cv.gn_trace_sampled(m, x, 10, loss="mse")


# Fisher check


def test_fisher_linear_model():
    m = Model.init((3, 2), seed=0)
    x = np.random.default_rng(0).standard_normal((3, 3))
    rep = cv.fisher_check(m, x, 20, seed=0)
    assert rep.max_abs_deviation < 1e-14
    assert rep.within_tolerance


def test_fisher_tiny_gelu():
    m = Model.init((2, 3, 1), ActivationSpec("gelu"), seed=4)
    x = np.random.default_rng(4).standard_normal((3, 2))
    rep = cv.fisher_check(m, x, 2000, seed=0)
    assert rep.within_tolerance
    single = cv.fisher_check(m, x, 1, seed=0)
    assert single.single_sample_nme_norm > 0


def test_fisher_requires_mse():
    m, x, _ = tiny_problem()
    with pytest.raises(ValueError):
        cv.fisher_check(m, x, 10, loss="cross_entropy")


# closed-form second derivative


@pytest.mark.parametrize("widths", [(3, 4, 2), (3, 4, 5, 2)])
@pytest.mark.parametrize("spec", [ActivationSpec("gelu"), ActivationSpec("beta_gelu", 3.0), ActivationSpec("tanh")])
def test_analytic_second_derivative_matches_tape(widths, spec, rng):
    m = Model.init(widths, spec, seed=11)
    x = rng.standard_normal((2, widths[0]))
    for l in range(m.depth):
        for mm in range(l, m.depth):
            A = rng.standard_normal(m.weights()[l][0].shape)
            B = rng.standard_normal(m.weights()[mm][0].shape)
            ana = cv.analytic_second_derivative(m, x, l, mm, A, B)
            ad = cv.second_derivative_ad(m, x, m.embed(l, A), m.embed(mm, B))
            if np.any(ad):
                assert rel(ana, ad) < 1e-6
            else:
                assert np.all(ana == 0)


def test_analytic_second_derivative_zero_cases(rng):
    m = Model.init((3, 4, 4, 2), ActivationSpec("diminished_gelu"), seed=2)
    x = rng.standard_normal((2, 3))
    A = rng.standard_normal((4, 3))
    assert np.all(cv.analytic_second_derivative(m, x, 0, 0, A, A) == 0)
    g = Model(m.widths, ActivationSpec("gelu"), m.params)
    assert np.all(cv.analytic_second_derivative(g, x, 0, 1, np.zeros((4, 3)), rng.standard_normal((4, 4))) == 0)


def test_analytic_second_derivative_rejects_bias_and_bad_layers(rng):
    m = Model.init((3, 4, 2), bias=True, seed=0)
    with pytest.raises(ValueError, match="bias"):
        cv.analytic_second_derivative(m, np.ones(3), 0, 0, np.ones((4, 3)), np.ones((4, 3)))
    m = Model.init((3, 4, 2), seed=0)
    with pytest.raises(ValueError):
        cv.analytic_second_derivative(m, np.ones(3), 1, 0, np.ones((2, 4)), np.ones((4, 3)))


# NTK


def test_ntk_single_point_scalar_output():
    m = Model.init((3, 4, 1), ActivationSpec("gelu"), seed=0)
    x = np.array([[0.3, -1.0, 2.0]])
    k = cv.ntk(m, x)
    j = cv.jacobian(m, x)
    assert k.matrix.shape == (1, 1)
    assert abs(k.matrix[0, 0] - j[0] @ j[0]) < 1e-12 and k.matrix[0, 0] > 0


@pytest.mark.parametrize("loss", ["mse", "cross_entropy"])
def test_ntk_gn_spectra(loss):
    m, x, y = tiny_problem("tanh", loss, widths=(3, 8, 8, 2), batch=5)
    k = cv.ntk(m, x)
    z, _, _ = model_forward(m, x)
    hz = cv.output_hessian(loss, z, cv.as_targets(loss, y, 2))
    a = cv.nonzero_spectrum(np.linalg.eigvals(k.matrix @ hz))
    b = cv.nonzero_spectrum(np.linalg.eigvalsh(dense_gn(m, x, y, loss)))
    assert a.size == b.size
    np.testing.assert_allclose(a, b, rtol=1e-8)
    assert k.is_psd()


def test_ntk_duplicate_point_keeps_rank():
    m = Model.init((3, 6, 2), ActivationSpec("gelu"), seed=0)
    x = np.random.default_rng(0).standard_normal((3, 3))
    r1 = np.linalg.matrix_rank(cv.ntk(m, x).matrix)
    r2 = np.linalg.matrix_rank(cv.ntk(m, np.vstack([x, x[:1]])).matrix)
    assert r2 == r1


def test_ntk_empty_batch():
    with pytest.raises(ValueError):
        cv.ntk(Model.init((2, 2), seed=0), np.zeros((0, 2)))


# scan


def scan_model(kind, beta=1.0):
    rng = np.random.default_rng(0)
    m = Model.init((2, 6, 6, 1), ActivationSpec(kind, beta), seed=0)
    x = rng.standard_normal((4, 2))
    y = 2 * rng.standard_normal((4, 1))
    a = m.weight_slice(1).start
    return m, x, y, a


def test_scan_grid_shape_and_values(tmp_path):
    m, x, y, a = scan_model("gelu")
    g = cv.nme_scan(m, x, y, "mse", a, a + 1, resolution=7)
    assert g.loss.shape == (7, 7) and g.nme_norm.shape == (7, 7)
    assert np.all(np.isfinite(g.loss)) and np.all(g.nme_norm >= 0)
    csv_path, json_path = g.write(tmp_path)
    rows = cv.read_csv(csv_path)
    assert len(rows) == 49
    assert csv_path.read_text().startswith("# schema=")


def test_scan_relu_is_exactly_zero():
    m, x, y, a = scan_model("relu")
    assert np.all(cv.nme_scan(m, x, y, "mse", a, a + 1, resolution=5).nme_norm == 0.0)


def test_scan_linear_model_is_zero():
    m = Model.init((3, 2), seed=0)
    g = cv.nme_scan(m, np.ones((2, 3)), np.zeros((2, 2)), "mse", 0, 1, resolution=4)
    assert np.all(g.nme_norm == 0.0)


def test_scan_cell_matches_direct_block():
    m, x, y, a = scan_model("beta_gelu", 4.0)
    g = cv.nme_scan(m, x, y, "mse", a, a + 1, span=(-1.0, 1.0), resolution=3)
    params = m.params.copy()
    params[a], params[a + 1] = g.values_a[2], g.values_b[0]
    op = cv.CurvatureOperator("hessian", m, x, y, "mse", params)
    full = cv.full_matrix(op) - cv.full_matrix(op.with_kind("gauss_newton"))
    block = full[np.ix_([a, a + 1], [a, a + 1])]
    assert abs(np.linalg.norm(block) - g.nme_norm[2, 0]) < 1e-8 * max(1.0, np.linalg.norm(block))


def test_scan_rejects_cross_layer_pairs():
    m, x, y, a = scan_model("gelu")
    with pytest.raises(ValueError, match="one weight matrix"):
        cv.nme_scan(m, x, y, "mse", 0, a, resolution=3)
