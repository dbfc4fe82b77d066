"""Self-checks of the toolkit against independent oracles.

Each check returns a :class:`CheckResult`. Oracles are finite differences,
dense matrix assembly, Monte-Carlo averages, closed forms evaluated in exact
arithmetic, or a second code path that shares no intermediate results with
the one under test.
"""

from __future__ import annotations

import json
import math
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.integrate import quad

from . import curvature as cv
from .activations import KINDS as ACTIVATIONS
from .activations import ActivationSpec, activation_eval
from .harness import RunConfig, build_dataset, sweep, train
from .nn import LOSS_KINDS, Model, as_targets, batch_loss, loss_fn, model_forward
from .quadratic import QuadraticProblem, evolve, step_doubling_residual
from .regularize import Objective, RegularizerSpec, grad_penalty_step, usam_step
from .tape import hvp, value_and_grad

SMOOTH = ("gelu", "beta_gelu", "tanh")
FD_HVP_ACTIVATIONS = ("relu", "gelu", "beta_gelu", "tanh")  # whose AD order-2 is the true one


@dataclass
class CheckResult:
    id: str
    name: str
    passed: bool
    detail: dict = field(default_factory=dict)
    gating: bool = True
    seconds: float = 0.0

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        if not self.gating:
            tag += " (non-gating)"
        info = ", ".join(f"{k}={_fmt(v)}" for k, v in self.detail.items() if not isinstance(v, (list, dict)))
        return f"[{tag}] {self.id} {self.name}: {info} ({self.seconds:.1f}s)"


def _fmt(v):
    return f"{v:.3g}" if isinstance(v, float) else str(v)


def rel_err(a, b) -> float:
    """Norm-relative error ||a - b|| / ||b|| (absolute when b is 0)."""
    a, b = np.asarray(a), np.asarray(b)
    nb = float(np.linalg.norm(b))
    diff = float(np.linalg.norm(a - b))
    return diff / nb if nb > 0 else diff


def _spec(kind: str, rng) -> ActivationSpec:
    return ActivationSpec(kind, float(rng.choice([2.0, 4.0])) if kind in ("beta_gelu", "augmented_relu") else 1.0)


def _problem(rng, kind, loss, widths, batch, seed):
    model = Model.init(widths, _spec(kind, rng), seed=seed)
    x = rng.standard_normal((batch, widths[0]))
    if loss == "mse":
        y = rng.standard_normal((batch, widths[-1]))
    else:
        y = rng.integers(0, widths[-1], batch)
    return model, x, y


# ---------------------------------------------------------------------------


def check_decomposition(n_triples: int = 60, seed: int = 0) -> CheckResult:
    """H v = GN v + NME v with NME taken on the direct path."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    combos = [(a, l) for a in ACTIVATIONS for l in LOSS_KINDS]
    for i in range(n_triples):
        kind, loss = combos[i % len(combos)]
        widths = (int(rng.integers(2, 5)), int(rng.integers(3, 7)), int(rng.integers(3, 7)), int(rng.integers(2, 4)))
        model, x, y = _problem(rng, kind, loss, widths, int(rng.integers(1, 6)), seed * 1000 + i)
        v = rng.standard_normal(model.n_params)
        op = cv.CurvatureOperator("hessian", model, x, y, loss)
        h = op.apply(v)
        g = cv.gnvp(op, v)
        n = cv.nmevp(op, v, method="direct")
        worst = max(worst, float(np.linalg.norm(h - g - n)) / (1.0 + float(np.linalg.norm(h))))
    return CheckResult("1", "decomposition identity", worst <= 1e-6,
                       {"triples": n_triples, "max_scaled_residual": worst, "tol": 1e-6})


def fd_grad(fn, theta, eps=1e-5):
    g = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = eps
        g[i] = (fn(theta + e) - fn(theta - e)) / (2 * eps)
    return g


def check_finite_differences(n_seeds: int = 20, widths=(2, 8, 8, 2)) -> CheckResult:
    """Tape gradients and HVPs against central differences."""
    worst_g, worst_h = 0.0, 0.0
    for s in range(n_seeds):
        rng = np.random.default_rng(100 + s)
        for kind in ACTIVATIONS:
            for loss in LOSS_KINDS:
                model, x, y = _problem(rng, kind, loss, widths, 4, s)
                fn = loss_fn(model, x, y, loss)
                _, g = value_and_grad(fn, model.params)
                g_fd = fd_grad(lambda t: batch_loss(model, x, y, loss, t), model.params, 1e-5)
                worst_g = max(worst_g, rel_err(g, g_fd))
                if kind in FD_HVP_ACTIVATIONS:
                    v = rng.standard_normal(model.n_params)
                    hv = hvp(fn, model.params, v)
                    eps = 1e-4
                    gp = value_and_grad(fn, model.params + eps * v)[1]
                    gm = value_and_grad(fn, model.params - eps * v)[1]
                    worst_h = max(worst_h, rel_err(hv, (gp - gm) / (2 * eps)))
    ok = worst_g <= 1e-6 and worst_h <= 1e-5
    return CheckResult("2", "finite-difference gradients and HVPs", ok,
                       {"seeds": n_seeds, "max_grad_rel_err": worst_g, "max_hvp_rel_err": worst_h})


def check_second_derivative_oracle(seed: int = 0) -> CheckResult:
    """Closed-form model second derivative against the tape, all (l, m) pairs."""
    rng = np.random.default_rng(seed)
    worst, pairs, diag_zero = 0.0, 0, True
    for widths in [(3, 5, 2), (3, 4, 5, 2)]:
        for spec in [ActivationSpec("gelu"), ActivationSpec("beta_gelu", 3.0)]:
            model = Model.init(widths, spec, seed=int(rng.integers(1 << 30)))
            x = rng.standard_normal((3, widths[0]))
            for l in range(model.depth):
                for m in range(l, model.depth):
                    A = rng.standard_normal(model.weights()[l][0].shape)
                    B = rng.standard_normal(model.weights()[m][0].shape)
                    ana = cv.analytic_second_derivative(model, x, l, m, A, B)
                    ad = cv.second_derivative_ad(model, x, model.embed(l, A), model.embed(m, B))
                    scale = max(float(np.linalg.norm(ad)), 1e-300)
                    worst = max(worst, float(np.linalg.norm(ana - ad)) / scale if np.any(ad) else float(np.abs(ana).max()))
                    pairs += 1
        dim = Model.init(widths, ActivationSpec("diminished_gelu"), seed=int(rng.integers(1 << 30)))
        x = rng.standard_normal((3, widths[0]))
        for l in range(dim.depth):
            A = rng.standard_normal(dim.weights()[l][0].shape)
            B = rng.standard_normal(dim.weights()[l][0].shape)
            ana = cv.analytic_second_derivative(dim, x, l, l, A, B)
            ad = cv.second_derivative_ad(dim, x, dim.embed(l, A), dim.embed(l, B))
            diag_zero &= bool(np.all(ana == 0.0) and np.all(ad == 0.0))
    ok = worst <= 1e-6 and diag_zero
    return CheckResult("3", "closed-form model second derivative", ok,
                       {"pairs": pairs, "max_rel_err": worst, "zero_phi2_diagonal_exact": diag_zero})


def check_fisher(n_samples: int = 10_000, seed: int = 0) -> CheckResult:
    """Mean Hessian at model-sampled Gaussian labels equals GN."""
    model = Model.init((3, 4, 2), ActivationSpec("gelu"), seed=seed)
    x = np.random.default_rng(seed).standard_normal((4, 3))
    rep = cv.fisher_check(model, x, n_samples, seed)
    return CheckResult("4", "Fisher/GN cancellation", rep.within_tolerance,
                       {"n_params": model.n_params, "n_samples": n_samples,
                        "max_dev_in_stderr": rep.max_deviation_in_stderr,
                        "single_sample_nme_norm": rep.single_sample_nme_norm})


def check_estimators(n_samples: int = 10_000, seed: int = 0) -> CheckResult:
    """Hutchinson and sampled-label GN traces against dense traces, batched and as averages of single-sample runs."""
    rng = np.random.default_rng(seed)
    model = Model.init((3, 5, 3), ActivationSpec("gelu"), seed=seed)
    x = rng.standard_normal((6, 3))
    y = rng.integers(0, 3, 6)
    op = cv.CurvatureOperator("hessian", model, x, y, "cross_entropy")
    tr_h = float(np.trace(cv.full_matrix(op)))
    tr_gn = float(np.trace(cv.full_matrix(op.with_kind("gauss_newton"))))
    hut = cv.hutchinson_trace(op, n_samples, seed)
    gns = cv.gn_trace_sampled(model, x, n_samples, seed)
    singles_h = np.array([cv.hutchinson_trace(op, 1, seed=1 + s).estimate for s in range(n_samples)])
    singles_g = np.array([cv.gn_trace_sampled(model, x, 1, seed=1 + s).estimate for s in range(n_samples)])

    def z(values, target):
        return abs(values.mean() - target) / (values.std(ddof=1) / math.sqrt(values.size))

    zs = {"hutchinson_z": abs(hut.estimate - tr_h) / hut.stderr,
          "gn_sampled_z": abs(gns.estimate - tr_gn) / gns.stderr,
          "hutchinson_single_z": float(z(singles_h, tr_h)),
          "gn_sampled_single_z": float(z(singles_g, tr_gn))}
    ok = all(v <= 3.0 for v in zs.values())
    return CheckResult("5", "trace estimators", ok, dict(zs, dense_trace_h=tr_h, dense_trace_gn=tr_gn))


INTERPOLATION_CONFIG = {
    "seed": 0, "model": {"widths": [16, 24, 24, 1]}, "loss": "mse",
    "data": {"kind": "teacher_mlp", "n": 10, "d": 16, "k": 1, "teacher_hidden": 4},
    "lr": 0.3, "epochs": 5000, "batch_size": 0, "target_loss": 1e-13,
}


def check_interpolation(out=None) -> CheckResult:
    """Fit a teacher exactly, then compare NME and GN norms at the minimum."""
    cfg = RunConfig.from_dict(INTERPOLATION_CONFIG)
    with tempfile.TemporaryDirectory() as tmp:
        res = train(cfg, Path(out or tmp) / "interpolation")
    x, y = build_dataset(cfg).train()
    op = cv.CurvatureOperator("hessian", res.model, x, y, "mse")
    nme = cv.full_matrix(op.with_kind("nme"))
    gn = cv.full_matrix(op.with_kind("gauss_newton"))
    ratio = float(np.linalg.norm(nme) / np.linalg.norm(gn))
    loss = res.summary["final_train_loss"]
    return CheckResult("6", "NME vanishes at interpolation", loss < 1e-12 and ratio < 1e-5,
                       {"train_loss": loss, "steps": res.summary["steps"], "nme_over_gn": ratio})


def check_ntk_spectrum(seed: int = 0) -> CheckResult:
    """Nonzero eigenvalues of NTK * H_z against those of the batch-mean GN."""
    rng = np.random.default_rng(seed)
    worst, cases = 0.0, 0
    for n_points in (5, 10, 20):
        for loss in LOSS_KINDS:
            model, x, y = _problem(rng, "gelu", loss, (3, 10, 10, 2), n_points, seed + n_points)
            k = cv.ntk(model, x)
            z, _, _ = model_forward(model, x)
            hz = cv.output_hessian(loss, z, as_targets(loss, y, 2))
            a = cv.nonzero_spectrum(np.linalg.eigvals(k.matrix @ hz), 1e-9)
            gn = cv.full_matrix(cv.CurvatureOperator("gauss_newton", model, x, y, loss))
            b = cv.nonzero_spectrum(np.linalg.eigvalsh(gn), 1e-9)
            if a.size != b.size or not k.is_psd():
                worst = math.inf
            else:
                worst = max(worst, float(np.max(np.abs(a - b) / np.abs(b))))
            cases += 1
    return CheckResult("7", "NTK/GN nonzero spectrum", worst <= 1e-8, {"cases": cases, "max_rel_err": worst})


def check_quadratic(steps: int = 100, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((6, 6))
    h = a @ a.T / 6
    alpha, rho = 0.05, 0.2
    worst = 0.0
    for prob in (QuadraticProblem(rng.standard_normal(6), alpha, rho, eigenvalues=np.linalg.eigvalsh(h)),
                 QuadraticProblem(rng.standard_normal(6), alpha, rho, matrix=h)):
        traj = evolve(prob, steps)
        usam = Objective(prob.loss_fn(), prob.theta0)
        pen = Objective(prob.loss_fn(), prob.theta0)
        for t in range(steps):
            usam_step(usam, alpha, rho)
            grad_penalty_step(pen, alpha, rho / 2, p=2)
            worst = max(worst, float(np.abs(usam.params - traj[t + 1]).max()),
                        float(np.abs(pen.params - traj[t + 1]).max()))
    # (alpha lam)^3 + (alpha lam)^4 / 4 written out for alpha lam = 0.01, 0.1, 1
    expected = {0.01: 1.0025e-6, 0.1: 1.025e-3, 1.0: 1.25}
    res_err = max(abs(step_doubling_residual(al, 1.0) - v) / v for al, v in expected.items())
    ok = worst <= 1e-12 and res_err <= 1e-14
    return CheckResult("8", "quadratic closed form", ok,
                       {"max_traj_err": worst, "max_residual_rel_err": res_err})


def check_beta_gelu() -> CheckResult:
    x = np.concatenate([np.linspace(-20, -0.5, 2001), np.linspace(0.5, 20, 2001)])
    spec = ActivationSpec("beta_gelu", 100.0)
    limit_err = float(np.abs(activation_eval(spec, x) - np.maximum(x, 0)).max())
    integrals = {}
    for beta in (1.0, 4.0, 16.0):
        s = ActivationSpec("beta_gelu", beta)
        integrals[beta] = quad(lambda t: activation_eval(s, t, 2), -10 / beta, 10 / beta,
                               epsabs=1e-13, epsrel=1e-12)[0]
    at_zero = max(abs(activation_eval(ActivationSpec("beta_gelu", b), 0.0, 2) - 2 * b / math.sqrt(2 * math.pi))
                  for b in (0.5, 1.0, 2.0, 8.0, 16.0))
    int_err = max(abs(v - 1) for v in integrals.values())
    ok = limit_err <= 1e-8 and int_err <= 1e-3 and at_zero <= 1e-12
    return CheckResult("9", "beta-GELU structure", ok,
                       {"relu_limit_err": limit_err, "max_integral_err": int_err, "zero_value_err": at_zero})


def nme_matrix_direct(model, x, y, loss):
    op = cv.CurvatureOperator("nme", model, x, y, loss)
    return cv.nmevp(op, np.eye(model.n_params), method="direct").T


def check_override_semantics(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    widths = (3, 4, 4, 2)
    x = rng.standard_normal((3, 3))
    y = rng.integers(0, 2, 3)
    results = {}
    for kind, parent in (("diminished_gelu", "gelu"), ("augmented_relu", "relu")):
        m = Model.init(widths, ActivationSpec(kind, 1.0), seed=seed)
        ref = Model(widths, ActivationSpec(parent), m.params.copy())
        nme = nme_matrix_direct(m, x, y, "cross_entropy")
        blocks = [np.abs(nme[m.weight_slice(l), m.weight_slice(l)]).max() for l in range(m.depth - 1)]
        _, hs, _ = model_forward(m, x)
        near = any(np.any(np.abs(h) < 3.0) for h in hs[:-1])
        z1, _, _ = model_forward(m, x)
        z2, _, _ = model_forward(ref, x)
        fa = loss_fn(m, x, y, "cross_entropy")
        fb = loss_fn(ref, x, y, "cross_entropy")
        la, ga = value_and_grad(fa, m.params)
        lb, gb = value_and_grad(fb, m.params)
        results[kind] = {"max_block": float(max(blocks)), "min_block": float(min(blocks)), "near_zero": near,
                         "forward_equal": bool(np.array_equal(z1, z2) and la == lb),
                         "grad_rel_err": rel_err(ga, gb)}
    dim, aug = results["diminished_gelu"], results["augmented_relu"]
    ok = (dim["max_block"] == 0.0 and aug["near_zero"] and aug["min_block"] > 0.0
          and all(r["forward_equal"] and r["grad_rel_err"] <= 1e-12 for r in results.values()))
    return CheckResult("10", "derivative-override semantics", ok,
                       {"diminished_max_block": dim["max_block"], "augmented_min_block": aug["min_block"],
                        "forward_bit_exact": dim["forward_equal"] and aug["forward_equal"],
                        "max_grad_rel_err": max(dim["grad_rel_err"], aug["grad_rel_err"])})


SCAN_WIDTHS = (2, 16, 16, 1)
SCAN_POINTS = 4


def scan_problem(beta: float, seed: int = 0):
    """Default scan setup: a 2-16-16-1 beta-GELU net, 4 points, the first two
    weights of the last hidden layer's first unit."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((SCAN_POINTS, SCAN_WIDTHS[0]))
    y = 2.0 * rng.standard_normal((SCAN_POINTS, 1))
    model = Model.init(SCAN_WIDTHS, ActivationSpec("beta_gelu", beta), seed=seed)
    a = model.weight_slice(model.depth - 2).start
    return model, x, y, a, a + 1


def check_smoke(seed: int = 0, quick: bool = False) -> CheckResult:
    betas = (1.0, 2.0, 4.0, 8.0, 16.0)
    census = []
    for b in betas:
        model, x, y, ia, ib = scan_problem(b, seed)
        census.append(cv.nme_scan(model, x, y, "mse", ia, ib, resolution=21 if quick else 41).census())
    mono = all(c1 > c2 for c1, c2 in zip(census, census[1:]))
    base = RunConfig.from_dict({
        "seed": seed, "model": {"widths": [2, 32, 32, 2]}, "loss": "cross_entropy",
        "regularizer": {"kind": "grad_penalty_p1", "rho": 0.0},
        "data": {"kind": "spirals", "n": 256, "d": 2, "k": 2, "test_fraction": 0.25},
        "lr": 0.05, "epochs": 2 if quick else 10, "batch_size": 32,
    })
    with tempfile.TemporaryDirectory() as tmp:
        rows = sweep(base, rhos=(0.01, 0.03, 0.1), activations=("beta_gelu:1", "beta_gelu:16"), out=tmp)
    var = {(r["beta"], r["rho"]): r["penalty_term_norm_var"] for r in rows}
    higher = all(var[(16.0, r)] > var[(1.0, r)] for r in (0.01, 0.03, 0.1))
    return CheckResult("11", "qualitative smoke (scan census, penalty variance)", mono and higher,
                       {"census_monotone": mono, "census": census,
                        "beta16_variance_higher": higher,
                        "variance": {f"beta{b:g}_rho{r:g}": v for (b, r), v in var.items()}},
                       gating=False)


REPRO_CONFIG = {
    "seed": 3, "model": {"widths": [2, 8, 8, 2]}, "loss": "cross_entropy",
    "regularizer": {"kind": "gn_trace", "sigma2": 0.01, "n_estimator_samples": 2},
    "data": {"kind": "blobs", "n": 64, "d": 2, "k": 2, "test_fraction": 0.25},
    "lr": 0.1, "epochs": 2, "batch_size": 16, "schedule": "cosine",
}


def check_reproducibility(elapsed_before: float = 0.0, budget: float = 600.0) -> CheckResult:
    """Same config and seed twice: identical artifacts (wall time aside), identical check results."""
    t0 = time.perf_counter()
    cfg = RunConfig.from_dict(REPRO_CONFIG)
    with tempfile.TemporaryDirectory() as tmp:
        outs = [train(cfg, Path(tmp) / f"r{i}").out for i in range(2)]
        same = True
        for name in ("steps.csv", "epochs.csv", "checkpoint.json"):
            same &= (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
        sums = [json.loads((o / "summary.json").read_text()) for o in outs]
        for s in sums:
            s.pop("wall_time_s")
        same &= sums[0] == sums[1]
    checks_same = all(f().detail == f().detail for f in (check_second_derivative_oracle, check_ntk_spectrum))
    total = elapsed_before + (time.perf_counter() - t0)
    ok = same and checks_same and total < budget
    return CheckResult("12", "reproducibility and runtime", ok,
                       {"train_identical": same, "checks_identical": checks_same,
                        "suite_seconds_before": elapsed_before, "budget_seconds": budget})


CHECKS = {
    "1": check_decomposition,
    "2": check_finite_differences,
    "3": check_second_derivative_oracle,
    "4": check_fisher,
    "5": check_estimators,
    "6": check_interpolation,
    "7": check_ntk_spectrum,
    "8": check_quadratic,
    "9": check_beta_gelu,
    "10": check_override_semantics,
    "11": check_smoke,
}


def run_check(cid: str, **kwargs) -> CheckResult:
    t = time.perf_counter()
    res = CHECKS[cid](**kwargs)
    res.seconds = time.perf_counter() - t
    return res


def run_all(ids=None, echo=None, quick: bool = False) -> list[CheckResult]:
    """Runs the selected checks in order; the reproducibility check runs last
    and also enforces the runtime budget on everything before it."""
    ids = list(ids) if ids else list(CHECKS) + ["12"]
    results, start = [], time.perf_counter()
    for cid in ids:
        t = time.perf_counter()
        if cid == "12":
            res = check_reproducibility(time.perf_counter() - start)
        elif cid == "11":
            res = check_smoke(quick=quick)
        else:
            res = CHECKS[cid]()
        res.seconds = time.perf_counter() - t
        results.append(res)
        if echo:
            echo(res.line())
    return results


def write_results(results: list[CheckResult], path) -> Path:
    path = Path(path)
    doc = {"schema_version": 1, "results": [asdict(r) for r in results],
           "passed": all(r.passed for r in results if r.gating)}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=cv._jsonable) + "\n")
    return path
