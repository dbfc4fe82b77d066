"""Hessian structure: Gauss-Newton / NME products, traces, NTK and scans.

For a batch-mean loss ``L = mean_b l(z_b, y_b)`` the Hessian splits as

    H = GN + NME,   GN = J^T H_z J,   NME = sum_b grad_z L_b . d^2 z_b / d theta^2

where ``H_z`` is block diagonal in the per-sample output Hessians (each scaled
by 1/B). All operators accept a single direction ``v`` of shape (P,) or a
stack ``V`` of shape (K, P) and return the same shape.

Randomised estimators draw sample ``i`` from a Philox generator keyed by
``(seed, i)`` so results do not depend on chunking or evaluation order.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .nn import Model, as_targets, loss_eval, loss_fn, model_forward, record_forward, softmax
from .tape import Dual, OverrideRegistry, Var, hvp

DENSE_CAP = 2000
OPERATOR_KINDS = ("hessian", "gauss_newton", "nme")
REPORT_SCHEMA = "nmelab-curvature/1"


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based generator for estimator sample ``index``."""
    return np.random.Generator(np.random.Philox(key=[int(seed), int(index)]))


@dataclass
class CurvatureOperator:
    """A curvature matrix of a batch loss at a frozen parameter snapshot."""

    kind: str
    model: Model | None = None
    x: np.ndarray | None = None
    y: np.ndarray | None = None
    loss: str = "mse"
    params: np.ndarray | None = None
    registry: OverrideRegistry | None = None
    fn: object = None  # scalar loss closure, for operators not built from a model

    def __post_init__(self):
        if self.kind not in OPERATOR_KINDS:
            raise ValueError(f"unknown operator kind {self.kind!r}; choose from {OPERATOR_KINDS}")
        if self.fn is None:
            if self.model is None:
                raise ValueError("operator needs either a model and batch or a loss closure")
            self.x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
            self.y = as_targets(self.loss, self.y, self.model.widths[-1])
            self.fn = loss_fn(self.model, self.x, self.y, self.loss)
        elif self.kind != "hessian":
            raise ValueError("GN and NME operators need a model; closures only support 'hessian'")
        src = self.params if self.params is not None else self.model.params
        self.params = np.array(src, dtype=np.float64)

    @classmethod
    def from_loss(cls, fn, params, registry=None) -> "CurvatureOperator":
        return cls("hessian", params=np.asarray(params, dtype=np.float64), registry=registry, fn=fn)

    def with_kind(self, kind: str) -> "CurvatureOperator":
        return CurvatureOperator(kind, self.model, self.x, self.y, self.loss, self.params, self.registry)

    @property
    def n_params(self) -> int:
        return self.params.shape[0]

    def apply(self, v) -> np.ndarray:
        v = self._check(v)
        if self.kind == "hessian":
            return hvp(self.fn, self.params, v, self.registry)
        if self.kind == "gauss_newton":
            return gnvp(self, v)
        return nmevp(self, v)

    __matmul__ = apply

    def _check(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape[-1:] != (self.n_params,) or v.ndim > 2:
            raise ValueError(f"direction has shape {v.shape}; expected ({self.n_params},) or (K, {self.n_params})")
        return v

    def output_grad(self, z) -> np.ndarray:
        """grad_z of the batch-mean loss."""
        _, g, _ = loss_eval(self.loss, z, self.y)
        return g / z.shape[0]

    def output_hvp(self, z, u) -> np.ndarray:
        """H_z applied to output tangents ``u`` (shape (..., B, k)), batch-mean scaled."""
        n = z.shape[0]
        if self.loss == "mse":
            return u / n
        p = softmax(z)
        return p * (u - np.sum(p * u, axis=-1, keepdims=True)) / n


def _require_model(op: CurvatureOperator):
    if op.model is None:
        raise ValueError(f"{op.kind} products need a model-backed operator")


def gnvp(op: CurvatureOperator, v) -> np.ndarray:
    """J^T H_z J v from one JVP, an output-space contraction and one VJP."""
    _require_model(op)
    v = op._check(v)
    z, tape = record_forward(op.model, op.x, op.params, v, op.registry)
    jv = z.tangent if z.tangent is not None else np.zeros(v.shape[:-1] + z.shape)
    u = op.output_hvp(z.value, jv)
    # second pass without tangents; the batched cotangent rides the tangent channel
    plain = tape.replay({0: Dual(op.params)})
    out = plain.backward(Var(plain, z.index), Dual(np.zeros(z.shape), u)).get(0)
    if out is None or out.t is None:
        return np.zeros(v.shape)
    return out.t.reshape(v.shape)


def nmevp(op: CurvatureOperator, v, method: str = "difference") -> np.ndarray:
    """NME v, either as H v - GN v or by contracting grad_z L into d^2 z."""
    _require_model(op)
    v = op._check(v)
    if method == "difference":
        return hvp(op.fn, op.params, v, op.registry) - gnvp(op, v)
    if method != "direct":
        raise ValueError(f"method must be 'difference' or 'direct', got {method!r}")
    z, tape = record_forward(op.model, op.x, op.params, v, op.registry)
    g = tape.backward(z, Dual(op.output_grad(z.value))).get(0)
    if g is None or g.t is None:
        return np.zeros(v.shape)
    return np.broadcast_to(g.t, v.shape).copy()


def full_matrix(op: CurvatureOperator, cap: int = DENSE_CAP, chunk: int = 512) -> np.ndarray:
    """Dense matrix with column i = apply(e_i)."""
    n = op.n_params
    if n > cap:
        raise ValueError(f"dense extraction of {n} parameters exceeds the cap of {cap}")
    cols = []
    eye = np.eye(n)
    for lo in range(0, n, chunk):
        cols.append(op.apply(eye[lo:lo + chunk]))
    # rows of the stacked result are apply(e_i), i.e. columns of the matrix
    return np.concatenate(cols, axis=0).T.copy()


# ---------------------------------------------------------------------------
# trace estimators


@dataclass
class TraceEstimate:
    estimate: float
    stderr: float
    n_samples: int
    seed: int
    method: str
    samples: np.ndarray = field(repr=False, default=None)

    def to_row(self) -> dict:
        return {"method": self.method, "estimate": self.estimate, "stderr": self.stderr,
                "n_samples": self.n_samples, "seed": self.seed}


def _summarise(values: np.ndarray, seed: int, method: str) -> TraceEstimate:
    n = len(values)
    stderr = float(np.std(values, ddof=1) / math.sqrt(n)) if n > 1 else float("nan")
    return TraceEstimate(float(np.mean(values)), stderr, n, int(seed), method, values)


def hutchinson_trace(op: CurvatureOperator, n_samples: int, seed: int = 0, chunk: int = 256) -> TraceEstimate:
    """Mean of eps^T A eps over standard normal probes."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    vals = np.empty(n_samples)
    for lo in range(0, n_samples, chunk):
        idx = range(lo, min(lo + chunk, n_samples))
        eps = np.stack([sample_rng(seed, i).standard_normal(op.n_params) for i in idx])
        vals[lo:lo + len(eps)] = np.einsum("kp,kp->k", eps, op.apply(eps))
    return _summarise(vals, seed, "hutchinson")


def sample_categorical(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    """One class index per row of ``probs`` by inverting the CDF."""
    u = rng.random(probs.shape[0])
    cdf = np.cumsum(probs, axis=1)
    return np.minimum((cdf < u[:, None]).sum(axis=1), probs.shape[1] - 1)


def sampled_label_grads(model: Model, x, n_samples: int, seed: int, params=None, registry=None, chunk: int = 256):
    """Batch-mean CE gradients at labels drawn from the model's own softmax.

    Returns ``(grads (n, P), labels (n, B))``. Labels are treated as constants.
    """
    params = model.params if params is None else np.asarray(params, dtype=np.float64)
    z, tape = record_forward(model, x, params, None, registry)
    p = softmax(z.value)
    b, k = p.shape
    labels = np.stack([sample_categorical(sample_rng(seed, i), p) for i in range(n_samples)])
    grads = np.empty((n_samples, params.shape[0]))
    for lo in range(0, n_samples, chunk):
        lab = labels[lo:lo + chunk]
        resid = (p[None] - np.eye(k)[lab]) / b
        out = tape.backward(z, Dual(np.zeros(z.shape), resid)).get(0)
        grads[lo:lo + len(lab)] = out.t
    return grads, labels


def gn_trace_sampled(model: Model, x, n_samples: int, seed: int = 0, loss: str = "cross_entropy",
                     registry=None) -> TraceEstimate:
    """tr(GN) for cross-entropy as B * E ||grad L(theta, y_hat)||^2 with y_hat ~ Cat(softmax z).

    The cross terms between batch points vanish in expectation, so scaling the
    squared norm of the batch-mean gradient by B gives the batch-mean GN trace.
    """
    if loss != "cross_entropy":
        raise ValueError(f"the sampled-label GN trace estimator needs cross_entropy, got {loss!r}")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    grads, _ = sampled_label_grads(model, x, n_samples, seed, registry=registry)
    return _summarise(x.shape[0] * np.sum(grads * grads, axis=1), seed, "gn_sampled_labels")


@dataclass
class FisherReport:
    n_samples: int
    seed: int
    gn: np.ndarray
    mean_hessian: np.ndarray
    stderr: np.ndarray
    max_abs_deviation: float
    max_deviation_in_stderr: float
    single_sample_nme_norm: float
    within_tolerance: bool
    tolerance_stderr: float

    def summary(self) -> dict:
        return {
            "n_samples": self.n_samples, "seed": self.seed,
            "max_abs_deviation": self.max_abs_deviation,
            "max_deviation_in_stderr": self.max_deviation_in_stderr,
            "single_sample_nme_norm": self.single_sample_nme_norm,
            "within_tolerance": self.within_tolerance,
        }


def fisher_check(model: Model, x, n_samples: int, seed: int = 0, loss: str = "mse",
                 n_stderr: float = 4.0, cap: int = DENSE_CAP, registry=None) -> FisherReport:
    """Averages full Hessians at labels y_hat ~ N(z, I) and compares with GN.

    Entries whose Monte-Carlo standard error is at rounding level are held to
    an absolute floor of 1e-12 times the largest GN entry.
    """
    if loss != "mse":
        raise ValueError("fisher_check samples Gaussian labels and needs the mse loss")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    z, _, _ = model_forward(model, x)
    gn = full_matrix(CurvatureOperator("gauss_newton", model, x, z, loss, registry=registry), cap)
    total = np.zeros_like(gn)
    total_sq = np.zeros_like(gn)
    first_nme = float("nan")
    for i in range(n_samples):
        y_hat = z + sample_rng(seed, i).standard_normal(z.shape)
        h = full_matrix(CurvatureOperator("hessian", model, x, y_hat, loss, registry=registry), cap)
        if i == 0:
            first_nme = float(np.linalg.norm(h - gn))
        total += h
        total_sq += h * h
    mean = total / n_samples
    if n_samples > 1:
        var = np.maximum(total_sq / n_samples - mean * mean, 0.0) * n_samples / (n_samples - 1)
        stderr = np.sqrt(var / n_samples)
    else:
        stderr = np.full_like(mean, np.nan)
    dev = np.abs(mean - gn)
    floor = 1e-12 * max(1.0, float(np.abs(gn).max()))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(stderr > floor, dev / stderr, np.where(dev > floor, np.inf, 0.0))
    ok = bool(n_samples > 1 and np.all(dev <= n_stderr * stderr + floor))
    return FisherReport(n_samples, seed, gn, mean, stderr, float(dev.max()),
                        float(np.nanmax(ratio)) if n_samples > 1 else float("nan"),
                        first_nme, ok, n_stderr)


# ---------------------------------------------------------------------------
# model second derivative


def second_derivative_ad(model: Model, x, u, v, registry=None) -> np.ndarray:
    """u^T (d^2 z_bj / d theta^2) v for every sample b and output j, via the tape."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    u = np.asarray(u, dtype=np.float64)
    out = np.zeros((x.shape[0], model.widths[-1]))
    for b in range(x.shape[0]):
        z, tape = record_forward(model, x[b:b + 1], None, v, registry)
        for j in range(z.shape[1]):
            seed = np.zeros(z.shape)
            seed[0, j] = 1.0
            g = tape.backward(z, Dual(seed)).get(0)
            out[b, j] = 0.0 if g is None or g.t is None else float(u @ g.t)
    return out


def _layer_terms(model: Model, xv: np.ndarray):
    fn = model.activation.elementwise()
    ws = [w for w, _ in model.weights()]
    hs, xs = [], [xv]
    d1s, d2s = [], []
    cur = xv
    for n, w in enumerate(ws):
        h = w @ cur
        hs.append(h)
        act = n < model.depth - 1 or model.output_activation
        d1s.append(fn.d1(h) if act else np.ones_like(h))
        d2s.append(fn.d2(h) if act else np.zeros_like(h))
        cur = fn.f(h) if act else h
        xs.append(cur)
    return ws, xs, d1s, d2s


def analytic_second_derivative(model: Model, x, l: int, m: int, A, B) -> np.ndarray:
    """Closed-form d^2 z / dW_l dW_m contracted with (A, B), for l <= m.

    Built from explicit partial Jacobians of a bias-free network. With
    ``P_o = dz/dx_{o+1}``, ``M_{o,n} = dh_o/dh_n`` and activation derivative
    vectors ``phi'_o``, ``phi''_o``:

        sum_{o=m}^{L-1} P_o [phi''_o * (M_{o,l} A x_l) * (M_{o,m} B x_m)]
        + [m > l] P_m diag(phi'_m) B diag(phi'_{m-1}) M_{m-1,l} A x_l

    On the diagonal (m == l) only the phi'' sum survives.
    """
    if model.bias:
        raise ValueError("the closed-form second derivative covers bias-free networks only")
    if not 0 <= l <= m < model.depth:
        raise ValueError(f"need 0 <= l <= m < depth={model.depth}, got l={l}, m={m}")
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    shapes = [w.shape for w, _ in model.weights()]
    if A.shape != shapes[l] or B.shape != shapes[m]:
        raise ValueError(f"A must have shape {shapes[l]} and B {shapes[m]}, got {A.shape} and {B.shape}")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    L = model.depth
    out = np.zeros((x.shape[0], model.widths[-1]))
    for b in range(x.shape[0]):
        ws, xs, d1s, d2s = _layer_terms(model, x[b])

        def P(o):  # dz/dx_{o+1}
            acc = np.eye(model.widths[-1])
            for n in range(L - 1, o, -1):
                acc = acc @ (d1s[n][:, None] * ws[n])
            return acc

        def M(o, n):  # dh_o/dh_n
            acc = np.eye(ws[n].shape[0])
            for q in range(n + 1, o + 1):
                acc = (ws[q] * d1s[q - 1][None, :]) @ acc
            return acc

        da = A @ xs[l]  # first variation of h_l along A
        db = B @ xs[m]  # first variation of h_m along B
        total = np.zeros(model.widths[-1])
        for o in range(m, L):
            total += P(o) @ (d2s[o] * (M(o, l) @ da) * (M(o, m) @ db))
        if m > l:
            dx_m = d1s[m - 1] * (M(m - 1, l) @ da)
            total += P(m) @ (d1s[m] * (B @ dx_m))
        out[b] = total
    return out


# ---------------------------------------------------------------------------
# NTK


def jacobian(model: Model, x, registry=None) -> np.ndarray:
    """Rows indexed by (datapoint, output) in datapoint-major order."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = model.n_params
    z, _ = record_forward(model, x, None, np.eye(n), registry)
    t = z.tangent  # (P, B, k)
    return t.reshape(n, -1).T.copy()


def output_hessian(loss: str, z, y) -> np.ndarray:
    """Block-diagonal per-sample output Hessian, (B k) x (B k)."""
    _, _, hz = loss_eval(loss, z, y)
    b, k, _ = hz.shape
    out = np.zeros((b * k, b * k))
    for i in range(b):
        out[i * k:(i + 1) * k, i * k:(i + 1) * k] = hz[i]
    return out


@dataclass
class NTKMatrix:
    matrix: np.ndarray
    n_points: int
    n_outputs: int

    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.matrix)

    def is_psd(self, tol: float = 1e-10) -> bool:
        sym = np.abs(self.matrix - self.matrix.T).max() <= tol * max(1.0, np.abs(self.matrix).max())
        return bool(sym and self.eigenvalues().min() >= -tol * max(1.0, np.abs(self.matrix).max()))


def ntk(model: Model, x, registry=None) -> NTKMatrix:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[0] == 0:
        raise ValueError("ntk needs a nonempty batch")
    j = jacobian(model, x, registry)
    return NTKMatrix(j @ j.T / x.shape[0], x.shape[0], model.widths[-1])


def nonzero_spectrum(eigs, rel_tol: float = 1e-9) -> np.ndarray:
    eigs = np.sort(np.real_if_close(np.asarray(eigs)).real)
    scale = np.abs(eigs).max() if eigs.size else 0.0
    return eigs[np.abs(eigs) > rel_tol * scale]


# ---------------------------------------------------------------------------
# NME landscape scan


@dataclass
class ScanGrid:
    index_a: int
    index_b: int
    values_a: np.ndarray
    values_b: np.ndarray
    loss: np.ndarray  # (len(values_a), len(values_b))
    nme_norm: np.ndarray
    meta: dict = field(default_factory=dict)

    def census(self, threshold: float = 1e-3) -> float:
        """Fraction of cells whose NME block norm exceeds ``threshold``."""
        return float(np.mean(self.nme_norm > threshold))

    def rows(self):
        for i, a in enumerate(self.values_a):
            for j, b in enumerate(self.values_b):
                yield {"i": i, "j": j, "theta_a": float(a), "theta_b": float(b),
                       "loss": float(self.loss[i, j]), "nme_norm": float(self.nme_norm[i, j])}

    def write(self, out_dir, stem: str = "scan") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / f"{stem}.csv"
        write_csv(csv_path, list(self.rows()), schema="scan/1")
        meta = dict(self.meta, schema=REPORT_SCHEMA, index_a=self.index_a, index_b=self.index_b,
                    resolution=[len(self.values_a), len(self.values_b)], census=self.census())
        json_path = out_dir / f"{stem}.json"
        json_path.write_text(json.dumps(meta, indent=2, sort_keys=True))
        return csv_path, json_path


def nme_scan(model: Model, x, y, loss: str, index_a: int, index_b: int,
             span=(-3.0, 3.0), resolution: int = 41, registry=None) -> ScanGrid:
    """Loss and 2x2 NME-block Frobenius norm over a grid of two same-matrix weights.

    The NME block uses the direct contraction, so activations whose AD second
    derivative is 0 give exact zeros.
    """
    la, ka = model.param_layer(index_a)
    lb, kb = model.param_layer(index_b)
    if (la, ka) != (lb, kb) or ka != "W":
        raise ValueError(
            f"scan parameters must lie in one weight matrix; got {index_a} in {ka}_{la} and {index_b} in {kb}_{lb}"
        )
    if index_a == index_b:
        raise ValueError("scan needs two distinct parameters")
    if resolution < 1:
        raise ValueError("resolution must be >= 1")
    lo, hi = float(span[0]), float(span[1])
    va = np.linspace(lo, hi, resolution)
    vb = va.copy()
    basis = np.zeros((2, model.n_params))
    basis[0, index_a] = basis[1, index_b] = 1.0
    losses = np.zeros((resolution, resolution))
    norms = np.zeros((resolution, resolution))
    params = model.params.copy()
    for i, a in enumerate(va):
        for j, b in enumerate(vb):
            params[index_a], params[index_b] = a, b
            op = CurvatureOperator("nme", model, x, y, loss, params, registry)
            cols = nmevp(op, basis, method="direct")
            block = cols[:, [index_a, index_b]]
            norms[i, j] = np.linalg.norm(block)
            z, _, _ = model_forward(model, op.x, params)
            losses[i, j] = float(np.mean(loss_eval(loss, z, op.y)[0]))
    meta = {"loss": loss, "activation": model.activation.to_dict(), "model": model.fingerprint(),
            "span": [lo, hi], "norm": "frobenius"}
    return ScanGrid(index_a, index_b, va, vb, losses, norms, meta)


# ---------------------------------------------------------------------------
# serialisation


def write_csv(path, rows: list[dict], schema: str) -> Path:
    """CSV with a leading ``# schema=...`` comment line."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        fh.write(f"# schema={schema}\n")
        if rows:
            w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            w.writeheader()
            w.writerows(rows)
    return path


def read_csv(path) -> list[dict]:
    with Path(path).open() as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


@dataclass
class CurvatureReport:
    probe: str
    rows: list[dict]
    meta: dict

    def write(self, out_dir, stem: str | None = None) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        stem = stem or self.probe
        csv_path = write_csv(out_dir / f"{stem}.csv", self.rows, schema=f"{self.probe}/1")
        json_path = out_dir / f"{stem}.json"
        json_path.write_text(json.dumps(dict(self.meta, schema=REPORT_SCHEMA, probe=self.probe),
                                        indent=2, sort_keys=True, default=_jsonable))
        return csv_path, json_path


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    raise TypeError(f"not JSON serialisable: {type(o)}")
