"""Run configuration, training driver, sweeps and curvature probes."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import curvature as cv
from .activations import ActivationSpec
from .data import SYNTHETIC_KINDS, Dataset, load_idx, make_synthetic
from .nn import LOSS_KINDS, Model, accuracy, as_targets, batch_loss, load_checkpoint, model_forward, save_checkpoint
from .regularize import Objective, RegularizerSpec, learning_rate, step
from .tape import NonFiniteError

SUMMARY_SCHEMA = 1
STEP_SCHEMA = "steps/1"
EPOCH_SCHEMA = "epochs/1"
SWEEP_SCHEMA = "sweep/1"
STEP_FIELDS = ("step", "epoch", "lr", "loss", "penalty", "grad_norm", "penalty_term_norm",
               "samples", "seed", "penalty_skipped")
EPOCH_FIELDS = ("epoch", "step", "train_loss", "train_acc", "test_loss", "test_acc")
PROBE_KINDS = ("traces", "spectra", "scan", "ntk")

DEFAULT_SYNTHETIC_WIDTHS = (2, 32, 32, 2)
DEFAULT_IDX_WIDTHS = (784, 256, 256, 10)
DEFAULT_SWEEP_RHOS = (0.0, 0.01, 0.03, 0.1)
DEFAULT_SWEEP_ACTIVATIONS = ("relu", "gelu")


@dataclass
class RunConfig:
    seed: int
    model: dict = field(default_factory=lambda: {"widths": list(DEFAULT_SYNTHETIC_WIDTHS)})
    activation: ActivationSpec = field(default_factory=ActivationSpec)
    loss: str = "cross_entropy"
    regularizer: RegularizerSpec = field(default_factory=RegularizerSpec)
    data: dict = field(default_factory=lambda: {"kind": "blobs", "n": 512, "d": 2, "k": 2,
                                                "test_fraction": 0.25})
    lr: float = 0.1
    schedule: str = "constant"
    epochs: int = 10
    batch_size: int = 32
    target_loss: float | None = None
    out: str = "runs/run"

    def __post_init__(self):
        if self.seed is None:
            raise ValueError("config needs a seed")
        self.seed = int(self.seed)
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"unknown loss {self.loss!r}; choose from {LOSS_KINDS}")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if not self.lr > 0 or self.epochs < 0 or self.batch_size < 0:
            raise ValueError("lr must be positive, epochs and batch_size nonnegative")
        if "widths" not in self.model:
            raise ValueError("model config needs widths")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "seed" not in d:
            raise ValueError("config needs a seed")
        if "activation" in d:
            d["activation"] = ActivationSpec.from_dict(d["activation"])
        if "regularizer" in d:
            d["regularizer"] = RegularizerSpec.from_dict(d["regularizer"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "model": dict(self.model), "activation": self.activation.to_dict(),
            "loss": self.loss, "regularizer": self.regularizer.to_dict(), "data": dict(self.data),
            "lr": self.lr, "schedule": self.schedule, "epochs": self.epochs,
            "batch_size": self.batch_size, "target_loss": self.target_loss, "out": self.out,
        }

    def digest(self) -> str:
        """Hash of everything that affects results (the output directory does not)."""
        d = self.to_dict()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def build_dataset(cfg: RunConfig) -> Dataset:
    spec = dict(cfg.data)
    kind = spec.pop("kind")
    if kind in SYNTHETIC_KINDS:
        seed = spec.pop("seed", cfg.seed)
        return make_synthetic(kind, spec.pop("n"), spec.pop("d"), spec.pop("k"), seed, **spec)
    if kind == "idx":
        return load_idx(spec["images"], spec["labels"], spec.get("test_images"), spec.get("test_labels"),
                        spec.get("n_classes", 10))
    raise ValueError(f"unknown data kind {kind!r}")


def build_model(cfg: RunConfig, data: Dataset | None = None) -> Model:
    m = cfg.model
    widths = tuple(m["widths"])
    if data is not None and (widths[0] != data.x.shape[1] or widths[-1] != data.y.shape[1]):
        raise ValueError(f"model widths {widths} do not match data ({data.x.shape[1]} in, {data.y.shape[1]} out)")
    return Model.init(widths, cfg.activation, seed=cfg.seed, bias=m.get("bias", False),
                      output_activation=m.get("output_activation", False), scale=m.get("init_scale", 1.0))


def step_seed(seed: int, step_index: int) -> int:
    return int(np.random.SeedSequence([seed, step_index]).generate_state(1)[0])


def _metrics(model: Model, x, y, loss: str, classification: bool):
    if len(x) == 0:
        return float("nan"), float("nan")
    return batch_loss(model, x, y, loss), (accuracy(model, x, y) if classification else float("nan"))


@dataclass
class RunResult:
    out: Path
    summary: dict
    model: Model

    @property
    def diverged(self) -> bool:
        return self.summary["status"] == "diverged"


def train(cfg: RunConfig, out=None, model: Model | None = None, data: Dataset | None = None) -> RunResult:
    """Runs the configured optimiser and writes steps.csv, epochs.csv,
    checkpoint.json and summary.json into the output directory.

    Step rows are flushed as they are produced, so a run that diverges keeps
    every row written before the failure and leaves a DIVERGED marker file.
    """
    t0 = time.perf_counter()
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "DIVERGED").unlink(missing_ok=True)
    data = data or build_dataset(cfg)
    model = model or build_model(cfg, data)
    xtr, ytr = data.train()
    xte, yte = data.test()
    n = len(xtr)
    if n == 0:
        raise ValueError("no training examples")
    bs = n if cfg.batch_size in (0, None) or cfg.batch_size >= n else cfg.batch_size
    per_epoch = math.ceil(n / bs)
    total = cfg.epochs * per_epoch
    order_rng = np.random.default_rng([cfg.seed, 1])
    status, reason, step_index, epoch = "completed", None, 0, 0
    term_norms = []
    epoch_rows = []

    with (out / "steps.csv").open("w", newline="") as fh:
        fh.write(f"# schema={STEP_SCHEMA}\n")
        writer = csv.DictWriter(fh, fieldnames=STEP_FIELDS)
        writer.writeheader()
        fh.flush()
        try:
            for epoch in range(cfg.epochs):
                perm = order_rng.permutation(n) if bs < n else np.arange(n)
                for lo in range(0, n, bs):
                    idx = perm[lo:lo + bs]
                    obj = Objective.for_model(model, xtr[idx], ytr[idx], cfg.loss)
                    lr = learning_rate(cfg.lr, step_index, total, cfg.schedule)
                    seed = step_seed(cfg.seed, step_index)
                    rep = step(cfg.regularizer, obj, lr, seed)
                    if not (math.isfinite(rep.loss) and np.all(np.isfinite(model.params))):
                        raise NonFiniteError(f"non-finite loss at step {step_index}")
                    writer.writerow({"step": step_index, "epoch": epoch, "lr": lr, "loss": rep.loss,
                                     "penalty": rep.penalty, "grad_norm": rep.grad_norm,
                                     "penalty_term_norm": rep.penalty_term_norm, "samples": rep.samples,
                                     "seed": seed, "penalty_skipped": int(rep.penalty_skipped)})
                    fh.flush()
                    term_norms.append(rep.penalty_term_norm)
                    step_index += 1
                tr_loss, tr_acc = _metrics(model, xtr, ytr, cfg.loss, data.classification)
                te_loss, te_acc = _metrics(model, xte, yte, cfg.loss, data.classification)
                epoch_rows.append({"epoch": epoch, "step": step_index, "train_loss": tr_loss, "train_acc": tr_acc,
                                   "test_loss": te_loss, "test_acc": te_acc})
                if not math.isfinite(tr_loss):
                    raise NonFiniteError(f"non-finite training loss after epoch {epoch}")
                if cfg.target_loss is not None and tr_loss < cfg.target_loss:
                    status = "target_reached"
                    break
        except (NonFiniteError, FloatingPointError) as exc:
            status, reason = "diverged", str(exc)
            (out / "DIVERGED").write_text(json.dumps({"step": step_index, "epoch": epoch, "reason": reason}) + "\n")

    cv.write_csv(out / "epochs.csv", epoch_rows, EPOCH_SCHEMA)
    if status != "diverged":
        save_checkpoint(model, out / "checkpoint.json")
    final = epoch_rows[-1] if epoch_rows else {}
    norms = np.asarray(term_norms)
    summary = {
        "schema_version": SUMMARY_SCHEMA,
        "status": status,
        "reason": reason,
        "config": cfg.to_dict(),
        "config_hash": cfg.digest(),
        "data_digest": data.digest(),
        "steps": step_index,
        "epochs_run": len(epoch_rows),
        "final_train_loss": final.get("train_loss"),
        "final_train_acc": final.get("train_acc"),
        "final_test_loss": final.get("test_loss"),
        "final_test_acc": final.get("test_acc"),
        "penalty_term_norm_mean": float(norms.mean()) if norms.size else None,
        "penalty_term_norm_var": float(norms.var()) if norms.size else None,
        "model_fingerprint": model.fingerprint() if status != "diverged" else None,
        "wall_time_s": time.perf_counter() - t0,
    }
    (out / "summary.json").write_text(json.dumps(_finite_or_none(summary), indent=2, sort_keys=True) + "\n")
    return RunResult(out, summary, model)


def _finite_or_none(o):
    if isinstance(o, float) and not math.isfinite(o):
        return None
    if isinstance(o, dict):
        return {k: _finite_or_none(v) for k, v in o.items()}
    if isinstance(o, list):
        return [_finite_or_none(v) for v in o]
    return o


def parse_activation(text) -> ActivationSpec:
    """'gelu', 'beta_gelu:16' or an ActivationSpec."""
    if isinstance(text, ActivationSpec):
        return text
    kind, _, beta = str(text).partition(":")
    return ActivationSpec(kind, float(beta) if beta else 1.0)


def _run_cell(args):
    cfg, out = args
    return train(cfg, out).summary


def sweep(base: RunConfig, rhos=DEFAULT_SWEEP_RHOS, activations=DEFAULT_SWEEP_ACTIVATIONS, out=None,
          workers: int = 1) -> list[dict]:
    """Trains every (rho, activation) cell and writes one summary row per cell to sweep.csv.

    ``rho`` goes into the base regularizer (``sigma2`` for the noise and trace
    penalties). Cells run in separate processes when ``workers > 1``.
    """
    out = Path(out or base.out)
    out.mkdir(parents=True, exist_ok=True)
    strength = "sigma2" if base.regularizer.kind in ("weight_noise", "hessian_trace", "gn_trace") else "rho"
    jobs, cells = [], []
    for act in activations:
        spec = parse_activation(act)
        for rho in rhos:
            name = f"{spec.kind}_b{spec.beta:g}_{strength}{rho:g}"
            cfg = replace(base, activation=spec, regularizer=replace(base.regularizer, **{strength: float(rho)}),
                          out=str(out / name))
            jobs.append((cfg, out / name))
            cells.append((name, spec, rho))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            summaries = list(pool.map(_run_cell, jobs))
    else:
        summaries = [_run_cell(j) for j in jobs]
    rows = []
    for (name, spec, rho), s in zip(cells, summaries):
        rows.append({"cell": name, "activation": spec.kind, "beta": spec.beta, strength: rho,
                     "kind": base.regularizer.kind, "status": s["status"],
                     "final_train_loss": s["final_train_loss"], "final_train_acc": s["final_train_acc"],
                     "final_test_loss": s["final_test_loss"], "final_test_acc": s["final_test_acc"],
                     "penalty_term_norm_mean": s["penalty_term_norm_mean"],
                     "penalty_term_norm_var": s["penalty_term_norm_var"], "config_hash": s["config_hash"]})
    cv.write_csv(out / "sweep.csv", rows, SWEEP_SCHEMA)
    return rows


# ---------------------------------------------------------------------------
# probes


def probe(model: Model, x, y, loss: str, kind: str, out, n_samples: int = 1000, seed: int = 0,
          cap: int = cv.DENSE_CAP, **options) -> tuple[Path, Path]:
    """Runs one curvature probe and writes ``<kind>.csv`` and ``<kind>.json`` into ``out``."""
    if kind not in PROBE_KINDS:
        raise ValueError(f"unknown probe {kind!r}; choose from {PROBE_KINDS}")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    meta = {"model": model.fingerprint(), "loss": loss, "n_points": int(x.shape[0]),
            "n_params": model.n_params, "activation": model.activation.to_dict()}
    if kind == "scan":
        a = options.get("index_a", model.weight_slice(model.depth - 1).start)
        b = options.get("index_b", a + 1)
        grid = cv.nme_scan(model, x, y, loss, a, b, options.get("span", (-3.0, 3.0)),
                           options.get("resolution", 41))
        grid.meta.update(meta)
        return grid.write(out, options.get("stem", "scan"))
    if kind == "ntk":
        k = cv.ntk(model, x)
        z, _, _ = model_forward(model, x)
        yt = as_targets(loss, y, model.widths[-1])
        hz = cv.output_hessian(loss, z, yt)
        kern = np.linalg.eigvals(k.matrix @ hz)
        rows = [{"index": i, "ntk_eigenvalue": float(e), "ntk_hz_eigenvalue": float(np.real(h))}
                for i, (e, h) in enumerate(zip(k.eigenvalues(), np.sort(np.real(kern))))]
        meta.update(is_psd=k.is_psd(), size=k.matrix.shape[0])
        return cv.CurvatureReport("ntk", rows, meta).write(out)
    ops = {kd: cv.CurvatureOperator(kd, model, x, y, loss) for kd in cv.OPERATOR_KINDS}
    rows = []
    if kind == "traces":
        for kd, op in ops.items():
            rows.append(dict(cv.hutchinson_trace(op, n_samples, seed).to_row(), operator=kd))
        if loss == "cross_entropy":
            rows.append(dict(cv.gn_trace_sampled(model, x, n_samples, seed).to_row(), operator="gauss_newton"))
        if model.n_params <= cap:
            for kd, op in ops.items():
                rows.append({"method": "dense", "estimate": float(np.trace(cv.full_matrix(op, cap))),
                             "stderr": 0.0, "n_samples": 0, "seed": seed, "operator": kd})
        meta.update(n_samples=n_samples, seed=seed)
    else:
        for kd, op in ops.items():
            eig = np.linalg.eigvalsh(cv.full_matrix(op, cap))
            rows.extend({"operator": kd, "index": i, "eigenvalue": float(e)} for i, e in enumerate(eig))
    return cv.CurvatureReport(kind, rows, meta).write(out)


def probe_checkpoint(checkpoint, cfg: RunConfig, kind: str, out, n_points: int = 16, **options):
    """Loads a checkpoint, takes the first ``n_points`` training examples of the config's data and probes."""
    model = load_checkpoint(checkpoint)
    x, y = build_dataset(cfg).train()
    return probe(model, x[:n_points], y[:n_points], cfg.loss, kind, out, **options)
