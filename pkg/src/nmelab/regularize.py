"""Training-step rules with and without curvature regularisation.

Every step takes an :class:`Objective` (a scalar loss closure over the flat
parameter vector, optionally backed by a model and batch), updates its
parameters in place and returns a :class:`StepReport`.

Gradient penalty ``rho * ||g||^p`` steps use the Hessian-gradient product
from the tape, so they honour activation derivative overrides. With
``p = 2`` the exact gradient of the penalty is ``2 rho H g``; on a quadratic
that gives a per-mode factor ``1 - lr (lam + 2 rho lam^2)``, i.e. it matches
unnormalised SAM with radius ``2 rho``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .curvature import CurvatureOperator, nmevp, sample_categorical, sample_rng
from .nn import Model, as_targets, loss_fn, model_forward, softmax
from .tape import NonFiniteError, OverrideRegistry, hvp, value_and_grad

KINDS = ("none", "grad_penalty_p1", "grad_penalty_p2", "weight_noise", "hessian_trace",
         "gn_trace", "sam", "usam")


class Objective:
    """A scalar loss over a flat parameter vector, with evaluation counters."""

    def __init__(self, fn, params=None, registry: OverrideRegistry | None = None,
                 model: Model | None = None, x=None, y=None, loss: str | None = None):
        self.fn = fn
        self.registry = registry
        self.model, self.x, self.y, self.loss = model, x, y, loss
        if model is None:
            self._params = np.array(params, dtype=np.float64)
        elif params is not None:
            model.params = np.array(params, dtype=np.float64)
        self.n_grad_evals = 0
        self.n_hvp_evals = 0

    @classmethod
    def for_model(cls, model: Model, x, y, loss: str, registry=None) -> "Objective":
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        y = as_targets(loss, y, model.widths[-1])
        return cls(loss_fn(model, x, y, loss), None, registry, model, x, y, loss)

    @property
    def params(self) -> np.ndarray:
        return self.model.params if self.model is not None else self._params

    @params.setter
    def params(self, value):
        value = np.asarray(value, dtype=np.float64)
        if self.model is not None:
            self.model.params = value
        else:
            self._params = value

    def value_and_grad(self, params=None):
        self.n_grad_evals += 1
        return value_and_grad(self.fn, self.params if params is None else params, self.registry)

    def hvp(self, v, params=None, fn=None):
        """Returns (H v, gradient) at ``params``."""
        self.n_hvp_evals += 1
        return hvp(fn or self.fn, self.params if params is None else params, v, self.registry,
                   return_grad=True)


@dataclass(frozen=True)
class RegularizerSpec:
    kind: str = "none"
    rho: float = 0.0
    sigma2: float = 0.0
    n_estimator_samples: int = 1
    grad_norm_epsilon: float = 1e-12
    straight_through: bool = False
    fd_step: float = 1e-4

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown regularizer {self.kind!r}; choose from {KINDS}")
        if self.rho < 0 or self.sigma2 < 0:
            raise ValueError("rho and sigma2 must be nonnegative")
        if self.n_estimator_samples < 1:
            raise ValueError("n_estimator_samples must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "RegularizerSpec":
        return cls(**d)


@dataclass
class StepReport:
    kind: str
    loss: float
    penalty: float
    grad_norm: float
    lr: float
    seed: int | None = None
    samples: int = 0
    penalty_skipped: bool = False
    penalty_term_norm: float = 0.0
    extra: dict = field(default_factory=dict)

    def row(self) -> dict:
        return {"kind": self.kind, "loss": self.loss, "penalty": self.penalty,
                "grad_norm": self.grad_norm, "penalty_term_norm": self.penalty_term_norm,
                "samples": self.samples, "seed": -1 if self.seed is None else self.seed,
                "penalty_skipped": int(self.penalty_skipped)}


def _apply(obj: Objective, lr: float, direction: np.ndarray) -> None:
    if not np.all(np.isfinite(direction)):
        raise NonFiniteError("non-finite update direction; step aborted")
    obj.params = obj.params - lr * direction


def _check_lr(lr):
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")


def sgd_step(obj: Objective, lr: float) -> StepReport:
    _check_lr(lr)
    loss, g = obj.value_and_grad()
    _apply(obj, lr, g)
    return StepReport("none", loss, 0.0, float(np.linalg.norm(g)), lr)


def grad_penalty_step(obj: Objective, lr: float, rho: float, p: int, eps: float = 1e-12) -> StepReport:
    """Descends L + rho ||grad L||^p using one Hessian-gradient product."""
    _check_lr(lr)
    if p not in (1, 2):
        raise ValueError(f"gradient penalty power must be 1 or 2, got {p}")
    loss, g = obj.value_and_grad()
    gnorm = float(np.linalg.norm(g))
    kind = f"grad_penalty_p{p}"
    if rho == 0:
        _apply(obj, lr, g)
        return StepReport(kind, loss, 0.0, gnorm, lr)
    if p == 1 and gnorm < eps:
        _apply(obj, lr, g)
        return StepReport(kind, loss, rho * gnorm, gnorm, lr, penalty_skipped=True)
    hg, _ = obj.hvp(g)
    term = rho * hg / gnorm if p == 1 else 2.0 * rho * hg
    _apply(obj, lr, g + term)
    return StepReport(kind, loss, rho * gnorm ** p, gnorm, lr,
                      penalty_term_norm=float(np.linalg.norm(term)))


def psam_step(obj: Objective, lr: float, rho: float, eps: float = 1e-12) -> StepReport:
    return grad_penalty_step(obj, lr, rho, 1, eps)


def pusam_step(obj: Objective, lr: float, rho: float) -> StepReport:
    return grad_penalty_step(obj, lr, rho, 2)


def weight_noise_step(obj: Objective, lr: float, sigma2: float, seed: int,
                      diagnostics: bool = True) -> StepReport:
    """Gradient at theta + eps, eps ~ N(0, sigma2 I), applied at theta.

    The reported penalty is sigma2 * xi^T H xi for the same standard normal
    draw xi = eps / sigma, a one-sample Hutchinson estimate of sigma2 tr(H).
    """
    _check_lr(lr)
    if sigma2 < 0:
        raise ValueError("sigma2 must be nonnegative")
    xi = sample_rng(seed, 0).standard_normal(obj.params.shape)
    eps = math.sqrt(sigma2) * xi
    base, g0 = obj.value_and_grad()
    _, g = obj.value_and_grad(obj.params + eps) if sigma2 > 0 else (base, g0)
    penalty = 0.0
    if diagnostics and sigma2 > 0:
        hxi, _ = obj.hvp(xi)
        penalty = sigma2 * float(xi @ hxi)
    _apply(obj, lr, g)
    return StepReport("weight_noise", base, penalty, float(np.linalg.norm(g0)), lr, seed, 1,
                      penalty_term_norm=float(np.linalg.norm(g - g0)))


def hessian_trace_penalty_step(obj: Objective, lr: float, sigma2: float, n_samples: int = 1,
                               seed: int = 0, fd_step: float = 1e-4) -> StepReport:
    """Descends L + sigma2 * mean_i xi_i^T H xi_i with fixed probes xi_i ~ N(0, I).

    The gradient of xi^T H(theta) xi is the third derivative contracted twice
    with xi, which equals the directional derivative of H(theta) xi along xi.
    It is taken as a central difference of two Hessian-vector products at
    theta +/- fd_step * xi/|xi|; the mean of the same two products gives the
    penalty value. Both are exact when the loss is cubic.
    """
    _check_lr(lr)
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    loss, g = obj.value_and_grad()
    if sigma2 == 0:
        _apply(obj, lr, g)
        return StepReport("hessian_trace", loss, 0.0, float(np.linalg.norm(g)), lr, seed, 0)
    theta = obj.params
    values, grads = [], []
    for i in range(n_samples):
        xi = sample_rng(seed, i).standard_normal(theta.shape)
        scale = float(np.linalg.norm(xi))
        if scale == 0:
            values.append(0.0)
            grads.append(np.zeros_like(theta))
            continue
        shift = fd_step * xi / scale
        hp, _ = obj.hvp(xi, theta + shift)
        hm, _ = obj.hvp(xi, theta - shift)
        values.append(0.5 * float(xi @ (hp + hm)))
        grads.append((hp - hm) * (scale / (2.0 * fd_step)))
    term = sigma2 * np.mean(grads, axis=0)
    _apply(obj, lr, g + term)
    return StepReport("hessian_trace", loss, sigma2 * float(np.mean(values)), float(np.linalg.norm(g)),
                      lr, seed, n_samples, penalty_term_norm=float(np.linalg.norm(term)),
                      extra={"trace_samples": values})


def gn_trace_penalty_step(obj: Objective, lr: float, sigma2: float, n_samples: int = 1, seed: int = 0,
                          straight_through: bool = False) -> StepReport:
    """Descends L + sigma2 * B ||grad L(theta, y_hat)||^2 with y_hat ~ Cat(softmax z).

    Labels are resampled every step and no gradient flows through the
    sampling. Without ``straight_through`` the penalty is differentiated
    exactly at the fixed labels, giving ``2 B H(y_hat) g``. With it, the
    residual ``p - onehot(y_hat)`` is held constant (the straight-through
    estimator cancels its dependence on the logits), leaving only the NME
    part ``2 B NME(y_hat) g``. Both have the same expectation because the
    sampled-label gradient has mean zero.
    """
    _check_lr(lr)
    if obj.model is None or obj.loss != "cross_entropy":
        raise ValueError("the GN trace penalty needs a model-backed cross_entropy objective")
    loss, g = obj.value_and_grad()
    if sigma2 == 0:
        _apply(obj, lr, g)
        return StepReport("gn_trace", loss, 0.0, float(np.linalg.norm(g)), lr, seed, 0)
    model, x = obj.model, obj.x
    b, k = x.shape[0], model.widths[-1]
    z, _, _ = model_forward(model, x)
    probs = softmax(z)
    values, grads = [], []
    for i in range(n_samples):
        y_hat = np.eye(k)[sample_categorical(sample_rng(seed, i), probs)]
        fn = loss_fn(model, x, y_hat, "cross_entropy")
        obj.n_grad_evals += 1
        _, gs = value_and_grad(fn, obj.params, obj.registry)
        values.append(b * float(gs @ gs))
        if straight_through:
            op = CurvatureOperator("nme", model, x, y_hat, "cross_entropy", obj.params, obj.registry)
            obj.n_hvp_evals += 1
            hg = nmevp(op, gs, method="direct")
        else:
            hg, _ = obj.hvp(gs, fn=fn)
        grads.append(2.0 * b * hg)
    term = sigma2 * np.mean(grads, axis=0)
    _apply(obj, lr, g + term)
    return StepReport("gn_trace", loss, sigma2 * float(np.mean(values)), float(np.linalg.norm(g)), lr,
                      seed, n_samples, penalty_term_norm=float(np.linalg.norm(term)),
                      extra={"trace_samples": values})


def sam_step(obj: Objective, lr: float, rho: float, normalized: bool = True, eps: float = 1e-12) -> StepReport:
    """Gradient at theta + rho g/|g| (SAM) or theta + rho g (USAM), applied at theta."""
    _check_lr(lr)
    if rho < 0:
        raise ValueError("rho must be nonnegative")
    kind = "sam" if normalized else "usam"
    loss, g = obj.value_and_grad()
    gnorm = float(np.linalg.norm(g))
    if rho == 0:
        _apply(obj, lr, g)
        return StepReport(kind, loss, 0.0, gnorm, lr)
    if normalized and gnorm < eps:
        _apply(obj, lr, g)
        return StepReport(kind, loss, 0.0, gnorm, lr, penalty_skipped=True)
    shift = rho * g / gnorm if normalized else rho * g
    perturbed_loss, gp = obj.value_and_grad(obj.params + shift)
    _apply(obj, lr, gp)
    return StepReport(kind, loss, perturbed_loss - loss, gnorm, lr,
                      penalty_term_norm=float(np.linalg.norm(gp - g)))


def usam_step(obj: Objective, lr: float, rho: float) -> StepReport:
    return sam_step(obj, lr, rho, normalized=False)


def step(spec: RegularizerSpec, obj: Objective, lr: float, seed: int = 0) -> StepReport:
    """Dispatches one step of the configured rule."""
    k = spec.kind
    if k == "none":
        return sgd_step(obj, lr)
    if k in ("grad_penalty_p1", "grad_penalty_p2"):
        return grad_penalty_step(obj, lr, spec.rho, int(k[-1]), spec.grad_norm_epsilon)
    if k == "weight_noise":
        return weight_noise_step(obj, lr, spec.sigma2, seed)
    if k == "hessian_trace":
        return hessian_trace_penalty_step(obj, lr, spec.sigma2, spec.n_estimator_samples, seed, spec.fd_step)
    if k == "gn_trace":
        return gn_trace_penalty_step(obj, lr, spec.sigma2, spec.n_estimator_samples, seed,
                                     spec.straight_through)
    return sam_step(obj, lr, spec.rho, normalized=(k == "sam"), eps=spec.grad_norm_epsilon)


def learning_rate(base: float, step_index: int, total_steps: int, schedule: str = "constant") -> float:
    """Constant, or cosine decay lr0 * (1 + cos(pi t / T)) / 2."""
    if schedule == "constant":
        return base
    if schedule == "cosine":
        t = min(step_index, total_steps)
        return base * 0.5 * (1.0 + math.cos(math.pi * t / max(total_steps, 1)))
    raise ValueError(f"unknown schedule {schedule!r}")
