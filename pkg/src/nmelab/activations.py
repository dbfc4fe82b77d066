"""Activation functions and their AD derivative tables.

``beta_gelu(x) = x * Phi(beta * x)`` interpolates GELU (beta = 1) and ReLU
(beta -> inf). Its second derivative is ``beta * pdf(beta x) * (2 - beta^2 x^2)``,
a bump of width 1/beta that always integrates to 1.

Two variants only differ from their parent in what the chain rule uses as the
second derivative:

* ``augmented_relu``: ReLU whose Heaviside derivative gets the Gaussian bump
  ``beta / sqrt(2 pi) * exp(-beta^2 x^2 / 2)`` as its own derivative.
* ``diminished_gelu``: GELU whose second derivative is defined as 0.

The ReLU derivative at 0 is taken as 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .tape import KNOWN_ELEMENTWISE, Elementwise, OverrideRegistry

KINDS = ("relu", "gelu", "beta_gelu", "augmented_relu", "diminished_gelu", "tanh")

INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

# Phi is evaluated with scipy's ndtr; its absolute error is far below 1e-12
PHI_ABS_ERROR = 1e-12


def normal_pdf(x):
    return INV_SQRT_2PI * np.exp(-0.5 * np.square(x))


def normal_cdf(x):
    return ndtr(x)


def heaviside(x):
    return (np.asarray(x) > 0).astype(np.float64)


def gaussian_bump(beta: float):
    """Gaussian of width 1/beta with unit mass, used as a mollified delta."""

    def bump(x):
        return beta * INV_SQRT_2PI * np.exp(-0.5 * np.square(beta * np.asarray(x)))

    return bump


def _zero(x):
    return np.zeros_like(np.asarray(x, dtype=np.float64))


def _beta_gelu_table(beta: float):
    def f(x):
        return x * ndtr(beta * x)

    def d1(x):
        bx = beta * x
        return ndtr(bx) + bx * normal_pdf(bx)

    def d2(x):
        bx = beta * x
        return beta * normal_pdf(bx) * (2.0 - bx * bx)

    return f, d1, d2


def _relu(x):
    return np.maximum(x, 0.0)


def _tanh_d1(x):
    t = np.tanh(x)
    return 1.0 - t * t


def _tanh_d2(x):
    t = np.tanh(x)
    return -2.0 * t * (1.0 - t * t)


KNOWN_ELEMENTWISE.update({"relu", "gelu", "beta_gelu", "tanh"})


@dataclass(frozen=True)
class ActivationSpec:
    kind: str = "gelu"
    beta: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown activation {self.kind!r}; choose from {KINDS}")
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")

    def elementwise(self) -> Elementwise:
        kind, beta = self.kind, float(self.beta)
        if kind == "relu":
            return Elementwise("relu", _relu, heaviside, _zero)
        if kind == "augmented_relu":
            return Elementwise("relu", _relu, heaviside, gaussian_bump(beta))
        if kind == "tanh":
            return Elementwise("tanh", np.tanh, _tanh_d1, _tanh_d2)
        if kind == "beta_gelu":
            return Elementwise("beta_gelu", *_beta_gelu_table(beta))
        f, d1, d2 = _beta_gelu_table(1.0)
        if kind == "gelu":
            return Elementwise("gelu", f, d1, d2)
        return Elementwise("gelu", f, d1, _zero)  # diminished_gelu

    @property
    def smooth(self) -> bool:
        """True when the AD second derivative is the true second derivative."""
        return self.kind in ("gelu", "beta_gelu", "tanh")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "beta": float(self.beta)}

    @classmethod
    def from_dict(cls, d) -> "ActivationSpec":
        return cls(d["kind"], float(d.get("beta", 1.0)))


def activation_eval(spec: ActivationSpec, x, order: int = 0, registry: OverrideRegistry | None = None):
    """Value (order 0) or AD derivative (order 1, 2) of an activation."""
    if order not in (0, 1, 2):
        raise ValueError(f"order must be 0, 1 or 2, got {order}")
    fn = spec.elementwise()
    x = np.asarray(x, dtype=np.float64)
    if order == 0:
        out = fn.f(x)
    else:
        d1, d2 = (registry.resolve(fn) if registry is not None else (fn.d1, fn.d2))
        out = (d1 if order == 1 else d2)(x)
    return out if out.ndim else float(out)
