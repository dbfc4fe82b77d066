"""Minimal reverse-mode tape with forward-mode tangents.

Every recorded value is a :class:`Dual`: a float64 primal plus an optional
tangent. Tangents ride along the forward pass (giving J·v) and along the
reverse pass (giving the directional derivative of the gradient, i.e. H·v).
That is the forward-over-reverse Hessian-vector product, computed without
taping the backward pass.

A tangent may carry leading batch axes, ``t.shape == K + p.shape``, so that a
single pass pushes many directions at once (used for dense extraction).

Elementwise primitives consult an :class:`OverrideRegistry` when they are
recorded. An order-1 override replaces the derivative used by both the
forward tangent and the reverse pass; an order-2 override replaces the
derivative of that derivative, which only ever shows up in tangents of the
reverse pass.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Dual",
    "Var",
    "Tape",
    "Elementwise",
    "DerivativeOverride",
    "OverrideRegistry",
    "NonFiniteError",
    "default_registry",
    "register_override",
    "grad",
    "value_and_grad",
    "jvp",
    "vjp",
    "hvp",
]


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf reaches an operation boundary."""


def _tadd(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


def _lift(t, pnd, outnd):
    # insert singleton axes between the tangent batch axes and the primal axes
    if t is None or outnd == pnd:
        return t
    k = t.ndim - pnd
    return t.reshape(t.shape[:k] + (1,) * (outnd - pnd) + t.shape[k:])


def _primal_axes(pnd):
    return tuple(range(-pnd, 0))


class Dual:
    """A primal array with an optional (possibly batched) tangent."""

    __slots__ = ("p", "t")

    def __init__(self, p, t=None):
        self.p = np.asarray(p, dtype=np.float64)
        self.t = None if t is None else np.asarray(t, dtype=np.float64)

    @staticmethod
    def wrap(x) -> "Dual":
        return x if isinstance(x, Dual) else Dual(x)

    @property
    def shape(self):
        return self.p.shape

    @property
    def ndim(self):
        return self.p.ndim

    def __repr__(self):
        return f"Dual(p={self.p!r}, t={self.t!r})"

    def __neg__(self):
        return Dual(-self.p, None if self.t is None else -self.t)

    def __add__(self, other):
        other = Dual.wrap(other)
        p = self.p + other.p
        return Dual(p, _tadd(_lift(self.t, self.ndim, p.ndim), _lift(other.t, other.ndim, p.ndim)))

    __radd__ = __add__

    def __sub__(self, other):
        return self + (-Dual.wrap(other))

    def __rsub__(self, other):
        return Dual.wrap(other) - self

    def __mul__(self, other):
        other = Dual.wrap(other)
        p = self.p * other.p
        ta = _lift(self.t, self.ndim, p.ndim)
        tb = _lift(other.t, other.ndim, p.ndim)
        t = None
        if ta is not None:
            t = ta * other.p
        if tb is not None:
            t = _tadd(t, self.p * tb)
        return Dual(p, t)

    __rmul__ = __mul__

    def __matmul__(self, other):
        other = Dual.wrap(other)
        if self.ndim != 2 or other.ndim != 2:
            raise ValueError("Dual matmul is defined for 2-D operands only")
        t = None
        if self.t is not None:
            t = self.t @ other.p
        if other.t is not None:
            t = _tadd(t, self.p @ other.t)
        return Dual(self.p @ other.p, t)

    def __rmatmul__(self, other):
        return Dual.wrap(other) @ self

    @property
    def T(self):
        return Dual(self.p.T, None if self.t is None else np.swapaxes(self.t, -1, -2))

    def reshape(self, shape):
        shape = tuple(shape)
        t = None
        if self.t is not None:
            k = self.t.ndim - self.ndim
            t = self.t.reshape(self.t.shape[:k] + shape)
        return Dual(self.p.reshape(shape), t)

    def sum(self, axis=None, keepdims=False):
        nd = self.ndim
        if axis is None:
            axes = tuple(range(nd))
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(a % nd for a in axes)
        p = self.p.sum(axis=axes, keepdims=keepdims)
        t = None
        if self.t is not None:
            t = self.t.sum(axis=tuple(a - nd for a in axes), keepdims=keepdims)
        return Dual(p, t)

    def check_finite(self, where: str) -> "Dual":
        if not np.all(np.isfinite(self.p)):
            raise NonFiniteError(f"non-finite value produced by {where}")
        if self.t is not None and not np.all(np.isfinite(self.t)):
            raise NonFiniteError(f"non-finite tangent produced by {where}")
        return self


# ---------------------------------------------------------------------------
# derivative overrides


@dataclass(frozen=True)
class Elementwise:
    """A scalar function applied entrywise, with its AD derivative table.

    ``name`` is the primitive id the override registry is keyed on. ``d1`` is
    what the chain rule uses for df/dx and ``d2`` is what it uses for the
    derivative of ``d1``.
    """

    name: str
    f: Callable[[np.ndarray], np.ndarray]
    d1: Callable[[np.ndarray], np.ndarray]
    d2: Callable[[np.ndarray], np.ndarray]

    def derivative(self, order: int) -> Callable[[np.ndarray], np.ndarray]:
        return {0: self.f, 1: self.d1, 2: self.d2}[order]


# primitive ids that overrides may target; activations add themselves here
KNOWN_ELEMENTWISE: set[str] = set()


@dataclass(frozen=True)
class DerivativeOverride:
    primitive: str
    order: int
    fn: Callable[[np.ndarray], np.ndarray]


class OverrideRegistry:
    """Maps (primitive id, order) to a replacement derivative."""

    def __init__(self, overrides: Sequence[DerivativeOverride] = ()):
        self._table: dict[tuple[str, int], DerivativeOverride] = {}
        self._frozen = False
        for ov in overrides:
            self.register(ov)

    def register(self, override: DerivativeOverride, replace: bool = False) -> None:
        if self._frozen:
            raise RuntimeError("override registry is frozen")
        if override.order not in (1, 2):
            raise ValueError(f"override order must be 1 or 2, got {override.order}")
        if override.primitive not in KNOWN_ELEMENTWISE:
            raise KeyError(
                f"unknown elementwise primitive {override.primitive!r}; "
                f"known: {sorted(KNOWN_ELEMENTWISE)}"
            )
        key = (override.primitive, override.order)
        if key in self._table and not replace:
            raise ValueError(
                f"an order-{override.order} override for {override.primitive!r} is "
                "already registered; pass replace=True to swap it"
            )
        self._table[key] = override

    def freeze(self) -> "OverrideRegistry":
        self._frozen = True
        return self

    @property
    def frozen(self) -> bool:
        return self._frozen

    def lookup(self, primitive: str, order: int):
        ov = self._table.get((primitive, order))
        return None if ov is None else ov.fn

    def resolve(self, fn: Elementwise) -> tuple[Callable, Callable]:
        d1 = self.lookup(fn.name, 1) or fn.d1
        d2 = self.lookup(fn.name, 2) or fn.d2
        return d1, d2

    def __len__(self):
        return len(self._table)


default_registry = OverrideRegistry()


def register_override(override: DerivativeOverride, replace: bool = False) -> None:
    default_registry.register(override, replace=replace)


# ---------------------------------------------------------------------------
# primitives
#
# forward(args, attrs) -> Dual
# vjp(g, out, args, attrs) -> tuple of cotangents (one per arg)
#
# All rules are written in Dual arithmetic so that tangents of the reverse
# pass come out of the product rule automatically.


def _unbroadcast(g: Dual, shape) -> Dual:
    if g.shape == tuple(shape):
        return g
    if shape == ():
        return g.sum()
    raise ValueError(f"cannot unbroadcast {g.shape} to {shape}")


def _check_binary(a: Dual, b: Dual, op: str):
    if a.shape != b.shape and a.ndim and b.ndim:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} differ (only scalar broadcasting)")


class _Add:
    name = "add"

    def forward(self, args, attrs):
        _check_binary(*args, "add")
        return args[0] + args[1]

    def vjp(self, g, out, args, attrs):
        return _unbroadcast(g, args[0].shape), _unbroadcast(g, args[1].shape)


class _Sub:
    name = "sub"

    def forward(self, args, attrs):
        _check_binary(*args, "sub")
        return args[0] - args[1]

    def vjp(self, g, out, args, attrs):
        return _unbroadcast(g, args[0].shape), _unbroadcast(-g, args[1].shape)


class _Mul:
    name = "mul"

    def forward(self, args, attrs):
        _check_binary(*args, "mul")
        return args[0] * args[1]

    def vjp(self, g, out, args, attrs):
        a, b = args
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


class _Scale:
    name = "scale"

    def forward(self, args, attrs):
        return args[0] * attrs["c"]

    def vjp(self, g, out, args, attrs):
        return (g * attrs["c"],)


class _MatMul:
    name = "matmul"

    def forward(self, args, attrs):
        a, b = args
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
        return a @ b

    def vjp(self, g, out, args, attrs):
        a, b = args
        return g @ b.T, a.T @ g


class _Linear:
    """x @ W.T for a batch of row vectors x and a weight matrix W."""

    name = "linear"

    def forward(self, args, attrs):
        x, w = args
        if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
            raise ValueError(
                f"{attrs.get('where', 'linear')}: input width {x.shape[-1]} does not match "
                f"weight matrix {w.shape}"
            )
        return x @ w.T

    def vjp(self, g, out, args, attrs):
        x, w = args
        return g @ w, g.T @ x


class _AddBias:
    name = "add_bias"

    def forward(self, args, attrs):
        x, b = args
        return x + b.reshape((1,) + b.shape)

    def vjp(self, g, out, args, attrs):
        return g, g.sum(axis=0)


class _Transpose:
    name = "transpose"

    def forward(self, args, attrs):
        return args[0].T

    def vjp(self, g, out, args, attrs):
        return (g.T,)


class _Reshape:
    name = "reshape"

    def forward(self, args, attrs):
        return args[0].reshape(attrs["shape"])

    def vjp(self, g, out, args, attrs):
        return (g.reshape(args[0].shape),)


class _Slice:
    """Contiguous slice of a 1-D value."""

    name = "slice"

    def forward(self, args, attrs):
        a = args[0]
        lo, hi = attrs["start"], attrs["stop"]
        return Dual(a.p[lo:hi], None if a.t is None else a.t[..., lo:hi])

    def vjp(self, g, out, args, attrs):
        a = args[0]
        lo, hi = attrs["start"], attrs["stop"]
        p = np.zeros(a.shape)
        p[lo:hi] = g.p
        t = None
        if g.t is not None:
            k = g.t.shape[:-1]
            t = np.zeros(k + a.shape)
            t[..., lo:hi] = g.t
        return (Dual(p, t),)


class _Sum:
    name = "sum"

    def forward(self, args, attrs):
        return args[0].sum()

    def vjp(self, g, out, args, attrs):
        shape = args[0].shape
        ones = np.ones(shape)
        return (g.reshape(()) * ones,)


class _Apply:
    """Elementwise activation with registry-resolved derivatives."""

    name = "elementwise"

    def forward(self, args, attrs):
        h = args[0]
        fn: Elementwise = attrs["fn"]
        d1 = attrs["d1"]
        t = None if h.t is None else d1(h.p) * h.t
        return Dual(fn.f(h.p), t)

    def vjp(self, g, out, args, attrs):
        h = args[0]
        d1, d2 = attrs["d1"], attrs["d2"]
        # D_AD[f] evaluated along the tangent: its own derivative is d2
        local = Dual(d1(h.p), None if h.t is None else d2(h.p) * h.t)
        return (g * local,)


class _MSE:
    """Batch mean of 0.5 * ||z - y||^2 over rows."""

    name = "mse"

    def forward(self, args, attrs):
        z, y = args
        if z.shape != y.shape:
            raise ValueError(f"mse: prediction shape {z.shape} != target shape {y.shape}")
        n = z.shape[0]
        r = z.p - y.p
        p = 0.5 * np.sum(r * r) / n
        t = None
        if z.t is not None:
            t = np.sum(_lift(z.t, z.ndim, z.ndim) * r, axis=_primal_axes(z.ndim)) / n
        return Dual(p, t)

    def vjp(self, g, out, args, attrs):
        z, y = args
        n = z.shape[0]
        return g * ((z - y.p) * (1.0 / n)), None


def _softmax(z):
    m = z - z.max(axis=-1, keepdims=True)
    e = np.exp(m)
    return e / e.sum(axis=-1, keepdims=True)


def _logsumexp(z):
    m = z.max(axis=-1, keepdims=True)
    return (m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True)))[..., 0]


def softmax_dual(z: Dual) -> Dual:
    p = _softmax(z.p)
    t = None
    if z.t is not None:
        t = p * (z.t - np.sum(p * z.t, axis=-1, keepdims=True))
    return Dual(p, t)


class _CrossEntropy:
    """Batch mean of logsumexp(z) - <z, y> for one-hot (or soft) rows y."""

    name = "cross_entropy"

    def forward(self, args, attrs):
        z, y = args
        if z.shape != y.shape:
            raise ValueError(f"cross_entropy: logits shape {z.shape} != target shape {y.shape}")
        n = z.shape[0]
        p = np.sum(_logsumexp(z.p) - np.sum(z.p * y.p, axis=-1)) / n
        t = None
        if z.t is not None:
            gz = _softmax(z.p) - y.p
            t = np.sum(z.t * gz, axis=_primal_axes(z.ndim)) / n
        return Dual(p, t)

    def vjp(self, g, out, args, attrs):
        z, y = args
        n = z.shape[0]
        return g * ((softmax_dual(z) - y.p) * (1.0 / n)), None


PRIMITIVES = {
    cls.name: cls()
    for cls in (
        _Add, _Sub, _Mul, _Scale, _MatMul, _Linear, _AddBias, _Transpose,
        _Reshape, _Slice, _Sum, _Apply, _MSE, _CrossEntropy,
    )
}


# ---------------------------------------------------------------------------
# tape


@dataclass
class Node:
    op: str  # primitive name, "leaf" or "const"
    parents: tuple[int, ...]
    attrs: dict
    value: Dual
    requires_grad: bool


class Var:
    """Handle to a node on a tape."""

    __slots__ = ("tape", "index")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def dual(self) -> Dual:
        return self.tape.nodes[self.index].value

    @property
    def value(self) -> np.ndarray:
        return self.dual.p

    @property
    def tangent(self):
        return self.dual.t

    @property
    def shape(self):
        return self.dual.shape

    @property
    def ndim(self):
        return self.dual.ndim

    def __repr__(self):
        return f"Var(#{self.index}, shape={self.shape})"

    def _coerce(self, other) -> "Var":
        return other if isinstance(other, Var) else self.tape.const(other)

    def __add__(self, other):
        return self.tape.apply("add", self, self._coerce(other))

    def __radd__(self, other):
        return self.tape.apply("add", self._coerce(other), self)

    def __sub__(self, other):
        return self.tape.apply("sub", self, self._coerce(other))

    def __rsub__(self, other):
        return self.tape.apply("sub", self._coerce(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return self.tape.apply("scale", self, c=float(other))
        return self.tape.apply("mul", self, self._coerce(other))

    def __rmul__(self, other):
        if np.isscalar(other):
            return self.tape.apply("scale", self, c=float(other))
        return self.tape.apply("mul", self._coerce(other), self)

    def __neg__(self):
        return self * -1.0

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("division is only supported by a constant scalar")
        return self * (1.0 / other)

    def __matmul__(self, other):
        return matmul(self, self._coerce(other))

    def __rmatmul__(self, other):
        return matmul(self._coerce(other), self)

    @property
    def T(self):
        return self.tape.apply("transpose", self)

    def reshape(self, *shape):
        if len(shape) == 1 and not isinstance(shape[0], int):
            shape = tuple(shape[0])
        return self.tape.apply("reshape", self, shape=tuple(shape))

    def sum(self):
        return self.tape.apply("sum", self)


def matmul(a: Var, b: Var) -> Var:
    """Matrix product with numpy's 1-D promotion rules."""
    a_vec, b_vec = a.ndim == 1, b.ndim == 1
    if a_vec:
        a = a.reshape(1, a.shape[0])
    if b_vec:
        b = b.reshape(b.shape[0], 1)
    out = a.tape.apply("matmul", a, b)
    if a_vec and b_vec:
        return out.reshape(())
    if a_vec:
        return out.reshape(out.shape[1])
    if b_vec:
        return out.reshape(out.shape[0])
    return out


class Tape:
    """Topologically ordered record of primitive applications."""

    def __init__(self, registry: OverrideRegistry | None = None):
        self.registry = default_registry if registry is None else registry
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def _push(self, node: Node) -> Var:
        self.nodes.append(node)
        return Var(self, len(self.nodes) - 1)

    def leaf(self, value, tangent=None, requires_grad: bool = True) -> Var:
        d = Dual(np.array(value, dtype=np.float64), tangent).check_finite("leaf")
        return self._push(Node("leaf", (), {}, d, requires_grad))

    def const(self, value) -> Var:
        d = Dual(np.array(value, dtype=np.float64)).check_finite("constant")
        return self._push(Node("const", (), {}, d, False))

    def apply(self, op: str, *args: Var, **attrs) -> Var:
        prim = PRIMITIVES[op]
        for a in args:
            if a.tape is not self:
                raise ValueError("operands belong to a different tape")
        if op == "elementwise":
            attrs["d1"], attrs["d2"] = self.registry.resolve(attrs["fn"])
        vals = [self.nodes[a.index].value for a in args]
        out = prim.forward(vals, attrs).check_finite(attrs.get("where", op))
        rg = any(self.nodes[a.index].requires_grad for a in args)
        return self._push(Node(op, tuple(a.index for a in args), attrs, out, rg))

    def activation(self, fn: Elementwise, x: Var, where: str | None = None) -> Var:
        attrs = {"fn": fn}
        if where is not None:
            attrs["where"] = where
        return self.apply("elementwise", x, **attrs)

    def backward(self, out: Var, seed=None) -> dict[int, Dual]:
        """Propagate cotangents from ``out``; returns cotangents of all leaves.

        ``seed`` defaults to 1 for a scalar output. A seed given as a Dual
        may carry its own tangent, which is how batched VJPs are expressed.
        """
        node = self.nodes[out.index]
        if seed is None:
            if node.value.ndim != 0:
                raise ValueError(f"backward from a non-scalar of shape {node.value.shape} needs a seed")
            seed = Dual(np.float64(1.0))
        seed = Dual.wrap(seed)
        if seed.shape != node.value.shape:
            raise ValueError(f"seed shape {seed.shape} != output shape {node.value.shape}")
        cts: dict[int, Dual] = {out.index: seed}
        leaves = {}
        for i in range(out.index, -1, -1):
            g = cts.pop(i, None)
            if g is None:
                continue
            n = self.nodes[i]
            if n.op == "leaf":
                leaves[i] = g
                continue
            if n.op == "const":
                continue
            parent_vals = [self.nodes[j].value for j in n.parents]
            grads = PRIMITIVES[n.op].vjp(g, n.value, parent_vals, n.attrs)
            for j, gj in zip(n.parents, grads):
                if gj is None or not self.nodes[j].requires_grad:
                    continue
                cts[j] = gj if j not in cts else cts[j] + gj
        for i, g in leaves.items():
            g.check_finite(f"backward into leaf #{i}")
        return leaves

    def replay(self, leaf_values: dict[int, Dual] | None = None) -> "Tape":
        """Re-run the recorded program, optionally with new leaf values."""
        leaf_values = leaf_values or {}
        new = Tape(self.registry)
        for i, n in enumerate(self.nodes):
            if n.op in ("leaf", "const"):
                v = leaf_values.get(i, n.value) if n.op == "leaf" else n.value
                new.nodes.append(Node(n.op, (), {}, Dual.wrap(v), n.requires_grad))
                continue
            vals = [new.nodes[j].value for j in n.parents]
            out = PRIMITIVES[n.op].forward(vals, n.attrs).check_finite(n.attrs.get("where", n.op))
            new.nodes.append(Node(n.op, n.parents, n.attrs, out, n.requires_grad))
        return new

    def leaves(self) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if n.op == "leaf"]

    def jvp(self, output: Var, tangent, leaf: int | None = None) -> np.ndarray:
        """Push ``tangent`` through the recorded program from one leaf."""
        if leaf is None:
            ls = self.leaves()
            if len(ls) != 1:
                raise ValueError("tape has several leaves; name the one to perturb")
            leaf = ls[0]
        base = self.nodes[leaf].value
        tangent = np.asarray(tangent, dtype=np.float64)
        if tangent.shape[tangent.ndim - base.ndim:] != base.shape:
            raise ValueError(f"tangent shape {tangent.shape} does not end in parameter shape {base.shape}")
        replayed = self.replay({leaf: Dual(base.p, tangent)})
        t = replayed.nodes[output.index].value.t
        if t is None:
            t = np.zeros(tangent.shape[: tangent.ndim - base.ndim] + output.shape)
        return t


# ---------------------------------------------------------------------------
# functional front-end


def _check_vec(name, v, params):
    v = np.asarray(v, dtype=np.float64)
    if v.shape[v.ndim - params.ndim:] != params.shape or v.ndim - params.ndim > 1:
        raise ValueError(f"{name} has shape {v.shape}; expected {params.shape} or (K, *{params.shape})")
    return v


def value_and_grad(fn, params, registry=None):
    """Returns (loss value, gradient) of a scalar ``fn(theta_var)``."""
    params = np.asarray(params, dtype=np.float64)
    tape = Tape(registry)
    theta = tape.leaf(params)
    loss = fn(theta)
    if loss.ndim != 0:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    g = tape.backward(loss).get(theta.index)
    gp = np.zeros_like(params) if g is None else g.p
    return float(loss.value), gp


def grad(loss: Var, wrt: Var) -> np.ndarray:
    """Gradient of a recorded scalar with respect to a leaf on the same tape."""
    if loss.ndim != 0:
        raise ValueError(f"grad needs a scalar loss, got shape {loss.shape}")
    g = loss.tape.backward(loss).get(wrt.index)
    return np.zeros(wrt.shape) if g is None else g.p.copy()


def jvp(fn, params, tangent, registry=None):
    """Returns (fn(params), J @ tangent) for an array-valued ``fn``."""
    params = np.asarray(params, dtype=np.float64)
    tangent = _check_vec("tangent", tangent, params)
    tape = Tape(registry)
    out = fn(tape.leaf(params, tangent))
    t = out.tangent
    if t is None:
        t = np.zeros(tangent.shape[: tangent.ndim - params.ndim] + out.shape)
    return out.value, t


def vjp(fn, params, cotangent, registry=None):
    """Returns (fn(params), J^T @ cotangent); cotangent may carry a leading batch axis."""
    params = np.asarray(params, dtype=np.float64)
    tape = Tape(registry)
    theta = tape.leaf(params)
    out = fn(theta)
    cot = np.asarray(cotangent, dtype=np.float64)
    if cot.shape == out.shape:
        g = tape.backward(out, Dual(cot)).get(theta.index)
        res = np.zeros_like(params) if g is None else g.p
    else:
        # batched cotangents go through the tangent channel of a zero seed
        if cot.shape[1:] != out.shape:
            raise ValueError(f"cotangent shape {cot.shape} incompatible with output {out.shape}")
        g = tape.backward(out, Dual(np.zeros(out.shape), cot)).get(theta.index)
        res = np.zeros((cot.shape[0],) + params.shape) if g is None or g.t is None else g.t
    return out.value, res


def hvp(fn, params, v, registry=None, return_grad: bool = False):
    """Hessian-vector product of a scalar ``fn`` by forward-over-reverse.

    ``v`` may be a single direction or a stack of K directions (K, P).
    """
    params = np.asarray(params, dtype=np.float64)
    v = _check_vec("v", v, params)
    tape = Tape(registry)
    theta = tape.leaf(params, v)
    loss = fn(theta)
    if loss.ndim != 0:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    g = tape.backward(loss).get(theta.index)
    if g is None:
        hv, gp = np.zeros(v.shape), np.zeros(params.shape)
    else:
        hv = np.zeros(v.shape) if g.t is None else np.broadcast_to(g.t, v.shape).copy()
        gp = g.p
    return (hv, gp) if return_grad else hv
