"""Fully connected networks, losses and checkpoints.

The network follows ``h_l = W_l x_l (+ b_l)``, ``x_{l+1} = phi(h_l)``. By
default the last layer is a linear readout (no activation on the output);
``output_activation=True`` applies phi there too.

Parameters live in one flat float64 vector, ordered layer by layer: ``W_0``
(row-major), then ``b_0`` if biases are enabled, then ``W_1`` and so on.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .activations import ActivationSpec
from .tape import Elementwise, OverrideRegistry, Tape, Var

LOSS_KINDS = ("mse", "cross_entropy")
CHECKPOINT_FORMAT = "nmelab-checkpoint/1"


@dataclass
class Model:
    widths: tuple[int, ...]
    activation: ActivationSpec = field(default_factory=ActivationSpec)
    params: np.ndarray | None = None
    bias: bool = False
    output_activation: bool = False
    seed: int | None = None

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) < 2 or any(w <= 0 for w in self.widths):
            raise ValueError(f"widths must be >= 2 positive entries, got {self.widths}")
        if self.params is None:
            self.params = np.zeros(self.n_params)
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (self.n_params,):
            raise ValueError(
                f"expected {self.n_params} parameters for widths {self.widths}, got {self.params.shape}"
            )

    @classmethod
    def init(cls, widths, activation=None, seed=0, bias=False, output_activation=False, scale=1.0):
        """Gaussian init with std scale/sqrt(fan_in); biases start at zero."""
        m = cls(widths, activation or ActivationSpec(), None, bias, output_activation, seed)
        rng = np.random.default_rng(seed)
        parts = []
        for fan_in, fan_out in zip(m.widths[:-1], m.widths[1:]):
            parts.append(rng.standard_normal(fan_out * fan_in) * (scale / np.sqrt(fan_in)))
            if bias:
                parts.append(np.zeros(fan_out))
        m.params = np.concatenate(parts)
        return m

    @property
    def depth(self) -> int:
        return len(self.widths) - 1

    @property
    def n_params(self) -> int:
        n = sum(a * b for a, b in zip(self.widths[:-1], self.widths[1:]))
        return n + (sum(self.widths[1:]) if self.bias else 0)

    def layout(self):
        """Per layer: ((w_start, w_stop, w_shape), (b_start, b_stop) or None)."""
        out, pos = [], 0
        for fan_in, fan_out in zip(self.widths[:-1], self.widths[1:]):
            w = (pos, pos + fan_in * fan_out, (fan_out, fan_in))
            pos = w[1]
            b = None
            if self.bias:
                b = (pos, pos + fan_out)
                pos = b[1]
            out.append((w, b))
        return out

    def weight_slice(self, layer: int) -> slice:
        lo, hi, _ = self.layout()[layer][0]
        return slice(lo, hi)

    def param_layer(self, index: int) -> tuple[int, str]:
        """(layer, 'W' or 'b') owning a flat parameter index."""
        for l, ((w0, w1, _), b) in enumerate(self.layout()):
            if w0 <= index < w1:
                return l, "W"
            if b is not None and b[0] <= index < b[1]:
                return l, "b"
        raise IndexError(f"parameter index {index} out of range [0, {self.n_params})")

    def weights(self, params=None):
        params = self.params if params is None else np.asarray(params, dtype=np.float64)
        out = []
        for (w0, w1, shape), b in self.layout():
            out.append((params[w0:w1].reshape(shape), None if b is None else params[b[0]:b[1]]))
        return out

    def embed(self, layer: int, matrix) -> np.ndarray:
        """Flat vector that is ``matrix`` on W_layer and zero elsewhere."""
        v = np.zeros(self.n_params)
        lo, hi, shape = self.layout()[layer][0]
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.shape != shape:
            raise ValueError(f"layer {layer} weight has shape {shape}, got {matrix.shape}")
        v[lo:hi] = matrix.ravel()
        return v

    def with_params(self, params) -> "Model":
        return Model(self.widths, self.activation, np.array(params, dtype=np.float64),
                     self.bias, self.output_activation, self.seed)

    def copy(self) -> "Model":
        return self.with_params(self.params)

    def header(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "widths": list(self.widths),
            "activation": self.activation.to_dict(),
            "bias": self.bias,
            "output_activation": self.output_activation,
            "seed": self.seed,
            "n_params": self.n_params,
        }

    def fingerprint(self) -> str:
        h = hashlib.sha256(json.dumps(self.header(), sort_keys=True).encode())
        h.update(np.ascontiguousarray(self.params).tobytes())
        return h.hexdigest()[:16]


def _check_input(model: Model, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.widths[0]:
        raise ValueError(
            f"layer 0: input has shape {x.shape}, expected (batch, {model.widths[0]})"
        )
    return x


def _activated(model: Model, layer: int) -> bool:
    return layer < model.depth - 1 or model.output_activation


def model_forward(model: Model, x, params=None):
    """Eager forward pass.

    Returns ``(z, hs, xs)`` where ``hs[l]`` are pre-activations and ``xs[l]`` is
    the input to layer ``l`` (``xs[0]`` is the data).
    """
    fn = model.activation.elementwise()
    cur = _check_input(model, x)
    hs, xs = [], [cur]
    for l, (w, b) in enumerate(model.weights(params)):
        h = cur @ w.T
        if b is not None:
            h = h + b.reshape((1,) + b.shape)
        hs.append(h)
        cur = fn.f(h) if _activated(model, l) else h
        if l < model.depth - 1:
            xs.append(cur)
    return cur, hs, xs


def forward_on_tape(model: Model, theta: Var, x) -> Var:
    """Records the network on ``theta``'s tape; ``theta`` is the flat parameter leaf."""
    tape = theta.tape
    fn: Elementwise = model.activation.elementwise()
    x = _check_input(model, x)
    if theta.shape != (model.n_params,):
        raise ValueError(f"parameter leaf has shape {theta.shape}, expected ({model.n_params},)")
    cur = tape.const(x)
    for l, ((w0, w1, shape), b) in enumerate(model.layout()):
        w = tape.apply("slice", theta, start=w0, stop=w1).reshape(shape)
        h = tape.apply("linear", cur, w, where=f"layer {l}")
        if b is not None:
            h = tape.apply("add_bias", h, tape.apply("slice", theta, start=b[0], stop=b[1]))
        cur = tape.activation(fn, h, where=f"layer {l} activation") if _activated(model, l) else h
    return cur


def record_forward(model: Model, x, params=None, tangent=None, registry: OverrideRegistry | None = None):
    """Records a forward pass; returns ``(output Var, tape)``.

    The parameter leaf is node 0 of the tape.
    """
    tape = Tape(registry)
    theta = tape.leaf(model.params if params is None else params, tangent)
    return forward_on_tape(model, theta, x), tape


# ---------------------------------------------------------------------------
# losses


def as_targets(kind: str, y, k: int) -> np.ndarray:
    """Normalises targets to a float (N, k) array; class indices become one-hot."""
    if kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss {kind!r}; choose from {LOSS_KINDS}")
    y = np.asarray(y)
    if kind == "cross_entropy" and (y.ndim == 1 or (y.ndim == 2 and y.shape[1] == 1 and k > 1)):
        idx = y.reshape(-1)
        if not np.issubdtype(idx.dtype, np.integer):
            if not np.all(idx == np.round(idx)):
                raise ValueError("class indices must be integers")
            idx = idx.astype(np.int64)
        if np.any(idx < 0) or np.any(idx >= k):
            bad = idx[(idx < 0) | (idx >= k)][0]
            raise ValueError(f"class index {bad} out of range for {k} classes")
        return np.eye(k)[idx]
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None] if k == 1 else y[None, :]
    if y.shape[-1] != k:
        raise ValueError(f"targets have {y.shape[-1]} columns, model has {k} outputs")
    return y


def softmax(z):
    z = np.asarray(z, dtype=np.float64)
    m = z - z.max(axis=-1, keepdims=True)
    e = np.exp(m)
    return e / e.sum(axis=-1, keepdims=True)


def loss_eval(kind: str, z, y):
    """Per-sample loss, gradient and Hessian with respect to the outputs.

    For a single output vector ``z`` of shape (k,) returns scalars/(k,)/(k, k);
    for a batch (N, k) returns arrays with a leading N axis. MSE is
    ``0.5 * ||z - y||^2`` (so the output Hessian is I); cross-entropy uses
    softmax probabilities p and has output Hessian ``diag(p) - p p^T``.
    """
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    zb = z[None, :] if single else z
    k = zb.shape[-1]
    if single:
        y = np.asarray(y)
        y = y.reshape(1) if y.ndim == 0 else y.reshape(1, -1)
    yb = as_targets(kind, y, k)
    if yb.shape != zb.shape:
        raise ValueError(f"targets shape {yb.shape} does not match outputs {zb.shape}")
    if kind == "mse":
        r = zb - yb
        loss = 0.5 * np.sum(r * r, axis=-1)
        g = r
        hz = np.broadcast_to(np.eye(k), zb.shape[:1] + (k, k)).copy()
    else:
        m = zb.max(axis=-1, keepdims=True)
        lse = (m + np.log(np.exp(zb - m).sum(axis=-1, keepdims=True)))[:, 0]
        loss = lse - np.sum(zb * yb, axis=-1)
        p = softmax(zb)
        g = p - yb
        hz = np.einsum("ni,ij->nij", p, np.eye(k)) - np.einsum("ni,nj->nij", p, p)
    if single:
        return float(loss[0]), g[0], hz[0]
    return loss, g, hz


def loss_on_tape(kind: str, z: Var, y) -> Var:
    y = as_targets(kind, y, z.shape[-1])
    return z.tape.apply(kind, z, z.tape.const(y))


def batch_loss(model: Model, x, y, kind: str, params=None) -> float:
    z, _, _ = model_forward(model, x, params)
    losses, _, _ = loss_eval(kind, z, as_targets(kind, y, z.shape[-1]))
    return float(np.mean(losses))


def loss_fn(model: Model, x, y, kind: str):
    """Scalar closure ``theta_var -> batch-mean loss`` for the tape."""
    x = _check_input(model, x)
    y = as_targets(kind, y, model.widths[-1])

    def fn(theta: Var) -> Var:
        return theta.tape.apply(kind, forward_on_tape(model, theta, x), theta.tape.const(y))

    return fn


def accuracy(model: Model, x, labels) -> float:
    z, _, _ = model_forward(model, x)
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels.argmax(axis=1)
    return float(np.mean(z.argmax(axis=1) == labels))


# ---------------------------------------------------------------------------
# checkpoints: JSON header plus float64 values in flattening order


def save_checkpoint(model: Model, path) -> Path:
    path = Path(path)
    doc = dict(model.header(), params=[float(v) for v in model.params])
    path.write_text(json.dumps(doc))
    return path


def load_checkpoint(path) -> Model:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file (format={doc.get('format')!r})")
    return Model(
        tuple(doc["widths"]),
        ActivationSpec.from_dict(doc["activation"]),
        np.array(doc["params"], dtype=np.float64),
        bool(doc.get("bias", False)),
        bool(doc.get("output_activation", False)),
        doc.get("seed"),
    )
