"""Minimal reverse-mode automatic differentiation on batched numpy arrays.

A :class:`Tape` records primitive operations in execution order.  Operations
accept either plain arrays or :class:`Var` nodes; when no input is a node the
operation simply returns an array, so the same model code runs with or
without gradient tracking.  Nodes are only created for values that depend on
a trainable leaf, which keeps frozen sub-graphs (e.g. a fixed template
during code fitting) off the tape.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import NonScalarLoss, ParseError, ShapeMismatch


class Var:
    """A value recorded on a tape."""

    __slots__ = ("tape", "idx", "value")
    __array_priority__ = 100.0

    def __init__(self, tape: "Tape", idx: int, value: np.ndarray):
        self.tape = tape
        self.idx = idx
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Var(#{self.idx}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, key):
        return getitem(self, key)


class Tape:
    """Append-only record of operations; single writer."""

    def __init__(self, frozen: Sequence[np.ndarray] = ()):
        self._values: list = []
        self._parents: list = []
        self._vjps: list = []
        self._params: dict[int, Var] = {}
        self._frozen = {id(a) for a in frozen}
        self._keep: list = list(frozen)

    def __len__(self):
        return len(self._values)

    def _push(self, value, parents, vjp) -> Var:
        v = Var(self, len(self._values), value)
        self._values.append(value)
        self._parents.append(parents)
        self._vjps.append(vjp)
        return v

    def leaf(self, value) -> Var:
        """A fresh differentiable input."""
        return self._push(np.asarray(value, dtype=np.float64), (), None)

    def param(self, array: np.ndarray):
        """Leaf for a parameter array, shared across repeated uses.

        Frozen arrays come back unchanged and are treated as constants.
        """
        key = id(array)
        if key in self._frozen:
            return array
        v = self._params.get(key)
        if v is None:
            v = self._params[key] = self.leaf(array)
            self._keep.append(array)
        return v

    def freeze(self, arrays: Sequence[np.ndarray]) -> None:
        for a in arrays:
            self._frozen.add(id(a))
            self._keep.append(a)

    def record(self, value, parents: tuple, vjp: Callable) -> Var:
        return self._push(value, parents, vjp)

    def release(self) -> None:
        """Drop all recorded values (breaks the tape/node reference cycle)."""
        self._values.clear()
        self._parents.clear()
        self._vjps.clear()
        self._params.clear()
        self._keep.clear()


class Gradients:
    """Gradient store returned by :func:`backward`."""

    def __init__(self, tape: Tape, grads: list):
        self._tape = tape
        self._grads = grads

    def __getitem__(self, node) -> np.ndarray:
        if isinstance(node, Var):
            g = self._grads[node.idx]
            return np.zeros_like(node.value) if g is None else g
        return self.param(node)

    def param(self, array: np.ndarray) -> np.ndarray:
        v = self._tape._params.get(id(array))
        if v is None:
            return np.zeros_like(array)
        return self[v]


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def value(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else x


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(tape: Tape, loss: Var) -> Gradients:
    """Reverse sweep from a scalar ``loss``; returns gradients for every leaf."""
    if not isinstance(loss, Var):
        raise NonScalarLoss("loss does not depend on any recorded leaf")
    if loss.value.size != 1:
        raise NonScalarLoss(f"loss has shape {loss.value.shape}")
    grads: list = [None] * len(tape._values)
    grads[loss.idx] = np.ones_like(loss.value)
    parents, vjps = tape._parents, tape._vjps
    for i in range(loss.idx, -1, -1):
        g = grads[i]
        if g is None or vjps[i] is None:
            continue
        pg = vjps[i](g)
        for p, gp in zip(parents[i], pg):
            if isinstance(p, Var) and gp is not None:
                j = p.idx
                grads[j] = gp if grads[j] is None else grads[j] + gp
        grads[i] = None
    return Gradients(tape, grads)


# ---------------------------------------------------------------- primitives

def add(a, b):
    out = value(a) + value(b)
    tape = _tape_of(a, b)
    if tape is None:
        return out
    sa, sb = np.shape(value(a)), np.shape(value(b))
    return tape.record(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    out = value(a) - value(b)
    tape = _tape_of(a, b)
    if tape is None:
        return out
    sa, sb = np.shape(value(a)), np.shape(value(b))
    return tape.record(out, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    va, vb = value(a), value(b)
    out = va * vb
    tape = _tape_of(a, b)
    if tape is None:
        return out
    sa, sb = np.shape(va), np.shape(vb)
    ga, gb = isinstance(a, Var), isinstance(b, Var)
    return tape.record(out, (a, b), lambda g: (_unbroadcast(g * vb, sa) if ga else None,
                                                _unbroadcast(g * va, sb) if gb else None))


def scale(a, s: float):
    out = value(a) * s
    if not isinstance(a, Var):
        return out
    return a.tape.record(out, (a,), lambda g: (g * s,))


def lincomb(x0, coeffs: Sequence[float], terms: Sequence):
    """``x0 + sum(c_k * terms[k])`` as a single node."""
    out = value(x0).copy()
    for c, t in zip(coeffs, terms):
        out += c * value(t)
    tape = _tape_of(x0, *terms)
    if tape is None:
        return out
    coeffs = tuple(coeffs)

    def vjp(g):
        return (g,) + tuple(c * g for c in coeffs)
    return tape.record(out, (x0, *terms), vjp)


def matmul(a, b):
    va, vb = value(a), value(b)
    out = va @ vb
    tape = _tape_of(a, b)
    if tape is None:
        return out
    ga, gb = isinstance(a, Var), isinstance(b, Var)
    return tape.record(out, (a, b), lambda g: (g @ vb.T if ga else None, va.T @ g if gb else None))


def dense(x, W, b):
    """Affine layer ``x @ W + b`` for row-batched ``x``."""
    vx, vW, vb = value(x), value(W), value(b)
    if vx.shape[-1] != vW.shape[0]:
        raise ShapeMismatch(f"input width {vx.shape[-1]} != layer width {vW.shape[0]}")
    out = vx @ vW
    out += vb
    tape = _tape_of(x, W, b)
    if tape is None:
        return out
    gx, gW, gb = isinstance(x, Var), isinstance(W, Var), isinstance(b, Var)

    def vjp(g):
        return (g @ vW.T if gx else None,
                vx.T @ g if gW else None,
                g.sum(axis=0) if gb else None)
    return tape.record(out, (x, W, b), vjp)


def softplus(x, beta: float = 100.0):
    """``log(1 + exp(beta x)) / beta``, evaluated stably.

    The derivative ``sigmoid(beta x)`` is recovered from the output as
    ``1 - exp(-beta * out)``, which saves a second transcendental pass.
    """
    vx = value(x)
    z = np.abs(vx)
    z *= -beta
    np.exp(z, out=z)
    out = np.log1p(z)
    out *= 1.0 / beta
    out += np.maximum(vx, 0.0)
    if not isinstance(x, Var):
        return out
    sig = out * -beta
    np.expm1(sig, out=sig)
    np.negative(sig, out=sig)
    return x.tape.record(out, (x,), lambda g: (g * sig,))


def relu(x):
    vx = value(x)
    out = np.maximum(vx, 0.0)
    if not isinstance(x, Var):
        return out
    mask = vx > 0.0
    return x.tape.record(out, (x,), lambda g: (g * mask,))


def tanh(x):
    out = np.tanh(value(x))
    if not isinstance(x, Var):
        return out
    return x.tape.record(out, (x,), lambda g: (g * (1.0 - out * out),))


def identity(x):
    return x


def absolute(x):
    vx = value(x)
    out = np.abs(vx)
    if not isinstance(x, Var):
        return out
    sgn = np.sign(vx)
    return x.tape.record(out, (x,), lambda g: (g * sgn,))


def concat(xs: Sequence, axis: int = -1):
    vals = [value(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    tape = _tape_of(*xs)
    if tape is None:
        return out
    splits = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g):
        parts = np.split(g, splits, axis=axis)
        return tuple(p if isinstance(x, Var) else None for p, x in zip(parts, xs))
    return tape.record(out, tuple(xs), vjp)


def getitem(x, key):
    vx = value(x)
    out = vx[key]
    if not isinstance(x, Var):
        return out

    def vjp(g):
        full = np.zeros_like(vx)
        np.add.at(full, key, g)
        return (full,)
    return x.tape.record(out, (x,), vjp)


def take(table, idx):
    """Row gather ``table[idx]``; gradients scatter-add back."""
    vt = value(table)
    idx = np.asarray(idx)
    out = vt[idx]
    if not isinstance(table, Var):
        return out

    def vjp(g):
        full = np.zeros_like(vt)
        np.add.at(full, idx, g)
        return (full,)
    return table.tape.record(out, (table,), vjp)


def reshape(x, shape):
    vx = value(x)
    out = vx.reshape(shape)
    if not isinstance(x, Var):
        return out
    return x.tape.record(out, (x,), lambda g: (g.reshape(vx.shape),))


def total(x):
    """Sum of all entries, as a shape-(1,) node."""
    vx = value(x)
    out = np.array([vx.sum()])
    if not isinstance(x, Var):
        return out
    return x.tape.record(out, (x,), lambda g: (np.full_like(vx, g[0]),))


def mean(x):
    vx = value(x)
    n = vx.size
    out = np.array([vx.sum() / n])
    if not isinstance(x, Var):
        return out
    return x.tape.record(out, (x,), lambda g: (np.full_like(vx, g[0] / n),))


def row_sqnorm(x):
    """Per-row squared Euclidean norm of an (N, d) array."""
    vx = value(x)
    out = np.einsum("ij,ij->i", vx, vx)
    if not isinstance(x, Var):
        return out
    return x.tape.record(out, (x,), lambda g: (2.0 * g[:, None] * vx,))


def huber_norm(d, delta: float):
    """Huber loss of the row norms of ``d``: ``r^2/2`` below ``delta``, else ``delta (r - delta/2)``.

    The quadratic branch is written in ``|d|^2`` so zero rows have a clean
    zero gradient.
    """
    vd = value(d)
    sq = np.einsum("ij,ij->i", vd, vd)
    r = np.sqrt(sq)
    quad = r <= delta
    out = np.where(quad, 0.5 * sq, delta * (r - 0.5 * delta))
    if not isinstance(d, Var):
        return out
    coef = np.where(quad, 1.0, delta / np.where(quad, 1.0, r))

    def vjp(g):
        return ((g * coef)[:, None] * vd,)
    return d.tape.record(out, (d,), vjp)


def curriculum_l1(pred, gt, eps, lam, clamp: float):
    """Elementwise tolerance-zone L1 with hard-example weighting.

    With ``f`` and ``s`` the prediction and target clamped to
    ``[-clamp, clamp]``: ``(1 + lam * sgn(s) * sgn(s - f)) * max(|f - s| - eps, 0)``.
    ``eps`` and ``lam`` may be scalars or per-element arrays.
    """
    vp = value(pred)
    s = np.clip(np.asarray(gt, dtype=np.float64), -clamp, clamp)
    f = np.clip(vp, -clamp, clamp)
    diff = f - s
    weight = 1.0 + lam * np.sign(s) * np.sign(s - f)
    excess = np.abs(diff) - eps
    active = excess > 0.0
    # np.maximum keeps NaNs visible to the caller
    out = weight * np.maximum(excess, 0.0)
    if not isinstance(pred, Var):
        return out
    inside = (vp > -clamp) & (vp < clamp)
    dfd = np.where(active & inside, weight * np.sign(diff), 0.0)
    return pred.tape.record(out, (pred,), lambda g: (g * dfd,))


# ---------------------------------------------------------------- MLPs

ACTIVATIONS = {"softplus": softplus, "tanh": tanh, "identity": identity, "relu": relu}


@dataclass
class MlpParams:
    """Dense layers with per-layer activations.

    ``skip_input`` lists layers whose input gets the network input appended;
    ``residual`` holds ``(start, end)`` pairs adding the input of layer
    ``start`` to the activated output of layer ``end``.
    """

    weights: list
    biases: list
    activations: list
    skip_input: tuple = ()
    residual: tuple = ()
    beta: float = 100.0

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ShapeMismatch("weights, biases and activations must have equal length")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        self.skip_input = tuple(self.skip_input)
        self.residual = tuple(tuple(r) for r in self.residual)
        in_dim = self.weights[0].shape[0]
        width = in_dim
        ends = {e: s for s, e in self.residual}
        widths_in = []
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            expect = width + (in_dim if i in self.skip_input else 0)
            if W.shape[0] != expect or b.shape != (W.shape[1],):
                raise ShapeMismatch(f"layer {i}: weight {W.shape}, bias {b.shape}, expected input {expect}")
            widths_in.append(expect)
            width = W.shape[1]
            if i in ends and widths_in[ends[i]] != width:
                raise ShapeMismatch(f"residual ({ends[i]}, {i}) joins widths {widths_in[ends[i]]} and {width}")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def widths(self) -> list:
        return [self.in_dim] + [W.shape[1] for W in self.weights]

    def arrays(self) -> list:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def copy(self) -> "MlpParams":
        return MlpParams([W.copy() for W in self.weights], [b.copy() for b in self.biases],
                         list(self.activations), self.skip_input, self.residual, self.beta)


def mlp_forward(params: MlpParams, x, tape: Tape | None = None):
    """Evaluate the network on row-batched input ``x``.

    With a tape, every weight and bias becomes a shared leaf (unless frozen)
    and the whole forward pass is recorded.
    """
    if value(x).shape[-1] != params.in_dim:
        raise ShapeMismatch(f"input width {value(x).shape[-1]} != {params.in_dim}")
    inp = x
    h = x
    starts = {s: e for s, e in params.residual}
    saved = {}
    for i, (W, b, act) in enumerate(zip(params.weights, params.biases, params.activations)):
        if tape is not None:
            W, b = tape.param(W), tape.param(b)
        if i in params.skip_input:
            h = concat([h, inp])
        if i in starts:
            saved[starts[i]] = h
        h = dense(h, W, b)
        if act == "softplus":
            h = softplus(h, params.beta)
        else:
            h = ACTIVATIONS[act](h)
        if i in saved:
            h = add(h, saved.pop(i))
    return h


def mlp_reference(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Straight-line re-evaluation without the op layer, for cross-checking."""
    x = np.asarray(x, dtype=np.float64)
    h = x
    pending = {}
    starts = {s: e for s, e in params.residual}
    for i in range(len(params.weights)):
        if i in params.skip_input:
            h = np.concatenate([h, x], axis=-1)
        if i in starts:
            pending[starts[i]] = h
        h = h @ params.weights[i] + params.biases[i]
        act = params.activations[i]
        if act == "softplus":
            h = np.log1p(np.exp(-params.beta * np.abs(h))) * (1.0 / params.beta) + np.maximum(h, 0.0)
        elif act == "tanh":
            h = np.tanh(h)
        elif act == "relu":
            h = np.maximum(h, 0.0)
        if i in pending:
            h = h + pending.pop(i)
    return h


def init_mlp(widths: Sequence[int], activations: Sequence[str], rng: np.random.Generator,
             skip_input=(), residual=(), beta: float = 100.0, gain: float = 1.0) -> MlpParams:
    """He-style normal initialization with zero biases."""
    in_dim = widths[0]
    Ws, bs = [], []
    for i in range(len(widths) - 1):
        fan_in = widths[i] + (in_dim if i in skip_input else 0)
        Ws.append(rng.standard_normal((fan_in, widths[i + 1])) * gain * np.sqrt(2.0 / fan_in))
        bs.append(np.zeros(widths[i + 1]))
    return MlpParams(Ws, bs, list(activations), tuple(skip_input), tuple(residual), beta)


# ---------------------------------------------------------------- verification

def grad_check(f: Callable, x, eps: float = 1e-6) -> float:
    """Largest per-coordinate relative error between tape and central-difference gradients.

    ``f`` maps a parameter vector (array or tape node) to a scalar built from
    the primitives in this module.
    """
    x = np.asarray(x, dtype=np.float64)
    tape = Tape()
    xv = tape.leaf(x.copy())
    out = f(xv)
    if isinstance(out, Var):
        analytic = backward(tape, out)[xv]
    else:
        analytic = np.zeros_like(x)
    numeric = np.zeros_like(x)
    flat = numeric.reshape(-1)
    for k in range(x.size):
        xp = x.copy().reshape(-1)
        xm = x.copy().reshape(-1)
        xp[k] += eps
        xm[k] -= eps
        fp = float(np.sum(value(f(xp.reshape(x.shape)))))
        fm = float(np.sum(value(f(xm.reshape(x.shape)))))
        flat[k] = (fp - fm) / (2.0 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if x.size else 0.0


# ---------------------------------------------------------------- checkpoints

WEIGHTS_MAGIC = b"NDFW"
WEIGHTS_VERSION = 1


def save_weights(layers: Sequence[tuple[str, np.ndarray, np.ndarray]], path) -> dict:
    """Write named (W, b) layers to an NDFW file plus a JSON manifest beside it.

    Layout: magic, version u32, layer count u32; then per layer rows u32,
    cols u32, row-major float64 weights and float64 biases (little endian).
    """
    path = Path(path)
    chunks = [WEIGHTS_MAGIC, struct.pack("<II", WEIGHTS_VERSION, len(layers))]
    offset = 12
    manifest = {}
    for name, W, b in layers:
        W = np.ascontiguousarray(W, dtype="<f8")
        b = np.ascontiguousarray(b, dtype="<f8").reshape(-1)
        if W.ndim != 2 or b.shape[0] != W.shape[1]:
            raise ShapeMismatch(f"layer {name}: weight {W.shape} / bias {b.shape}")
        chunks.append(struct.pack("<II", *W.shape))
        offset += 8
        manifest[name] = {"weight_offset": offset, "weight_shape": list(W.shape),
                          "bias_offset": offset + W.nbytes, "bias_shape": [b.shape[0]]}
        chunks += [W.tobytes(), b.tobytes()]
        offset += W.nbytes + b.nbytes
    path.write_bytes(b"".join(chunks))
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def load_weights(path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Inverse of :func:`save_weights`; layer names come from the manifest."""
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != WEIGHTS_MAGIC:
        raise ParseError("not an NDFW weight file")
    version, count = struct.unpack("<II", data[4:12])
    if version != WEIGHTS_VERSION:
        raise ParseError(f"unsupported NDFW version {version}")
    manifest = json.loads(path.with_suffix(".json").read_text())
    if len(manifest) != count:
        raise ParseError(f"manifest lists {len(manifest)} layers, file holds {count}")
    out = {}
    for name, m in manifest.items():
        r, c = m["weight_shape"]
        if struct.unpack("<II", data[m["weight_offset"] - 8:m["weight_offset"]]) != (r, c):
            raise ParseError(f"layer {name}: dims disagree with manifest")
        W = np.frombuffer(data, "<f8", r * c, m["weight_offset"]).reshape(r, c).astype(np.float64)
        b = np.frombuffer(data, "<f8", c, m["bias_offset"]).astype(np.float64)
        out[name] = (W, b)
    return out
