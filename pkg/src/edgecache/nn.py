"""Minimal dense feed-forward networks with analytic gradients and Adam.

Everything is float64 numpy.  Inputs are (batch, dim); a 1-D input is
promoted to a single-row batch and the output squeezed back.  `backward`
applies the plain chain rule: any mean-over-batch factor belongs in the
output gradient supplied by the caller.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from hashlib import sha256

import numpy as np

ACTIVATIONS = ("linear", "relu", "tanh", "softmax")
_ACT_CODES = {name: i for i, name in enumerate(ACTIVATIONS)}
_MAGIC = b"DENSE\x00v1"


class ShapeError(ValueError):
    """Mismatched layer, input, or gradient shapes."""


class GradientError(ValueError):
    """Non-finite gradients reached the optimizer."""


@dataclass
class Layer:
    w: np.ndarray  # (in, out)
    b: np.ndarray  # (out,)
    activation: str


Params = list  # list[Layer]


def init_dense(dims, activations, rng: np.random.Generator) -> Params:
    """Xavier-uniform weights, zero biases; softmax only as the output."""
    if len(activations) != len(dims) - 1:
        raise ShapeError(f"{len(dims)} dims need {len(dims) - 1} activations")
    for i, act in enumerate(activations):
        if act not in ACTIVATIONS:
            raise ShapeError(f"unknown activation {act!r}")
        if act == "softmax" and i != len(activations) - 1:
            raise ShapeError("softmax is an output activation only")
    layers = []
    for d_in, d_out, act in zip(dims, dims[1:], activations):
        bound = np.sqrt(6.0 / (d_in + d_out))
        w = rng.uniform(-bound, bound, size=(d_in, d_out))
        layers.append(Layer(w, np.zeros(d_out), act))
    return layers


def _activate(z: np.ndarray, act: str) -> np.ndarray:
    if act == "linear":
        return z
    if act == "relu":
        return np.maximum(z, 0.0)
    if act == "tanh":
        return np.tanh(z)
    # softmax, numerically stabilized per row
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class Tape:
    steps: list  # (input, preactivation, output) per layer
    squeezed: bool


def forward(params: Params, x) -> tuple[np.ndarray, Tape]:
    """Run the stack; the tape carries what `backward` needs."""
    x = np.asarray(x, dtype=float)
    squeezed = x.ndim == 1
    if squeezed:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params[0].w.shape[0]:
        raise ShapeError(
            f"input shape {x.shape} incompatible with first layer "
            f"({params[0].w.shape[0]} inputs)"
        )
    steps = []
    h = x
    for layer in params:
        z = h @ layer.w + layer.b
        y = _activate(z, layer.activation)
        steps.append((h, z, y))
        h = y
    out = h[0] if squeezed else h
    return out, Tape(steps, squeezed)


def backward(params: Params, tape: Tape, output_grad) -> tuple[list, np.ndarray]:
    """Gradients of the scalar whose output gradient is supplied.

    Returns ([(dW, db)] per layer, gradient w.r.t. the network input).
    """
    g = np.asarray(output_grad, dtype=float)
    if tape.squeezed and g.ndim == 1:
        g = g[None, :]
    if len(tape.steps) != len(params):
        raise ShapeError("tape does not match parameter stack")
    if g.shape != tape.steps[-1][2].shape:
        raise ShapeError(
            f"output gradient shape {g.shape} != output shape {tape.steps[-1][2].shape}"
        )
    grads = [None] * len(params)
    for i in range(len(params) - 1, -1, -1):
        layer = params[i]
        h, z, y = tape.steps[i]
        act = layer.activation
        if act == "linear":
            dz = g
        elif act == "relu":
            dz = g * (z > 0)
        elif act == "tanh":
            dz = g * (1.0 - y * y)
        else:  # softmax: dz = y * (g - <g, y>)
            dz = y * (g - (g * y).sum(axis=1, keepdims=True))
        grads[i] = (h.T @ dz, dz.sum(axis=0))
        g = dz @ layer.w.T
    input_grad = g[0] if tape.squeezed else g
    return grads, input_grad


@dataclass
class AdamState:
    """Adam with bias correction; moments allocated on first use."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def _ensure(self, params: Params) -> None:
        if not self.m:
            self.m = [(np.zeros_like(l.w), np.zeros_like(l.b)) for l in params]
            self.v = [(np.zeros_like(l.w), np.zeros_like(l.b)) for l in params]


def adam_step(state: AdamState, params: Params, grads: list) -> Params:
    """One bias-corrected Adam update, in place; returns `params`."""
    state._ensure(params)
    if len(grads) != len(params):
        raise ShapeError("gradient list does not match parameter stack")
    for i, (layer, (dw, db)) in enumerate(zip(params, grads)):
        if dw.shape != layer.w.shape or db.shape != layer.b.shape:
            raise ShapeError(f"gradient shape mismatch at layer {i}")
        if not (np.isfinite(dw).all() and np.isfinite(db).all()):
            raise GradientError(
                f"non-finite gradient at layer {i}: "
                f"|dW|max={np.abs(dw).max()}, |db|max={np.abs(db).max()}"
            )
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for layer, (dw, db), (mw, mb), (vw, vb) in zip(params, grads, state.m, state.v):
        for param, grad, mom, sq in ((layer.w, dw, mw, vw), (layer.b, db, mb, vb)):
            mom *= state.beta1
            mom += (1.0 - state.beta1) * grad
            sq *= state.beta2
            sq += (1.0 - state.beta2) * grad * grad
            param -= state.lr * (mom / c1) / (np.sqrt(sq / c2) + state.eps)
    return params


def clone_params(params: Params) -> Params:
    return [Layer(l.w.copy(), l.b.copy(), l.activation) for l in params]


def same_architecture(a: Params, b: Params) -> bool:
    return len(a) == len(b) and all(
        la.w.shape == lb.w.shape and la.activation == lb.activation
        for la, lb in zip(a, b)
    )


def soft_update(target: Params, online: Params, nu: float) -> Params:
    """target <- nu * online + (1 - nu) * target, elementwise, in place."""
    if not 0.0 <= nu <= 1.0:
        raise ShapeError(f"soft-update coefficient {nu} outside [0, 1]")
    if not same_architecture(target, online):
        raise ShapeError("architectures differ")
    if nu == 0.0:
        return target
    for lt, lo in zip(target, online):
        if nu == 1.0:
            lt.w[...] = lo.w
            lt.b[...] = lo.b
        else:
            lt.w *= 1.0 - nu
            lt.w += nu * lo.w
            lt.b *= 1.0 - nu
            lt.b += nu * lo.b
    return target


# --- serialization: magic, layer count, per-layer dims + activation code,
# --- then all weights/biases as little-endian float64.

def serialize(params: Params) -> bytes:
    chunks = [_MAGIC, struct.pack("<I", len(params))]
    for layer in params:
        d_in, d_out = layer.w.shape
        chunks.append(
            struct.pack("<III", d_in, d_out, _ACT_CODES[layer.activation])
        )
    for layer in params:
        chunks.append(np.ascontiguousarray(layer.w, dtype="<f8").tobytes())
        chunks.append(np.ascontiguousarray(layer.b, dtype="<f8").tobytes())
    return b"".join(chunks)


def deserialize(blob: bytes) -> Params:
    if blob[: len(_MAGIC)] != _MAGIC:
        raise ShapeError("bad magic header")
    off = len(_MAGIC)
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    shapes = []
    for _ in range(count):
        d_in, d_out, code = struct.unpack_from("<III", blob, off)
        off += 12
        shapes.append((d_in, d_out, ACTIVATIONS[code]))
    layers = []
    for d_in, d_out, act in shapes:
        w = np.frombuffer(blob, dtype="<f8", count=d_in * d_out, offset=off)
        off += 8 * d_in * d_out
        b = np.frombuffer(blob, dtype="<f8", count=d_out, offset=off)
        off += 8 * d_out
        layers.append(Layer(w.reshape(d_in, d_out).copy(), b.copy(), act))
    return layers


def save_params(params: Params, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(params))


def load_params(path) -> Params:
    with open(path, "rb") as fh:
        return deserialize(fh.read())


def params_digest(params: Params) -> str:
    return sha256(serialize(params)).hexdigest()


# --- finite-difference verification utilities (independent of backward).

def flatten_params(params: Params) -> np.ndarray:
    return np.concatenate([np.r_[l.w.ravel(), l.b] for l in params])


def set_flat_params(params: Params, flat: np.ndarray) -> None:
    off = 0
    for layer in params:
        k = layer.w.size
        layer.w[...] = flat[off : off + k].reshape(layer.w.shape)
        off += k
        layer.b[...] = flat[off : off + layer.b.size]
        off += layer.b.size


def flatten_grads(grads: list) -> np.ndarray:
    return np.concatenate([np.r_[dw.ravel(), db] for dw, db in grads])


def finite_difference_gradient(loss_fn, params: Params, delta: float = 1e-5) -> np.ndarray:
    """Central differences of `loss_fn(params)` over every parameter."""
    base = flatten_params(params)
    out = np.empty_like(base)
    work = base.copy()
    for i in range(base.size):
        work[i] = base[i] + delta
        set_flat_params(params, work)
        hi = loss_fn(params)
        work[i] = base[i] - delta
        set_flat_params(params, work)
        lo = loss_fn(params)
        work[i] = base[i]
        out[i] = (hi - lo) / (2.0 * delta)
    set_flat_params(params, base)
    return out


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
