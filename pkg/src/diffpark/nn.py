"""Small dense-network kernel: MLP forward/backward, finite differences and Adam."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import SchemaError, TrainingError, UsageError

WEIGHTS_SCHEMA_VERSION = 1

_ACT = {
    "tanh": (np.tanh, lambda z, a: 1.0 - a * a),
    "linear": (lambda z: z, lambda z, a: np.ones_like(z)),
    "relu": (lambda z: np.maximum(z, 0.0), lambda z, a: (z > 0).astype(float)),
}


@dataclass
class MlpParams:
    """Weights ``W[k]`` have shape (out, in); ``activations[k]`` applies after hidden layer k."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or len(self.activations) != len(self.weights) - 1:
            raise UsageError("need one bias per layer and one activation per hidden layer")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise UsageError(f"layer {k}: weight {w.shape} and bias {b.shape} do not match")
            if k and w.shape[1] != self.weights[k - 1].shape[0]:
                raise UsageError(f"layer {k} input size {w.shape[1]} != previous output {self.weights[k - 1].shape[0]}")
        for a in self.activations:
            if a not in _ACT:
                raise UsageError(f"unknown activation {a!r}")

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "MlpParams":
        return MlpParams(list(arrays[0::2]), list(arrays[1::2]), list(self.activations))

    def copy(self) -> "MlpParams":
        return self.with_arrays([a.copy() for a in self.arrays()])


def init_mlp(sizes: Sequence[int], rng: np.random.Generator, activation: str = "tanh") -> MlpParams:
    """Uniform Glorot initialisation with zero biases."""
    weights, biases = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        limit = math.sqrt(6.0 / (n_in + n_out))
        weights.append(rng.uniform(-limit, limit, size=(n_out, n_in)))
        biases.append(np.zeros(n_out))
    return MlpParams(weights, biases, [activation] * (len(sizes) - 2))


@dataclass
class MlpCache:
    params_id: int
    signature: tuple
    inputs: list[np.ndarray]  # input to each layer
    pre: list[np.ndarray]  # pre-activations of hidden layers
    post: list[np.ndarray]
    squeeze: bool


def _signature(p: MlpParams) -> tuple:
    return tuple(w.shape for w in p.weights) + tuple(p.activations)


def mlp_forward(p: MlpParams, x) -> tuple[np.ndarray, MlpCache]:
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    if h.shape[-1] != p.weights[0].shape[1]:
        raise UsageError(f"input size {h.shape[-1]} != network input size {p.weights[0].shape[1]}")
    inputs, pre, post = [], [], []
    n = len(p.weights)
    for k, (w, b) in enumerate(zip(p.weights, p.biases)):
        inputs.append(h)
        z = h @ w.T + b
        if k < n - 1:
            f, _ = _ACT[p.activations[k]]
            h = f(z)
            pre.append(z)
            post.append(h)
        else:
            h = z
    cache = MlpCache(id(p), _signature(p), inputs, pre, post, squeeze)
    return (h[0] if squeeze else h), cache


def mlp_backward(p: MlpParams, cache: MlpCache, grad_out) -> tuple[MlpParams, np.ndarray]:
    """Gradients of a scalar loss w.r.t. parameters and inputs, given dLoss/dOutput.

    Parameter gradients are summed over the batch.
    """
    if cache.params_id != id(p) or cache.signature != _signature(p):
        raise UsageError("cache does not belong to these parameters")
    g = np.asarray(grad_out, dtype=float)
    if cache.squeeze:
        g = g[None, :]
    if g.shape != (cache.inputs[0].shape[0], p.weights[-1].shape[0]):
        raise UsageError(f"output gradient shape {g.shape} does not match the forward pass")
    n = len(p.weights)
    dws: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    dbs: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    for k in range(n - 1, -1, -1):
        dws[k] = g.T @ cache.inputs[k]
        dbs[k] = g.sum(axis=0)
        g = g @ p.weights[k]
        if k > 0:
            _, df = _ACT[p.activations[k - 1]]
            g = g * df(cache.pre[k - 1], cache.post[k - 1])
    return MlpParams(dws, dbs, list(p.activations)), (g[0] if cache.squeeze else g)


def finite_diff_grad(loss_fn: Callable[[MlpParams], float], p: MlpParams, h: float = 1e-5) -> MlpParams:
    """Central-difference gradient of ``loss_fn`` at ``p``, one parameter at a time."""
    if not h > 0:
        raise ValueError("h must be > 0")
    base = [a.copy() for a in p.arrays()]
    grads = []
    for i, arr in enumerate(base):
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            up = loss_fn(p.with_arrays(base))
            arr[idx] = orig - h
            down = loss_fn(p.with_arrays(base))
            arr[idx] = orig
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return p.with_arrays(grads)


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(arrays: Sequence[np.ndarray], lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> OptimizerState:
    return OptimizerState([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays],
                          0, lr, beta1, beta2, eps)


def adam_step(
    arrays: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    st: OptimizerState,
    anchor: Optional[Sequence[np.ndarray]] = None,
    anchor_weight: float = 0.0,
) -> tuple[list[np.ndarray], OptimizerState]:
    """Bias-corrected Adam update.

    With ``anchor`` set, the penalty ``anchor_weight * ||p - anchor||^2`` is applied as an exact
    proximal step under Adam's per-coordinate step sizes, so a huge weight pins ``p`` to ``anchor``.
    """
    if len(arrays) != len(grads) or len(arrays) != len(st.m):
        raise UsageError("parameter, gradient and optimizer-state structures differ")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise TrainingError("non-finite gradient passed to adam_step")
    t = st.step + 1
    c1 = 1.0 - st.beta1 ** t
    c2 = 1.0 - st.beta2 ** t
    new_p, new_m, new_v = [], [], []
    for k, (p, g, m, v) in enumerate(zip(arrays, grads, st.m, st.v)):
        if p.shape != g.shape:
            raise UsageError(f"gradient {k} shape {g.shape} != parameter shape {p.shape}")
        m = st.beta1 * m + (1.0 - st.beta1) * g
        v = st.beta2 * v + (1.0 - st.beta2) * g * g
        rate = st.lr / (np.sqrt(v / c2) + st.eps)
        upd = p - rate * (m / c1)
        if anchor is not None and anchor_weight > 0:
            c = 2.0 * anchor_weight * rate
            upd = (upd + c * anchor[k]) / (1.0 + c)
        new_p.append(upd)
        new_m.append(m)
        new_v.append(v)
    return new_p, replace(st, m=new_m, v=new_v, step=t)


# ---------------------------------------------------------------- weights file

def mlp_to_dict(p: MlpParams) -> dict:
    layers = []
    for k, (w, b) in enumerate(zip(p.weights, p.biases)):
        layers.append({
            "in": int(w.shape[1]),
            "out": int(w.shape[0]),
            "activation": p.activations[k] if k < len(p.activations) else "linear",
            "weight": w.ravel(order="C").tolist(),
            "bias": b.tolist(),
        })
    return {"schema_version": WEIGHTS_SCHEMA_VERSION, "layers": layers}


def mlp_from_dict(d: dict) -> MlpParams:
    if d.get("schema_version") != WEIGHTS_SCHEMA_VERSION:
        raise SchemaError("unsupported weights schema version")
    try:
        weights, biases, acts = [], [], []
        for layer in d["layers"]:
            w = np.asarray(layer["weight"], dtype=float).reshape(layer["out"], layer["in"])
            weights.append(w)
            biases.append(np.asarray(layer["bias"], dtype=float))
            acts.append(layer["activation"])
        return MlpParams(weights, biases, acts[:-1])
    except (KeyError, ValueError, TypeError, UsageError) as exc:
        raise SchemaError(f"malformed weights: {exc}") from exc


def save_mlp(p: MlpParams, path) -> None:
    with open(path, "w") as fh:
        json.dump(mlp_to_dict(p), fh)


def load_mlp(path) -> MlpParams:
    with open(path) as fh:
        return mlp_from_dict(json.load(fh))

