"""Parameter store, sequential forward/backward and the Adam optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import ShapeMismatch, StaleCache
from .layers import LayerSpec, layer_backward, layer_forward


class ModelParams:
    """Learnable tensors, BatchNorm running statistics and Adam state.

    ``version`` is bumped on every optimizer step so stale forward caches
    can be detected.
    """

    def __init__(self, tensors=None, state=None):
        self.tensors: dict[str, np.ndarray] = dict(tensors or {})
        self.state: dict[str, np.ndarray] = dict(state or {})
        self.adam_m: dict[str, np.ndarray] = {}
        self.adam_v: dict[str, np.ndarray] = {}
        self.step = 0
        self.version = 0

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    @property
    def dtype(self):
        for t in self.tensors.values():
            return t.dtype
        return np.dtype(np.float32)

    def copy(self) -> "ModelParams":
        out = ModelParams({k: v.copy() for k, v in self.tensors.items()}, {k: v.copy() for k, v in self.state.items()})
        out.adam_m = {k: v.copy() for k, v in self.adam_m.items()}
        out.adam_v = {k: v.copy() for k, v in self.adam_v.items()}
        out.step = self.step
        out.version = self.version
        return out

    def astype(self, dtype) -> "ModelParams":
        out = self.copy()
        for d in (out.tensors, out.state, out.adam_m, out.adam_v):
            for k in d:
                d[k] = d[k].astype(dtype)
        return out

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())


def init_params(spec: Sequence[LayerSpec], rng: np.random.Generator, dtype=np.float32,
                params: ModelParams | None = None) -> ModelParams:
    """He-uniform weights, zero biases, unit BatchNorm scale."""
    params = params if params is not None else ModelParams()
    for layer in spec:
        for name, shape in layer.param_shapes().items():
            if name in params.tensors:
                raise ValueError(f"duplicate parameter {name}")
            if name.endswith(".weight"):
                fan_in = int(np.prod(shape[1:]))
                bound = np.sqrt(6.0 / fan_in)
                params.tensors[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
            elif name.endswith(".gamma"):
                params.tensors[name] = np.ones(shape, dtype=dtype)
            else:
                params.tensors[name] = np.zeros(shape, dtype=dtype)
        for name, shape in layer.state_shapes().items():
            fill = np.ones if name.endswith("running_var") else np.zeros
            params.state[name] = fill(shape, dtype=dtype)
    return params


@dataclass
class ForwardCache:
    names: tuple
    version: int
    train: bool
    layers: list = field(default_factory=list)


def _layer_key(spec: Sequence[LayerSpec]):
    return tuple((layer.kind, layer.name) for layer in spec)


def forward(spec: Sequence[LayerSpec], params: ModelParams, x, mode: str = "eval"):
    """Run a layer stack. Train mode uses batch statistics and updates running stats."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    train = mode == "train"
    y = np.asarray(x, dtype=params.dtype)
    cache = ForwardCache(_layer_key(spec), params.version, train)
    state = params.state if train else dict(params.state)
    for layer in spec:
        y, c = layer_forward(layer, params.tensors, state, y, train)
        cache.layers.append(c)
    return y, cache


def backward(spec: Sequence[LayerSpec], params: ModelParams, cache: ForwardCache, dy):
    """Return ``(grads, dx)`` for a cache produced by :func:`forward`."""
    if cache.names != _layer_key(spec) or cache.version != params.version:
        raise StaleCache("forward cache does not match the current layer stack or parameters")
    grads: dict[str, np.ndarray] = {}
    d = np.asarray(dy, dtype=params.dtype)
    for layer, c in zip(reversed(spec), reversed(cache.layers)):
        d, g = layer_backward(layer, params.tensors, c, d)
        grads.update(g)
    return grads, d


def adam_step(params: ModelParams, grads: dict, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, in place."""
    for name, g in grads.items():
        if name not in params.tensors:
            raise ShapeMismatch(f"gradient for unknown parameter {name}")
        if g.shape != params.tensors[name].shape:
            raise ShapeMismatch(f"{name}: gradient shape {g.shape} != parameter shape {params.tensors[name].shape}")
    params.step += 1
    t = params.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        p = params.tensors[name]
        m = params.adam_m.get(name)
        v = params.adam_v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        g = g.astype(p.dtype, copy=False)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * (g * g)
        params.adam_m[name] = m.astype(p.dtype, copy=False)
        params.adam_v[name] = v.astype(p.dtype, copy=False)
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        params.tensors[name] = (p - update).astype(p.dtype, copy=False)
    params.version += 1
