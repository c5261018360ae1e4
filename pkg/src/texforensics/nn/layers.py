"""Layer kinds with explicit forward and backward passes.

Tensors are NCHW numpy arrays (``(N, F)`` after flatten). Each forward
returns ``(y, cache)``; each backward takes that cache and the upstream
gradient and returns ``(dx, {param_name: grad})``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ShapeMismatch

KINDS = ("conv", "batchnorm", "relu", "hardtanh", "avgpool", "adaptive_avgpool", "flatten", "fully_connected")

# Upper bound on im2col buffer elements per chunk (~128 MB of float32).
_COLS_BUDGET = 32 * 1024 * 1024


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str = ""
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    bias: bool = False
    window: int = 2
    output_size: tuple[int, int] = (1, 1)
    lo: float = -1.0
    hi: float = 1.0
    eps: float = 1e-5
    momentum: float = 0.9

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv", "batchnorm", "fully_connected") and not self.name:
            raise ValueError(f"{self.kind} layers need a name")
        if self.kind in ("conv", "fully_connected") and (self.in_channels < 1 or self.out_channels < 1):
            raise ValueError(f"{self.kind} layer {self.name} needs positive channel counts")
        if self.kind == "batchnorm" and self.in_channels < 1:
            raise ValueError(f"batchnorm layer {self.name} needs a channel count")
        if self.kind == "conv" and (self.kernel < 1 or self.stride < 1 or self.padding < 0):
            raise ValueError(f"bad conv geometry in {self.name}")
        if self.kind == "avgpool" and (self.window < 1 or self.stride < 1):
            raise ValueError("bad pooling geometry")
        if self.kind == "hardtanh" and not self.lo < self.hi:
            raise ValueError("hardtanh needs lo < hi")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        if self.kind == "conv":
            shapes = {f"{self.name}.weight": (self.out_channels, self.in_channels, self.kernel, self.kernel)}
            if self.bias:
                shapes[f"{self.name}.bias"] = (self.out_channels,)
            return shapes
        if self.kind == "batchnorm":
            return {f"{self.name}.gamma": (self.in_channels,), f"{self.name}.beta": (self.in_channels,)}
        if self.kind == "fully_connected":
            shapes = {f"{self.name}.weight": (self.out_channels, self.in_channels)}
            if self.bias:
                shapes[f"{self.name}.bias"] = (self.out_channels,)
            return shapes
        return {}

    def state_shapes(self) -> dict[str, tuple[int, ...]]:
        if self.kind == "batchnorm":
            return {f"{self.name}.running_mean": (self.in_channels,), f"{self.name}.running_var": (self.in_channels,)}
        return {}


def conv(name, in_channels, out_channels, kernel=3, stride=1, padding=None, bias=False) -> LayerSpec:
    if padding is None:
        padding = kernel // 2
    return LayerSpec("conv", name, in_channels, out_channels, kernel=kernel, stride=stride, padding=padding, bias=bias)


def batchnorm(name, channels, eps=1e-5, momentum=0.9) -> LayerSpec:
    return LayerSpec("batchnorm", name, in_channels=channels, eps=eps, momentum=momentum)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def hardtanh(lo=-1.0, hi=1.0) -> LayerSpec:
    return LayerSpec("hardtanh", lo=lo, hi=hi)


def avgpool(window=2, stride=2) -> LayerSpec:
    return LayerSpec("avgpool", window=window, stride=stride)


def adaptive_avgpool(output_size=(1, 1)) -> LayerSpec:
    return LayerSpec("adaptive_avgpool", output_size=tuple(output_size))


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def fully_connected(name, in_features, out_features, bias=True) -> LayerSpec:
    return LayerSpec("fully_connected", name, in_features, out_features, bias=bias)


# ---------------------------------------------------------------------- conv


def _im2col(xp, k, s, ho, wo):
    """Patch tensor ``(N, C*k*k, ho*wo)`` of an already padded input."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k * k, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i * k + j] = xp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s]
    return cols.reshape(n, c * k * k, ho * wo)


def _col2im(dcols, dxp, k, s, ho, wo):
    n, c = dxp.shape[:2]
    dcols = dcols.reshape(n, c, k * k, ho, wo)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += dcols[:, :, i * k + j]


def _conv_geometry(spec, x):
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ShapeMismatch(f"{spec.name}: expected (N, {spec.in_channels}, H, W) input, got {x.shape}")
    n, c, h, w = x.shape
    k, s, p = spec.kernel, spec.stride, spec.padding
    ho = (h + 2 * p - k) // s + 1
    wo = (w + 2 * p - k) // s + 1
    if ho < 1 or wo < 1:
        raise ShapeMismatch(f"{spec.name}: input {h}x{w} too small for kernel {k}")
    return n, c, h, w, k, s, p, ho, wo


def _chunks(n, per_sample):
    step = max(1, _COLS_BUDGET // max(per_sample, 1))
    for start in range(0, n, step):
        yield start, min(n, start + step)


def _flat_padded(x, p, k):
    """Zero-padded input flattened per channel, plus ``k - 1`` spare cells so every shifted slice fits."""
    n, c, h, w = x.shape
    wp = w + 2 * p
    flat = np.zeros((n, c, (h + 2 * p) * wp + k - 1), dtype=x.dtype)
    flat[:, :, : (h + 2 * p) * wp].reshape(n, c, h + 2 * p, wp)[:, :, p : p + h, p : p + w] = x
    return flat, wp


def _shift_forward(x, weight, p):
    # Stride 1: output row-block (ho x wp) is a sum of k*k matmuls against
    # contiguous shifted slices of the flattened padded input. The last
    # k - 1 columns of every output row are wrap-around junk and get dropped.
    n, c, h, w = x.shape
    f, _, k, _ = weight.shape
    flat, wp = _flat_padded(x, p, k)
    ho, wo = h + 2 * p - k + 1, w + 2 * p - k + 1
    span = ho * wp
    taps = [np.ascontiguousarray(weight[:, :, i, j]) for i in range(k) for j in range(k)]
    out = np.zeros((n, f, span), dtype=x.dtype)
    for b in range(n):
        ob = out[b]
        for i in range(k):
            for j in range(k):
                off = i * wp + j
                ob += taps[i * k + j] @ flat[b, :, off : off + span]
    return out.reshape(n, f, ho, wp)[:, :, :, :wo]


def _shift_backward(x, weight, p, dy):
    n, c, h, w = x.shape
    f, _, k, _ = weight.shape
    flat, wp = _flat_padded(x, p, k)
    ho, wo = dy.shape[2:]
    span = ho * wp
    dyw = np.zeros((n, f, ho, wp), dtype=dy.dtype)
    dyw[:, :, :, :wo] = dy
    dyw = dyw.reshape(n, f, span)
    dflat = np.zeros_like(flat)
    dw = np.zeros((f, c, k, k), dtype=x.dtype)
    taps_t = [np.ascontiguousarray(weight[:, :, i, j].T) for i in range(k) for j in range(k)]
    for b in range(n):
        d = dyw[b]
        for i in range(k):
            for j in range(k):
                off = i * wp + j
                dw[:, :, i, j] += d @ flat[b, :, off : off + span].T
                dflat[b, :, off : off + span] += taps_t[i * k + j] @ d
    dxp = dflat[:, :, : (h + 2 * p) * wp].reshape(n, c, h + 2 * p, wp)
    return np.ascontiguousarray(dxp[:, :, p : p + h, p : p + w]), dw


def conv_forward(spec, params, x):
    n, c, h, w, k, s, p, ho, wo = _conv_geometry(spec, x)
    weight = params[f"{spec.name}.weight"]
    if weight.shape != (spec.out_channels, c, k, k):
        raise ShapeMismatch(f"{spec.name}: weight shape {weight.shape} does not match the layer")
    if s == 1:
        out = np.ascontiguousarray(_shift_forward(x, weight, p))
    else:
        wmat = weight.reshape(spec.out_channels, -1)
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        out = np.empty((n, spec.out_channels, ho * wo), dtype=x.dtype)
        for a, b in _chunks(n, ho * wo * c * k * k):
            np.matmul(wmat, _im2col(xp[a:b], k, s, ho, wo), out=out[a:b])
        out = out.reshape(n, spec.out_channels, ho, wo)
    if spec.bias:
        out += params[f"{spec.name}.bias"][None, :, None, None]
    return out, x


def conv_backward(spec, params, x, dy):
    n, c, h, w, k, s, p, ho, wo = _conv_geometry(spec, x)
    wt = params[f"{spec.name}.weight"]
    if s == 1:
        dx, dw = _shift_backward(x, wt, p, dy)
    else:
        wmat = wt.reshape(spec.out_channels, -1)
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        dxp = np.zeros_like(xp)
        dwm = np.zeros_like(wmat)
        dy3 = dy.reshape(n, spec.out_channels, ho * wo)
        for a, b in _chunks(n, ho * wo * c * k * k):
            cols = _im2col(xp[a:b], k, s, ho, wo)
            for i in range(b - a):
                dwm += dy3[a + i] @ cols[i].T
            _col2im(np.matmul(wmat.T, dy3[a:b]), dxp[a:b], k, s, ho, wo)
        dw = dwm.reshape(wt.shape)
        dx = np.ascontiguousarray(dxp[:, :, p : p + h, p : p + w] if p else dxp)
    grads = {f"{spec.name}.weight": dw}
    if spec.bias:
        grads[f"{spec.name}.bias"] = dy.sum(axis=(0, 2, 3))
    return dx, grads


# ----------------------------------------------------------------- batchnorm


def _bn_axes(spec, x):
    if x.ndim not in (2, 4) or x.shape[1] != spec.in_channels:
        raise ShapeMismatch(f"{spec.name}: expected {spec.in_channels} channels, got shape {x.shape}")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
    return axes, bshape


def batchnorm_forward(spec, params, state, x, train):
    axes, bshape = _bn_axes(spec, x)
    gamma = params[f"{spec.name}.gamma"]
    beta = params[f"{spec.name}.beta"]
    rm_key, rv_key = f"{spec.name}.running_mean", f"{spec.name}.running_var"
    if train:
        count = x.size // x.shape[1]
        if count < 2:
            raise ShapeMismatch(f"{spec.name}: batch statistics need more than one value per channel")
        mean = x.mean(axis=axes, dtype=np.float64)
        var = x.var(axis=axes, dtype=np.float64)
        m = spec.momentum
        state[rm_key] = (m * state[rm_key] + (1 - m) * mean).astype(state[rm_key].dtype)
        state[rv_key] = (m * state[rv_key] + (1 - m) * var * count / (count - 1)).astype(state[rv_key].dtype)
    else:
        mean, var = state[rm_key].astype(x.dtype), state[rv_key].astype(x.dtype)
    invstd = (1.0 / np.sqrt(var + spec.eps)).astype(x.dtype)
    xhat = (x - mean.reshape(bshape).astype(x.dtype)) * invstd.reshape(bshape)
    y = gamma.reshape(bshape) * xhat + beta.reshape(bshape)
    return y.astype(x.dtype, copy=False), (xhat, invstd, train)


def batchnorm_backward(spec, params, cache, dy):
    xhat, invstd, train = cache
    axes, bshape = _bn_axes(spec, dy)
    gamma = params[f"{spec.name}.gamma"]
    # Reductions accumulate in float64: the centred gradient below cancels
    # heavily and float32 sums lose several digits.
    sum_dy = dy.sum(axis=axes, dtype=np.float64)
    sum_dyx = (dy * xhat).sum(axis=axes, dtype=np.float64)
    grads = {f"{spec.name}.gamma": sum_dyx.astype(dy.dtype), f"{spec.name}.beta": sum_dy.astype(dy.dtype)}
    g = gamma.astype(np.float64)
    if not train:
        return dy * (gamma * invstd).reshape(bshape).astype(dy.dtype), grads
    count = dy.size // dy.shape[1]
    mean_d = (g * sum_dy / count).reshape(bshape)
    mean_dx = (g * sum_dyx / count).reshape(bshape)
    dx = invstd.reshape(bshape) * (dy * gamma.reshape(bshape) - mean_d - xhat * mean_dx)
    return dx.astype(dy.dtype, copy=False), grads


# --------------------------------------------------------------- activations


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(mask, dy):
    return dy * mask


def hardtanh_forward(spec, x):
    mask = (x > spec.lo) & (x < spec.hi)
    return np.clip(x, spec.lo, spec.hi), mask


def hardtanh_backward(mask, dy):
    return dy * mask


# ------------------------------------------------------------------- pooling


def avgpool_forward(spec, x):
    if x.ndim != 4:
        raise ShapeMismatch(f"avgpool expects NCHW input, got {x.shape}")
    k, s = spec.window, spec.stride
    n, c, h, w = x.shape
    ho, wo = (h - k) // s + 1, (w - k) // s + 1
    if ho < 1 or wo < 1:
        raise ShapeMismatch(f"avgpool window {k} larger than input {h}x{w}")
    y = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            y += x[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s]
    return y / (k * k), x.shape


def avgpool_backward(spec, in_shape, dy):
    k, s = spec.window, spec.stride
    ho, wo = dy.shape[2:]
    dx = np.zeros(in_shape, dtype=dy.dtype)
    share = dy / (k * k)
    for i in range(k):
        for j in range(k):
            dx[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += share
    return dx


def _adaptive_bounds(size, out):
    return [((i * size) // out, -((-(i + 1) * size) // out)) for i in range(out)]


def adaptive_avgpool_forward(spec, x):
    if x.ndim != 4:
        raise ShapeMismatch(f"adaptive_avgpool expects NCHW input, got {x.shape}")
    oh, ow = spec.output_size
    n, c, h, w = x.shape
    if (oh, ow) == (1, 1):
        return x.mean(axis=(2, 3), keepdims=True), x.shape
    y = np.empty((n, c, oh, ow), dtype=x.dtype)
    for i, (r0, r1) in enumerate(_adaptive_bounds(h, oh)):
        for j, (c0, c1) in enumerate(_adaptive_bounds(w, ow)):
            y[:, :, i, j] = x[:, :, r0:r1, c0:c1].mean(axis=(2, 3))
    return y, x.shape


def adaptive_avgpool_backward(spec, in_shape, dy):
    oh, ow = spec.output_size
    n, c, h, w = in_shape
    dx = np.zeros(in_shape, dtype=dy.dtype)
    for i, (r0, r1) in enumerate(_adaptive_bounds(h, oh)):
        for j, (c0, c1) in enumerate(_adaptive_bounds(w, ow)):
            dx[:, :, r0:r1, c0:c1] += dy[:, :, i : i + 1, j : j + 1] / ((r1 - r0) * (c1 - c0))
    return dx


# ------------------------------------------------------------ dense / shape


def fc_forward(spec, params, x):
    if x.ndim != 2 or x.shape[1] != spec.in_channels:
        raise ShapeMismatch(f"{spec.name}: expected (N, {spec.in_channels}) input, got {x.shape}")
    y = x @ params[f"{spec.name}.weight"].T
    if spec.bias:
        y = y + params[f"{spec.name}.bias"]
    return y, x


def fc_backward(spec, params, x, dy):
    grads = {f"{spec.name}.weight": dy.T @ x}
    if spec.bias:
        grads[f"{spec.name}.bias"] = dy.sum(axis=0)
    return dy @ params[f"{spec.name}.weight"], grads


def layer_forward(spec: LayerSpec, params, state, x, train: bool):
    kind = spec.kind
    if kind == "conv":
        return conv_forward(spec, params, x)
    if kind == "batchnorm":
        return batchnorm_forward(spec, params, state, x, train)
    if kind == "relu":
        return relu_forward(x)
    if kind == "hardtanh":
        return hardtanh_forward(spec, x)
    if kind == "avgpool":
        return avgpool_forward(spec, x)
    if kind == "adaptive_avgpool":
        return adaptive_avgpool_forward(spec, x)
    if kind == "flatten":
        return x.reshape(x.shape[0], -1), x.shape
    return fc_forward(spec, params, x)


def layer_backward(spec: LayerSpec, params, cache, dy):
    kind = spec.kind
    if kind == "conv":
        return conv_backward(spec, params, cache, dy)
    if kind == "batchnorm":
        return batchnorm_backward(spec, params, cache, dy)
    if kind == "relu":
        return relu_backward(cache, dy), {}
    if kind == "hardtanh":
        return hardtanh_backward(cache, dy), {}
    if kind == "avgpool":
        return avgpool_backward(spec, cache, dy), {}
    if kind == "adaptive_avgpool":
        return adaptive_avgpool_backward(spec, cache, dy), {}
    if kind == "flatten":
        return dy.reshape(cache), {}
    return fc_backward(spec, params, cache, dy)
