"""Independent reference implementations used as test oracles.

These are deliberately naive (explicit loops, float64) and share no code
with the package beyond the layer specs they evaluate.
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np

from texforensics import nn
from texforensics.nn.gradcheck import relative_error, sample_coords


def diversity_bruteforce(patch) -> int:
    """Four-direction absolute-difference sum, one term at a time."""
    p = np.asarray(patch, dtype=np.int64)
    if p.ndim == 2:
        p = p[:, :, None]
    m, n, c = p.shape
    total = 0
    for ch in range(c):
        for i in range(m):
            for j in range(n):
                v = int(p[i, j, ch])
                if j + 1 < n:
                    total += abs(v - int(p[i, j + 1, ch]))
                if i + 1 < m:
                    total += abs(v - int(p[i + 1, j, ch]))
                if i + 1 < m and j + 1 < n:
                    total += abs(v - int(p[i + 1, j + 1, ch]))
                if i + 1 < m and j >= 1:
                    total += abs(v - int(p[i + 1, j - 1, ch]))
    return total


def correlate_clamped(plane, kernel) -> np.ndarray:
    """Dense cross-correlation with clamp-to-edge borders, one output pixel at a time."""
    plane = np.asarray(plane, dtype=np.float64)
    h, w = plane.shape
    k = kernel.shape[0]
    r = k // 2
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            acc = 0.0
            for dy in range(k):
                for dx in range(k):
                    yy = min(max(y + dy - r, 0), h - 1)
                    xx = min(max(x + dx - r, 0), w - 1)
                    acc += kernel[dy, dx] * plane[yy, xx]
            out[y, x] = acc
    return out


def conv2d_loop(x, w, stride=1, pad=1, bias=None) -> np.ndarray:
    """Zero-padded 2-D convolution (cross-correlation), NCHW, explicit loops over outputs."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, c, h, wd = x.shape
    f, _, k, _ = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for b in range(n):
        for o in range(f):
            for i in range(ho):
                for j in range(wo):
                    win = xp[b, :, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[b, o, i, j] = float((win * w[o]).sum())
            if bias is not None:
                out[b, o] += bias[o]
    return out


def bn_eval_loop(x, gamma, beta, mean, var, eps=1e-5) -> np.ndarray:
    out = np.empty_like(np.asarray(x, dtype=np.float64))
    for ch in range(x.shape[1]):
        out[:, ch] = (x[:, ch] - mean[ch]) / math.sqrt(var[ch] + eps) * gamma[ch] + beta[ch]
    return out


def bce_reference(p, y) -> float:
    p = np.asarray(p, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    terms = []
    for pi, yi in zip(p, y):
        t = 0.0
        if yi:
            t -= yi * math.log(pi)
        if 1 - yi:
            t -= (1 - yi) * math.log(1 - pi)
        terms.append(t)
    return sum(terms) / len(terms)


def average_precision_bruteforce(scores, labels) -> float:
    """Precision at every positive rank (ranks by descending score, ties by index), averaged.

    Exact rational arithmetic, one final rounding.
    """
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    ranked = [labels[i] for i in order]
    precs = []
    for k, lbl in enumerate(ranked, 1):
        if lbl == 1:
            precs.append(Fraction(sum(ranked[:k]), k))
    return float(100 * sum(precs) / len(precs))


def adam_reference(p, grads_seq, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook Adam over a sequence of gradients, scalar by scalar."""
    p = np.array(p, dtype=np.float64).ravel()
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads_seq, 1):
        g = np.asarray(g, dtype=np.float64).ravel()
        for i in range(p.size):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] ** 2
            mh = m[i] / (1 - b1 ** t)
            vh = v[i] / (1 - b2 ** t)
            p[i] -= lr * mh / (math.sqrt(vh) + eps)
    return p


# ------------------------------------------------------------------ gradients


def _ref_layer(layer, tensors, x):
    """Train-mode layer forward for the FD oracle; only conv reuses package code."""
    kind = layer.kind
    if kind == "conv":
        from texforensics.nn.layers import conv_forward
        return conv_forward(layer, tensors, x)[0]
    if kind == "batchnorm":
        axes = (0,) if x.ndim == 2 else (0, 2, 3)
        shape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
        xc = x - x.mean(axis=axes, keepdims=True)
        var = np.mean(xc * xc, axis=axes, keepdims=True)
        scale = tensors[f"{layer.name}.gamma"].reshape(shape) / np.sqrt(var + layer.eps)
        return xc * scale + tensors[f"{layer.name}.beta"].reshape(shape)
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "hardtanh":
        return np.clip(x, layer.lo, layer.hi)
    if kind == "avgpool":
        k = layer.window
        assert layer.stride == k
        n, c, h, w = x.shape
        x = x[:, :, : h - h % k, : w - w % k]
        return x.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))
    if kind == "adaptive_avgpool":
        assert tuple(layer.output_size) == (1, 1)
        return x.mean(axis=(2, 3), keepdims=True)
    if kind == "flatten":
        return x.reshape(x.shape[0], -1)
    if kind == "fully_connected":
        y = x @ tensors[f"{layer.name}.weight"].T
        if layer.bias:
            y = y + tensors[f"{layer.name}.bias"]
        return y
    raise ValueError(kind)


def _run(stages, tensors, state, start, x):
    for kind, payload in stages[start:]:
        x = _ref_layer(payload, tensors, x) if kind == "layer" else payload(x)
    return x


def _stages(spec, n, b, labels):
    y = np.asarray(labels, dtype=np.float64)

    def combine(a):
        return a[:n] - a[n:] if b == 2 else a

    def loss_of_logits(z):
        return nn.bce_with_logits(z[:, 0], y)[0]

    stages = [("layer", layer) for layer in spec.block] + [("fn", combine)]
    return stages + [("layer", layer) for layer in spec.classifier] + [("fn", loss_of_logits)]


def kink_margin(spec, params, branches) -> float:
    """Smallest distance of any ReLU / Hardtanh input to its kink (float64 forward)."""
    n, b = branches.shape[:2]
    x = branches.astype(np.float64).transpose(1, 0, 2, 3, 4).reshape(n * b, *branches.shape[2:])
    tensors = {k: v.astype(np.float64) for k, v in params.tensors.items()}
    state = {k: v.astype(np.float64) for k, v in params.state.items()}
    margin = np.inf
    for kind, payload in _stages(spec, n, b, np.zeros(n))[:-1]:
        if kind == "layer" and payload.kind == "relu":
            margin = min(margin, float(np.abs(x).min()))
        if kind == "layer" and payload.kind == "hardtanh":
            margin = min(margin, float(np.minimum(np.abs(x - payload.lo), np.abs(x - payload.hi)).min()))
        x = _run([(kind, payload)], tensors, state, 0, x)
    return margin


def _conv_weight_basis(layer, x, coord):
    """Change in the conv output per unit change of weight ``coord`` (conv is linear in it)."""
    o, c, i, j = coord
    p, s = layer.padding, layer.stride
    n, _, h, w = x.shape
    xp = np.pad(x[:, c], ((0, 0), (p, p), (p, p)))
    ho = (h + 2 * p - layer.kernel) // s + 1
    wo = (w + 2 * p - layer.kernel) // s + 1
    out = np.zeros((n, layer.out_channels, ho, wo))
    out[:, o] = xp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]
    return out


def _conv_input_basis(layer, weight, out_shape, coord):
    """Change in a stride-1 conv output per unit change of input pixel ``coord``."""
    bi, c, y, x = coord
    k, p = layer.kernel, layer.padding
    out = np.zeros(out_shape)
    for i in range(k):
        for j in range(k):
            oy, ox = y + p - i, x + p - j
            if 0 <= oy < out_shape[2] and 0 <= ox < out_shape[3]:
                out[bi, :, oy, ox] += weight[:, c, i, j]
    return out


def _param_basis(layer, x_in, name, coord):
    """Exact change of ``layer``'s output per unit change of parameter ``name[coord]``.

    Every learnable tensor in the detector enters its layer output linearly.
    """
    if layer.kind == "conv":
        return _conv_weight_basis(layer, x_in, coord)
    if layer.kind == "batchnorm":
        (ch,) = coord
        out = np.zeros_like(x_in)
        if name.endswith(".beta"):
            out[:, ch] = 1.0
        else:
            v = x_in[:, ch]
            out[:, ch] = (v - v.mean()) / math.sqrt(v.var() + layer.eps)
        return out
    if layer.kind == "fully_connected":
        out = np.zeros((x_in.shape[0], layer.out_channels))
        if name.endswith(".bias"):
            out[:, coord[0]] = 1.0
        else:
            o, i = coord
            out[:, o] = x_in[:, i]
        return out
    raise ValueError(f"no parameters in {layer.kind}")


def _masks(stages, start, x, tensors, state):
    """Loss plus the ReLU / Hardtanh activation pattern of every stage from ``start``."""
    pattern = []
    for kind, payload in stages[start:]:
        if kind == "layer" and payload.kind == "relu":
            pattern.append(np.packbits(x > 0).tobytes())
        elif kind == "layer" and payload.kind == "hardtanh":
            pattern.append(np.packbits((x > payload.lo) & (x < payload.hi)).tobytes())
        x = _run([(kind, payload)], tensors, state, 0, x)
    return x, pattern


def detector_gradcheck(spec, params, branches, labels, coords_per_tensor=50, seed=0, eps=1e-6):
    """Relative error per tensor between the analytic detector gradient and FD.

    The analytic side runs at ``params`` precision; the FD oracle runs in
    float64 on the same values. A probe only re-evaluates the network after
    the perturbed layer, starting from the cached output plus an exact
    linear delta. If either probe changes the activation pattern (it
    stepped over a kink) the step is shrunk tenfold, up to three times.
    """
    from texforensics.detector import loss_and_grads

    _, grads, _, dx = loss_and_grads(spec, params, branches, labels)
    n, b = branches.shape[:2]
    t64 = {k: v.astype(np.float64) for k, v in params.tensors.items()}
    stages = _stages(spec, n, b, labels)
    owner = {}
    for i, (kind, payload) in enumerate(stages):
        if kind == "layer":
            for name in payload.param_shapes():
                owner[name] = i

    x0 = branches.astype(np.float64).transpose(1, 0, 2, 3, 4).reshape(n * b, *branches.shape[2:])
    state = {k: v.astype(np.float64) for k, v in params.state.items()}
    inputs = [x0]
    for stage in stages[:-1]:
        inputs.append(_run([stage], t64, state, 0, inputs[-1]))
    base_pattern = {}

    def central(start, basis):
        if start not in base_pattern:
            base_pattern[start] = _masks(stages, start, inputs[start], t64, dict(state))[1]
        h = eps
        for _ in range(4):
            up, pu = _masks(stages, start, inputs[start] + h * basis, t64, dict(state))
            down, pd = _masks(stages, start, inputs[start] - h * basis, t64, dict(state))
            if pu == base_pattern[start] and pd == base_pattern[start]:
                break
            h /= 10
        return (up - down) / (2 * h)

    rng = np.random.default_rng(seed)
    errors = {}
    for name, g in grads.items():
        i = owner[name]
        layer = stages[i][1]
        coords = sample_coords(g.shape, coords_per_tensor, rng)
        num = [central(i + 1, _param_basis(layer, inputs[i], name, c)) for c in coords]
        errors[name] = relative_error([g[c] for c in coords], num)
    first = stages[0][1]
    coords = sample_coords(x0.shape, coords_per_tensor, rng)
    w = t64[f"{first.name}.weight"]
    num = [central(1, _conv_input_basis(first, w, inputs[1].shape, c)) for c in coords]
    dx_flat = dx.transpose(1, 0, 2, 3, 4).reshape(x0.shape)
    errors["input"] = relative_error([dx_flat[c] for c in coords], num)
    return errors


def smooth_point(spec, params, shape, min_margin=1e-6, max_tries=100):
    """First seeded standard-normal input whose kink margin is at least ``min_margin``.

    Finite differences are only meaningful away from ReLU / Hardtanh kinks.
    """
    for s in range(max_tries):
        x = np.random.default_rng(s).standard_normal(shape).astype(params.dtype)
        if kink_margin(spec, params, x) >= min_margin:
            return x, s
    raise RuntimeError("no smooth evaluation point found")


def layer_gradcheck(layer, x, tensors, eps=1e-6, seed=0, coords=50, train=True):
    """Per-tensor relative error of one layer's backward against central differences.

    The scalar probed is ``sum(y * R)`` for a fixed random ``R``.
    """
    from texforensics.nn.gradcheck import numeric_grad

    rng = np.random.default_rng(seed)
    state = {}
    for name, shape in layer.state_shapes().items():
        state[name] = np.ones(shape) if name.endswith("running_var") else np.zeros(shape)
    y, cache = nn.layer_forward(layer, tensors, dict(state), x, train)
    r = rng.standard_normal(y.shape)
    dx, grads = nn.layer_backward(layer, tensors, cache, r)

    def loss():
        return float((nn.layer_forward(layer, tensors, dict(state), x, train)[0] * r).sum())

    errors = {}
    for name, g in grads.items():
        cs = sample_coords(g.shape, coords, rng)
        errors[name] = relative_error([g[c] for c in cs], numeric_grad(loss, tensors[name], cs, eps))
    cs = sample_coords(x.shape, coords, rng)
    errors["input"] = relative_error([dx[c] for c in cs], numeric_grad(loss, x, cs, eps))
    return errors


def away_from_kinks(x, kinks=(0.0,), gap=1e-3):
    """Push values that sit within ``gap`` of a kink out to distance ``gap``."""
    x = x.copy()
    for k in kinks:
        near = np.abs(x - k) < gap
        x[near] = k + np.where(x[near] >= k, gap, -gap)
    return x


def layer_cases():
    """One small float64 instance of every layer kind: (label, layer, input, tensors, train)."""
    rng = np.random.default_rng(123)

    def weights(layer):
        return {n: rng.standard_normal(s) for n, s in layer.param_shapes().items()}

    cases = []
    for label, layer in [
        ("conv3x3", nn.conv("c", 3, 4, 3)),
        ("conv_stride2", nn.conv("c", 3, 2, 3, stride=2, padding=1)),
        ("conv_bias_nopad", nn.conv("c", 2, 3, 3, padding=0, bias=True)),
        ("conv1x1", nn.conv("c", 4, 3, 1)),
    ]:
        cases.append((label, layer, rng.standard_normal((2, layer.in_channels, 7, 6)), weights(layer), True))
    bn = nn.batchnorm("bn", 3)
    bn_w = {"bn.gamma": rng.uniform(0.5, 1.5, 3), "bn.beta": rng.standard_normal(3)}
    cases.append(("batchnorm_train", bn, rng.standard_normal((4, 3, 5, 5)) * 2 + 1, bn_w, True))
    cases.append(("batchnorm_eval", bn, rng.standard_normal((4, 3, 5, 5)), dict(bn_w), False))
    bn1 = nn.batchnorm("bn", 5)
    cases.append(("batchnorm_1d", bn1, rng.standard_normal((6, 5)),
                  {"bn.gamma": rng.uniform(0.5, 1.5, 5), "bn.beta": rng.standard_normal(5)}, True))
    cases.append(("relu", nn.relu(), away_from_kinks(rng.standard_normal((2, 3, 4, 4))), {}, True))
    cases.append(("hardtanh", nn.hardtanh(), away_from_kinks(rng.standard_normal((2, 3, 4, 4)) * 1.5, (-1.0, 1.0)),
                  {}, True))
    cases.append(("avgpool", nn.avgpool(2, 2), rng.standard_normal((2, 3, 6, 7)), {}, True))
    cases.append(("adaptive_avgpool_1x1", nn.adaptive_avgpool((1, 1)), rng.standard_normal((2, 3, 5, 4)), {}, True))
    cases.append(("adaptive_avgpool_2x3", nn.adaptive_avgpool((2, 3)), rng.standard_normal((2, 3, 5, 7)), {}, True))
    cases.append(("flatten", nn.flatten(), rng.standard_normal((2, 3, 2, 2)), {}, True))
    fc = nn.fully_connected("fc", 6, 3)
    cases.append(("fully_connected", fc, rng.standard_normal((4, 6)), weights(fc), True))
    return cases
