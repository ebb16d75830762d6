"""Neural layers: (dilated) convolution, bilinear-initialised deconvolution,
L2 normalisation with learnable scale, softmax cross-entropy and smooth-L1.

Convolution is cross-correlation (no kernel flip) implemented via im2col.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import ModelParams, Tensor, make_op, relu

L2NORM_EPS = 1e-12
L2NORM_INIT_SCALE = 10.0


def conv_output_size(size: int, k: int, stride: int, pad: int, dilation: int) -> int:
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, ho: int, wo: int, stride: int, dilation: int) -> np.ndarray:
    """(N,C,H,W) padded input -> (C*kh*kw, N*ho*wo) patch matrix."""
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    win = as_strided(
        xp,
        shape=(c, kh, kw, n, ho, wo),
        strides=(sc, sh * dilation, sw * dilation, sn, sh * stride, sw * stride),
        writeable=False,
    )
    return win.reshape(c * kh * kw, n * ho * wo)


def _col2im(cols: np.ndarray, out: np.ndarray, kh: int, kw: int, ho: int, wo: int, stride: int, dilation: int) -> None:
    """Scatter-add a (C*kh*kw, N*ho*wo) patch matrix into ``out`` (N,C,H,W)."""
    n, c = out.shape[:2]
    cols = cols.reshape(c, kh, kw, n, ho, wo)
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            y0, x0 = i * dilation, j * dilation
            out[:, :, y0:y0 + hspan:stride, x0:x0 + wspan:stride] += cols[:, i, j].transpose(1, 0, 2, 3)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0, dilation: int = 1) -> Tensor:
    """Cross-correlation of ``x`` (N,C,H,W) with ``weight`` (O,C,kh,kw)."""
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ValueError(f"conv2d: weight expects {ci} input channels, input has {c}")
    ho = conv_output_size(h, kh, stride, pad, dilation)
    wo = conv_output_size(w, kw, stride, pad, dilation)
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d: non-positive output size {ho}x{wo} for input {h}x{w}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, kh, kw, ho, wo, stride, dilation)
    wm = weight.data.reshape(o, -1)
    y = (wm @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        y = y + bias.data.reshape(1, o, 1, 1)
    y = np.ascontiguousarray(y)

    def bwd(g):
        gm = g.transpose(1, 0, 2, 3).reshape(o, -1)
        gw = (gm @ cols.T).reshape(weight.shape) if weight._tracked else None
        gb = g.sum(axis=(0, 2, 3)).reshape(bias.shape) if bias is not None and bias._tracked else None
        gx = None
        if x._tracked:
            gxp = np.zeros(xp.shape)
            _col2im(wm.T @ gm, gxp, kh, kw, ho, wo, stride, dilation)
            gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_op(y, inputs, bwd, "conv2d")


def deconv_crop(factor: int) -> int:
    return factor // 2


def deconv2d(x: Tensor, weight: Tensor, factor: int) -> Tensor:
    """Transposed convolution with stride ``factor``, cropped to exactly factor x size.

    ``weight`` has shape (in_c, out_c, K, K); the full transposed output of
    length (H-1)*f + K is cropped starting at ``factor // 2``.
    """
    n, ci, h, w = x.shape
    wci, co, kh, kw = weight.shape
    if wci != ci:
        raise ValueError(f"deconv2d: weight expects {wci} input channels, input has {ci}")
    f = int(factor)
    full_h, full_w = (h - 1) * f + kh, (w - 1) * f + kw
    oh, ow = f * h, f * w
    crop = deconv_crop(f)
    if crop + oh > full_h or crop + ow > full_w:
        raise ValueError(f"deconv2d: kernel {kh}x{kw} too small for factor {f}")

    xm = x.data.transpose(1, 0, 2, 3).reshape(ci, -1)
    wm = weight.data.reshape(ci, -1)
    full = np.zeros((n, co, full_h, full_w))
    _col2im(wm.T @ xm, full, kh, kw, h, w, f, 1)
    y = np.ascontiguousarray(full[:, :, crop:crop + oh, crop:crop + ow])

    def bwd(g):
        gfull = np.zeros((n, co, full_h, full_w))
        gfull[:, :, crop:crop + oh, crop:crop + ow] = g
        cols = _im2col(gfull, kh, kw, h, w, f, 1)
        gx = (wm @ cols).reshape(ci, n, h, w).transpose(1, 0, 2, 3) if x._tracked else None
        gw = (xm @ cols.T).reshape(weight.shape) if weight._tracked else None
        return gx, gw

    return make_op(y, (x, weight), bwd, "deconv2d")


def bilinear_kernel_1d(factor: int) -> np.ndarray:
    """Per-axis bilinear weights of length 2*factor."""
    if factor < 1:
        raise ValueError(f"upsampling factor must be >= 1, got {factor}")
    size = 2 * factor
    center = (size - 1 - (factor % 2)) / (2.0 * factor)
    i = np.arange(size)
    return 1.0 - np.abs(i / factor - center)


def bilinear_deconv_init(factor: int, channels: int) -> np.ndarray:
    """Deconv weights (channels, channels, 2f, 2f) performing bilinear upsampling."""
    k1 = bilinear_kernel_1d(factor)
    kernel = np.outer(k1, k1)
    w = np.zeros((channels, channels, 2 * factor, 2 * factor))
    idx = np.arange(channels)
    w[idx, idx] = kernel
    return w


def l2norm_scale(x: Tensor, gamma: Tensor, eps: float = L2NORM_EPS) -> Tensor:
    """out[n,c,h,w] = gamma[c] * x[n,c,h,w] / max(||x[n,:,h,w]||, eps)."""
    c = x.shape[1]
    if gamma.shape != (1, c, 1, 1):
        raise ValueError(f"l2norm_scale: gamma shape {gamma.shape} does not match {c} channels")
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=1, keepdims=True))
    live = norm > eps
    denom = np.where(live, norm, eps)
    unit = xd / denom
    y = gamma.data * unit

    def bwd(g):
        gg = None
        if gamma._tracked:
            gg = (g * unit).sum(axis=(0, 2, 3)).reshape(gamma.shape)
        gx = None
        if x._tracked:
            gs = g * gamma.data
            proj = (gs * unit).sum(axis=1, keepdims=True)
            gx = np.where(live, (gs - unit * proj) / denom, gs / denom)
        return gx, gg

    return make_op(y, (x, gamma), bwd, "l2norm_scale")


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_xent(logits: Tensor, labels, normalizer: float | None = None) -> Tensor:
    """Cross-entropy of rows of ``logits`` (N,K,1,1) against integer ``labels``.

    Labels equal to -1 are ignored. The loss is summed over valid rows and
    divided by ``normalizer`` (default: the number of valid rows).
    """
    n, k = logits.shape[:2]
    if logits.shape[2:] != (1, 1):
        raise ValueError(f"softmax_xent expects (N,K,1,1) logits, got {logits.shape}")
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.shape != (n,):
        raise ValueError(f"softmax_xent: {labels.shape[0]} labels for {n} rows")
    if np.any((labels < -1) | (labels >= k)):
        raise ValueError(f"softmax_xent: label out of range [0, {k - 1}]")
    valid = labels >= 0
    count = int(valid.sum())
    norm = float(normalizer) if normalizer is not None else float(max(count, 1))

    z = logits.data.reshape(n, k)
    zs = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(zs).sum(axis=1))
    rows = np.nonzero(valid)[0]
    picked = zs[rows, labels[rows]]
    loss = float((lse[rows] - picked).sum()) / norm

    def bwd(g):
        p = softmax(z, axis=1)
        p[rows, labels[rows]] -= 1.0
        p[~valid] = 0.0
        return ((g.reshape(-1)[0] / norm) * p).reshape(n, k, 1, 1),

    return make_op(np.full((1, 1, 1, 1), loss), (logits,), bwd, "softmax_xent")


def smooth_l1(pred: Tensor, target, weights=None, normalizer: float = 1.0) -> Tensor:
    """Sum over rows and coordinates of 0.5 d^2 (|d| < 1) or |d| - 0.5.

    ``pred`` is (N,D,1,1), ``target`` (N,D); ``weights`` (N,) masks rows.
    """
    n, d = pred.shape[:2]
    target = np.asarray(target, dtype=np.float64).reshape(n, d)
    if pred.shape[2:] != (1, 1):
        raise ValueError(f"smooth_l1 expects (N,D,1,1) predictions, got {pred.shape}")
    wts = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64).reshape(n)
    diff = pred.data.reshape(n, d) - target
    ad = np.abs(diff)
    quad = ad < 1.0
    per = np.where(quad, 0.5 * diff * diff, ad - 0.5)
    loss = float((per * wts[:, None]).sum()) / normalizer

    def bwd(g):
        dd = np.where(quad, diff, np.sign(diff)) * wts[:, None]
        return ((g.reshape(-1)[0] / normalizer) * dd).reshape(n, d, 1, 1),

    return make_op(np.full((1, 1, 1, 1), loss), (pred,), bwd, "smooth_l1")


# ---------------------------------------------------------------------------
# parameterised layers


class ConvLayer:
    def __init__(self, params: ModelParams, name: str, in_c: int, out_c: int, k: int,
                 rng: np.random.Generator, stride: int = 1, pad: int | None = None,
                 dilation: int = 1, init_std: float | None = None):
        self.stride = stride
        self.dilation = dilation
        self.pad = dilation * (k - 1) // 2 if pad is None else pad
        std = math.sqrt(2.0 / (in_c * k * k)) if init_std is None else init_std
        self.weight = params.add(f"{name}.weight", Tensor(rng.normal(0.0, std, (out_c, in_c, k, k))))
        self.bias = params.add(f"{name}.bias", Tensor(np.zeros((1, out_c, 1, 1))))

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.pad, self.dilation)


class DeconvLayer:
    """Learnable f-times upsampler initialised to bilinear interpolation."""

    def __init__(self, params: ModelParams, name: str, channels: int, factor: int):
        self.factor = factor
        self.weight = params.add(f"{name}.weight", Tensor(bilinear_deconv_init(factor, channels)))

    def __call__(self, x: Tensor) -> Tensor:
        return deconv2d(x, self.weight, self.factor)


class L2NormScaleLayer:
    def __init__(self, params: ModelParams, name: str, channels: int,
                 init_scale: float = L2NORM_INIT_SCALE, eps: float = L2NORM_EPS):
        self.eps = eps
        self.gamma = params.add(f"{name}.gamma", Tensor(np.full((1, channels, 1, 1), init_scale)))

    def __call__(self, x: Tensor) -> Tensor:
        return l2norm_scale(x, self.gamma, self.eps)


class PredictionHead:
    """3x3 conv + ReLU feeding two sibling 1x1 convs (class branch, box branch)."""

    def __init__(self, params: ModelParams, name: str, in_c: int, mid_c: int,
                 cls_c: int, box_c: int, rng: np.random.Generator, out_std: float = 0.01):
        self.conv = ConvLayer(params, f"{name}.conv", in_c, mid_c, 3, rng)
        self.cls = ConvLayer(params, f"{name}.cls", mid_c, cls_c, 1, rng, init_std=out_std)
        self.box = ConvLayer(params, f"{name}.box", mid_c, box_c, 1, rng, init_std=out_std)

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        h = relu(self.conv(x))
        return self.cls(h), self.box(h)
