"""Differentiable neural-network ops on :class:`~ultraupconvnet.tensor.Tensor`."""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .tensor import DTYPE, Tensor, as_tensor, make_result, tsum

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


# ---------------------------------------------------------------------------
# Convolution (im2col + batched matmul)
# ---------------------------------------------------------------------------


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation with zero padding, NCHW layout.

    ``weight`` has shape ``(Cout, Cin // groups, kH, kW)``.
    """
    if x.ndim != 4:
        raise ValueError(f"conv2d: input must be 4-D (N,C,H,W), got shape {x.shape}")
    if weight.ndim != 4:
        raise ValueError(f"conv2d: weight must be 4-D, got shape {weight.shape}")
    n, cin, h, w = x.shape
    cout, cg, kh, kw = weight.shape
    if groups < 1 or cin % groups:
        raise ValueError(f"conv2d: input channels Cin={cin} not divisible by groups={groups}")
    if cout % groups:
        raise ValueError(f"conv2d: output channels Cout={cout} not divisible by groups={groups}")
    if cg != cin // groups:
        raise ValueError(
            f"conv2d: weight in-channel dim is {cg}, expected Cin/groups = {cin // groups}"
        )
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: bad stride={stride} or padding={padding}")
    if h + 2 * padding < kh:
        raise ValueError(f"conv2d: padded height {h + 2 * padding} smaller than kernel height {kh}")
    if w + 2 * padding < kw:
        raise ValueError(f"conv2d: padded width {w + 2 * padding} smaller than kernel width {kw}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match Cout={cout}")

    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    coutg = cout // groups
    kk = cg * kh * kw

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # (N, G, Cg, Ho, Wo, kh, kw) -> (G, N*Ho*Wo, Cg*kh*kw)
    cols = (
        win.reshape(n, groups, cg, ho, wo, kh, kw)
        .transpose(1, 0, 3, 4, 2, 5, 6)
        .reshape(groups, n * ho * wo, kk)
    )
    wmat = weight.data.reshape(groups, coutg, kk).transpose(0, 2, 1)
    out = np.matmul(cols, wmat)  # (G, N*Ho*Wo, Coutg)
    out = out.reshape(groups, n, ho, wo, coutg).transpose(1, 0, 4, 2, 3).reshape(n, cout, ho, wo)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def grad_fn(g):
        gm = g.reshape(n, groups, coutg, ho, wo).transpose(1, 0, 3, 4, 2).reshape(groups, n * ho * wo, coutg)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.matmul(cols.transpose(0, 2, 1), gm).transpose(0, 2, 1).reshape(weight.shape)
        if x.requires_grad:
            dcols = np.matmul(gm, wmat.transpose(0, 2, 1))  # (G, N*Ho*Wo, Cg*kh*kw)
            dcols = (
                dcols.reshape(groups, n, ho, wo, cg, kh, kw)
                .transpose(1, 0, 4, 5, 6, 2, 3)
                .reshape(n, cin, kh, kw, ho, wo)
            )
            dxp = np.zeros((n, cin, h + 2 * padding, w + 2 * padding), dtype=DTYPE)
            for i in range(kh):
                hi = i + stride * (ho - 1) + 1
                for j in range(kw):
                    wj = j + stride * (wo - 1) + 1
                    dxp[:, :, i:hi:stride, j:wj:stride] += dcols[:, :, i, j]
            gx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
            gx = np.ascontiguousarray(gx)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_result(out, parents, grad_fn, "conv2d")


# ---------------------------------------------------------------------------
# Dense / normalization / activations
# ---------------------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the trailing dimension."""
    if weight.ndim != 2:
        raise ValueError(f"linear: weight must be 2-D (Dout, Din), got {weight.shape}")
    dout, din = weight.shape
    if x.ndim < 1 or x.shape[-1] != din:
        raise ValueError(f"linear: input trailing dim {x.shape[-1:]} does not match Din={din}")
    if bias is not None and bias.shape != (dout,):
        raise ValueError(f"linear: bias shape {bias.shape} does not match Dout={dout}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def grad_fn(g):
        g2 = g.reshape(-1, dout)
        gx = (g @ weight.data) if x.requires_grad else None
        gw = (g2.T @ x.data.reshape(-1, din)) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_result(out, parents, grad_fn, "linear")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the trailing axis with the population variance."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"layer_norm: gamma/beta shapes {gamma.shape}/{beta.shape} do not match C={c}")
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def grad_fn(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = rstd * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_result(out, (x, gamma, beta), grad_fn, "layer_norm")


def layer_norm_channels_first(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Layer norm over the channel axis of an NCHW map."""
    y = layer_norm(x.permute(0, 2, 3, 1), gamma, beta, eps)
    return y.permute(0, 3, 1, 2)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    out = x.data * cdf

    def grad_fn(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return make_result(out, (x,), grad_fn, "gelu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), grad_fn, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def grad_fn(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), grad_fn, "log_softmax")


# ---------------------------------------------------------------------------
# Separable resampling: adaptive average pooling and bilinear upsampling
# ---------------------------------------------------------------------------


def adaptive_pool_matrix(size_in: int, size_out: int) -> np.ndarray:
    """Row ``b`` averages input indices ``[floor(b*n/m), ceil((b+1)*n/m))``."""
    mat = np.zeros((size_out, size_in), dtype=DTYPE)
    for b in range(size_out):
        start = (b * size_in) // size_out
        end = -((-(b + 1) * size_in) // size_out)
        mat[b, start:end] = 1.0 / (end - start)
    return mat


def bilinear_matrix(size_in: int, size_out: int) -> np.ndarray:
    """1-D linear interpolation weights, half-pixel centres (align_corners=False)."""
    mat = np.zeros((size_out, size_in), dtype=DTYPE)
    scale = size_in / size_out
    for i in range(size_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), size_in - 1)
        i1 = min(i0 + 1, size_in - 1)
        lam = src - i0
        mat[i, i0] += 1.0 - lam
        mat[i, i1] += lam
    return mat


def _separable(x: Tensor, rows: np.ndarray, cols: np.ndarray, op: str) -> Tensor:
    out = rows @ x.data @ cols.T

    def grad_fn(g):
        return (rows.T @ g @ cols,)

    return make_result(np.ascontiguousarray(out), (x,), grad_fn, op)


def pool_avg2d(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Adaptive average pooling of an NCHW map to ``(out_h, out_w)``."""
    if x.ndim != 4:
        raise ValueError(f"pool_avg2d: expected 4-D input, got {x.shape}")
    h, w = x.shape[2:]
    if not (1 <= out_h <= h and 1 <= out_w <= w):
        raise ValueError(f"pool_avg2d: target {out_h}x{out_w} invalid for input {h}x{w}")
    return _separable(x, adaptive_pool_matrix(h, out_h), adaptive_pool_matrix(w, out_w), "pool_avg2d")


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear upsampling of an NCHW map (align_corners=False)."""
    if x.ndim != 4:
        raise ValueError(f"upsample_bilinear: expected 4-D input, got {x.shape}")
    h, w = x.shape[2:]
    if out_h < h or out_w < w:
        raise ValueError(f"upsample_bilinear: cannot downscale {h}x{w} to {out_h}x{out_w}")
    if (out_h, out_w) == (h, w):
        return x
    return _separable(x, bilinear_matrix(h, out_h), bilinear_matrix(w, out_w), "upsample_bilinear")


# ---------------------------------------------------------------------------
# Broadcast and pooling helpers
# ---------------------------------------------------------------------------


def broadcast_add_channels(x: Tensor, v: Tensor) -> Tensor:
    """Add a per-channel offset ``v`` (shape ``(C,)`` or ``(N, C)``) at every pixel."""
    if x.ndim != 4:
        raise ValueError(f"broadcast_add_channels: expected NCHW input, got {x.shape}")
    n, c = x.shape[:2]
    if v.shape == (c,):
        vb = v.data[None, :, None, None]
    elif v.shape == (n, c):
        vb = v.data[:, :, None, None]
    else:
        raise ValueError(f"broadcast_add_channels: offset shape {v.shape} incompatible with {x.shape}")

    def grad_fn(g):
        gv = g.sum(axis=(2, 3))
        if v.ndim == 1:
            gv = gv.sum(axis=0)
        return g, gv

    return make_result(x.data + vb, (x, v), grad_fn, "broadcast_add_channels")


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool: expected NCHW input, got {x.shape}")
    return tsum(x, axis=(2, 3)) * (1.0 / (x.shape[2] * x.shape[3]))


def one_hot(labels: np.ndarray, num_classes: int, axis: int = -1) -> np.ndarray:
    """Float one-hot encoding of integer ``labels``; the class axis is inserted at ``axis``."""
    labels = np.asarray(labels)
    out = (labels[..., None] == np.arange(num_classes)).astype(DTYPE)
    if axis != -1 and axis != labels.ndim:
        out = np.moveaxis(out, -1, axis)
    return out


__all__ = [
    "adaptive_pool_matrix",
    "as_tensor",
    "bilinear_matrix",
    "broadcast_add_channels",
    "conv2d",
    "conv_output_size",
    "gelu",
    "global_avg_pool",
    "layer_norm",
    "layer_norm_channels_first",
    "linear",
    "log_softmax",
    "one_hot",
    "pool_avg2d",
    "softmax",
    "upsample_bilinear",
]
