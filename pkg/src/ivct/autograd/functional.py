"""Fused differentiable operators used by the networks.

Convolutions work on ``[N, C, H, W]`` arrays through strided window views
(im2col without materialising more than one copy). Complex values travel as
"complex pairs": real tensors with a trailing axis of length 2 holding the
real and imaginary parts.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, make_op, mean, sqrt, sub, div, add, power

PAD_MODES = ("zeros", "reflect")


# -- padding --------------------------------------------------------------
@lru_cache(maxsize=256)
def _reflect_matrix(n: int, before: int, after: int) -> np.ndarray:
    idx = np.pad(np.arange(n), (before, after), mode="reflect") if n > 1 else np.zeros(n + before + after, int)
    m = np.zeros((n + before + after, n))
    m[np.arange(idx.size), idx] = 1.0
    return m


def pad2d(x: Tensor, pads: tuple[int, int, int, int], mode: str = "zeros") -> Tensor:
    """Pad the last two axes by (top, bottom, left, right)."""
    top, bottom, left, right = pads
    if not any(pads):
        return x
    if mode not in PAD_MODES:
        raise ValueError(f"unknown padding mode {mode!r}")
    H, W = x.shape[-2:]
    if mode == "zeros":
        width = [(0, 0)] * (x.ndim - 2) + [(top, bottom), (left, right)]

        def bw(g):
            return (g[..., top : top + H, left : left + W],)

        return make_op(np.pad(x.data, width), (x,), bw, "pad_zeros")

    rows = _reflect_matrix(H, top, bottom).astype(x.dtype)
    cols = _reflect_matrix(W, left, right).astype(x.dtype)

    def bw(g):
        return (rows.T @ g @ cols,)

    return make_op(rows @ x.data @ cols.T, (x,), bw, "pad_reflect")


def _same_pads(k: int) -> tuple[int, int]:
    return (k - 1) // 2, k // 2


# -- convolution ----------------------------------------------------------
def _col2im(gcols: np.ndarray, out_shape, kh: int, kw: int, stride: int) -> np.ndarray:
    """Adjoint of the strided window view: scatter-add window grads back."""
    N, C, Ho, Wo = gcols.shape[:4]
    dx = np.zeros(out_shape, dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += gcols[:, :, :, :, i, j]
    return dx


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int | str = 0,
    pad_mode: str = "zeros",
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation ``out[n,o] = sum_c x[n,c] * w[o,c] + b[o]``.

    ``padding="same"`` pads (k-1)//2 before and k//2 after on each axis.
    ``groups`` splits input and output channels into independent groups;
    ``groups == C_in`` gives a depthwise convolution.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {weight.shape}")
    N, C, H, W = x.shape
    Co, Cg, kh, kw = weight.shape
    if C % groups or Co % groups or Cg * groups != C:
        raise ShapeError(f"conv2d channel mismatch: input {C}, kernel {weight.shape}, groups {groups}")
    if padding == "same":
        t, b = _same_pads(kh)
        l, r = _same_pads(kw)
        x = pad2d(x, (t, b, l, r), pad_mode)
    elif padding:
        x = pad2d(x, (padding,) * 4, pad_mode)
    Hp, Wp = x.shape[-2:]
    if Hp < kh or Wp < kw:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    xd, wd = x.data, weight.data

    if kh == 1 and kw == 1 and stride == 1 and groups == 1:
        out, bw = _conv1x1(xd, wd)
    elif groups == C and Cg == 1 and wd.shape[0] == C:
        out, bw = _conv_depthwise(xd, wd, stride)
    else:
        out, bw = _conv_general(xd, wd, stride, groups)

    def backward(g):
        gx, gw = bw(g, x.requires_grad, weight.requires_grad)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
        return make_op(out, (x, weight, bias), backward, "conv2d")
    return make_op(out, (x, weight), backward, "conv2d")


def _conv1x1(xd, wd):
    N, C, H, W = xd.shape
    w2 = wd[:, :, 0, 0]
    x2 = xd.reshape(N, C, H * W)
    out = np.matmul(w2, x2).reshape(N, -1, H, W)

    def bw(g, need_x, need_w):
        g2 = g.reshape(N, -1, H * W)
        gx = np.matmul(w2.T, g2).reshape(xd.shape) if need_x else None
        gw = np.matmul(g2, x2.transpose(0, 2, 1)).sum(axis=0)[:, :, None, None] if need_w else None
        return gx, gw

    return out, bw


def _conv_depthwise(xd, wd, stride):
    N, C, Hp, Wp = xd.shape
    _, _, kh, kw = wd.shape
    Ho, Wo = (Hp - kh) // stride + 1, (Wp - kw) // stride + 1
    out = np.zeros((N, C, Ho, Wo), dtype=np.result_type(xd, wd))
    for i in range(kh):
        for j in range(kw):
            out += xd[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] * wd[None, :, 0, i, j, None, None]

    def bw(g, need_x, need_w):
        gx = np.zeros_like(xd) if need_x else None
        gw = np.zeros_like(wd) if need_w else None
        for i in range(kh):
            for j in range(kw):
                sl = (slice(None), slice(None), slice(i, i + stride * Ho, stride), slice(j, j + stride * Wo, stride))
                if need_x:
                    gx[sl] += g * wd[None, :, 0, i, j, None, None]
                if need_w:
                    gw[:, 0, i, j] = (g * xd[sl]).sum(axis=(0, 2, 3))
        return gx, gw

    return out, bw


def _conv_general(xd, wd, stride, groups):
    N, C, Hp, Wp = xd.shape
    Co, Cg, kh, kw = wd.shape
    cols = sliding_window_view(xd, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    Ho, Wo = cols.shape[2:4]
    G = groups
    colsg = cols.reshape(N, G, Cg, Ho, Wo, kh, kw)
    wg = wd.reshape(G, Co // G, Cg, kh, kw)
    if G == 1:
        out = np.tensordot(colsg[:, 0], wg[0], axes=([1, 4, 5], [1, 2, 3]))  # N,Ho,Wo,Co
        out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    else:
        out = np.einsum("ngchwij,gocij->ngohw", colsg, wg, optimize=True).reshape(N, Co, Ho, Wo)

    def bw(g, need_x, need_w):
        gg = g.reshape(N, G, Co // G, Ho, Wo)
        gx = gw = None
        if G == 1:
            if need_w:
                gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
            if need_x:
                gcols = np.tensordot(g, wd, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
                gx = _col2im(gcols, xd.shape, kh, kw, stride)
            return gx, gw
        if need_w:
            gw = np.einsum("ngohw,ngchwij->gocij", gg, colsg, optimize=True).reshape(wd.shape)
        if need_x:
            gcols = np.einsum("ngohw,gocij->ngchwij", gg, wg, optimize=True).reshape(N, C, Ho, Wo, kh, kw)
            gx = _col2im(gcols, xd.shape, kh, kw, stride)
        return gx, gw

    return out, bw


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 2) -> Tensor:
    """Transposed convolution, the input-adjoint of an unpadded strided ``conv2d``.

    ``weight`` has shape ``[C_in, C_out, kh, kw]``; output size is
    ``(H - 1) * stride + kh``.
    """
    N, C, H, W = x.shape
    Ci, Co, kh, kw = weight.shape
    if Ci != C:
        raise ShapeError(f"conv_transpose2d channel mismatch: input {C}, kernel {weight.shape}")
    xd, wd = x.data, weight.data
    Ho, Wo = (H - 1) * stride + kh, (W - 1) * stride + kw
    # gcols[n, o, h, w, i, j] = sum_c x[n, c, h, w] * w[c, o, i, j]
    cols = np.tensordot(xd, wd, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
    out = _col2im(cols, (N, Co, Ho, Wo), kh, kw, stride)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)

    def backward(g):
        gcols = sliding_window_view(g, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :H, :W]
        gx = gw = None
        if x.requires_grad:
            gx = np.tensordot(gcols, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        if weight.requires_grad:
            gw = np.tensordot(xd, gcols, axes=([0, 2, 3], [0, 2, 3]))
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_op(out, parents, backward, "conv_transpose2d")


# -- Fourier transforms ---------------------------------------------------
def _to_complex(pair: np.ndarray) -> np.ndarray:
    return pair[..., 0] + 1j * pair[..., 1]


def _to_pair(z: np.ndarray, dtype) -> np.ndarray:
    return np.stack([z.real, z.imag], axis=-1).astype(dtype, copy=False)


def fft2(x: Tensor, complex_input: bool = False) -> Tensor:
    """Unnormalised 2-D DFT over the last two spatial axes.

    Real input ``[..., H, W]`` (or a complex pair ``[..., H, W, 2]`` when
    ``complex_input``) maps to a complex pair ``[..., H, W, 2]``.
    """
    z = _to_complex(x.data) if complex_input else x.data
    H, W = z.shape[-2:]
    dtype = x.dtype

    def bw(g):
        gz = np.fft.ifft2(_to_complex(g)) * (H * W)
        return (_to_pair(gz, dtype) if complex_input else gz.real.astype(dtype, copy=False),)

    return make_op(_to_pair(np.fft.fft2(z), dtype), (x,), bw, "fft2")


def ifft2(x: Tensor) -> Tensor:
    """Inverse of :func:`fft2` on a complex pair, returning a complex pair."""
    z = _to_complex(x.data)
    H, W = z.shape[-2:]
    dtype = x.dtype

    def bw(g):
        return (_to_pair(np.fft.fft2(_to_complex(g)) / (H * W), dtype),)

    return make_op(_to_pair(np.fft.ifft2(z), dtype), (x,), bw, "ifft2")


def real_part(x: Tensor) -> Tensor:
    return x[..., 0]


# -- attention helpers ----------------------------------------------------
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_op(s, (x,), bw, "softmax")


def rescaled_layer_norm(x: Tensor, eps: float = 1e-6) -> tuple[Tensor, Tensor, Tensor]:
    """Per-sample normalisation over (C, H, W).

    Returns ``(normalized, mean, std)`` with mean/std shaped ``[N, 1, 1, 1]``
    so a block can re-apply them to its output.
    """
    if x.ndim != 4:
        raise ShapeError(f"rescaled_layer_norm expects [N,C,H,W], got {x.shape}")
    if x.shape[1] * x.shape[2] * x.shape[3] < 2:
        raise ShapeError("rescaled_layer_norm needs at least two values per sample")
    mu = mean(x, axis=(1, 2, 3), keepdims=True)
    centered = sub(x, mu)
    var = mean(power(centered, 2), axis=(1, 2, 3), keepdims=True)
    std = sqrt(add(var, eps))
    return div(centered, std), mu, std


def _window_pads(n: int, win: int) -> int:
    return (-n) % win


def window_partition(x: Tensor, win: int) -> Tensor:
    """Split ``[N, C, H, W]`` into ``[N * nWin, win*win, C]`` token windows.

    Sizes not divisible by ``win`` are reflect-padded at the bottom/right;
    :func:`window_merge` crops the padding back off.
    """
    N, C, H, W = x.shape
    if win < 1:
        raise ValueError("window size must be >= 1")
    if win > 2 * min(H, W):
        raise ShapeError(f"window {win} too large for a {H}x{W} map")
    ph, pw = _window_pads(H, win), _window_pads(W, win)
    x = pad2d(x, (0, ph, 0, pw), "reflect")
    Hp, Wp = H + ph, W + pw
    x = x.reshape(N, C, Hp // win, win, Wp // win, win)
    x = x.transpose(0, 2, 4, 3, 5, 1)
    return x.reshape(N * (Hp // win) * (Wp // win), win * win, C)


def window_merge(windows: Tensor, win: int, shape: tuple[int, int, int, int]) -> Tensor:
    """Inverse of :func:`window_partition` for an original ``shape``."""
    N, C, H, W = shape
    Hp, Wp = H + _window_pads(H, win), W + _window_pads(W, win)
    x = windows.reshape(N, Hp // win, Wp // win, win, win, C)
    x = x.transpose(0, 5, 1, 3, 2, 4).reshape(N, C, Hp, Wp)
    if Hp != H or Wp != W:
        x = x[:, :, :H, :W]
    return x
