"""Differentiable NN ops: convolution, pooling, normalization, losses.

Convolutions are lowered to a single matrix product per direction via
im2col/col2im so the arithmetic runs inside BLAS; everything else is plain
vectorized numpy. All ops preserve the dtype of their inputs and never
produce NaN/Inf on finite inputs.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import Tensor


def _windows(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """View of shape (B, OH, OW, C, kh, kw) over a contiguous (B,C,H,W) array."""
    b, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    s0, s1, s2, s3 = x.strides
    return as_strided(
        x, (b, oh, ow, c, kh, kw), (s0, s2 * stride, s3 * stride, s1, s2, s3)
    )


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int):
    """(B,C,H,W) -> (B*OH*OW, C*kh*kw) patch matrix (one copy)."""
    win = _windows(np.ascontiguousarray(x), kh, kw, stride)
    b, oh, ow = win.shape[:3]
    return win.reshape(b * oh * ow, -1), oh, ow


def _col2im(cols: np.ndarray, x_shape: tuple, kh: int, kw: int, stride: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patch rows back onto the image grid."""
    b, c, h, w = x_shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    out = np.zeros(x_shape, dtype=cols.dtype)
    # (kh, kw, B, C, OH, OW) so each tap is one strided slice-add
    taps = np.ascontiguousarray(
        cols.reshape(b, oh, ow, c, kh, kw).transpose(4, 5, 0, 3, 1, 2)
    )
    for ki in range(kh):
        for kj in range(kw):
            out[:, :, ki : ki + oh * stride : stride, kj : kj + ow * stride : stride] += taps[ki, kj]
    return out


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of (B,Cin,H,W) with (Cout,Cin,kh,kw) weights.

    Output spatial extents are (H + 2*pad - kh)//stride + 1 and likewise for
    width. Bias, when given, is one scalar per output channel.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError(
            f"conv2d expects 4-d input and weight, got {x.data.shape} and {w.data.shape}"
        )
    bn, cin, h, wd = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin != cin_w:
        raise ValueError(
            f"conv2d channel mismatch: input {x.data.shape} has Cin={cin}, "
            f"weight {w.data.shape} expects Cin={cin_w}"
        )
    if h + 2 * pad < kh or wd + 2 * pad < kw:
        raise ValueError(
            f"conv2d kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{wd + 2 * pad}"
        )
    xp = _pad(x.data, pad)
    cols, oh, ow = _im2col(xp, kh, kw, stride)
    wmat = w.data.reshape(cout, -1)
    out = cols @ wmat.T
    if b is not None:
        if b.data.shape != (cout,):
            raise ValueError(f"conv2d bias shape {b.data.shape} != ({cout},)")
        out += b.data
    out = np.ascontiguousarray(out.reshape(bn, oh, ow, cout).transpose(0, 3, 1, 2))

    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, cout)
        gx = gw = gb = None
        if x.requires_grad:
            gcols = gmat @ wmat
            gxp = _col2im(gcols, xp.shape, kh, kw, stride)
            gx = gxp if pad == 0 else gxp[:, :, pad:-pad, pad:-pad]
        if w.requires_grad:
            gw = (gmat.T @ cols).reshape(w.data.shape)
        if b is not None and b.requires_grad:
            gb = gmat.sum(axis=0)
        return (gx, gw) if b is None else (gx, gw, gb)

    return Tensor._from_op(out, parents, backward)


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 2) -> Tensor:
    """Transposed convolution (adjoint of conv2d), weights (Cin,Cout,kh,kw).

    Output spatial extents are (H-1)*stride + kh. With kernel 2 / stride 2
    this is the overlap-free two-fold upsampler used by the decoder.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError(
            f"conv_transpose2d expects 4-d input and weight, got {x.data.shape} and {w.data.shape}"
        )
    bn, cin, h, wd = x.data.shape
    cin_w, cout, kh, kw = w.data.shape
    if cin != cin_w:
        raise ValueError(
            f"conv_transpose2d channel mismatch: input {x.data.shape} has Cin={cin}, "
            f"weight {w.data.shape} expects Cin={cin_w}"
        )
    oh = (h - 1) * stride + kh
    ow = (wd - 1) * stride + kw
    wmat = w.data.reshape(cin, -1)  # (Cin, Cout*kh*kw)
    xmat = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(-1, cin)
    cols = xmat @ wmat  # rows are (Cout,kh,kw) patches per input pixel
    out = _col2im(
        cols.reshape(bn, h, wd, cout * kh * kw), (bn, cout, oh, ow), kh, kw, stride
    )
    if b is not None:
        if b.data.shape != (cout,):
            raise ValueError(f"conv_transpose2d bias shape {b.data.shape} != ({cout},)")
        out += b.data.reshape(1, cout, 1, 1)

    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gcols, _, _ = _im2col(g, kh, kw, stride)  # (B*H*W, Cout*kh*kw)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.ascontiguousarray(
                (gcols @ wmat.T).reshape(bn, h, wd, cin).transpose(0, 3, 1, 2)
            )
        if w.requires_grad:
            gw = (xmat.T @ gcols).reshape(w.data.shape)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if b is None else (gx, gw, gb)

    return Tensor._from_op(out, parents, backward)


def pool2d(kind: str, x: Tensor, k: int, stride: int) -> Tensor:
    """Max or average pooling with square window k and the given stride.

    Max ties route the gradient to the first maximal element in row-major
    window scan order.
    """
    if kind not in ("max", "avg"):
        raise ValueError(f"pool2d kind must be 'max' or 'avg', got {kind!r}")
    bn, c, h, w = x.data.shape
    if k > h or k > w:
        raise ValueError(f"pool2d window {k} exceeds input extents {h}x{w}")
    win = _windows(np.ascontiguousarray(x.data), k, k, stride)  # (B,OH,OW,C,k,k)
    b_, oh, ow = win.shape[:3]
    flat = win.reshape(bn, oh, ow, c, k * k)

    if kind == "avg":
        out = np.ascontiguousarray(flat.mean(axis=4).transpose(0, 3, 1, 2))

        def backward(g):
            gcols = np.broadcast_to(
                (g.transpose(0, 2, 3, 1) / (k * k))[..., None], (bn, oh, ow, c, k * k)
            ).reshape(bn * oh * ow, c * k * k)
            return (_col2im(gcols, x.data.shape, k, k, stride),)

    else:
        idx = flat.argmax(axis=4)  # first maximum in scan order
        out = np.ascontiguousarray(
            np.take_along_axis(flat, idx[..., None], axis=4)[..., 0].transpose(0, 3, 1, 2)
        )

        def backward(g):
            onehot = (np.arange(k * k) == idx[..., None]).astype(g.dtype)
            gcols = (onehot * g.transpose(0, 2, 3, 1)[..., None]).reshape(
                bn * oh * ow, c * k * k
            )
            return (_col2im(gcols, x.data.shape, k, k, stride),)

    return Tensor._from_op(out, (x,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, x.data.dtype.type(0))

    def backward(g):
        return (g * mask,)

    return Tensor._from_op(out, (x,), backward)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # stable in both tails; clamped to the open interval so outputs are
    # strictly inside (0, 1) even where float rounding would hit the ends
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    tiny = np.finfo(z.dtype).tiny
    top = np.nextafter(z.dtype.type(1), z.dtype.type(0))
    return np.clip(out, tiny, top)


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)

    def backward(g):
        return (g * y * (1.0 - y),)

    return Tensor._from_op(y, (x,), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two (B,C,H,W) tensors along the channel axis."""
    sa, sb = a.data.shape, b.data.shape
    if len(sa) != 4 or len(sb) != 4 or sa[0] != sb[0] or sa[2:] != sb[2:]:
        raise ValueError(f"concat_channels needs matching B/H/W, got {sa} vs {sb}")
    ca = sa[1]

    def backward(g):
        return g[:, :ca], g[:, ca:]

    return Tensor._from_op(np.concatenate([a.data, b.data], axis=1), (a, b), backward)


def norm_layer(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str = "batch_stats",
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    """Per-channel normalization over (B,H,W) with affine scale/shift.

    ``batch_stats`` normalizes with the current batch moments and folds them
    into the running estimates in place (population variance); ``running_stats``
    normalizes with the stored estimates and leaves them untouched.
    """
    if mode not in ("batch_stats", "running_stats"):
        raise ValueError(f"norm_layer mode must be batch_stats/running_stats, got {mode!r}")
    bn, c, h, w = x.data.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ValueError(
            f"norm_layer affine shapes {gamma.data.shape}/{beta.data.shape} != ({c},)"
        )
    dt = x.data.dtype
    if mode == "batch_stats":
        mu = x.data.mean(axis=(0, 2, 3), dtype=np.float64)
        var = x.data.var(axis=(0, 2, 3), dtype=np.float64)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.astype(running_mean.dtype)
        running_var *= 1.0 - momentum
        running_var += momentum * var.astype(running_var.dtype)
    else:
        mu = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
    inv = (1.0 / np.sqrt(var + eps)).astype(dt).reshape(1, c, 1, 1)
    mu = mu.astype(dt).reshape(1, c, 1, 1)
    xhat = (x.data - mu) * inv
    out = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)

    def backward(g):
        gg = gb = gx = None
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=(0, 2, 3))
        if beta.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            scale = gamma.data.reshape(1, c, 1, 1) * inv
            if mode == "batch_stats":
                n = bn * h * w
                gmean = g.mean(axis=(0, 2, 3), keepdims=True)
                gxhat = (g * xhat).sum(axis=(0, 2, 3), keepdims=True) / n
                gx = scale * (g - gmean - xhat * gxhat)
            else:
                gx = scale * g
        return gx, gg, gb

    return Tensor._from_op(out, (x, gamma, beta), backward)


def bce_with_logits(logits: Tensor, target: Tensor) -> Tensor:
    """Mean binary cross-entropy from logits, computed in logit-stable form.

    ``max(z,0) - z*y + log1p(exp(-|z|))`` per element, averaged; finite for
    arbitrarily large |z|. Targets must lie in [0, 1].
    """
    z, y = logits.data, target.data
    if z.shape != y.shape:
        raise ValueError(f"bce_with_logits shape mismatch: {z.shape} vs {y.shape}")
    if y.size and (y.min() < 0.0 or y.max() > 1.0):
        raise ValueError("bce_with_logits targets must lie in [0, 1]")
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    out = np.asarray(per.mean(dtype=np.float64), dtype=z.dtype).reshape(())

    def backward(g):
        s = float(g.reshape(())) / n
        gz = (_sigmoid(z) - y) * z.dtype.type(s)
        gy = (-z) * z.dtype.type(s) if target.requires_grad else None
        return gz, gy

    return Tensor._from_op(out, (logits, target), backward)
