"""Layer primitives built on :mod:`ftmtl.tensor`.

Spatial ops take ``(C, H, W)`` or batched ``(N, C, H, W)`` inputs and return
the same rank. Only zero padding is supported.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, matmul


def _batched(x: Tensor) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ShapeError(f"expected a (C,H,W) or (N,C,H,W) tensor, got shape {x.shape}")


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with a ``(C_out, C_in, k, k)`` kernel."""
    x, weight = as_tensor(x), as_tensor(weight)
    xd, squeeze = _batched(x)
    n, c, h, w = xd.shape
    c_out, c_in, kh, kw = weight.shape
    if c_in != c:
        raise ShapeError(f"conv2d: weight expects {c_in} input channels, input has {c}")
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    ho, wo = conv_output_size(h, kh, stride, pad), conv_output_size(w, kw, stride, pad)

    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    # cols[n, c, i, j, y, x] = xp[n, c, y*stride + i, x*stride + j]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    wmat = weight.data.reshape(c_out, -1)
    out = np.einsum("ok,nkp->nop", wmat, cols.reshape(n, c * kh * kw, ho * wo), optimize=True)
    out = out.reshape(n, c_out, ho, wo)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None, None]
        parents.append(bias)

    def grad_fn(g):
        g4 = g[None] if squeeze else g
        gflat = g4.reshape(n, c_out, ho * wo)
        gw = np.einsum("nop,nkp->ok", gflat, cols.reshape(n, c * kh * kw, ho * wo), optimize=True)
        gcols = np.einsum("ok,nop->nkp", wmat, gflat, optimize=True).reshape(n, c, kh, kw, ho, wo)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, :, i, j]
        gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
        grads = [gx[0] if squeeze else gx, gw.reshape(weight.shape)]
        if bias is not None:
            grads.append(g4.sum(axis=(0, 2, 3)))
        return grads

    return Tensor._from_op(out[0] if squeeze else out, parents, grad_fn)


def conv_transpose2d(
    x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 2, pad: int = 0
) -> Tensor:
    """Transposed convolution with a ``(C_in, C_out, k, k)`` kernel.

    Restricted to configurations that upsample exactly 2x:
    ``stride == 2`` and ``k - 2 * pad == 2``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    xd, squeeze = _batched(x)
    n, c, h, w = xd.shape
    c_in, c_out, kh, kw = weight.shape
    if c_in != c:
        raise ShapeError(f"conv_transpose2d: weight expects {c_in} input channels, input has {c}")
    if stride != 2 or kh != kw or kh - 2 * pad != 2:
        raise ValueError(
            f"conv_transpose2d: stride={stride}, kernel={kh}x{kw}, pad={pad} does not double the input exactly"
        )
    full_h, full_w = (h - 1) * stride + kh, (w - 1) * stride + kw
    wd = weight.data

    full = np.zeros((n, c_out, full_h, full_w), dtype=np.result_type(xd, wd))
    for i in range(kh):
        for j in range(kw):
            full[:, :, i : i + stride * h : stride, j : j + stride * w : stride] += np.einsum(
                "nchw,co->nohw", xd, wd[:, :, i, j], optimize=True
            )
    out = full[:, :, pad : pad + 2 * h, pad : pad + 2 * w]
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None, None]
        parents.append(bias)
    else:
        out = out.copy()

    def grad_fn(g):
        g4 = g[None] if squeeze else g
        gfull = np.zeros((n, c_out, full_h, full_w), dtype=g.dtype)
        gfull[:, :, pad : pad + 2 * h, pad : pad + 2 * w] = g4
        gx = np.zeros_like(xd)
        gw = np.zeros_like(wd)
        for i in range(kh):
            for j in range(kw):
                gs = gfull[:, :, i : i + stride * h : stride, j : j + stride * w : stride]
                gx += np.einsum("nohw,co->nchw", gs, wd[:, :, i, j], optimize=True)
                gw[:, :, i, j] = np.einsum("nchw,nohw->co", xd, gs, optimize=True)
        grads = [gx[0] if squeeze else gx, gw]
        if bias is not None:
            grads.append(g4.sum(axis=(0, 2, 3)))
        return grads

    return Tensor._from_op(out[0] if squeeze else out, parents, grad_fn)


def max_pool2d(x: Tensor, window: int = 2, stride: int | None = None) -> Tensor:
    """Max pooling; the gradient goes to the first maximal cell of each window."""
    x = as_tensor(x)
    stride = window if stride is None else stride
    xd, squeeze = _batched(x)
    n, c, h, w = xd.shape
    if window > h or window > w:
        raise ShapeError(f"max_pool2d: window {window} exceeds spatial dims {h}x{w}")
    ho, wo = conv_output_size(h, window, stride, 0), conv_output_size(w, window, stride, 0)
    wins = np.empty((window * window, n, c, ho, wo), dtype=xd.dtype)
    for i in range(window):
        for j in range(window):
            wins[i * window + j] = xd[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    arg = wins.argmax(axis=0)
    out = np.take_along_axis(wins, arg[None], axis=0)[0]

    def grad_fn(g):
        g4 = g[None] if squeeze else g
        gx = np.zeros_like(xd)
        for i in range(window):
            for j in range(window):
                hit = arg == i * window + j
                gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += np.where(hit, g4, 0)
        return (gx[0] if squeeze else gx,)

    return Tensor._from_op(out[0] if squeeze else out, (x,), grad_fn)


def global_mean_pool(x: Tensor) -> Tensor:
    """Mean over the two trailing spatial axes: ``(.., C, H, W) -> (.., C)``."""
    x = as_tensor(x)
    if x.ndim < 3:
        raise ShapeError(f"global_mean_pool needs (C,H,W) input, got {x.shape}")
    h, w = x.shape[-2:]
    scale = 1.0 / (h * w)

    def grad_fn(g):
        return (np.broadcast_to(g[..., None, None] * scale, x.shape).astype(x.dtype),)

    return Tensor._from_op(x.data.mean(axis=(-2, -1)), (x,), grad_fn)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` with ``weight`` of shape ``(m, n)``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input has {x.shape[-1]} features, weight expects {weight.shape[1]}")
    out = matmul(x, weight.transpose(1, 0))
    if bias is not None:
        if as_tensor(bias).shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias shape {as_tensor(bias).shape} != ({weight.shape[0]},)")
        out = out + bias
    return out
