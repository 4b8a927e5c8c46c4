"""Dense numeric kernels on float64 numpy arrays.

Everything downstream (images, activations, gradients, CAMs) is a plain
``np.ndarray`` of dtype float64 with rank 1 to 4. The kernels here accept a
single sample (``C, H, W``) or a batch (``N, C, H, W``) where that makes
sense; the batch axis is only there so the network can train at a sane speed.

The binary interchange format is::

    b"TNSR" | 0x01 | u32 rank | rank * u32 dims | prod(dims) * f64

all little-endian.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

MAGIC = b"TNSR"
VERSION = 1


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def as_tensor(x, *, min_rank: int = 1, max_rank: int = 4) -> np.ndarray:
    """Return ``x`` as a contiguous float64 array, checking its rank."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if not (min_rank <= arr.ndim <= max_rank):
        raise ShapeError(f"expected rank {min_rank}..{max_rank}, got {arr.ndim}")
    if 0 in arr.shape:
        raise ShapeError(f"zero-sized dimension in {arr.shape}")
    return arr


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected (C,H,W) or (N,C,H,W), got shape {x.shape}")


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # (N, C, H', W', kh, kw) view, no copy
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x, kernels, bias=None, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Cross-correlate ``x`` with ``kernels`` (no flip).

    ``x`` is ``(C_in, H, W)`` or ``(N, C_in, H, W)``; ``kernels`` is
    ``(C_out, C_in, kH, kW)``. Output spatial size is
    ``(H + 2*pad - kH) // stride + 1``.
    """
    x, single = _batched(np.asarray(x, dtype=np.float64))
    w = np.asarray(kernels, dtype=np.float64)
    if w.ndim != 4:
        raise ShapeError(f"kernels must be rank 4, got shape {w.shape}")
    if w.shape[1] != x.shape[1]:
        raise ShapeError(f"kernel C_in={w.shape[1]} does not match input C_in={x.shape[1]}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    kh, kw = w.shape[2:]
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    if kh > x.shape[2] or kw > x.shape[3]:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {x.shape[2:]}")
    win = _windows(x, kh, kw, stride)
    out = np.einsum("nchwij,ocij->nohw", win, w, optimize=True)
    if bias is not None:
        b = np.asarray(bias, dtype=np.float64)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"bias shape {b.shape} does not match C_out={w.shape[0]}")
        out += b[None, :, None, None]
    out = np.ascontiguousarray(out)
    return out[0] if single else out


def conv2d_backward(dout, x, kernels, stride: int = 1, pad: int = 0):
    """Gradients of :func:`conv2d` w.r.t. input, kernels and bias.

    Returns ``(dx, dkernels, dbias)`` with ``dx`` shaped like ``x``.
    """
    x, single = _batched(np.asarray(x, dtype=np.float64))
    dout = np.asarray(dout, dtype=np.float64)
    if single:
        dout = dout[None]
    w = np.asarray(kernels, dtype=np.float64)
    kh, kw = w.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = _windows(xp, kh, kw, stride)
    dw = np.einsum("nohw,nchwij->ocij", dout, win, optimize=True)
    db = dout.sum(axis=(0, 2, 3))
    dxp = np.zeros_like(xp)
    ho, wo = dout.shape[2:]
    # scatter each kernel tap back onto the padded input
    for i in range(kh):
        for j in range(kw):
            contrib = np.einsum("nohw,oc->nchw", dout, w[:, :, i, j], optimize=True)
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += contrib
    dx = dxp[:, :, pad : pad + x.shape[2], pad : pad + x.shape[3]] if pad else dxp
    dx = np.ascontiguousarray(dx)
    return (dx[0] if single else dx), dw, db


def relu(x) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def global_average_pool(x) -> np.ndarray:
    """Per-channel mean over the two trailing (spatial) axes.

    ``(K, H, W) -> (K,)``; a leading batch axis is carried through. The mean
    is taken relative to each map's first element, which makes it exact on
    constant maps.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (3, 4):
        raise ShapeError(f"expected rank 3 or 4, got shape {x.shape}")
    ref = x[..., 0, 0]
    return ref + (x - ref[..., None, None]).mean(axis=(-2, -1))


def maxpool2d(x, k: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Max over ``k x k`` windows.

    Returns the pooled map and, for each output cell, the flat index of the
    winning element inside its window (row-major over the ``k x k`` window,
    first occurrence on ties). The indices feed :func:`maxpool2d_backward`.
    """
    x, single = _batched(np.asarray(x, dtype=np.float64))
    if k > x.shape[2] or k > x.shape[3]:
        raise ShapeError(f"pool window {k} larger than input {x.shape[2:]}")
    win = _windows(x, k, k, stride)
    flat = win.reshape(*win.shape[:4], k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    out = np.ascontiguousarray(out)
    if single:
        return out[0], arg[0]
    return out, arg


def maxpool2d_backward(dout, argmax, input_shape, k: int, stride: int) -> np.ndarray:
    """Route ``dout`` back to the argmax position of every window."""
    dout = np.asarray(dout, dtype=np.float64)
    single = len(input_shape) == 3
    if single:
        dout, argmax = dout[None], argmax[None]
        input_shape = (1, *input_shape)
    n, c, ho, wo = dout.shape
    dx = np.zeros(input_shape)
    rows = (np.arange(ho) * stride)[None, None, :, None] + argmax // k
    cols = (np.arange(wo) * stride)[None, None, None, :] + argmax % k
    ni = np.arange(n)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    np.add.at(dx, (ni, ci, rows, cols), dout)
    return dx[0] if single else dx


def _lerp_axis(x: np.ndarray, out_len: int, axis: int) -> np.ndarray:
    n = x.shape[axis]
    if out_len == n:
        return x
    if n == 1:
        return np.repeat(x, out_len, axis=axis)
    if out_len == 1:
        pos = np.zeros(1)
    else:
        pos = (np.arange(out_len) * (n - 1)) / (out_len - 1)
    lo = np.floor(pos).astype(np.intp)
    frac = pos - lo
    hi = np.minimum(lo + 1, n - 1)
    shape = [1] * x.ndim
    shape[axis] = out_len
    frac = frac.reshape(shape)
    a = np.take(x, lo, axis=axis)
    b = np.take(x, hi, axis=axis)
    # a + t*(b - a) keeps constant inputs exactly constant
    return a + frac * (b - a)


def bilinear_upsample(x, out_h: int, out_w: int) -> np.ndarray:
    """Align-corners bilinear resampling of the two trailing axes.

    Corner samples of the output coincide with corner samples of the input.
    Works for shrinking as well as enlarging; leading axes are carried
    through, so an RGB ``(3, H, W)`` image resizes in one call.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be at least 1x1")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2:
        raise ShapeError("bilinear_upsample needs at least two axes")
    out = _lerp_axis(_lerp_axis(x, out_h, x.ndim - 2), out_w, x.ndim - 1)
    lo = x.min(axis=(-2, -1), keepdims=True)
    hi = x.max(axis=(-2, -1), keepdims=True)
    return np.ascontiguousarray(np.clip(out, lo, hi))


# -- binary interchange -----------------------------------------------------


def tensor_to_bytes(x) -> bytes:
    arr = as_tensor(x)
    header = MAGIC + bytes([VERSION]) + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    return header + arr.astype("<f8").tobytes(order="C")


def read_tensor(fh: BinaryIO) -> np.ndarray:
    """Read one TNSR record from an open binary stream."""
    head = fh.read(9)
    if len(head) != 9 or head[:4] != MAGIC:
        raise ValueError("not a TNSR record (bad magic)")
    if head[4] != VERSION:
        raise ValueError(f"unsupported TNSR version {head[4]}")
    (rank,) = struct.unpack("<I", head[5:9])
    if not 1 <= rank <= 4:
        raise ValueError(f"TNSR rank {rank} out of range 1..4")
    dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
    count = int(np.prod(dims))
    payload = fh.read(8 * count)
    if len(payload) != 8 * count:
        raise ValueError("truncated TNSR payload")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    import io

    return read_tensor(io.BytesIO(buf))


def save_tensor(path, x) -> None:
    Path(path).write_bytes(tensor_to_bytes(x))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)
