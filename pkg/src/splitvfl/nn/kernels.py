"""Convolution and pooling kernels.

Every kernel exists twice: a numba ``@njit`` loop nest and a vectorised numpy
version.  The public functions at the bottom dispatch on
:data:`splitvfl._backend.USE_NUMBA` at call time.  Layouts are NCHW for
activations and OIKK for convolution weights.  Kernels are dtype-generic
(float32 in training, float64 in gradient checks).
"""

import numpy as np

from splitvfl import _backend

if _backend.HAVE_NUMBA:
    from numba import njit
else:  # pragma: no cover
    def njit(*args, **kwargs):
        return lambda fn: fn


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


# ---------------------------------------------------------------- numba ---

@njit(cache=True)
def _conv2d_forward_nb(x, w, stride, padding):
    n, c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, c_out, ho, wo), dtype=x.dtype)
    for b in range(n):
        for o in range(c_out):
            for c in range(c_in):
                for ki in range(k):
                    for kj in range(k):
                        wv = w[o, c, ki, kj]
                        for i in range(ho):
                            r = i * stride + ki - padding
                            if r < 0 or r >= h:
                                continue
                            for j in range(wo):
                                s = j * stride + kj - padding
                                if s < 0 or s >= wd:
                                    continue
                                out[b, o, i, j] += wv * x[b, c, r, s]
    return out


# Reassociation lets LLVM vectorise the weight-gradient reduction (about 4x).
# The other fastmath flags stay off so NaN and inf still propagate.
@njit(cache=True, fastmath={"reassoc"})
def _conv2d_backward_nb(x, w, grad, stride, padding):
    n, c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    ho = grad.shape[2]
    wo = grad.shape[3]
    gx = np.zeros_like(x)
    gw = np.zeros_like(w)
    for b in range(n):
        for o in range(c_out):
            for c in range(c_in):
                for ki in range(k):
                    for kj in range(k):
                        wv = w[o, c, ki, kj]
                        acc = 0.0
                        for i in range(ho):
                            r = i * stride + ki - padding
                            if r < 0 or r >= h:
                                continue
                            for j in range(wo):
                                s = j * stride + kj - padding
                                if s < 0 or s >= wd:
                                    continue
                                g = grad[b, o, i, j]
                                acc += g * x[b, c, r, s]
                                gx[b, c, r, s] += wv * g
                        gw[o, c, ki, kj] += acc
    return gx, gw


@njit(cache=True)
def _maxpool_forward_nb(x, window, stride):
    n, c, h, wd = x.shape
    ho = (h - window) // stride + 1
    wo = (wd - window) // stride + 1
    out = np.empty((n, c, ho, wo), dtype=x.dtype)
    arg = np.empty((n, c, ho, wo), dtype=np.int64)
    for b in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    best = x[b, ch, i * stride, j * stride]
                    best_k = 0
                    for di in range(window):
                        for dj in range(window):
                            v = x[b, ch, i * stride + di, j * stride + dj]
                            # strict '>' keeps the lowest flat index on ties
                            if v > best:
                                best = v
                                best_k = di * window + dj
                    out[b, ch, i, j] = best
                    arg[b, ch, i, j] = best_k
    return out, arg


@njit(cache=True)
def _maxpool_backward_nb(grad, arg, in_shape, window, stride):
    gx = np.zeros(in_shape, dtype=grad.dtype)
    n, c, ho, wo = grad.shape
    for b in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    k = arg[b, ch, i, j]
                    gx[b, ch, i * stride + k // window, j * stride + k % window] += grad[b, ch, i, j]
    return gx


# ---------------------------------------------------------------- numpy ---

def _windows(x, k, stride, padding):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    v = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    return v[:, :, ::stride, ::stride]  # (N, C, Ho, Wo, k, k)


def _conv2d_forward_np(x, w, stride, padding):
    cols = _windows(x, w.shape[2], stride, padding)
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))  # (N, Ho, Wo, O)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)).astype(x.dtype, copy=False)


def _conv2d_backward_np(x, w, grad, stride, padding):
    k = w.shape[2]
    cols = _windows(x, k, stride, padding)
    gw = np.tensordot(grad, cols, axes=([0, 2, 3], [0, 2, 3])).astype(w.dtype, copy=False)
    n, c, h, wd = x.shape
    ho, wo = grad.shape[2], grad.shape[3]
    gpad = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=x.dtype)
    for ki in range(k):
        for kj in range(k):
            contrib = np.tensordot(grad, w[:, :, ki, kj], axes=([1], [0]))  # (N, Ho, Wo, C)
            gpad[:, :, ki:ki + stride * (ho - 1) + 1:stride, kj:kj + stride * (wo - 1) + 1:stride] += (
                contrib.transpose(0, 3, 1, 2)
            )
    gx = gpad[:, :, padding:padding + h, padding:padding + wd]
    return np.ascontiguousarray(gx), gw


def _maxpool_forward_np(x, window, stride):
    v = _windows(x, window, stride, 0)
    flat = v.reshape(v.shape[:4] + (window * window,))
    arg = flat.argmax(axis=-1)  # first occurrence on ties
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg.astype(np.int64)


def _maxpool_backward_np(grad, arg, in_shape, window, stride):
    gx = np.zeros(in_shape, dtype=grad.dtype)
    n, c, ho, wo = grad.shape
    bi, ci, ii, jj = np.indices((n, c, ho, wo), sparse=False)
    rows = ii * stride + arg // window
    cols = jj * stride + arg % window
    np.add.at(gx, (bi, ci, rows, cols), grad)
    return gx


# ------------------------------------------------------------- dispatch ---

def conv2d_forward(x, w, stride, padding):
    if _backend.USE_NUMBA:
        return _conv2d_forward_nb(np.ascontiguousarray(x), np.ascontiguousarray(w), stride, padding)
    return _conv2d_forward_np(x, w, stride, padding)


def conv2d_backward(x, w, grad, stride, padding):
    """Return ``(grad_input, grad_weight)``; the bias gradient is left to the caller."""
    if _backend.USE_NUMBA:
        return _conv2d_backward_nb(
            np.ascontiguousarray(x), np.ascontiguousarray(w), np.ascontiguousarray(grad), stride, padding
        )
    return _conv2d_backward_np(x, w, grad, stride, padding)


def maxpool_forward(x, window=2, stride=2):
    """Return ``(output, argmax)`` where argmax is the flat offset inside each window."""
    if _backend.USE_NUMBA:
        return _maxpool_forward_nb(np.ascontiguousarray(x), window, stride)
    return _maxpool_forward_np(x, window, stride)


def maxpool_backward(grad, arg, in_shape, window=2, stride=2):
    if _backend.USE_NUMBA:
        return _maxpool_backward_nb(np.ascontiguousarray(grad), arg, tuple(in_shape), window, stride)
    return _maxpool_backward_np(grad, arg, tuple(in_shape), window, stride)
