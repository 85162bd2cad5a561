"""Minimal CNN kernel: forward and backward for every layer the model uses.

All ops accept either a single sample (H,W,C) / (K,) or a batch with a
leading N axis, and preserve the input dtype (float64 in gradient checks,
float32 everywhere else). Convolution is 3x3, stride 1, zero same-padding,
implemented as im2col + GEMM with chunking to bound scratch memory.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractViolation

# When True, every op asserts its output is finite.
debug_checks = False

# Scratch budget for im2col patch matrices, in elements.
_PATCH_BUDGET = 16_000_000


def _check(t: np.ndarray) -> np.ndarray:
    if debug_checks and not np.all(np.isfinite(t)):
        raise ContractViolation("non-finite values in tensor")
    return t


def _as4d(x):
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ContractViolation(f"expected 3D or 4D tensor, got {x.ndim}D")


def _restore(x4, squeeze):
    return x4[0] if squeeze else x4


def _conv_patches(x4):
    """Zero-padded 3x3 patches of x4 (N,H,W,C) as (N*H*W, 9C)."""
    n, h, w, c = x4.shape
    xp = np.pad(x4, ((0, 0), (1, 1), (1, 1), (0, 0)))
    v = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (N,H,W,C,3,3)
    return v.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, 9 * c)


def _conv_chunks(n, h, w, c):
    per_sample = h * w * 9 * c
    step = max(1, _PATCH_BUDGET // max(1, per_sample))
    return range(0, n, step), step


def conv2d(input, kernels, bias, keep_patches=False):
    """Same-padded 3x3 correlation. out[y,x,o] = b[o] + sum window * kernel.

    With keep_patches, returns (out, patch_chunks) so the backward pass
    can reuse the im2col matrices instead of rebuilding them.
    """
    x4, squeeze = _as4d(input)
    n, h, w, cin = x4.shape
    kh, kw, kcin, cout = kernels.shape
    if (kh, kw) != (3, 3):
        raise ContractViolation("kernels must be 3x3")
    if kcin != cin:
        raise ContractViolation(f"channel mismatch: input {cin}, kernel {kcin}")
    if bias.shape != (cout,):
        raise ContractViolation("bias shape mismatch")
    k2 = np.ascontiguousarray(kernels.reshape(9 * cin, cout), dtype=x4.dtype)
    out = np.empty((n, h, w, cout), dtype=x4.dtype)
    chunks = [] if keep_patches else None
    starts, step = _conv_chunks(n, h, w, cin)
    for s in starts:
        e = min(n, s + step)
        p = _conv_patches(x4[s:e])
        if chunks is not None:
            chunks.append(p)
        np.matmul(p, k2, out=out[s:e].reshape(-1, cout))
    out += bias
    out = _restore(_check(out), squeeze)
    return (out, chunks) if keep_patches else out


def conv2d_backward(input, kernels, d_out, need_input_grad=True, patches=None):
    """Gradients of conv2d: (d_kernels, d_bias, d_input).

    d_input is the expensive part; callers that do not propagate past this
    layer (e.g. the first conv over frozen features) pass need_input_grad
    False and get None back. `patches` are the im2col chunks saved by
    conv2d(keep_patches=True); without them they are rebuilt here.
    """
    x4, squeeze = _as4d(input)
    d4, _ = _as4d(d_out)
    n, h, w, cin = x4.shape
    cout = kernels.shape[3]
    d_bias = d4.sum(axis=(0, 1, 2))
    d_k2 = np.zeros((9 * cin, cout), dtype=x4.dtype)
    starts, step = _conv_chunks(n, h, w, cin)
    for ci, s in enumerate(starts):
        e = min(n, s + step)
        p = patches[ci] if patches is not None else _conv_patches(x4[s:e])
        d_k2 += p.T @ d4[s:e].reshape(-1, cout)
    d_kernels = d_k2.reshape(3, 3, cin, cout)
    if not need_input_grad:
        return d_kernels, d_bias, None
    # Input gradient: correlate d_out with spatially flipped, transposed kernels.
    k_rot = kernels[::-1, ::-1].transpose(0, 1, 3, 2).copy()
    d_input = conv2d(d4, k_rot, np.zeros(cin, dtype=x4.dtype))
    return d_kernels, d_bias, _restore(d_input, squeeze)


def maxpool2x2(input):
    """Disjoint 2x2 window max; odd trailing row/column dropped."""
    x4, squeeze = _as4d(input)
    n, h, w, c = x4.shape
    if h < 2 or w < 2:
        raise ContractViolation("spatial dims must be >= 2")
    h2, w2 = h // 2, w // 2
    win = x4[:, : 2 * h2, : 2 * w2].reshape(n, h2, 2, w2, 2, c)
    out = win.max(axis=(2, 4))
    return _restore(_check(out), squeeze)


def maxpool2x2_backward(input, d_out):
    """Route each output gradient to the argmax cell of its window.

    Ties resolve to the first cell in row-major window order, matching
    maxpool2x2_argmax. Written with direct cell comparisons rather than
    argmax/scatter; this is the training hot path.
    """
    x4, squeeze = _as4d(input)
    d4, _ = _as4d(d_out)
    n, h, w, c = x4.shape
    h2, w2 = h // 2, w // 2
    c00 = x4[:, 0 : 2 * h2 : 2, 0 : 2 * w2 : 2]
    c01 = x4[:, 0 : 2 * h2 : 2, 1 : 2 * w2 : 2]
    c10 = x4[:, 1 : 2 * h2 : 2, 0 : 2 * w2 : 2]
    c11 = x4[:, 1 : 2 * h2 : 2, 1 : 2 * w2 : 2]
    b0 = (c00 >= c01) & (c00 >= c10) & (c00 >= c11)
    b1 = ~b0 & (c01 >= c10) & (c01 >= c11)
    b2 = ~(b0 | b1) & (c10 >= c11)
    d_input = np.zeros_like(x4)
    d_input[:, 0 : 2 * h2 : 2, 0 : 2 * w2 : 2] = np.where(b0, d4, 0)
    d_input[:, 0 : 2 * h2 : 2, 1 : 2 * w2 : 2] = np.where(b1, d4, 0)
    d_input[:, 1 : 2 * h2 : 2, 0 : 2 * w2 : 2] = np.where(b2, d4, 0)
    d_input[:, 1 : 2 * h2 : 2, 1 : 2 * w2 : 2] = np.where(b0 | b1 | b2, 0, d4)
    return _restore(d_input, squeeze)


def maxpool2x2_argmax(input):
    """Per-window argmax index (0..3); the cell backward routes gradient to."""
    x4, squeeze = _as4d(input)
    n, h, w, c = x4.shape
    h2, w2 = h // 2, w // 2
    win = x4[:, : 2 * h2, : 2 * w2].reshape(n, h2, 2, w2, 2, c)
    idx = win.transpose(0, 1, 3, 5, 2, 4).reshape(n, h2, w2, c, 4).argmax(axis=-1)
    return _restore(idx, squeeze)


def global_max_pool(input):
    """Max over all spatial positions per channel: (H,W,C) -> (C,)."""
    x4, squeeze = _as4d(input)
    out = x4.max(axis=(1, 2))
    return _restore(_check(out), squeeze)


def global_max_pool_backward(input, d_out):
    x4, squeeze = _as4d(input)
    d2 = np.atleast_2d(d_out)
    n, h, w, c = x4.shape
    flat = x4.reshape(n, h * w, c)
    idx = flat.argmax(axis=1)
    d_flat = np.zeros_like(flat)
    np.put_along_axis(d_flat, idx[:, None, :], d2[:, None, :], axis=1)
    return _restore(d_flat.reshape(n, h, w, c), squeeze)


def dense(input, weights, bias):
    """out = input @ weights + bias for (K,) or (N,K) inputs."""
    x = np.asarray(input)
    if x.shape[-1] != weights.shape[0]:
        raise ContractViolation(f"dense mismatch: {x.shape[-1]} vs {weights.shape[0]}")
    if bias.shape != (weights.shape[1],):
        raise ContractViolation("bias shape mismatch")
    return _check(x @ weights + bias)


def dense_backward(input, weights, d_out):
    x = np.atleast_2d(np.asarray(input))
    d = np.atleast_2d(np.asarray(d_out))
    d_weights = x.T @ d
    d_bias = d.sum(axis=0)
    d_input = d @ weights.T
    if np.asarray(input).ndim == 1:
        d_input = d_input[0]
    return d_weights, d_bias, d_input


def relu(x, out=None):
    return np.maximum(x, 0, out=out)


def relu_backward(x, d_out):
    return d_out * (np.asarray(x) > 0)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x)))


def dropout(x, rate, training, rng=None, return_mask=False):
    """Inverted dropout: identity at inference, scaled mask in training."""
    if not 0.0 <= rate < 1.0:
        raise ContractViolation("dropout rate must be in [0, 1)")
    x = np.asarray(x)
    if not training or rate == 0.0:
        mask = np.ones_like(x)
        return (x, mask) if return_mask else x
    if rng is None:
        raise ContractViolation("training-mode dropout needs an rng")
    keep = (rng.random(x.shape, dtype=np.float32) >= rate).astype(x.dtype)
    mask = keep / (1.0 - rate)
    y = x * mask
    return (y, mask) if return_mask else y


def dropout_backward(mask, d_out):
    return d_out * mask
