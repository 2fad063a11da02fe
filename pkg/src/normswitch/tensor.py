"""Dense float64 kernels for small CNNs.

Activations are plain ``numpy.ndarray`` values of dtype float64 in
(n, c, h, w) layout; filter banks are (out_channels, in_channels, kh, kw).
Every forward kernel has a matching ``*_grad`` that returns exact
gradients of ``sum(dy * forward(...))``.

Convolution is cross-correlation (no kernel flip), computed through an
im2col matrix product. Summation order is fixed by the shapes, so results
are bitwise reproducible for identical inputs.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, InputError, NumericError

DTYPE = np.float64


def as_tensor4(x, name="x"):
    """Return ``x`` as a float64 rank-4 array, raising on other ranks."""
    arr = np.asarray(x, dtype=DTYPE)
    if arr.ndim != 4:
        raise ConfigurationError(f"{name} must be rank-4 (n, c, h, w), got shape {arr.shape}")
    return arr


def conv_output_size(size, k, stride, pad, dilation):
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def _check_conv(x, w, stride, pad, dilation):
    x = as_tensor4(x)
    w = np.asarray(w, dtype=DTYPE)
    if w.ndim != 4:
        raise ConfigurationError(f"filter bank must be rank-4, got shape {w.shape}")
    if w.shape[1] != x.shape[1]:
        raise ConfigurationError(
            f"filter bank shape {w.shape} expects {w.shape[1]} input channels "
            f"but input shape {x.shape} has {x.shape[1]}"
        )
    if stride < 1 or dilation < 1 or pad < 0:
        raise ConfigurationError(f"invalid stride={stride} pad={pad} dilation={dilation}")
    oh = conv_output_size(x.shape[2], w.shape[2], stride, pad, dilation)
    ow = conv_output_size(x.shape[3], w.shape[3], stride, pad, dilation)
    if oh < 1 or ow < 1:
        raise ConfigurationError(
            f"input shape {x.shape} with filter bank shape {w.shape} gives empty output"
        )
    return x, w, oh, ow


def im2col(x, kh, kw, stride=1, pad=0, dilation=1):
    """Patch matrix of shape (n*oh*ow, c*kh*kw), rows in (n, oh, ow) order."""
    n, c = x.shape[:2]
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    eh = dilation * (kh - 1) + 1
    ew = dilation * (kw - 1) + 1
    win = sliding_window_view(x, (eh, ew), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, ::dilation, ::dilation]
    oh, ow = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    return np.ascontiguousarray(cols)


def conv2d(x, w, stride=1, pad=0, dilation=1):
    """2-D cross-correlation of ``x`` (n, c, h, w) with ``w`` (o, c, kh, kw)."""
    return conv2d_forward(x, w, stride, pad, dilation)[0]


def conv2d_forward(x, w, stride=1, pad=0, dilation=1):
    """:func:`conv2d` that also returns the im2col matrix for reuse in backward."""
    x, w, oh, ow = _check_conv(x, w, stride, pad, dilation)
    cols = im2col(x, w.shape[2], w.shape[3], stride, pad, dilation)
    out = w.reshape(w.shape[0], -1) @ cols.T
    out = out.reshape(w.shape[0], x.shape[0], oh, ow).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out), cols


def conv2d_grad(x, w, dy, stride=1, pad=0, dilation=1, cols=None):
    """Gradients ``(dx, dw)`` of ``sum(dy * conv2d(x, w))``.

    ``cols`` may pass in a cached ``im2col`` of ``x`` to skip recomputing it.
    """
    x, w, oh, ow = _check_conv(x, w, stride, pad, dilation)
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    dy = np.asarray(dy, dtype=DTYPE)
    if dy.shape != (n, o, oh, ow):
        raise ConfigurationError(f"dy shape {dy.shape} does not match conv output shape {(n, o, oh, ow)}")
    if cols is None:
        cols = im2col(x, kh, kw, stride, pad, dilation)
    dy2 = dy.transpose(1, 0, 2, 3).reshape(o, -1)
    dw = (dy2 @ cols).reshape(w.shape)
    # channel-major scratch so every scatter below reads contiguous blocks
    dcols = (w.reshape(o, -1).T @ dy2).reshape(c, kh, kw, n, oh, ow)
    dxp = np.zeros((c, n, h + 2 * pad, wd + 2 * pad), dtype=DTYPE)
    hspan = stride * (oh - 1) + 1
    wspan = stride * (ow - 1) + 1
    for i in range(kh):
        for j in range(kw):
            r, s = i * dilation, j * dilation
            dxp[:, :, r:r + hspan:stride, s:s + wspan:stride] += dcols[:, i, j]
    dx = dxp[:, :, pad:pad + h, pad:pad + wd].transpose(1, 0, 2, 3)
    return np.ascontiguousarray(dx), dw


def relu(x):
    return np.maximum(x, 0.0)


def relu_grad(x, dy):
    """Subgradient at exactly 0 is taken as 0."""
    return np.where(np.asarray(x) > 0, dy, 0.0)


def global_avg_pool(x):
    x = as_tensor4(x)
    return x.mean(axis=(2, 3), keepdims=True)


def global_avg_pool_grad(x, dy):
    n, c, h, w = np.shape(x)
    return np.broadcast_to(np.asarray(dy, dtype=DTYPE).reshape(n, c, 1, 1) / (h * w), (n, c, h, w)).copy()


def linear(x, weight, bias):
    """``x @ weight.T + bias`` for ``x`` of shape (n, d) and ``weight`` (k, d)."""
    x = np.asarray(x, dtype=DTYPE)
    weight = np.asarray(weight, dtype=DTYPE)
    if x.shape[-1] != weight.shape[1]:
        raise ConfigurationError(f"input shape {x.shape} incompatible with weight shape {weight.shape}")
    return x @ weight.T + bias


def linear_grad(x, weight, dy):
    """Return ``(dx, dweight, dbias)``."""
    dy = np.asarray(dy, dtype=DTYPE)
    return dy @ weight, dy.T @ x, dy.sum(axis=0)


def softmax_cross_entropy(logits, labels):
    """Per-sample cross-entropy and its gradient ``softmax - onehot``.

    Accepts a single logit vector with an integer label, or a (n, k) batch
    with n labels. Losses are not averaged; callers decide the reduction.
    """
    logits = np.asarray(logits, dtype=DTYPE)
    single = logits.ndim == 1
    z = np.atleast_2d(logits)
    lab = np.atleast_1d(np.asarray(labels))
    if lab.shape[0] != z.shape[0]:
        raise InputError(f"{z.shape[0]} logit rows but {lab.shape[0]} labels")
    k = z.shape[1]
    if np.any(lab < 0) or np.any(lab >= k):
        raise InputError(f"label out of range for {k} classes: {lab[(lab < 0) | (lab >= k)][0]}")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    losses = log_norm - shifted[rows, lab]
    probs = np.exp(shifted - log_norm[:, None])
    dlogits = probs
    dlogits[rows, lab] -= 1.0
    if single:
        return float(losses[0]), dlogits[0]
    return losses, dlogits


@dataclass
class FiniteDiffReport:
    max_rel_error: float
    max_abs_error: float
    checked: int
    tolerance: float

    @property
    def passed(self):
        return self.max_rel_error <= self.tolerance


def relative_error(analytic, numeric, floor=1e-8):
    """Elementwise ``|a - n| / max(|a|, |n|, floor * max|n|, floor)``."""
    a = np.asarray(analytic, dtype=DTYPE)
    b = np.asarray(numeric, dtype=DTYPE)
    scale = max(float(np.max(np.abs(b), initial=0.0)), 1.0) * floor
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), scale)


def numeric_gradient(f, x, step=1e-5):
    """Central-difference gradient of scalar ``f`` at ``x`` (not modified)."""
    x = np.array(x, dtype=DTYPE)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(x))
        flat[i] = orig - step
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value while perturbing element {i}")
        gflat[i] = (fp - fm) / (2 * step)
    return grad


def finite_diff_check(f, x, analytic, tolerance=1e-6, step=1e-5, exclude=None):
    """Compare an analytic gradient with central differences.

    ``exclude`` is an optional boolean mask of elements to skip, used for
    non-differentiable points such as ReLU inputs within ``step`` of 0.
    """
    analytic = np.asarray(analytic, dtype=DTYPE)
    if not np.all(np.isfinite(analytic)):
        raise NumericError("analytic gradient contains non-finite values")
    numeric = numeric_gradient(f, x, step)
    err = relative_error(analytic, numeric)
    abs_err = np.abs(analytic - numeric)
    keep = np.ones(err.shape, dtype=bool) if exclude is None else ~np.asarray(exclude, dtype=bool)
    if not keep.any():
        return FiniteDiffReport(0.0, 0.0, 0, tolerance)
    return FiniteDiffReport(
        max_rel_error=float(err[keep].max()),
        max_abs_error=float(abs_err[keep].max()),
        checked=int(keep.sum()),
        tolerance=tolerance,
    )
