"""Forward/backward pairs for the handful of layers the beamforming net uses.

Each ``*_forward`` returns ``(out, cache)``; the matching ``*_backward``
takes the upstream gradient and that cache.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeMismatch(ValueError):
    pass


def conv_forward(x, kernels, bias):
    """Stride-1 'same' cross-correlation of single-channel images.

    x: (B, n, n); kernels: (C, k, k); returns (B, C, n, n).
    """
    if x.ndim != 3 or x.shape[1] < kernels.shape[1] or x.shape[2] < kernels.shape[2]:
        raise ShapeMismatch(f"conv input {x.shape} vs kernels {kernels.shape}")
    kh, kw = kernels.shape[1:]
    xp = np.pad(x, ((0, 0), (kh // 2, kh - 1 - kh // 2), (kw // 2, kw - 1 - kw // 2)))
    patches = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # (B, n, n, kh, kw)
    out = np.einsum("bijpq,cpq->bcij", patches, kernels, optimize=True)
    out += bias[None, :, None, None]
    return out, patches


def conv_backward(dout, patches):
    """Gradients w.r.t. kernels and bias (the input is data, not a parameter)."""
    dk = np.einsum("bcij,bijpq->cpq", dout, patches, optimize=True)
    db = dout.sum(axis=(0, 2, 3))
    return dk, db


def bn_forward(x, gamma, beta, running_mean, running_var, mode, eps=1e-5):
    """Per-channel batch norm over (batch, height, width) for x of shape (B, C, n, n).

    In train mode the batch statistics are used and also returned so the
    caller can fold them into the running averages.
    """
    if mode == "train":
        if x.shape[0] < 2:
            raise ShapeMismatch("batch norm in train mode needs at least 2 samples")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    cache = (xhat, inv_std, gamma, mode)
    return out, cache, (mean, var)


def bn_backward(dout, cache):
    xhat, inv_std, gamma, mode = cache
    dgamma = np.sum(dout * xhat, axis=(0, 2, 3))
    dbeta = dout.sum(axis=(0, 2, 3))
    dxhat = dout * gamma[None, :, None, None]
    if mode != "train":
        return dxhat * inv_std[None, :, None, None], dgamma, dbeta
    m = dout.shape[0] * dout.shape[2] * dout.shape[3]
    dx = (inv_std[None, :, None, None] / m) * (
        m * dxhat
        - dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
        - xhat * np.sum(dxhat * xhat, axis=(0, 2, 3))[None, :, None, None]
    )
    return dx, dgamma, dbeta


def leaky_relu_forward(x, slope=0.01):
    return np.where(x > 0, x, slope * x), (x > 0, slope)


def leaky_relu_backward(dout, cache):
    pos, slope = cache
    return np.where(pos, dout, slope * dout)


def dense_forward(x, w, b):
    if x.shape[-1] != w.shape[0]:
        raise ShapeMismatch(f"dense input {x.shape} vs weights {w.shape}")
    return x @ w + b, x


def dense_backward(dout, x, w):
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def huber_loss(pred, target, delta=1.0):
    """Mean Huber loss over all elements and its gradient w.r.t. ``pred``.

    The loss comes back as a numpy scalar of the input precision.
    """
    err = np.asarray(pred) - np.asarray(target)
    a = np.abs(err)
    quad = a <= delta
    loss = np.where(quad, 0.5 * err ** 2, delta * (a - 0.5 * delta))
    grad = np.where(quad, err, delta * np.sign(err)) / err.size
    return loss.mean(), grad
