"""Negative weighted sum-rate loss and its gradient through the complex
reconstruction chain (U, W) -> M -> X update -> V = H^H X -> power
normalization -> rates.

Complex gradients follow the convention G = dL/dRe(Z) + i dL/dIm(Z) for a
real loss L, under which

    Y = A B          G_A = G_Y B^H,        G_B = A^H G_Y
    Y = A^{-1} B     G_B = A^{-H} G_Y,     G_A = -G_B Y^H
    L = logdet(A)    G_A = A^{-H}          (A Hermitian PD)
    Y = T T^H        G_T = (G_Y + G_Y^H) T

Everything is batched over samples with users padded to d_max streams (see
:mod:`bflab.batch`); masked output positions must already be zero.
"""
import numpy as np

from .. import codec
from ..batch import Problem, chol_solve, herm, subproblem, x_system
from ..channel import normalize_sample
from . import model


def _rate_terms(pb, x):
    """Forward from X to per-sample loss; returns loss and everything backward needs."""
    h = pb.h
    v = herm(h) @ x                                                  # (B, T, KD)
    p = np.sum(np.abs(v) ** 2, axis=(1, 2))
    s = np.sqrt(pb.p_max / p)
    vn = v * s[:, None, None]
    t = pb.rows(h @ vn)                                              # (B, K, R, KD)
    eye = pb.sigma2[:, None, None, None] * np.eye(pb.r)
    q = t @ herm(t) + eye
    own = pb.diag_blocks(t.reshape(len(pb), -1, t.shape[-1]))       # (B, K, R, D)
    n = q - own @ herm(own)
    lq, ln = np.linalg.cholesky(q), np.linalg.cholesky(n)
    logdet = lambda low: 2.0 * np.sum(np.log(np.real(np.diagonal(low, axis1=-2, axis2=-1))), -1)
    rates = logdet(lq) - logdet(ln)
    loss = -np.sum(pb.alpha * rates, axis=1)
    return loss, (v, p, s, t, q, n, own)


def _rate_backward(pb, cache):
    """dL/dX for L = per-sample loss (each sample's loss seeded with 1)."""
    v, p, s, t, q, n, own = cache
    b, k, r, dm = len(pb), pb.k, pb.r, pb.dmax
    a = pb.alpha[:, :, None, None]
    g_q = -a * np.linalg.inv(q)
    g_n = a * np.linalg.inv(n)
    g_t = 2.0 * (g_q + g_n) @ t                                      # (B, K, R, KD)
    g_own = -2.0 * g_n @ own                                         # (B, K, R, D)
    g_t = g_t.reshape(b, k, r, k, dm)
    idx = np.arange(k)
    g_t[:, idx, :, idx, :] += g_own.transpose(1, 0, 2, 3)
    g_t = g_t.reshape(b, k * r, k * dm)
    g_vn = herm(pb.h) @ g_t                                          # (B, T, KD)
    inner = np.real(np.sum(np.conj(g_vn) * v, axis=(1, 2)))
    g_v = s[:, None, None] * g_vn - (inner * s / p)[:, None, None] * v
    return pb.h @ g_v


def unsupervised_forward_backward(pb, packed):
    """Loss per sample, gradient w.r.t. the packed output, and a success mask.

    ``packed`` is (B, out_dim) with masked positions already zeroed. Samples
    whose X system is not positive definite get zero loss and gradient and
    ``ok = False``.
    """
    u, w = codec.unpack_uw_padded(packed, pb.k, pb.r, pb.dmax)
    uw = u @ w
    system, rhs = x_system(pb, u, w)
    x, ok = chol_solve(system, rhs)
    ok &= np.any(x != 0, axis=(1, 2))
    loss = np.zeros(len(pb))
    grad = np.zeros_like(packed, dtype=float)
    if not ok.any():
        return loss, grad, ok
    idx = np.flatnonzero(ok)
    sub = subproblem(pb, idx)
    x, u, w, uw, system = x[idx], u[idx], w[idx], uw[idx], system[idx]

    loss_ok, cache = _rate_terms(sub, x)
    g_x = _rate_backward(sub, cache)

    b, k, r, dm = len(sub), sub.k, sub.r, sub.dmax
    g_rhs, _ = chol_solve(system, g_x)                               # S Hermitian: S^{-H} = S^{-1}
    g_s = -g_rhs @ herm(x)
    hbar = sub.hbar
    g_tr = sub.noise * np.real(np.sum(np.conj(g_s) * hbar, axis=(1, 2)))
    g_blk = hbar @ g_s @ hbar                                        # H̄^H G_S H̄^H with H̄ Hermitian
    g_blk = g_blk.reshape(b, k, r, k, r)
    ii = np.arange(k)
    g_m = g_blk[:, ii, :, ii, :].transpose(1, 0, 2, 3)               # (B, K, R, R)
    alpha = sub.alpha[:, :, None, None]
    g_m = alpha * (g_m + g_tr[:, None, None, None] * np.eye(r))

    g_rhs = g_rhs.reshape(b, k * r, k, dm).transpose(0, 2, 1, 3)     # (B, K, N, D)
    hrows = hbar.reshape(b, k, r, k * r)                             # (B, K, R, N) = H̄[block k, :]
    g_uw = alpha * (hrows @ g_rhs)
    # M = (UW) U^H
    g_uw = g_uw + g_m @ u
    g_u = herm(g_m) @ uw
    # UW = U W
    g_u = g_u + g_uw @ herm(w)
    g_w = herm(u) @ g_uw
    # W is Hermitian in the packed parameters: fold G_W onto the upper triangle
    g_wp = g_w + herm(g_w)
    diag = np.arange(dm)
    g_wp[..., diag, diag] = np.real(g_w[..., diag, diag])
    grad[idx] = codec.pack_uw_padded(g_u, g_wp, r, dm)
    loss[idx] = loss_ok
    return loss, grad, ok


def packed_wsr(pb, packed):
    """Weighted sum-rate of the beamformers rebuilt from packed (U, W) outputs.

    Forward-only batched counterpart of :func:`bflab.solvers.reconstruct_v`
    followed by the rate evaluation. Masked positions must already be zero.
    Returns ``(wsr, ok)``; failed samples get NaN.
    """
    u, w = codec.unpack_uw_padded(packed, pb.k, pb.r, pb.dmax)
    system, rhs = x_system(pb, u, w)
    x, ok = chol_solve(system, rhs)
    ok &= np.any(x != 0, axis=(1, 2))
    wsr = np.full(len(pb), np.nan)
    if ok.any():
        idx = np.flatnonzero(ok)
        loss, _ = _rate_terms(subproblem(pb, idx), x[idx])
        wsr[idx] = -loss
    return wsr, ok


def unsupervised_loss(params, samples, problem=None, inputs=None, update_stats=False):
    """Mean negative weighted sum-rate over a mini-batch and main-network gradients.

    Batch norm uses batch statistics; the hard stream mask is applied before
    the loss and the index network is frozen (its gradients are exactly zero).
    ``update_stats`` folds the batch statistics into the running averages.
    Returns ``(loss, grads, ok)``.
    """
    pb = problem if problem is not None else Problem([normalize_sample(s) for s in samples], params.config.d_max)
    x, d = inputs if inputs is not None else model.prepare_inputs(samples)
    out, cache = model.cmbnn_forward(params, x, d, mode="train", hard_mask=True,
                                     update_stats=update_stats)
    loss, g_out, ok = unsupervised_forward_backward(pb, out)
    n_ok = max(int(ok.sum()), 1)
    grads = model.cmbnn_backward(params, cache, g_out / n_ok, train_index=False)
    return float(loss[ok].sum() / n_ok), grads, ok
