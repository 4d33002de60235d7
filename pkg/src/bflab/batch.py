"""Vectorized R-WMMSE over a stack of samples.

Every user gets ``d_max`` stream columns; the columns beyond d_k are zero at
initialization and remain exactly zero through the U, W and X updates, so a
padded run is the same iteration as the per-sample solver in
:mod:`bflab.solvers`. Used for label generation and evaluation, where the
per-call overhead of small numpy operations dominates.

Array conventions (B = batch, K = users, R = receive antennas, D = d_max,
N = K*R):
    h     (B, N, T)      stacked normalized channels
    hbar  (B, N, N)
    x     (B, N, K*D)    user k owns columns k*D:(k+1)*D
    u     (B, K, R, D)
    w     (B, K, D, D)
"""
import numpy as np

from .solvers import BeamformerSet, SolveOptions, SolveTrace, WmmseState


def herm(a):
    return np.conj(np.swapaxes(a, -1, -2))


def chol_solve(a, b):
    """Batched Hermitian PD solve. Returns ``(x, ok)``; failed entries get x = 0."""
    a = 0.5 * (a + herm(a))
    ok = np.isfinite(a).all(axis=(-2, -1))
    if not ok.all():
        a = a.copy()
        a[~ok] = np.eye(a.shape[-1])
    try:
        low = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        low = np.zeros_like(a)
        eye = np.eye(a.shape[-1])
        for i in range(a.shape[0]):
            try:
                low[i] = np.linalg.cholesky(a[i])
            except np.linalg.LinAlgError:
                ok[i] = False
                low[i] = eye
    y = np.linalg.solve(low, b)
    x = np.linalg.solve(herm(low), y)
    x[~ok] = 0
    return x, ok


def logdet_batch(a):
    """Log-determinant of a stack of Hermitian PD matrices via Cholesky."""
    low = np.linalg.cholesky(0.5 * (a + herm(a)))
    return 2.0 * np.sum(np.log(np.real(np.diagonal(low, axis1=-2, axis2=-1))), axis=-1)


class Problem:
    """Stacked, normalized samples sharing (K, R, T)."""

    def __init__(self, samples, d_max=2):
        s0 = samples[0]
        self.k, self.r, self.t = s0.n_users, s0.n_rx, s0.n_tx
        self.dmax = d_max
        self.h = np.stack([s.h for s in samples])
        self.alpha = np.stack([np.asarray(s.alpha, float) for s in samples])
        self.d = np.stack([np.asarray(s.d) for s in samples])
        self.noise = np.array([s.sigma2 / s.p_max for s in samples])
        self.sigma2 = np.array([s.sigma2 for s in samples])
        self.p_max = np.array([s.p_max for s in samples])
        self.hbar = self.h @ herm(self.h)
        # column j of user k is active iff j < d_k
        self.col_mask = (np.arange(d_max)[None, None, :] < self.d[:, :, None])

    def __len__(self):
        return self.h.shape[0]

    def rows(self, a):
        """(B, N, C) -> (B, K, R, C)."""
        return a.reshape(a.shape[0], self.k, self.r, a.shape[-1])

    def diag_blocks(self, a):
        """(B, N, K*D) -> per-user diagonal blocks (B, K, R, D)."""
        r = self.rows(a).reshape(a.shape[0], self.k, self.r, self.k, self.dmax)
        idx = np.arange(self.k)
        return r[:, idx, :, idx, :].transpose(1, 0, 2, 3)

    def mrt_x(self):
        """Initial X: selector of the first d_k rows of each user block, equal user power."""
        b = len(self)
        x = np.zeros((b, self.k * self.r, self.k * self.dmax), dtype=np.complex128)
        for k in range(self.k):
            for j in range(min(self.dmax, self.r)):
                x[:, k * self.r + j, k * self.dmax + j] = self.col_mask[:, k, j]
        # ||H_k^H e||^2 over the selected columns = trace of the selected Gram block
        hv = self.hbar @ x
        pw = np.real(np.einsum("bnc,bnc->bc", np.conj(x), hv)).reshape(b, self.k, self.dmax).sum(-1)
        scale = np.sqrt(self.p_max[:, None] / self.k / pw)
        return x * np.repeat(scale, self.dmax, axis=1)[:, None, :]


def power(pb, x):
    return np.real(np.einsum("bnc,bnm,bmc->b", np.conj(x), pb.hbar, x))


def wsr_from_x(pb, x):
    """Weighted sum-rate (nats) of power-normalized V = H^H X."""
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.sqrt(pb.p_max / power(pb, x))
    hx = pb.rows(pb.hbar @ x) * scale[:, None, None, None]       # (B, K, R, K*D)
    eye = pb.sigma2[:, None, None, None] * np.eye(pb.r)
    total = hx @ herm(hx) + eye
    own = pb.diag_blocks(hx.reshape(len(pb), -1, hx.shape[-1]))
    interf = total - own @ herm(own)
    rates = logdet_batch(total) - logdet_batch(interf)
    return np.sum(pb.alpha * rates, axis=1)


def u_step(pb, x):
    hx = pb.hbar @ x
    noise = pb.noise * np.real(np.einsum("bnc,bnc->b", np.conj(x), hx))
    hxr = pb.rows(hx)
    c = hxr @ herm(hxr) + noise[:, None, None, None] * np.eye(pb.r)
    own = pb.diag_blocks(hx)
    b, k = c.shape[:2]
    u, ok = chol_solve(c.reshape(b * k, pb.r, pb.r), own.reshape(b * k, pb.r, pb.dmax))
    return u.reshape(b, k, pb.r, pb.dmax), ok.reshape(b, k).all(axis=1)


def w_step(pb, x, u):
    own = pb.diag_blocks(pb.hbar @ x)
    e = np.eye(pb.dmax) - herm(u) @ own
    b, k = e.shape[:2]
    w, ok = chol_solve(e.reshape(b * k, pb.dmax, pb.dmax),
                       np.broadcast_to(np.eye(pb.dmax, dtype=complex), (b * k, pb.dmax, pb.dmax)))
    w = w.reshape(b, k, pb.dmax, pb.dmax)
    return 0.5 * (w + herm(w)), ok.reshape(b, k).all(axis=1)


def x_system(pb, u, w, alpha=None):
    alpha = pb.alpha if alpha is None else alpha
    b, k, r, dm = len(pb), pb.k, pb.r, pb.dmax
    uw = u @ w
    m = uw @ herm(u)                                              # (B, K, R, R)
    tr = np.sum(alpha * np.real(np.trace(m, axis1=-2, axis2=-1)), axis=1)
    mblk = np.zeros((b, k * r, k * r), dtype=np.complex128)
    for i in range(k):
        mblk[:, i * r:(i + 1) * r, i * r:(i + 1) * r] = alpha[:, i, None, None] * m[:, i]
    system = (pb.noise * tr)[:, None, None] * pb.hbar + pb.hbar @ mblk @ pb.hbar
    hcols = pb.hbar.reshape(b, k * r, k, r).transpose(0, 2, 1, 3)  # (B, K, N, R): H̄[:, block k]
    rhs = alpha[:, :, None, None] * (hcols @ uw)                  # (B, K, N, D)
    rhs = rhs.transpose(0, 2, 1, 3).reshape(b, k * r, k * dm)
    return system, rhs


def x_step(pb, u, w, alpha=None):
    system, rhs = x_system(pb, u, w, alpha)
    return chol_solve(system, rhs)


def rwmmse_batch(samples, opts=None, d_max=2):
    """Run R-WMMSE on every sample; stopping is decided per sample.

    Returns ``(results, ok)`` where ``results[i]`` is a ``(state, v, trace)``
    triple shaped like :func:`bflab.solvers.rwmmse_solve` output (or None
    when sample i hit a factorization failure) and ``ok`` flags successes.
    """
    opts = opts or SolveOptions()
    pb = Problem(samples, d_max)
    b = len(pb)
    with np.errstate(divide="ignore", invalid="ignore"):
        x = pb.mrt_x()
    # a user with an all-zero channel has no MRT direction
    ok = np.isfinite(x).all(axis=(1, 2))
    x[~ok] = 0
    obj = np.full(b, np.nan)
    if ok.any():
        obj[ok] = wsr_from_x(subproblem(pb, np.flatnonzero(ok)), x[ok])
    active = ok.copy()
    iters = np.zeros(b, dtype=int)
    history = [obj.copy()]
    for it in range(1, opts.max_iter + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        sub = subproblem(pb, idx)
        u, ok_u = u_step(sub, x[idx])
        w, ok_w = w_step(sub, x[idx], u)
        xn, ok_x = x_step(sub, u, w)
        good = ok_u & ok_w & ok_x
        ok[idx[~good]] = False
        active[idx[~good]] = False
        idx, xn = idx[good], xn[good]
        x[idx] = xn
        new = obj.copy()
        if idx.size:
            new[idx] = wsr_from_x(subproblem(pb, idx), xn)
        iters[idx] = it
        done = np.abs(new[idx] - obj[idx]) < opts.tol
        active[idx[done]] = False
        obj = new
        history.append(np.where(iters == it, obj, np.nan))
    converged = ~active & ok

    u = np.zeros((b, pb.k, pb.r, pb.dmax), dtype=np.complex128)
    w = np.zeros((b, pb.k, pb.dmax, pb.dmax), dtype=np.complex128)
    good = np.flatnonzero(ok)
    if good.size:
        sub = subproblem(pb, good)
        u[good], _ = u_step(sub, x[good])
        w[good], _ = w_step(sub, x[good], u[good])
    hist = np.array(history)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.sqrt(pb.p_max / power(pb, x))
    results = []
    for i, s in enumerate(samples):
        if not ok[i]:
            results.append(None)
            continue
        dk = pb.d[i]
        xs = [x[i][:, k * d_max:k * d_max + dk[k]] for k in range(pb.k)]
        us = [u[i, k][:, :dk[k]] for k in range(pb.k)]
        ws = [w[i, k][:dk[k], :dk[k]] for k in range(pb.k)]
        v = BeamformerSet([s.h.conj().T @ xk * scale[i] for xk in xs])
        trace = SolveTrace(objective_per_iter=[float(o) for o in hist[:iters[i] + 1, i]],
                           iterations=int(iters[i]), converged=bool(converged[i]))
        results.append((WmmseState(x=xs, u=us, w=ws), v, trace))
    return results, ok


def subproblem(pb, idx):
    sub = object.__new__(Problem)
    sub.__dict__.update(pb.__dict__)
    for name in ("h", "alpha", "d", "noise", "sigma2", "p_max", "hbar", "col_mask"):
        setattr(sub, name, getattr(pb, name)[idx])
    return sub
