"""Weighted sum-rate evaluation and beamformer design.

All solvers work on a single :class:`~bflab.channel.ChannelSample`. The noise
factor sigma2 / p_max is kept explicit in every formula so the functions are
also valid on un-normalized samples, but the learning pipeline only ever
feeds normalized ones (unit noise, unit budget).

Reduced WMMSE keeps V_k = H^H X_k, which shrinks every linear system to the
size of the stacked Gram matrix (K*N_R). Iterates are updated U -> W -> X.
"""
import time
from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    NotPositiveDefinite,
    cho_factor,
    cho_solve,
    gram,
    herm_solve,
    hermitize,
    logdet_hpd,
)


class SingularMse(np.linalg.LinAlgError):
    pass


class SingularChannel(np.linalg.LinAlgError):
    pass


class AllZeroOutput(ValueError):
    pass


@dataclass
class BeamformerSet:
    v: list

    @property
    def total_power(self):
        return float(sum(np.sum(np.abs(vk) ** 2) for vk in self.v))

    def scaled(self, c):
        return BeamformerSet([c * vk for vk in self.v])

    @property
    def streams(self):
        return [vk.shape[1] for vk in self.v]


@dataclass
class WmmseState:
    x: list
    u: list
    w: list


@dataclass
class SolveOptions:
    max_iter: int = 500
    tol: float = 1e-6
    trace: bool = True

    def __post_init__(self):
        if self.max_iter < 1 or self.tol <= 0:
            raise ValueError("need max_iter >= 1 and tol > 0")


@dataclass
class SolveTrace:
    objective_per_iter: list = field(default_factory=list)
    iterations: int = 0
    wall_time: float = 0.0
    converged: bool = False


# --------------------------------------------------------------------------
# rates and MSE
# --------------------------------------------------------------------------

def _user_covariances(s, v, k):
    """Received covariance with and without user k's own signal (noise included)."""
    hk = s.user_channel(k)
    eye = s.sigma2 * np.eye(s.n_rx)
    total = eye.copy()
    own = None
    for j, vj in enumerate(v.v):
        t = hk @ vj
        c = t @ t.conj().T
        total = total + c
        if j == k:
            own = c
    return total, total - own


def user_rate(s, v, k):
    """Rate of user k in nats, interference treated as noise."""
    total, interference = _user_covariances(s, v, k)
    return logdet_hpd(total) - logdet_hpd(interference)


def weighted_sum_rate(s, v):
    return float(sum(s.alpha[k] * user_rate(s, v, k) for k in range(s.n_users)))


def mse_matrix(s, v, u, k):
    """MSE matrix of user k for receiver ``u`` with the power-scaled noise term."""
    hk = s.user_channel(k)
    d = u.shape[1]
    err = np.eye(d) - u.conj().T @ hk @ v.v[k]
    e = err @ err.conj().T
    for m, vm in enumerate(v.v):
        if m != k:
            t = u.conj().T @ hk @ vm
            e = e + t @ t.conj().T
    e = e + (s.sigma2 / s.p_max) * v.total_power * (u.conj().T @ u)
    return e


# --------------------------------------------------------------------------
# reduced WMMSE
# --------------------------------------------------------------------------

def _blocks(s):
    return [slice(k * s.n_rx, (k + 1) * s.n_rx) for k in range(s.n_users)]


def _u_step(s, hbar, x):
    blocks = _blocks(s)
    noise = (s.sigma2 / s.p_max) * sum(np.vdot(xj, hbar @ xj).real for xj in x)
    hx = [hbar @ xj for xj in x]  # rows of block k give H_k V_j
    u = []
    for k, b in enumerate(blocks):
        c = noise * np.eye(s.n_rx, dtype=np.complex128)
        for t in hx:
            c = c + t[b] @ t[b].conj().T
        u.append(herm_solve(c, hx[k][b]))
    return u


def _w_step(s, hbar, x, u):
    w = []
    for k, b in enumerate(_blocks(s)):
        e = np.eye(u[k].shape[1]) - u[k].conj().T @ (hbar[b] @ x[k])
        try:
            w.append(hermitize(herm_solve(hermitize(e), np.eye(e.shape[0]))))
        except (NotPositiveDefinite, ValueError) as exc:
            raise SingularMse(f"MSE matrix of user {k} is not invertible: {exc}") from None
    return w


def _x_system(s, hbar, u, w, alpha):
    """Shared Hermitian system matrix and right-hand sides of the X update."""
    n = hbar.shape[0]
    blocks = _blocks(s)
    mw = np.zeros((n, n), dtype=np.complex128)
    tr = 0.0
    rhs = []
    for k, b in enumerate(blocks):
        uw = u[k] @ w[k]
        m = uw @ u[k].conj().T
        mw[b, b] = alpha[k] * m
        tr += alpha[k] * np.trace(m).real
        rhs.append(alpha[k] * (hbar[:, b] @ uw))
    system = (s.sigma2 / s.p_max) * tr * hbar + hbar @ mw @ hbar
    return system, rhs


def _x_step(s, hbar, u, w, alpha=None):
    alpha = s.alpha if alpha is None else alpha
    system, rhs = _x_system(s, hbar, u, w, alpha)
    sol = herm_solve(system, np.hstack(rhs))
    return np.split(sol, np.cumsum([r.shape[1] for r in rhs])[:-1], axis=1)


def x_update(s, state):
    return _x_step(s, gram(s.h), state.u, state.w)


def u_update(s, state):
    if all(not np.any(xk) for xk in state.x):
        raise NotPositiveDefinite("all X_k are zero; receive filter undefined")
    return _u_step(s, gram(s.h), state.x)


def w_update(s, state):
    return _w_step(s, gram(s.h), state.x, state.u)


def _v_from_x(s, x):
    return BeamformerSet([s.h.conj().T @ xk for xk in x])


def _power_normalized(s, v):
    p = v.total_power
    if p <= 0:
        raise AllZeroOutput("beamformers carry no power")
    return v.scaled(np.sqrt(s.p_max / p))


def _mrt_init(s):
    """Leading d_k columns of H_k^H with equal power per user."""
    v = []
    for k in range(s.n_users):
        vk = s.user_channel(k).conj().T[:, :s.d[k]]
        v.append(vk * np.sqrt(s.p_max / s.n_users) / np.linalg.norm(vk))
    return BeamformerSet(v)


def _solve_loop(s, opts, step, objective):
    trace = SolveTrace()
    t0 = time.perf_counter()
    prev = objective()
    trace.objective_per_iter.append(prev)
    for it in range(1, opts.max_iter + 1):
        try:
            step()
        except np.linalg.LinAlgError as exc:
            exc.iteration = it
            exc.args = (f"{exc} (iteration {it})",)
            raise
        cur = objective()
        trace.objective_per_iter.append(cur)
        trace.iterations = it
        if abs(cur - prev) < opts.tol:
            trace.converged = True
            break
        prev = cur
    trace.wall_time = time.perf_counter() - t0
    if not opts.trace:
        trace.objective_per_iter = trace.objective_per_iter[-1:]
    return trace


def rwmmse_solve(s, opts=None):
    """Reduced WMMSE. Returns ``(state, beamformers, trace)``.

    The objective recorded per iteration is the weighted sum-rate of the
    power-normalized V = H^H X.
    """
    opts = opts or SolveOptions()
    if not all(np.any(s.user_channel(k)) for k in range(s.n_users)):
        raise SingularChannel("a user channel is identically zero")
    hbar = gram(s.h)
    v0 = _mrt_init(s)
    try:
        x0 = herm_solve(hbar, s.h @ np.hstack(v0.v))
    except NotPositiveDefinite:
        raise SingularChannel("stacked channel Gram matrix is singular") from None
    x = np.split(x0, np.cumsum(s.d)[:-1], axis=1)
    st = WmmseState(x=x, u=None, w=None)

    def step():
        st.u = _u_step(s, hbar, st.x)
        st.w = _w_step(s, hbar, st.x, st.u)
        st.x = _x_step(s, hbar, st.u, st.w)

    def objective():
        return weighted_sum_rate(s, _power_normalized(s, _v_from_x(s, st.x)))

    trace = _solve_loop(s, opts, step, objective)
    # leave (U, W) consistent with the returned X
    st.u = _u_step(s, hbar, st.x)
    st.w = _w_step(s, hbar, st.x, st.u)
    return st, _power_normalized(s, _v_from_x(s, st.x)), trace


def full_wmmse_solve(s, opts=None):
    """Classical WMMSE over unrestricted V_k (N_T-sized systems); cross-check only."""
    opts = opts or SolveOptions()
    if not np.any(s.h):
        return BeamformerSet([np.zeros((s.n_tx, dk), complex) for dk in s.d]), SolveTrace(
            objective_per_iter=[0.0], converged=True)
    noise = s.sigma2 / s.p_max
    hs = [s.user_channel(k) for k in range(s.n_users)]
    v = _mrt_init(s).v

    def step():
        ptot = sum(np.sum(np.abs(vj) ** 2) for vj in v)
        u, w = [], []
        for k, hk in enumerate(hs):
            c = noise * ptot * np.eye(s.n_rx, dtype=np.complex128)
            for vj in v:
                t = hk @ vj
                c = c + t @ t.conj().T
            uk = herm_solve(c, hk @ v[k])
            e = hermitize(np.eye(uk.shape[1]) - uk.conj().T @ hk @ v[k])
            u.append(uk)
            w.append(hermitize(herm_solve(e, np.eye(e.shape[0]))))
        a = np.zeros((s.n_tx, s.n_tx), dtype=np.complex128)
        tr = 0.0
        rhs = []
        for k, hk in enumerate(hs):
            m = u[k] @ w[k] @ u[k].conj().T
            tr += s.alpha[k] * np.trace(m).real
            a += s.alpha[k] * hk.conj().T @ m @ hk
            rhs.append(s.alpha[k] * hk.conj().T @ u[k] @ w[k])
        sol = herm_solve(noise * tr * np.eye(s.n_tx) + a, np.hstack(rhs))
        v[:] = np.split(sol, np.cumsum(s.d)[:-1], axis=1)

    def objective():
        return weighted_sum_rate(s, _power_normalized(s, BeamformerSet(list(v))))

    trace = _solve_loop(s, opts, step, objective)
    return _power_normalized(s, BeamformerSet(list(v))), trace


# --------------------------------------------------------------------------
# zero forcing
# --------------------------------------------------------------------------

def zf_solve(s):
    """Zero-forcing along the channel pseudo-inverse with equal power per stream.

    Single-stream users keep whichever of their pseudo-inverse columns gives
    the larger interference-free rate (lower index on ties). Priorities are
    ignored.
    """
    hbar = gram(s.h)
    try:
        factor = cho_factor(hbar)
    except NotPositiveDefinite:
        raise SingularChannel("stacked channel Gram matrix is singular") from None
    pinv = s.h.conj().T @ cho_solve(factor, np.eye(hbar.shape[0]))
    p_stream = s.p_max / int(np.sum(s.d))
    noise = s.sigma2
    v = []
    for k, b in enumerate(_blocks(s)):
        cols = pinv[:, b] / np.linalg.norm(pinv[:, b], axis=0)
        if s.d[k] >= cols.shape[1]:
            v.append(cols * np.sqrt(p_stream))
            continue
        hk = s.user_channel(k)
        rates = [np.log1p(p_stream * np.sum(np.abs(hk @ cols[:, i]) ** 2) / noise)
                 for i in range(cols.shape[1])]
        best = int(np.argmax(rates))  # argmax returns the first maximum
        v.append(cols[:, best:best + 1] * np.sqrt(p_stream))
    return BeamformerSet(v)


# --------------------------------------------------------------------------
# network output -> beamformers
# --------------------------------------------------------------------------

def reconstruct_v(s, u, w, alpha=None, hbar=None):
    """Rebuild power-normalized beamformers from receive filters and weights.

    Runs one X update from ``(u, w)`` and maps V_k = H^H X_k. ``w`` is
    Hermitian-symmetrized first so that imperfect predictions still give
    Hermitian M_k = U_k W_k U_k^H.
    """
    alpha = s.alpha if alpha is None else alpha
    hbar = gram(s.h) if hbar is None else hbar
    w = [hermitize(np.asarray(wk, dtype=np.complex128)) for wk in w]
    if all(not np.any(uk @ wk) for uk, wk in zip(u, w)):
        raise AllZeroOutput("every U_k W_k is zero")
    x = _x_step(s, hbar, u, w, alpha)
    return _power_normalized(s, _v_from_x(s, x))
