import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bflab.batch import rwmmse_batch
from bflab.channel import ChannelConfig, ChannelSample, normalize_sample, sample_channel
from bflab.numerics import NotPositiveDefinite
from bflab.solvers import (
    AllZeroOutput,
    BeamformerSet,
    SingularChannel,
    SolveOptions,
    WmmseState,
    full_wmmse_solve,
    mse_matrix,
    reconstruct_v,
    rwmmse_solve,
    u_update,
    user_rate,
    w_update,
    weighted_sum_rate,
    x_update,
    zf_solve,
)


def case_sample(seed, case=1, **kw):
    return normalize_sample(sample_channel(ChannelConfig.for_case(case, **kw), seed))


def scalar_sample(h=1.0, alpha=1.0):
    return ChannelSample(h=np.array([[h]], complex), alpha=np.array([alpha]), d=np.array([1]), sigma2=1.0)


def det2(m):
    return m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]


# ---------------------------------------------------------------- rates

def test_user_rate_scalar():
    s = scalar_sample()
    assert user_rate(s, BeamformerSet([np.ones((1, 1))]), 0) == pytest.approx(np.log(2))


def test_user_rate_without_interference():
    h = np.zeros((4, 8), complex)
    h[:2, :2] = np.eye(2)
    h[2:, 2:4] = np.eye(2)
    s = ChannelSample(h=h, alpha=np.ones(2), d=np.array([1, 1]), sigma2=1.0)
    v1 = np.zeros((8, 1)); v1[0] = 1
    v2 = np.zeros((8, 1)); v2[3] = 1
    single = ChannelSample(h=h[:2], alpha=np.ones(1), d=np.array([1]), sigma2=1.0)
    assert user_rate(s, BeamformerSet([v1, v2]), 0) == pytest.approx(user_rate(single, BeamformerSet([v1]), 0))


@pytest.mark.parametrize("seed", range(3))
def test_user_rate_direct_formula(seed):
    s = case_sample(seed)
    v, _ = full_wmmse_solve(s, SolveOptions(max_iter=3))
    for k in range(2):
        hk = s.user_channel(k)
        a = sum(hk @ v.v[j] @ v.v[j].conj().T @ hk.conj().T for j in range(2) if j != k) + np.eye(2)
        sig = hk @ v.v[k] @ v.v[k].conj().T @ hk.conj().T
        ainv = np.array([[a[1, 1], -a[0, 1]], [-a[1, 0], a[0, 0]]]) / det2(a)
        ref = np.log(det2(np.eye(2) + sig @ ainv).real)
        assert user_rate(s, v, k) == pytest.approx(ref, rel=1e-10)


def test_weighted_sum_rate():
    s = case_sample(3)
    v = zf_solve(s)
    terms = [s.alpha[k] * user_rate(s, v, k) for k in range(2)]
    assert weighted_sum_rate(s, v) == pytest.approx(sum(terms), rel=1e-12)
    s2 = ChannelSample(h=s.h, alpha=np.array([2.0, 0.0]), d=s.d, sigma2=1.0)
    assert weighted_sum_rate(s2, v) == pytest.approx(2 * user_rate(s2, v, 0), rel=1e-12)
    one = scalar_sample()
    vv = BeamformerSet([np.ones((1, 1))])
    assert weighted_sum_rate(one, vv) == user_rate(one, vv, 0)


# ---------------------------------------------------------------- MSE

def test_mse_matrix_simple():
    s = scalar_sample()
    assert mse_matrix(s, BeamformerSet([np.ones((1, 1))]), np.ones((1, 1)), 0) == pytest.approx(1.0)
    t = case_sample(0)
    v = zf_solve(t)
    assert np.allclose(mse_matrix(t, v, np.zeros((2, t.d[0])), 0), np.eye(t.d[0]))


def test_mse_matrix_monte_carlo():
    rng = np.random.default_rng(9)
    s = ChannelSample(h=case_sample(4).h, alpha=np.ones(2), d=np.array([2, 2]), sigma2=1.0)
    v = BeamformerSet([rng.standard_normal((8, 2)) + 1j * rng.standard_normal((8, 2)) for _ in range(2)])
    v = v.scaled(0.05 / np.sqrt(v.total_power))
    u = rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2))
    n_draws = 100_000
    sym = lambda: (rng.standard_normal((2, n_draws)) + 1j * rng.standard_normal((2, n_draws))) / np.sqrt(2)
    s0, s1 = sym(), sym()
    nvar = v.total_power  # sigma2 / p_max = 1
    noise = np.sqrt(nvar / 2) * (rng.standard_normal((2, n_draws)) + 1j * rng.standard_normal((2, n_draws)))
    hk = s.user_channel(0)
    y = hk @ v.v[0] @ s0 + hk @ v.v[1] @ s1 + noise
    err = u.conj().T @ y - s0
    outer = err[:, None, :] * err.conj()[None, :, :]
    emp = outer.mean(-1)
    se = outer.std(-1) / np.sqrt(n_draws)
    e = mse_matrix(s, v, u, 0)
    assert np.all(np.abs(emp - e) < 3 * se + 1e-12)
    assert np.allclose(e, e.conj().T) and np.linalg.eigvalsh(e).min() > 0


# ---------------------------------------------------------------- update steps

def test_scalar_updates():
    s = scalar_sample()
    x = x_update(s, WmmseState(x=None, u=[np.ones((1, 1))], w=[2 * np.ones((1, 1))]))
    assert x[0][0, 0] == pytest.approx(0.5)
    for xv in (0.3, 1.0, 2.5):
        u = u_update(s, WmmseState(x=[np.full((1, 1), xv)], u=None, w=None))
        assert u[0][0, 0] == pytest.approx(1 / (2 * xv))
    w = w_update(s, WmmseState(x=[np.ones((1, 1))], u=[np.full((1, 1), 0.5)], w=None))
    assert w[0][0, 0] == pytest.approx(2.0)


def test_degenerate_updates():
    s = case_sample(1)
    zeros = [np.zeros((4, dk), complex) for dk in s.d]
    with pytest.raises(NotPositiveDefinite):
        u_update(s, WmmseState(x=zeros, u=None, w=None))
    w = w_update(s, WmmseState(x=zeros, u=[np.ones((2, dk)) for dk in s.d], w=None))
    for wk, dk in zip(w, s.d):
        assert np.allclose(wk, np.eye(dk))


def test_zero_priority_kills_x():
    s = case_sample(2)
    s = ChannelSample(h=s.h, alpha=np.array([2.0, 0.0]), d=s.d, sigma2=1.0)
    st_, _, _ = rwmmse_solve(s, SolveOptions(max_iter=5))
    x = x_update(s, st_)
    assert not np.any(x[1])


@pytest.mark.parametrize("seed", range(3))
def test_fixed_point(seed):
    s = case_sample(seed)
    st_, v, _ = rwmmse_solve(s, SolveOptions(tol=1e-10, max_iter=5000))
    x = x_update(s, st_)
    for a, b in zip(x, st_.x):
        assert np.max(np.abs(a - b)) <= 1e-7 * max(1.0, np.abs(b).max())
    u = u_update(s, st_)
    for a, b in zip(u, st_.u):
        assert np.max(np.abs(a - b)) <= 1e-7 * max(1.0, np.abs(b).max())
    vx = BeamformerSet([s.h.conj().T @ xk for xk in st_.x])
    for k in range(2):
        e = mse_matrix(s, vx, st_.u[k], k)
        assert np.allclose(st_.w[k], np.linalg.inv(e), rtol=1e-6, atol=1e-6)
        assert np.linalg.eigvalsh(st_.w[k]).min() > 0


# ---------------------------------------------------------------- full solvers

def test_frozen_objective():
    # value cross-checked against the unrestricted WMMSE iteration
    s = case_sample(7)
    _, _, tr = rwmmse_solve(s, SolveOptions(tol=1e-12, max_iter=5000))
    assert tr.objective_per_iter[-1] == pytest.approx(9.046261351739812, rel=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_single_user_optimum(seed):
    cfg = ChannelConfig(n_tx=8, n_users=1, n_rx=2)
    s = normalize_sample(sample_channel(cfg, seed))
    s = ChannelSample(h=s.h, alpha=np.ones(1), d=np.array([1]), sigma2=1.0)
    opt = np.log1p(np.linalg.norm(s.h, 2) ** 2)
    _, v, _ = rwmmse_solve(s, SolveOptions(tol=1e-10, max_iter=5000))
    assert weighted_sum_rate(s, v) == pytest.approx(opt, rel=1e-4)
    vf, _ = full_wmmse_solve(s, SolveOptions(tol=1e-10, max_iter=5000))
    assert weighted_sum_rate(s, vf) == pytest.approx(opt, rel=1e-4)


@pytest.mark.parametrize("seed", range(4))
def test_monotone_and_converged(seed):
    s = case_sample(100 + seed)
    _, v, tr = rwmmse_solve(s)
    obj = np.array(tr.objective_per_iter)
    assert np.all(np.diff(obj) >= -1e-8)
    assert tr.converged and tr.iterations <= 500
    assert v.total_power == pytest.approx(1.0, abs=1e-9)
    assert v.streams == list(s.d)


def test_permutation_symmetry():
    # identical user channels make the stacked Gram singular, so relabel a generic instance
    s = case_sample(5)
    perm = [1, 0]
    t = ChannelSample(h=np.vstack([s.user_channel(k) for k in perm]), alpha=s.alpha[perm],
                      d=s.d[perm], sigma2=1.0)
    _, v, _ = rwmmse_solve(s)
    _, vt, _ = rwmmse_solve(t)
    assert weighted_sum_rate(t, vt) == pytest.approx(weighted_sum_rate(s, v), abs=1e-8)
    swapped = BeamformerSet([v.v[k] for k in perm])
    assert weighted_sum_rate(t, swapped) == pytest.approx(weighted_sum_rate(s, v), abs=1e-8)


def test_full_wmmse_matches_reduced():
    s = case_sample(11)
    _, v, _ = rwmmse_solve(s, SolveOptions(tol=1e-9, max_iter=3000))
    vf, trf = full_wmmse_solve(s, SolveOptions(tol=1e-9, max_iter=3000))
    assert weighted_sum_rate(s, vf) == pytest.approx(weighted_sum_rate(s, v), rel=1e-3)
    assert vf.total_power == pytest.approx(1.0, abs=1e-9)


def test_full_wmmse_zero_channel():
    s = ChannelSample(h=np.zeros((4, 8), complex), alpha=np.ones(2), d=np.array([1, 2]), sigma2=1.0)
    v, tr = full_wmmse_solve(s)
    assert tr.objective_per_iter[-1] == 0.0
    assert all(not np.any(vk) for vk in v.v)


def test_batch_engine_matches_single():
    samples = [case_sample(200 + i) for i in range(6)]
    results, ok = rwmmse_batch(samples)
    assert ok.all()
    for s, (st_, v, tr) in zip(samples, results):
        st1, v1, tr1 = rwmmse_solve(s)
        assert tr.iterations == tr1.iterations
        assert weighted_sum_rate(s, v) == pytest.approx(weighted_sum_rate(s, v1), rel=1e-10)
        for a, b in zip(st_.w, st1.w):
            assert np.allclose(a, b, atol=1e-8)


def test_solver_error_carries_iteration():
    s = case_sample(0)
    bad = ChannelSample(h=np.zeros_like(s.h), alpha=s.alpha, d=s.d, sigma2=1.0)
    with pytest.raises(SingularChannel):
        rwmmse_solve(bad)
    # rank-deficient stack: the X system breaks down inside the loop
    h = s.h.copy()
    h[3] = h[2]
    with pytest.raises(np.linalg.LinAlgError) as info:
        rwmmse_solve(ChannelSample(h=h, alpha=s.alpha, d=s.d, sigma2=1.0))
    assert "iteration" in str(info.value) or isinstance(info.value, SingularChannel)


# ---------------------------------------------------------------- zero forcing

def test_zf_identity_channel():
    s = ChannelSample(h=np.eye(4, dtype=complex), alpha=np.ones(2), d=np.array([2, 2]), sigma2=1.0)
    v = zf_solve(s)
    full = np.hstack(v.v)
    assert np.allclose(full, 0.5 * np.eye(4))


@pytest.mark.parametrize("seed", range(5))
def test_zf_nulls_interference(seed):
    s = case_sample(seed, case=2)
    v = zf_solve(s)
    assert v.total_power == pytest.approx(1.0, abs=1e-9)
    for k in range(4):
        for j in range(4):
            if j != k:
                assert np.linalg.norm(s.user_channel(k) @ v.v[j]) < 1e-8 * np.linalg.norm(s.h)


def test_zf_ignores_priorities():
    s = case_sample(3, case=2)
    t = ChannelSample(h=s.h, alpha=np.array([10.0, 1.0, 1.0, 1.0]) * 4 / 13, d=s.d, sigma2=1.0)
    for a, b in zip(zf_solve(s).v, zf_solve(t).v):
        assert np.array_equal(a, b)


# ---------------------------------------------------------------- reconstruction

@pytest.mark.parametrize("seed", range(3))
def test_reconstruct_from_solution(seed):
    s = case_sample(seed)
    st_, v, _ = rwmmse_solve(s)
    vr = reconstruct_v(s, st_.u, st_.w)
    assert weighted_sum_rate(s, vr) == pytest.approx(weighted_sum_rate(s, v), abs=1e-6)
    assert vr.streams == list(s.d)


def test_reconstruct_all_zero():
    s = case_sample(0)
    with pytest.raises(AllZeroOutput):
        reconstruct_v(s, [np.zeros((2, dk)) for dk in s.d], [np.eye(dk) for dk in s.d])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32), st.floats(0.1, 10), st.floats(0, 2 * np.pi))
def test_reconstruct_scale_invariance(seed, mag, phase):
    s = case_sample(seed)
    st_, _, _ = rwmmse_solve(s, SolveOptions(max_iter=20))
    c = mag * np.exp(1j * phase)
    a = reconstruct_v(s, st_.u, st_.w)
    b = reconstruct_v(s, [c * u for u in st_.u], st_.w)
    for va, vb in zip(a.v, b.v):
        # X scales by 1/conj(c); the common phase drops out of every rate
        ph = np.vdot(vb, va)
        ph = ph / abs(ph)
        assert np.max(np.abs(va - ph * vb)) < 1e-9
    assert weighted_sum_rate(s, a) == pytest.approx(weighted_sum_rate(s, b), rel=1e-9)
