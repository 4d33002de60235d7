import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bflab.numerics import (
    NotPositiveDefinite,
    NotSquare,
    gram,
    herm_solve,
    logdet_hpd,
    trace_real,
)


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def random_hpd(rng, n):
    g = crandn(rng, n, n)
    return g @ g.conj().T + np.eye(n)


def test_gram_small_cases():
    assert np.allclose(gram(np.eye(2)), np.eye(2))
    assert np.allclose(gram(np.array([[1j, 0]])), [[1]])


def test_gram_matches_entrywise_definition():
    rng = np.random.default_rng(0)
    h = crandn(rng, 4, 6)
    ref = np.array([[sum(h[i, l] * np.conj(h[j, l]) for l in range(6)) for j in range(4)] for i in range(4)])
    g = gram(h)
    assert np.max(np.abs(g - ref)) < 1e-12
    assert np.max(np.abs(g - g.conj().T)) < 1e-12


def test_herm_solve_examples():
    b = np.arange(6).reshape(3, 2) + 1j
    assert np.allclose(herm_solve(np.eye(3), b), b)
    assert np.allclose(herm_solve(2 * np.eye(3), np.eye(3)), 0.5 * np.eye(3))


def test_herm_solve_residual():
    rng = np.random.default_rng(1)
    a = random_hpd(rng, 4)
    b = crandn(rng, 4, 3)
    x = herm_solve(a, b)
    assert np.linalg.norm(a @ x - b) / np.linalg.norm(b) < 1e-10


def test_herm_solve_rejects_indefinite():
    with pytest.raises(NotPositiveDefinite):
        herm_solve(np.diag([1.0, -1.0]), np.eye(2))


def test_logdet_examples():
    assert logdet_hpd(np.eye(3)) == 0.0
    assert logdet_hpd(np.diag([2.0, 2.0])) == pytest.approx(2 * np.log(2), abs=1e-12)


def test_logdet_frozen_value():
    # 40-digit determinant of this matrix, evaluated offline
    a = np.array([[4, 1 + 2j, 0], [1 - 2j, 6, 1j], [0, -1j, 3]])
    assert logdet_hpd(a) == pytest.approx(3.970291913552121834, rel=1e-14)


def test_logdet_matches_eigenvalues():
    rng = np.random.default_rng(2)
    a = random_hpd(rng, 5)
    assert logdet_hpd(a) == pytest.approx(np.sum(np.log(np.linalg.eigvalsh(a))), rel=1e-9)


def test_trace_real():
    assert trace_real(np.eye(4)) == 4.0
    assert trace_real(gram(np.array([[1, 1j]]))) == pytest.approx(2.0)
    rng = np.random.default_rng(3)
    v = crandn(rng, 5, 3)
    assert trace_real(gram(v)) == pytest.approx(np.sum(np.abs(v) ** 2), rel=1e-12)
    with pytest.raises(NotSquare):
        trace_real(np.ones((2, 3)))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_gram_is_psd(n, m, seed):
    g = gram(crandn(np.random.default_rng(seed), n, m))
    assert np.linalg.eigvalsh(g).min() >= -1e-10


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_solve_recovers_x(n, seed):
    rng = np.random.default_rng(seed)
    a = random_hpd(rng, n)
    x0 = crandn(rng, n, 2)
    assert np.linalg.norm(herm_solve(a, a @ x0) - x0) <= 1e-9 * np.linalg.norm(x0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.floats(1e-3, 1e3), st.integers(0, 2**32 - 1))
def test_logdet_scaling(n, c, seed):
    a = random_hpd(np.random.default_rng(seed), n)
    assert logdet_hpd(c * a) == pytest.approx(logdet_hpd(a) + n * np.log(c), rel=1e-10, abs=1e-10)
