import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bflab.channel import (
    ChannelConfig,
    ChannelSample,
    Dataset,
    NonPositiveDistance,
    ZeroChannel,
    generate_dataset,
    load_dataset,
    noise_power,
    normalize_sample,
    pathloss_db,
    sample_channel,
    sample_streams,
    sample_weights,
    save_dataset,
    weighted_gram,
)
from bflab.numerics import gram
from bflab.solvers import BeamformerSet, weighted_sum_rate


def test_pathloss():
    assert pathloss_db(0.1) == pytest.approx(90.5)
    assert pathloss_db(1.0) == pytest.approx(128.1)
    assert pathloss_db(0.2) == pytest.approx(101.81872783696569, abs=1e-9)
    with pytest.raises(NonPositiveDistance):
        pathloss_db(0.0)


def test_config_validation():
    with pytest.raises(ValueError):
        ChannelConfig(n_tx=3, n_users=2)
    with pytest.raises(ValueError):
        ChannelConfig(n_tx=8, n_users=2, dist_min_km=0.3, dist_max_km=0.1)
    assert ChannelConfig.for_case(3).n_tx == 32


def test_sample_shape_and_determinism():
    cfg = ChannelConfig.for_case(1)
    a, b = sample_channel(cfg, 5), sample_channel(cfg, 5)
    assert a.h.shape == (4, 8)
    assert np.array_equal(a.h, b.h) and np.array_equal(a.alpha, b.alpha) and np.array_equal(a.d, b.d)
    assert a.sigma2 == b.sigma2


def test_frozen_sample():
    # regression values for seed 7 of case 1
    s = sample_channel(ChannelConfig.for_case(1), 7)
    assert s.sigma2 == pytest.approx(1.7831091761831532e-12, rel=1e-12)
    assert s.h[0, 0] == pytest.approx(-1.2597419639901189e-06 + 4.875133037182819e-06j, rel=1e-12)
    assert list(s.d) == [2, 1]


def test_entry_variance_at_fixed_distance():
    cfg = ChannelConfig(n_tx=8, n_users=1, n_rx=2, dist_min_km=0.1, dist_max_km=0.1)
    h = np.concatenate([sample_channel(cfg, i).h.ravel() for i in range(1250)])
    assert h.size == 20000
    assert np.mean(np.abs(h) ** 2) == pytest.approx(10 ** -9.05, rel=0.05)


def test_noise_power_examples():
    h = np.ones((2, 2)) / np.sqrt(2)  # ||H||^2 / N_R = 1
    assert noise_power(h, 20, 1) == pytest.approx(0.01)
    rng = np.random.default_rng(0)
    h = rng.standard_normal((4, 8)) + 1j * rng.standard_normal((4, 8))
    per_user = [np.sum(np.abs(h[2 * k:2 * k + 2]) ** 2) / 2 for k in range(2)]
    assert noise_power(h, 0, 2) == pytest.approx(np.sqrt(per_user[0] * per_user[1]))
    assert noise_power(3 * h, 20, 2) == pytest.approx(9 * noise_power(h, 20, 2), rel=1e-12)
    with pytest.raises(ZeroChannel):
        noise_power(np.zeros((4, 8)), 20, 2)


def test_weights():
    assert sample_weights(1, 0).tolist() == [1.0]
    a = sample_weights(4, 3)
    assert abs(a.sum() - 4) < 1e-12 and np.all(a > 0)
    draws = np.array([sample_weights(3, i) for i in range(10000)])
    assert np.allclose(draws.mean(0), 1.0, atol=0.05)


def test_streams():
    assert np.array_equal(sample_streams(2, 11), sample_streams(2, 11))
    draws = np.concatenate([sample_streams(4, i) for i in range(2500)])
    assert set(np.unique(draws)) <= {1, 2}
    assert abs(np.mean(draws == 2) - 0.5) < 0.02


def test_normalize():
    s = sample_channel(ChannelConfig.for_case(1), 1)
    n = normalize_sample(s)
    assert n.sigma2 == 1.0 and n.p_max == 1.0
    assert np.allclose(n.h, s.h * np.sqrt(1 / s.sigma2))
    assert normalize_sample(n) is n
    fake = ChannelSample(h=s.h, alpha=s.alpha, d=s.d, sigma2=0.01, p_max=1.0)
    assert np.allclose(normalize_sample(fake).h, 10 * s.h)


@pytest.mark.parametrize("seed", range(5))
def test_normalization_preserves_objective(seed):
    rng = np.random.default_rng(seed)
    s = sample_channel(ChannelConfig.for_case(1, p_max=float(rng.uniform(1, 100))), seed)
    v = BeamformerSet([rng.standard_normal((8, dk)) + 1j * rng.standard_normal((8, dk)) for dk in s.d])
    v = v.scaled(np.sqrt(s.p_max / v.total_power))
    n = normalize_sample(s)
    a, b = weighted_sum_rate(s, v), weighted_sum_rate(n, v.scaled(1 / np.sqrt(s.p_max)))
    assert abs(a - b) <= 1e-9 * abs(a)


def test_weighted_gram():
    s = normalize_sample(sample_channel(ChannelConfig.for_case(1), 2))
    ones = ChannelSample(h=s.h, alpha=np.ones(2), d=s.d, sigma2=1.0)
    assert np.allclose(weighted_gram(ones), gram(s.h))
    z = ChannelSample(h=s.h, alpha=np.array([2.0, 0.0]), d=s.d, sigma2=1.0)
    g = weighted_gram(z)
    assert not np.any(g[2:, :]) and not np.any(g[:, 2:])
    g = weighted_gram(s)
    for k in range(2):
        for j in range(2):
            blk = np.sqrt(s.alpha[k] * s.alpha[j]) * s.user_channel(k) @ s.user_channel(j).conj().T
            assert np.max(np.abs(g[2 * k:2 * k + 2, 2 * j:2 * j + 2] - blk)) < 1e-12 * np.abs(g).max()
    assert np.linalg.eigvalsh(g).min() > -1e-9 * np.abs(g).max()


def test_sample_validation():
    with pytest.raises(ValueError):
        ChannelSample(h=np.ones((4, 8)), alpha=np.array([1.0, 2.0]), d=np.array([1, 1]), sigma2=1.0)
    with pytest.raises(ValueError):
        ChannelSample(h=np.ones((4, 8)), alpha=np.ones(2), d=np.array([0, 1]), sigma2=1.0)


def test_dataset_roundtrip(tmp_path):
    ds = generate_dataset(ChannelConfig.for_case(2, seed=4), 7)
    ds.labels = np.random.default_rng(0).standard_normal((7, 48))
    ds = Dataset(ds.config, ds.samples, ds.labels, {"note": "x"})
    path = tmp_path / "d.bfd"
    save_dataset(path, ds)
    back = load_dataset(path)
    assert back.config == ds.config and back.meta == ds.meta
    for a, b in zip(ds.samples, back.samples):
        assert np.array_equal(a.h, b.h) and np.array_equal(a.alpha, b.alpha)
        assert np.array_equal(a.d, b.d) and a.sigma2 == b.sigma2 and a.p_max == b.p_max
    assert np.array_equal(back.labels, ds.labels)
    raw = path.read_bytes()
    assert raw[:8] == b"BFLAB001"
    path.write_bytes(raw + b"\0")
    with pytest.raises(ValueError):
        load_dataset(path)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**40))
def test_normalize_idempotent_and_gram_psd(seed):
    s = normalize_sample(sample_channel(ChannelConfig.for_case(1), seed))
    assert normalize_sample(s) == s
    g = weighted_gram(s)
    assert g.shape == (4, 4)
    assert np.linalg.eigvalsh(g).min() >= -1e-9 * np.abs(g).max()
