"""Problem instances: Rayleigh channels with distance pathloss, noise power,
user priorities and stream counts, plus the binary dataset format.
"""
import json
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .numerics import gram

DATASET_MAGIC = b"BFLAB001"

# (n_tx, n_users) of the three benchmark cases; every case uses n_rx = 2.
TEST_CASES = {1: (8, 2), 2: (8, 4), 3: (32, 12)}


class NonPositiveDistance(ValueError):
    pass


class ZeroChannel(ValueError):
    pass


@dataclass(frozen=True)
class ChannelConfig:
    n_tx: int
    n_users: int
    n_rx: int = 2
    snr_db: float = 20.0
    p_max: float = 1.0
    dist_min_km: float = 0.1
    dist_max_km: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if min(self.n_tx, self.n_users, self.n_rx) < 1:
            raise ValueError("antenna and user counts must be positive")
        if self.n_tx < self.n_users * self.n_rx:
            raise ValueError(
                f"n_tx={self.n_tx} < n_users*n_rx={self.n_users * self.n_rx}; "
                "the stacked channel Gram matrix would be singular"
            )
        if not 0 < self.dist_min_km <= self.dist_max_km:
            raise ValueError("need 0 < dist_min_km <= dist_max_km")
        if self.p_max <= 0:
            raise ValueError("p_max must be positive")

    @classmethod
    def for_case(cls, case, **overrides):
        n_tx, n_users = TEST_CASES[int(case)]
        return cls(n_tx=n_tx, n_users=n_users, **overrides)


@dataclass(frozen=True)
class ChannelSample:
    """One problem instance.

    ``h`` stacks the per-user channels H_k (n_rx x n_tx) vertically, so it has
    n_users*n_rx rows. ``d`` holds physical stream counts (1 or 2).
    """

    h: np.ndarray
    alpha: np.ndarray
    d: np.ndarray
    sigma2: float
    p_max: float = 1.0

    def __post_init__(self):
        k = len(self.alpha)
        if len(self.d) != k or self.h.shape[0] % k:
            raise ValueError("alpha, d and channel rows are inconsistent")
        if self.sigma2 <= 0 or self.p_max <= 0:
            raise ValueError("sigma2 and p_max must be positive")
        if not np.all(np.isin(self.d, (1, 2))):
            raise ValueError(f"stream counts must be 1 or 2, got {self.d}")
        if abs(float(np.sum(self.alpha)) - k) > 1e-9 * max(1, k):
            raise ValueError("priorities must sum to the number of users")

    @property
    def n_users(self):
        return len(self.alpha)

    @property
    def n_rx(self):
        return self.h.shape[0] // len(self.alpha)

    @property
    def n_tx(self):
        return self.h.shape[1]

    def user_channel(self, k):
        return self.h[k * self.n_rx:(k + 1) * self.n_rx]

    @property
    def is_normalized(self):
        return self.sigma2 == 1.0 and self.p_max == 1.0


@dataclass
class Dataset:
    config: ChannelConfig
    samples: list
    labels: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.float64)
            if len(self.labels) != len(self.samples):
                raise ValueError("labels and samples differ in length")

    def __len__(self):
        return len(self.samples)

    def subset(self, idx):
        idx = list(idx)
        labels = None if self.labels is None else self.labels[idx]
        return Dataset(self.config, [self.samples[i] for i in idx], labels, dict(self.meta))


def pathloss_db(omega_km):
    if omega_km <= 0:
        raise NonPositiveDistance(f"distance must be positive, got {omega_km}")
    return 128.1 + 37.6 * np.log10(omega_km)


def noise_power(h, snr_db, n_users):
    """Common noise power: geometric mean over users of ||H_k||_F^2 / N_R,
    attenuated by the SNR.
    """
    h = np.asarray(h)
    n_rx = h.shape[0] // n_users
    per_user = np.array([
        np.sum(np.abs(h[k * n_rx:(k + 1) * n_rx]) ** 2) / n_rx for k in range(n_users)
    ])
    if np.any(per_user == 0):
        raise ZeroChannel("a user channel is identically zero")
    return float(10.0 ** np.mean(np.log10(per_user)) * 10.0 ** (-snr_db / 10.0))


def sample_weights(k, seed):
    """Uniform draws rescaled to sum to ``k``."""
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.0, 1.0, size=k)
    while np.any(a == 0.0):
        a = rng.uniform(0.0, 1.0, size=k)
    a = a * (k / a.sum())
    # absorb the last ulp of rounding so the sum is k as closely as float allows
    a[-1] = k - a[:-1].sum()
    return a


def sample_streams(k, seed):
    rng = np.random.default_rng(seed)
    return rng.integers(1, 3, size=k).astype(np.int64)


def sample_channel(cfg, seed):
    """Draw one instance; the result depends only on ``(cfg, seed)``."""
    rng = np.random.default_rng(seed)
    k, nr, nt = cfg.n_users, cfg.n_rx, cfg.n_tx
    omega = rng.uniform(cfg.dist_min_km, cfg.dist_max_km, size=k)
    gain = 10.0 ** (-np.array([pathloss_db(w) for w in omega]) / 10.0)
    std = np.repeat(np.sqrt(gain / 2.0), nr)[:, None]
    h = std * (rng.standard_normal((k * nr, nt)) + 1j * rng.standard_normal((k * nr, nt)))
    alpha = sample_weights(k, rng)
    d = sample_streams(k, rng)
    sigma2 = noise_power(h, cfg.snr_db, k)
    return ChannelSample(h=h, alpha=alpha, d=d, sigma2=sigma2, p_max=cfg.p_max)


def normalize_sample(s):
    """Fold noise power and power budget into the channel (unit noise, unit budget)."""
    if s.is_normalized:
        return s
    scale = np.sqrt(s.p_max / s.sigma2)
    return replace(s, h=s.h * scale, sigma2=1.0, p_max=1.0)


def weighted_gram(s):
    """Gram matrix of the priority-scaled stack sqrt(alpha_k) H_k."""
    w = np.repeat(np.sqrt(s.alpha), s.n_rx)[:, None]
    return gram(w * s.h)


def generate_dataset(cfg, count):
    samples = [sample_channel(cfg, cfg.seed + i) for i in range(count)]
    return Dataset(cfg, samples)


def save_dataset(path, ds):
    cfg = ds.config
    label_len = 0 if ds.labels is None else int(ds.labels.shape[1])
    header = {
        "config": asdict(cfg),
        "count": len(ds.samples),
        "has_labels": ds.labels is not None,
        "label_length": label_len,
        "meta": ds.meta,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for i, s in enumerate(ds.samples):
            f.write(np.ascontiguousarray(s.h, dtype="<c16").tobytes())
            f.write(np.asarray(s.alpha, dtype="<f8").tobytes())
            f.write(np.asarray(s.d, dtype="u1").tobytes())
            f.write(struct.pack("<dd", s.sigma2, s.p_max))
            if label_len:
                f.write(np.asarray(ds.labels[i], dtype="<f8").tobytes())


def load_dataset(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != DATASET_MAGIC:
        raise ValueError(f"{path}: not a dataset file (bad magic)")
    (n,) = struct.unpack_from("<Q", raw, 8)
    header = json.loads(raw[16:16 + n].decode("utf-8"))
    cfg = ChannelConfig(**header["config"])
    k, rows, nt = cfg.n_users, cfg.n_users * cfg.n_rx, cfg.n_tx
    label_len = header["label_length"]
    pos = 16 + n
    samples, labels = [], []
    for _ in range(header["count"]):
        h = np.frombuffer(raw, "<c16", rows * nt, pos).reshape(rows, nt).astype(np.complex128)
        pos += 16 * rows * nt
        alpha = np.frombuffer(raw, "<f8", k, pos).astype(np.float64)
        pos += 8 * k
        d = np.frombuffer(raw, "u1", k, pos).astype(np.int64)
        pos += k
        sigma2, p_max = struct.unpack_from("<dd", raw, pos)
        pos += 16
        samples.append(ChannelSample(h=h, alpha=alpha, d=d, sigma2=sigma2, p_max=p_max))
        if label_len:
            labels.append(np.frombuffer(raw, "<f8", label_len, pos).astype(np.float64))
            pos += 8 * label_len
    if pos != len(raw):
        raise ValueError(f"{path}: {len(raw) - pos} trailing bytes")
    return Dataset(cfg, samples, np.array(labels) if header["has_labels"] else None,
                   header.get("meta", {}))
