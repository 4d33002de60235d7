"""The convolutional beamforming network.

Main branch::

    packed Gram (n x n) -> conv 3x3 (4 kernels) -> batch norm -> leaky ReLU
        -> flatten -> dense(32) -> leaky ReLU -> dense(out_dim, linear)

Index branch: stream counts (d_k - 1) -> dense(32) -> leaky ReLU
    -> dense(out_dim) -> sigmoid = soft mask.

Output = out_scale * head * soft_mask, times the hard stream mask in eval
mode. ``out_scale`` is a fixed per-position scale (the RMS of the training
labels) so that the head works on unit-order targets; it is not trained.
"""
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import codec
from ..channel import normalize_sample, weighted_gram
from . import layers

MAIN_PARAMS = ("conv_w", "conv_b", "bn_gamma", "bn_beta", "dense1_w", "dense1_b", "out_w", "out_b")
INDEX_PARAMS = ("index_w1", "index_b1", "index_w2", "index_b2")


@dataclass(frozen=True)
class NetConfig:
    n_users: int
    n_rx: int = 2
    d_max: int = codec.D_MAX
    n_kernels: int = 4
    kernel_size: int = 3
    hidden: int = 32
    index_hidden: int = 32
    slope: float = 0.01
    bn_eps: float = 1e-5
    bn_momentum: float = 0.99
    huber_delta: float = 1.0

    @property
    def side(self):
        return self.n_users * self.n_rx

    @property
    def out_dim(self):
        return codec.output_size(self.n_users, self.n_rx, self.d_max)

    @property
    def flatten_dim(self):
        return self.n_kernels * self.side * self.side


@dataclass
class NetParams:
    config: NetConfig
    tensors: dict
    buffers: dict = field(default_factory=dict)

    def copy(self):
        return NetParams(self.config, {k: v.copy() for k, v in self.tensors.items()},
                         {k: v.copy() for k, v in self.buffers.items()})

    def to_manifest(self):
        return asdict(self.config)


def _glorot(rng, shape, fan_in, fan_out):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


def init_params(config, seed=0):
    rng = np.random.default_rng(seed)
    c, ks, h, hi = config.n_kernels, config.kernel_size, config.hidden, config.index_hidden
    out, flat, k = config.out_dim, config.flatten_dim, config.n_users
    tensors = {
        "conv_w": _glorot(rng, (c, ks, ks), ks * ks, c * ks * ks),
        "conv_b": np.zeros(c),
        "bn_gamma": np.ones(c),
        "bn_beta": np.zeros(c),
        "dense1_w": _glorot(rng, (flat, h), flat, h),
        "dense1_b": np.zeros(h),
        # zero head: the soft mask gets no gradient until the head tracks the labels
        "out_w": np.zeros((h, out)),
        "out_b": np.zeros(out),
        "index_w1": _glorot(rng, (k, hi), k, hi),
        "index_b1": np.zeros(hi),
        "index_w2": _glorot(rng, (hi, out), hi, out),
        "index_b2": np.zeros(out),
    }
    buffers = {
        "bn_running_mean": np.zeros(c),
        "bn_running_var": np.ones(c),
        "out_scale": np.ones(out),
    }
    return NetParams(config, tensors, buffers)


def prepare_inputs(samples):
    """Packed priority-weighted Gram matrices (B, n, n) and stream counts (B, K)."""
    norm = [normalize_sample(s) for s in samples]
    x = np.stack([codec.pack_gram(weighted_gram(s)) for s in norm])
    d = np.stack([np.asarray(s.d) for s in norm])
    return x, d


def index_forward(params, d):
    """Soft mask in (0, 1) from stream counts d (B, K) with entries in {1, 2}."""
    t, cfg = params.tensors, params.config
    z1, c1 = layers.dense_forward(np.asarray(d, float) - 1.0, t["index_w1"], t["index_b1"])
    a1, c2 = layers.leaky_relu_forward(z1, cfg.slope)
    z2, c3 = layers.dense_forward(a1, t["index_w2"], t["index_b2"])
    mask = layers.sigmoid(z2)
    return mask, (c1, c2, c3, mask)


def cmbnn_forward(params, x, d, mode="eval", hard_mask=None, update_stats=False):
    """Forward pass on a batch.

    ``mode`` selects batch-norm statistics ('train' = batch, 'eval' =
    running). The hard stream mask is applied in eval mode unless
    ``hard_mask`` overrides it. ``update_stats`` folds the batch statistics
    into the running averages (training steps only).
    """
    t, cfg = params.tensors, params.config
    x = np.asarray(x)
    if x.ndim == 2:
        x, d = x[None], np.asarray(d)[None]
    if x.shape[1:] != (cfg.side, cfg.side):
        raise layers.ShapeMismatch(f"input {x.shape[1:]} but network expects side {cfg.side}")
    z1, conv_cache = layers.conv_forward(x, t["conv_w"], t["conv_b"])
    z2, bn_cache, (mean, var) = layers.bn_forward(
        z1, t["bn_gamma"], t["bn_beta"],
        params.buffers["bn_running_mean"], params.buffers["bn_running_var"],
        mode, cfg.bn_eps)
    if update_stats and mode == "train":
        mom = cfg.bn_momentum
        params.buffers["bn_running_mean"] = mom * params.buffers["bn_running_mean"] + (1 - mom) * mean
        params.buffers["bn_running_var"] = mom * params.buffers["bn_running_var"] + (1 - mom) * var
    a2, act1 = layers.leaky_relu_forward(z2, cfg.slope)
    flat = a2.reshape(a2.shape[0], -1)
    z3, d1 = layers.dense_forward(flat, t["dense1_w"], t["dense1_b"])
    a3, act2 = layers.leaky_relu_forward(z3, cfg.slope)
    head, d2 = layers.dense_forward(a3, t["out_w"], t["out_b"])
    soft, index_cache = index_forward(params, d)
    gate = params.buffers["out_scale"] * soft
    use_hard = (mode == "eval") if hard_mask is None else hard_mask
    hard = codec.stream_mask(d, cfg.n_rx, cfg.d_max) if use_hard else 1.0
    gate = gate * hard
    out = head * gate
    cache = dict(conv=conv_cache, bn=bn_cache, act1=act1, a2_shape=a2.shape, d1=d1, act2=act2,
                 d2=d2, head=head, hard=hard, gate=gate, index=index_cache)
    return out, cache


def cmbnn_backward(params, cache, dout, train_index=True):
    """Parameter gradients for upstream ``dout`` (B, out_dim).

    With ``train_index=False`` the index-network gradients are exactly zero.
    """
    t = params.tensors
    grads = {}
    dhead = dout * cache["gate"]
    da3, grads["out_w"], grads["out_b"] = layers.dense_backward(dhead, cache["d2"], t["out_w"])
    dz3 = layers.leaky_relu_backward(da3, cache["act2"])
    dflat, grads["dense1_w"], grads["dense1_b"] = layers.dense_backward(dz3, cache["d1"], t["dense1_w"])
    da2 = dflat.reshape(cache["a2_shape"])
    dz2 = layers.leaky_relu_backward(da2, cache["act1"])
    dz1, grads["bn_gamma"], grads["bn_beta"] = layers.bn_backward(dz2, cache["bn"])
    grads["conv_w"], grads["conv_b"] = layers.conv_backward(dz1, cache["conv"])

    if not train_index:
        for name in INDEX_PARAMS:
            grads[name] = np.zeros_like(t[name])
        return grads
    c1, c2, c3, mask = cache["index"]
    dsoft = dout * cache["head"] * params.buffers["out_scale"] * cache["hard"]
    dz2 = dsoft * mask * (1.0 - mask)
    da1, grads["index_w2"], grads["index_b2"] = layers.dense_backward(dz2, c3, t["index_w2"])
    dz1 = layers.leaky_relu_backward(da1, c2)
    _, grads["index_w1"], grads["index_b1"] = layers.dense_backward(dz1, c1, t["index_w1"])
    return grads


def supervised_loss(params, x, d, labels, update_stats=False):
    """Huber loss on scale-normalized outputs; soft mask only (train mode)."""
    out, cache = cmbnn_forward(params, x, d, mode="train", hard_mask=False,
                               update_stats=update_stats)
    scale = params.buffers["out_scale"]
    loss, g = layers.huber_loss(out / scale, np.asarray(labels) / scale, params.config.huber_delta)
    return loss, cmbnn_backward(params, cache, g / scale, train_index=True)


def cast(params, dtype):
    """Copy of ``params`` with every array converted to ``dtype``."""
    return NetParams(params.config,
                     {k: np.asarray(v, dtype) for k, v in params.tensors.items()},
                     {k: np.asarray(v, dtype) for k, v in params.buffers.items()})
