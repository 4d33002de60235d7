"""Label generation, supervised pre-training and unsupervised refinement.

Labels are converged R-WMMSE receive filters and weights packed with
:func:`bflab.codec.pack_uw`. The network is first regressed onto those labels
(Huber loss, soft stream mask, index network trained), then refined on the
negative weighted sum-rate with the index network frozen and the hard mask
applied.
"""
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import codec
from .batch import Problem, rwmmse_batch, subproblem
from .channel import Dataset, normalize_sample
from .neuralnet import layers, model
from .neuralnet.adam import AdamState, adam_step
from .neuralnet.model import MAIN_PARAMS, NetConfig
from .neuralnet.modelio import save_model
from .neuralnet.unsupervised import packed_wsr, unsupervised_loss
from .solvers import SolveOptions

log = logging.getLogger(__name__)

LABEL_CHUNK = 256


def worker_count():
    """Worker processes: ``BFLAB_THREADS`` if set, else the CPU count."""
    env = os.environ.get("BFLAB_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


@dataclass
class TrainConfig:
    batch_size: int = 128
    supervised_epochs: int = 50
    unsupervised_epochs: int = 1
    lr: float = 1e-3
    finetune_lr: float = 1e-4
    seed: int = 0
    early_stop_patience: int = 5
    determinism: bool = True
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (batch norm)")
        if self.supervised_epochs < 0 or self.unsupervised_epochs < 0:
            raise ValueError("epoch counts must be non-negative")


@dataclass
class TrainReport:
    phase: str
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_ratio: list = field(default_factory=list)
    epochs_run: int = 0
    best_epoch: int = -1
    wall_time: float = 0.0
    checkpoints: list = field(default_factory=list)
    split: dict = field(default_factory=dict)
    skipped_samples: int = 0
    ratio_before: float = float("nan")
    ratio_after: float = float("nan")

    def to_dict(self):
        return asdict(self)


# --------------------------------------------------------------------------
# labels
# --------------------------------------------------------------------------

def _label_chunk(args):
    samples, opts = args
    norm = [normalize_sample(s) for s in samples]
    results, ok = rwmmse_batch(norm, opts)
    labels = np.zeros((len(samples), codec.output_size(norm[0].n_users, norm[0].n_rx)))
    iters = np.zeros(len(samples), dtype=int)
    for i, r in enumerate(results):
        if r is None:
            continue
        state, _, trace = r
        labels[i] = codec.pack_uw(state.u, state.w, samples[i].d)
        iters[i] = trace.iterations
    return labels, ok, iters


def generate_labels(ds, opts=None, workers=None):
    """Attach R-WMMSE labels; samples whose solve fails are dropped.

    Chunks are solved independently, so the result does not depend on the
    worker count.
    """
    opts = opts or SolveOptions()
    workers = worker_count() if workers is None else workers
    chunks = [(ds.samples[i:i + LABEL_CHUNK], opts) for i in range(0, len(ds), LABEL_CHUNK)]
    if workers > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_label_chunk, chunks))
    else:
        parts = [_label_chunk(c) for c in chunks]
    labels = np.concatenate([p[0] for p in parts]) if parts else np.zeros((0, 0))
    ok = np.concatenate([p[1] for p in parts]) if parts else np.zeros(0, bool)
    iters = np.concatenate([p[2] for p in parts]) if parts else np.zeros(0, int)
    keep = np.flatnonzero(ok)
    dropped = int(len(ds) - keep.size)
    if dropped:
        log.warning("label generation dropped %d of %d samples", dropped, len(ds))
    meta = dict(ds.meta)
    meta.update(labels={"tol": opts.tol, "max_iter": opts.max_iter, "dropped": dropped,
                        "mean_iterations": float(iters[keep].mean()) if keep.size else 0.0})
    return Dataset(ds.config, [ds.samples[i] for i in keep], labels[keep], meta)


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def split_indices(n, val_fraction=0.1):
    """Train indices first, validation = the trailing block."""
    n_val = int(round(n * val_fraction))
    if n - n_val < 2:
        n_val = 0
    return np.arange(n - n_val), np.arange(n - n_val, n)


def predicted_wsr(params, samples, inputs=None, problem=None, mode="eval"):
    """Weighted sum-rate achieved by the network on each sample (NaN on failure)."""
    x, d = inputs if inputs is not None else model.prepare_inputs(samples)
    pb = problem if problem is not None else Problem([normalize_sample(s) for s in samples])
    out, _ = model.cmbnn_forward(params, x, d, mode=mode, hard_mask=True)
    return packed_wsr(pb, out)[0]


def label_wsr(samples, labels, problem=None):
    """Weighted sum-rate of the beamformers rebuilt from the reference labels."""
    pb = problem if problem is not None else Problem([normalize_sample(s) for s in samples])
    return packed_wsr(pb, labels)[0]


def mean_ratio(pred, ref):
    """Mean of pred/ref; failed predictions count as ratio 0."""
    r = np.where(np.isfinite(pred), pred, 0.0) / ref
    return float(np.mean(r)) if r.size else float("nan")


def label_scale(labels, d):
    """Per-position RMS of the labels over samples where the position is active."""
    mask = codec.stream_mask(d)
    sq = (labels ** 2).sum(0)
    cnt = mask.sum(0)
    rms = np.sqrt(np.divide(sq, cnt, out=np.zeros_like(sq), where=cnt > 0))
    return np.where(rms > 1e-8, rms, 1.0)


class _ValSet:
    def __init__(self, ds, idx):
        self.samples = [ds.samples[i] for i in idx]
        self.labels = ds.labels[idx] if ds.labels is not None else None
        self.ok = len(idx) > 0
        if self.ok:
            self.inputs = model.prepare_inputs(self.samples)
            self.problem = Problem([normalize_sample(s) for s in self.samples])
            self.ref = label_wsr(self.samples, self.labels, self.problem) if self.labels is not None else None

    def ratio(self, params):
        if not self.ok or self.ref is None:
            return float("nan")
        return mean_ratio(predicted_wsr(params, self.samples, self.inputs, self.problem), self.ref)

    def huber(self, params):
        if not self.ok:
            return float("nan")
        x, d = self.inputs
        out, _ = model.cmbnn_forward(params, x, d, mode="eval", hard_mask=False)
        scale = params.buffers["out_scale"]
        loss, _ = layers.huber_loss(out / scale, self.labels / scale, params.config.huber_delta)
        return float(loss)


def _write_log(path, report):
    if path:
        Path(path).write_text(json.dumps(report.to_dict(), indent=2))


def _checkpoint(params, directory, tag, report, extra):
    if directory is None:
        return
    path = Path(directory) / f"{report.phase}_epoch{tag:03d}.bfnn"
    path.parent.mkdir(parents=True, exist_ok=True)
    save_model(path, params, extra=extra)
    report.checkpoints.append(str(path))


# --------------------------------------------------------------------------
# training phases
# --------------------------------------------------------------------------

def train_supervised(ds, cfg, params=None, checkpoint_dir=None, log_path=None):
    """Huber regression of the network output onto the packed labels.

    Validation is the trailing ``cfg.val_fraction`` of the file. Training
    stops early when the validation Huber loss fails to improve for
    ``cfg.early_stop_patience`` epochs, and the best epoch is returned.
    """
    if ds.labels is None:
        raise ValueError("supervised training needs a labeled dataset")
    start = time.perf_counter()
    if params is None:
        params = model.init_params(NetConfig(n_users=ds.config.n_users, n_rx=ds.config.n_rx), cfg.seed)
    params = params.copy()
    report = TrainReport(phase="supervised")
    train_idx, val_idx = split_indices(len(ds), cfg.val_fraction)
    report.split = {"train": [0, int(train_idx.size)], "val": [int(train_idx.size), len(ds)]}
    if cfg.supervised_epochs == 0:
        report.wall_time = time.perf_counter() - start
        _write_log(log_path, report)
        return params, report

    x_all, d_all = model.prepare_inputs(ds.samples)
    xt, dt, yt = x_all[train_idx], d_all[train_idx], ds.labels[train_idx]
    params.buffers["out_scale"] = label_scale(yt, dt)
    val = _ValSet(ds, val_idx)
    rng = np.random.default_rng(cfg.seed)
    opt = AdamState(lr=cfg.lr)
    best, best_loss, stale = params.copy(), np.inf, 0
    bs = cfg.batch_size
    for epoch in range(cfg.supervised_epochs):
        order = rng.permutation(train_idx.size)
        losses = []
        for i in range(0, order.size, bs):
            b = order[i:i + bs]
            if b.size < 2:
                continue
            loss, grads = model.supervised_loss(params, xt[b], dt[b], yt[b], update_stats=True)
            adam_step(params.tensors, grads, opt)
            losses.append(float(loss) * b.size)
        report.train_loss.append(float(np.sum(losses) / order.size))
        vloss = val.huber(params) if val.ok else report.train_loss[-1]
        report.val_loss.append(vloss)
        report.val_ratio.append(val.ratio(params))
        report.epochs_run = epoch + 1
        log.info("supervised epoch %d: train %.5f val %.5f ratio %.4f",
                 epoch + 1, report.train_loss[-1], vloss, report.val_ratio[-1])
        _checkpoint(params, checkpoint_dir, epoch + 1, report, {"phase": "supervised", "epoch": epoch + 1})
        if vloss < best_loss:
            best, best_loss, stale, report.best_epoch = params.copy(), vloss, 0, epoch + 1
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                break
    report.wall_time = time.perf_counter() - start
    _write_log(log_path, report)
    return best, report


def finetune_unsupervised(params, ds, cfg, checkpoint_dir=None, log_path=None):
    """Refine the main network on the negative weighted sum-rate.

    The index network is frozen and the hard stream mask is applied. Samples
    whose reconstruction fails are skipped inside each mini-batch. The
    validation mean ratio is reported before and after.
    """
    start = time.perf_counter()
    params = params.copy()
    report = TrainReport(phase="unsupervised")
    train_idx, val_idx = split_indices(len(ds), cfg.val_fraction)
    report.split = {"train": [0, int(train_idx.size)], "val": [int(train_idx.size), len(ds)]}
    val = _ValSet(ds, val_idx)
    report.ratio_before = val.ratio(params)
    if cfg.unsupervised_epochs == 0:
        report.ratio_after = report.ratio_before
        report.wall_time = time.perf_counter() - start
        _write_log(log_path, report)
        return params, report

    samples = [ds.samples[i] for i in train_idx]
    x_all, d_all = model.prepare_inputs(samples)
    pb_all = Problem([normalize_sample(s) for s in samples])
    rng = np.random.default_rng(cfg.seed + 1)
    opt = AdamState(lr=cfg.finetune_lr)
    bs = cfg.batch_size
    for epoch in range(cfg.unsupervised_epochs):
        order = rng.permutation(len(samples))
        losses, n_seen = [], 0
        for i in range(0, order.size, bs):
            b = order[i:i + bs]
            if b.size < 2:
                continue
            loss, grads, ok = unsupervised_loss(params, None, problem=subproblem(pb_all, b),
                                                inputs=(x_all[b], d_all[b]), update_stats=True)
            report.skipped_samples += int((~ok).sum())
            if not ok.any():
                continue
            adam_step(params.tensors, grads, opt, names=MAIN_PARAMS)
            losses.append(loss * ok.sum())
            n_seen += int(ok.sum())
        report.train_loss.append(float(np.sum(losses) / max(n_seen, 1)))
        report.val_ratio.append(val.ratio(params))
        report.epochs_run = epoch + 1
        log.info("unsupervised epoch %d: loss %.5f ratio %.4f", epoch + 1,
                 report.train_loss[-1], report.val_ratio[-1])
        _checkpoint(params, checkpoint_dir, epoch + 1, report, {"phase": "unsupervised", "epoch": epoch + 1})
    report.ratio_after = report.val_ratio[-1] if report.val_ratio else report.ratio_before
    report.wall_time = time.perf_counter() - start
    _write_log(log_path, report)
    return params, report
