"""Analytic-vs-finite-difference gradient comparison for both training losses.

The Huber path is built from elementwise ops and matrix products only, so
its finite differences are evaluated in extended precision (``np.longdouble``)
and the comparison is limited by the analytic side. The unsupervised path
goes through Cholesky solves, which numpy offers only in double precision;
its central differences carry roundoff of roughly 1e-8 in absolute terms,
so coordinates with smaller gradients are judged against that floor.
"""
from dataclasses import dataclass, field

import numpy as np

from .. import codec
from ..batch import Problem
from ..channel import normalize_sample
from . import model
from .model import INDEX_PARAMS, MAIN_PARAMS
from .unsupervised import unsupervised_loss

DEFAULT_TOL = {"huber": 1e-6, "unsup": 1e-4}
DEFAULT_FLOOR = {"huber": 1e-6, "unsup": 1e-3}
WORK_DTYPE = {"huber": np.longdouble, "unsup": np.float64}


@dataclass
class GradCheckReport:
    loss: str
    tolerance: float
    floor: float
    max_rel_error: float = 0.0
    n_checked: int = 0
    worst: tuple = ()
    index_grads_zero: bool = True
    entries: list = field(default_factory=list)

    @property
    def passed(self):
        return self.n_checked > 0 and self.max_rel_error < self.tolerance and self.index_grads_zero


def rel_error(analytic, numeric, floor):
    """|a - n| / max(|a|, |n|, floor)."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def fresh_params(config, seed):
    """Random initialization with jittered biases and batch-norm affine terms.

    The output layer is drawn at random since a zero head would leave most
    gradients identically zero. Zero biases put the index network exactly on a leaky-ReLU kink for
    single-stream inputs, where the gradient is undefined. The output biases
    at the W diagonal are made positive so that the predicted weights, and
    with them the reconstruction system, are mostly positive definite.
    """
    p = model.init_params(config, seed)
    rng = np.random.default_rng(seed + 7919)
    h, out = p.tensors["out_w"].shape
    lim = np.sqrt(6.0 / (h + out))
    p.tensors["out_w"] = rng.uniform(-lim, lim, (h, out))
    for name in ("conv_b", "dense1_b", "out_b", "index_b1", "index_b2", "bn_beta"):
        p.tensors[name] = rng.uniform(-0.1, 0.1, p.tensors[name].shape)
    p.tensors["bn_gamma"] = rng.uniform(0.8, 1.2, p.tensors["bn_gamma"].shape)
    slot = codec.slot_size(config.n_rx, config.d_max)
    for i, j, off in codec.w_positions(config.n_rx, config.d_max):
        if i == j:
            p.tensors["out_b"][off::slot] = rng.uniform(1.0, 2.0, config.n_users)
    return p


def _pick_coordinates(params, names, n_params, rng):
    """At least one coordinate per tensor, the rest spread by tensor size."""
    picks = []
    sizes = np.array([params.tensors[n].size for n in names], float)
    extra = rng.multinomial(max(n_params - len(names), 0), sizes / sizes.sum())
    for name, e in zip(names, extra):
        size = params.tensors[name].size
        count = min(size, 1 + int(e))
        for flat in rng.choice(size, size=count, replace=False):
            picks.append((name, np.unravel_index(int(flat), params.tensors[name].shape)))
    return picks


def make_loss_fn(params, samples, loss, labels=None):
    """Closure ``f(params) -> (loss, grads)`` for one fixed mini-batch.

    Works at whatever precision the parameter arrays carry.
    """
    x, d = model.prepare_inputs(samples)
    if loss == "huber":
        labels = np.asarray(labels)

        def f(p):
            dt = p.tensors["out_w"].dtype
            return model.supervised_loss(p, x.astype(dt), d, labels.astype(dt))
        return f
    if loss == "unsup":
        pb = Problem([normalize_sample(s) for s in samples], params.config.d_max)
        base_ok = []

        def f(p):
            value, grads, ok = unsupervised_loss(p, samples, problem=pb, inputs=(x, d))
            if not ok.any():
                raise FloatingPointError("no sample in the batch gives a positive definite X system")
            if not base_ok:
                base_ok.append(ok)
            elif not np.array_equal(ok, base_ok[0]):
                raise FloatingPointError("finite-difference step changed the set of valid samples")
            return value, grads
        return f
    raise ValueError(f"unknown loss {loss!r}")


def grad_check(params, samples, loss="huber", labels=None, tolerance=None,
               n_params=50, step=1e-6, seed=0, floor=None, loss_fn=None):
    """Compare analytic gradients with central differences on >= ``n_params`` coordinates.

    Per-coordinate error is |a - n| / max(|a|, |n|, floor). For the
    unsupervised loss the index-network gradients must also be exactly zero.
    """
    tolerance = DEFAULT_TOL[loss] if tolerance is None else tolerance
    floor = DEFAULT_FLOOR[loss] if floor is None else floor
    f = loss_fn or make_loss_fn(params, samples, loss, labels)
    _, grads = f(params.copy())
    work = model.cast(params, WORK_DTYPE[loss])
    names = list(MAIN_PARAMS) + (list(INDEX_PARAMS) if loss == "huber" else [])
    report = GradCheckReport(loss=loss, tolerance=tolerance, floor=floor)
    if loss == "unsup":
        report.index_grads_zero = all(not np.any(grads[n]) for n in INDEX_PARAMS)
    rng = np.random.default_rng(seed)
    for name, idx in _pick_coordinates(work, names, n_params, rng):
        arr = work.tensors[name]
        orig = arr[idx]
        arr[idx] = orig + step
        up, _ = f(work)
        arr[idx] = orig - step
        down, _ = f(work)
        arr[idx] = orig
        numeric = float((up - down) / (2 * step))
        analytic = float(grads[name][idx])
        err = rel_error(analytic, numeric, floor)
        report.entries.append((name, tuple(int(i) for i in idx), analytic, numeric, err))
        if err >= report.max_rel_error:
            report.max_rel_error = err
            report.worst = (name, tuple(int(i) for i in idx))
    report.n_checked = len(report.entries)
    return report
