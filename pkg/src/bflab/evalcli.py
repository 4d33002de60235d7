"""Performance ratio, per-method benchmarking and report export.

The performance ratio of a beamformer is its weighted sum-rate divided by
that of the R-WMMSE reference (tol 1e-6, 500 iterations). Timing covers the
whole per-sample pipeline of each method and excludes dataset IO; a few
warmup runs precede the timed pass.
"""
import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import codec
from .batch import Problem, rwmmse_batch
from .channel import normalize_sample, weighted_gram
from .neuralnet import model
from .neuralnet.unsupervised import packed_wsr
from .solvers import SolveOptions, reconstruct_v, rwmmse_solve, weighted_sum_rate, zf_solve

log = logging.getLogger(__name__)

SCHEMA = "evalreport/1"
METHODS = ("rwmmse", "zf", "cmbnn")
WARMUP = 10
REFERENCE_OPTS = SolveOptions(max_iter=500, tol=1e-6)


class DegenerateReference(ValueError):
    pass


def performance_ratio(s, v_pred, v_true):
    """f(H, V_pred) / f(H, V_true) with f the weighted sum-rate."""
    ref = weighted_sum_rate(s, v_true)
    if ref <= 1e-12:
        raise DegenerateReference(f"reference weighted sum-rate {ref:.3e} is not positive")
    return weighted_sum_rate(s, v_pred) / ref


@dataclass
class MethodResult:
    method: str
    n_samples: int = 0
    failed: int = 0
    ratios: list = field(default_factory=list)
    times: list = field(default_factory=list)
    wsr_nats: list = field(default_factory=list)
    failed_ids: list = field(default_factory=list)

    @property
    def mean_ratio(self):
        return float(np.mean(self.ratios)) if self.ratios else math.nan

    @property
    def median_ratio(self):
        return float(np.median(self.ratios)) if self.ratios else math.nan

    @property
    def mean_time(self):
        return float(np.mean(self.times)) if self.times else math.nan

    @property
    def mean_wsr_nats(self):
        return float(np.mean(self.wsr_nats)) if self.wsr_nats else math.nan

    @property
    def mean_wsr_bits(self):
        return self.mean_wsr_nats / math.log(2.0)

    def summary(self):
        return {
            "mean_ratio": self.mean_ratio,
            "median_ratio": self.median_ratio,
            "mean_time_s": self.mean_time,
            "mean_wsr_nats": self.mean_wsr_nats,
            "mean_wsr_bits": self.mean_wsr_bits,
            "n_samples": self.n_samples,
            "failed": self.failed,
        }


@dataclass
class EvalReport:
    n_tx: int = 0
    n_users: int = 0
    n_rx: int = 0
    methods: dict = field(default_factory=dict)
    schema: str = SCHEMA

    @property
    def case(self):
        return f"{self.n_tx}x{self.n_users}x{self.n_rx}"

    def to_dict(self):
        return {
            "schema": self.schema,
            "case": {"n_tx": self.n_tx, "n_users": self.n_users, "n_rx": self.n_rx},
            "methods": {name: {**asdict(r), "summary": r.summary()} for name, r in self.methods.items()},
        }

    @classmethod
    def from_dict(cls, data):
        if data.get("schema") != SCHEMA:
            raise ValueError(f"unsupported report schema {data.get('schema')!r}")
        case = data.get("case", {})
        rep = cls(n_tx=case.get("n_tx", 0), n_users=case.get("n_users", 0), n_rx=case.get("n_rx", 0))
        for name, m in data.get("methods", {}).items():
            m = {k: v for k, v in m.items() if k != "summary"}
            rep.methods[name] = MethodResult(**m)
        return rep


# --------------------------------------------------------------------------
# reference and per-method pipelines
# --------------------------------------------------------------------------

def reference_wsr(ds):
    """R-WMMSE reference sum-rate per sample (NaN where the solve failed).

    Labeled datasets already hold the converged (U, W); the reference
    beamformers are rebuilt from them instead of re-solving.
    """
    norm = [normalize_sample(s) for s in ds.samples]
    if not norm:
        return np.zeros(0)
    if ds.labels is not None:
        return packed_wsr(Problem(norm), ds.labels)[0]
    results, _ = rwmmse_batch(norm, REFERENCE_OPTS)
    return np.array([np.nan if r is None else weighted_sum_rate(s, r[1]) for s, r in zip(norm, results)])


def _cmbnn_pipeline(params, s):
    x = codec.pack_gram(weighted_gram(s))
    out, _ = model.cmbnn_forward(params, x, np.asarray(s.d), mode="eval")
    u, w = codec.unpack_uw(out[0], s.d, s.n_rx)
    return reconstruct_v(s, u, w)


def _pipeline(method, params):
    if method == "rwmmse":
        return lambda s: rwmmse_solve(s, REFERENCE_OPTS)[1]
    if method == "zf":
        return zf_solve
    if method == "cmbnn":
        if params is None:
            raise ValueError("method 'cmbnn' needs model parameters")
        return lambda s: _cmbnn_pipeline(params, s)
    raise ValueError(f"unknown method {method!r}; choose from {METHODS}")


def bench_method(method, ds, params=None, reference=None, warmup=WARMUP):
    """Time and score one method on every sample of ``ds``.

    ``reference`` is the per-sample reference sum-rate; by default it comes
    from :func:`reference_wsr`, except for 'rwmmse', which is its own
    reference. Failed samples are logged, counted and left out of the
    ratio and timing lists.
    """
    run = _pipeline(method, params)
    norm = [normalize_sample(s) for s in ds.samples]
    res = MethodResult(method=method, n_samples=len(norm))
    for s in norm[:warmup]:
        try:
            run(s)
        except (np.linalg.LinAlgError, ValueError):
            pass
    if reference is None and method != "rwmmse":
        reference = reference_wsr(ds)
    for i, s in enumerate(norm):
        t0 = time.perf_counter()
        try:
            v = run(s)
        except (np.linalg.LinAlgError, ValueError) as exc:
            log.warning("%s failed on sample %d: %s", method, i, exc)
            res.failed += 1
            res.failed_ids.append(i)
            continue
        elapsed = time.perf_counter() - t0
        wsr = weighted_sum_rate(s, v)
        ref = wsr if reference is None else reference[i]
        if not np.isfinite(ref) or ref <= 1e-12:
            log.warning("sample %d has no usable reference", i)
            res.failed += 1
            res.failed_ids.append(i)
            continue
        res.times.append(elapsed)
        res.wsr_nats.append(float(wsr))
        res.ratios.append(float(wsr / ref))
    return res


def bench(ds, methods=METHODS, params=None, warmup=WARMUP):
    """Benchmark several methods against a shared R-WMMSE reference."""
    cfg = ds.config
    rep = EvalReport(n_tx=cfg.n_tx, n_users=cfg.n_users, n_rx=cfg.n_rx)
    reference = None
    if "rwmmse" in methods:
        r = bench_method("rwmmse", ds, warmup=warmup)
        rep.methods["rwmmse"] = r
        reference = np.full(len(ds), np.nan)
        ok = np.setdiff1d(np.arange(len(ds)), r.failed_ids)
        reference[ok] = r.wsr_nats
    elif any(m != "rwmmse" for m in methods):
        reference = reference_wsr(ds)
    for m in methods:
        if m != "rwmmse":
            rep.methods[m] = bench_method(m, ds, params, reference, warmup)
    return rep


# --------------------------------------------------------------------------
# export
# --------------------------------------------------------------------------

CSV_FIELDS = ("schema", "n_tx", "n_users", "n_rx", "method", "metric", "value")
_SEQUENCES = ("ratios", "times", "wsr_nats", "failed_ids")
_SCALARS = ("n_samples", "failed")


def _fmt(x):
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(int(x))


def report_to_csv(rep):
    """One row per (case, method, metric); sequences are space-separated."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for name, r in rep.methods.items():
        head = [rep.schema, rep.n_tx, rep.n_users, rep.n_rx, name]
        for key in _SCALARS:
            w.writerow(head + [key, str(getattr(r, key))])
        for key in _SEQUENCES:
            w.writerow(head + [key, " ".join(_fmt(x) for x in getattr(r, key))])
        for key, val in r.summary().items():
            if key not in _SCALARS:
                w.writerow(head + [key, _fmt(val)])
    return buf.getvalue()


def report_from_csv(text):
    rows = list(csv.DictReader(io.StringIO(text)))
    rep = EvalReport()
    for row in rows:
        if row["schema"] != SCHEMA:
            raise ValueError(f"unsupported report schema {row['schema']!r}")
        rep.n_tx, rep.n_users, rep.n_rx = int(row["n_tx"]), int(row["n_users"]), int(row["n_rx"])
        r = rep.methods.setdefault(row["method"], MethodResult(method=row["method"]))
        key, val = row["metric"], row["value"]
        if key in _SCALARS:
            setattr(r, key, int(val))
        elif key == "failed_ids":
            r.failed_ids = [int(x) for x in val.split()]
        elif key in _SEQUENCES:
            setattr(r, key, [float(x) for x in val.split()])
    return rep


def export_report(rep, path, fmt="json"):
    if fmt == "json":
        text = json.dumps(rep.to_dict(), indent=2)
    elif fmt == "csv":
        text = report_to_csv(rep)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)
    return path


def load_report(path):
    with open(path, encoding="utf-8") as f:
        text = f.read()
    if text.lstrip().startswith("{"):
        return EvalReport.from_dict(json.loads(text))
    return report_from_csv(text)
