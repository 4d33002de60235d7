"""Command-line entry point: ``bflab <subcommand> ...``."""
import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import evalcli, trainer
from .channel import ChannelConfig, generate_dataset, load_dataset, save_dataset
from .neuralnet import gradcheck, model
from .neuralnet.modelio import load_model, save_model
from .solvers import SolveOptions


def _gen_data(a):
    if a.case is not None:
        cfg = ChannelConfig.for_case(a.case, snr_db=a.snr_db, seed=a.seed)
    else:
        if None in (a.ntx, a.nusers):
            raise SystemExit("gen-data: give --case or both --ntx and --nusers")
        cfg = ChannelConfig(n_tx=a.ntx, n_users=a.nusers, n_rx=a.nrx, snr_db=a.snr_db, seed=a.seed)
    ds = generate_dataset(cfg, a.count)
    save_dataset(a.out, ds)
    print(f"wrote {len(ds)} samples ({cfg.n_tx}x{cfg.n_users}x{cfg.n_rx}) to {a.out}")


def _label(a):
    ds = load_dataset(a.data)
    out = trainer.generate_labels(ds, SolveOptions(max_iter=a.max_iter, tol=a.tol))
    save_dataset(a.out, out)
    print(f"labeled {len(out)} samples, dropped {out.meta['labels']['dropped']}; wrote {a.out}")


def _log_path(out, suffix):
    return str(Path(out).with_suffix(suffix))


def _train(a):
    ds = load_dataset(a.data)
    cfg = trainer.TrainConfig(batch_size=a.batch, supervised_epochs=a.epochs, lr=a.lr, seed=a.seed,
                              early_stop_patience=a.patience)
    params, rep = trainer.train_supervised(ds, cfg, checkpoint_dir=a.checkpoints,
                                           log_path=_log_path(a.out, ".train.json"))
    save_model(a.out, params, extra={"phase": "supervised", "best_epoch": rep.best_epoch})
    last = rep.val_ratio[rep.best_epoch - 1] if rep.best_epoch > 0 else float("nan")
    print(f"trained {rep.epochs_run} epochs (best {rep.best_epoch}, val ratio {last:.4f}); wrote {a.out}")


def _finetune(a):
    ds = load_dataset(a.data)
    params = load_model(a.model)
    cfg = trainer.TrainConfig(batch_size=a.batch, unsupervised_epochs=a.epochs, finetune_lr=a.lr, seed=a.seed)
    params, rep = trainer.finetune_unsupervised(params, ds, cfg, checkpoint_dir=a.checkpoints,
                                                log_path=_log_path(a.out, ".finetune.json"))
    save_model(a.out, params, extra={"phase": "unsupervised", "epochs": rep.epochs_run})
    print(f"val ratio {rep.ratio_before:.4f} -> {rep.ratio_after:.4f}; wrote {a.out}")


def _print_summary(rep):
    for name, r in rep.methods.items():
        s = r.summary()
        print(f"{rep.case} {name:7s} ratio {s['mean_ratio']:.4f} (median {s['median_ratio']:.4f}) "
              f"time {s['mean_time_s'] * 1e3:.3f} ms  wsr {s['mean_wsr_bits']:.3f} bit  failed {s['failed']}")


def _eval(a):
    ds = load_dataset(a.data)
    params = load_model(a.model) if a.model else None
    rep = evalcli.EvalReport(n_tx=ds.config.n_tx, n_users=ds.config.n_users, n_rx=ds.config.n_rx)
    rep.methods[a.method] = evalcli.bench_method(a.method, ds, params)
    evalcli.export_report(rep, a.report, a.format)
    _print_summary(rep)


def _bench(a):
    ds = load_dataset(a.data)
    methods = [m.strip() for m in a.methods.split(",") if m.strip()]
    params = load_model(a.model) if a.model else None
    rep = evalcli.bench(ds, methods, params)
    fmt = a.format or ("csv" if str(a.report).endswith(".csv") else "json")
    evalcli.export_report(rep, a.report, fmt)
    _print_summary(rep)


def _gradcheck(a):
    cfg = ChannelConfig.for_case(a.case, seed=a.seed)
    net = model.NetConfig(n_users=cfg.n_users, n_rx=cfg.n_rx)
    params = gradcheck.fresh_params(net, a.seed)
    if a.loss == "huber":
        ds = trainer.generate_labels(generate_dataset(cfg, 8), workers=1)
        samples, labels = ds.samples, ds.labels
        params.buffers["out_scale"] = trainer.label_scale(labels, np.stack([s.d for s in samples]))
        rep = gradcheck.grad_check(params, samples, "huber", labels, n_params=a.n_params, seed=a.seed)
    else:
        samples = generate_dataset(cfg, 32).samples
        rep = gradcheck.grad_check(params, samples, "unsup", n_params=a.n_params, seed=a.seed)
    print(json.dumps({"loss": rep.loss, "max_rel_error": rep.max_rel_error, "tolerance": rep.tolerance,
                      "n_checked": rep.n_checked, "worst": list(rep.worst),
                      "index_grads_zero": rep.index_grads_zero, "passed": rep.passed}))
    return 0 if rep.passed else 1


def build_parser():
    p = argparse.ArgumentParser(prog="bflab", description="Multi-user MIMO beamforming lab")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="sample channel instances")
    g.add_argument("--case", type=int, choices=(1, 2, 3))
    g.add_argument("--ntx", type=int)
    g.add_argument("--nusers", type=int)
    g.add_argument("--nrx", type=int, default=2)
    g.add_argument("--snr-db", type=float, default=20.0)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=_gen_data)

    g = sub.add_parser("label", help="attach R-WMMSE labels")
    g.add_argument("--data", required=True)
    g.add_argument("--tol", type=float, default=1e-6)
    g.add_argument("--max-iter", type=int, default=500)
    g.add_argument("--out", required=True)
    g.set_defaults(func=_label)

    g = sub.add_parser("train", help="supervised pre-training")
    g.add_argument("--data", required=True)
    g.add_argument("--epochs", type=int, default=50)
    g.add_argument("--batch", type=int, default=128)
    g.add_argument("--lr", type=float, default=1e-3)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--patience", type=int, default=5)
    g.add_argument("--checkpoints", help="directory for per-epoch checkpoints")
    g.add_argument("--out", required=True)
    g.set_defaults(func=_train)

    g = sub.add_parser("finetune", help="unsupervised refinement")
    g.add_argument("--data", required=True)
    g.add_argument("--model", required=True)
    g.add_argument("--epochs", type=int, default=1)
    g.add_argument("--batch", type=int, default=128)
    g.add_argument("--lr", type=float, default=1e-4)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--checkpoints")
    g.add_argument("--out", required=True)
    g.set_defaults(func=_finetune)

    g = sub.add_parser("eval", help="score one method")
    g.add_argument("--data", required=True)
    g.add_argument("--model")
    g.add_argument("--method", choices=evalcli.METHODS, default="cmbnn")
    g.add_argument("--report", required=True)
    g.add_argument("--format", choices=("json", "csv"), default="json")
    g.set_defaults(func=_eval)

    g = sub.add_parser("bench", help="time and score several methods")
    g.add_argument("--data", required=True)
    g.add_argument("--model")
    g.add_argument("--methods", default="cmbnn,zf,rwmmse")
    g.add_argument("--report", required=True)
    g.add_argument("--format", choices=("json", "csv"))
    g.set_defaults(func=_bench)

    g = sub.add_parser("gradcheck", help="finite-difference gradient check")
    g.add_argument("--case", type=int, choices=(1, 2, 3), default=1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--loss", choices=("huber", "unsup"), default="huber")
    g.add_argument("--n-params", type=int, default=50)
    g.set_defaults(func=_gradcheck)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "eval" and args.method == "cmbnn" and not args.model:
        raise SystemExit("eval --method cmbnn needs --model")
    return args.func(args) or 0


if __name__ == "__main__":
    sys.exit(main())
