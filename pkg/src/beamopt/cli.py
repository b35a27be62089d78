"""Command-line entry point: ``beamopt {gen-data,train,eval,reproduce,bench}``.

Every command writes its artifact plus ``<artifact>.manifest.json`` recording
the command line, configuration, seed, versions, timestamps and the sha256
of every input and output file.  dBm/dB flags are converted to watts/linear
once, at parse time.

Exit codes: 0 success, 2 usage, 3 I/O or file format, 4 convergence,
5 infeasible targets.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import json
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, bnn, experiments
from .errors import ContractError, ConvergenceError, DomainError, FormatError, InfeasibleError
from .neural import TrainConfig
from .sysmodel import (
    DEFAULT_BANDWIDTH_HZ,
    SystemConfig,
    dataset_read,
    dataset_write,
    db_to_linear,
    dbm_to_watts,
    generate_channels,
    noise_power_watts,
)

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_CONVERGENCE, EXIT_INFEASIBLE = 0, 2, 3, 4, 5

EVAL_COLUMNS = ["method", "objective_name", "objective", "objective_all", "feasibility_pct",
                "time_per_sample_s", "count"]
BENCH_COLUMNS = ["method", "count", "mean_s", "median_s"]


class UsageError(Exception):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out, command, args, inputs, outputs, started, extra=None):
    """Write ``<out>.manifest.json`` next to the main artifact."""
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "config": {k: v for k, v in sorted(vars(args).items()) if k != "func"},
        "seed": getattr(args, "seed", None),
        "tool_version": __version__,
        "numpy_version": np.__version__,
        "started_utc": started,
        "finished_utc": _now(),
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": {str(p): sha256_file(p) for p in outputs},
    }
    if extra:
        manifest.update(extra)
    Path(str(out) + ".manifest.json").write_text(json.dumps(manifest, indent=2, default=str) + "\n")


def _now():
    # SOURCE_DATE_EPOCH pins the timestamps so reruns give byte-identical manifests
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = datetime.fromtimestamp(int(epoch), timezone.utc) if epoch else datetime.now(timezone.utc)
    return t.isoformat(timespec="seconds")


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _fmt(v):
    if isinstance(v, float):
        return repr(v) if np.isfinite(v) else "nan"
    return v


def _config_from_args(args) -> SystemConfig:
    kw = {}
    if args.sinr_target_db is not None:
        kw["sinr_targets"] = db_to_linear(args.sinr_target_db)
    if args.pathloss == "on":
        noise = noise_power_watts(args.bandwidth)
        p_max = dbm_to_watts(args.p_max_dbm)
    else:
        # unit-variance channels: powers are stated relative to the noise
        noise = 1.0
        p_max = db_to_linear(args.p_max_dbm if args.snr_db is None else args.snr_db)
    return SystemConfig(args.n, args.k, noise_power=noise, p_max=p_max, bandwidth_hz=args.bandwidth, **kw)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args):
    if args.problem in ("p1", "p3") and args.sinr_target_db is not None:
        raise UsageError("--sinr-target-db only applies to --problem p2")
    if args.snr_db is not None and args.pathloss == "on":
        raise UsageError("--snr-db only applies with --pathloss off")
    started = _now()
    cfg = _config_from_args(args)
    samples = generate_channels(cfg, args.count, args.seed, with_pathloss=args.pathloss == "on")
    rep = bnn.MAKE_TARGETS[args.problem](samples, cfg, with_pathloss=args.pathloss == "on")
    dataset_write(args.out, rep.dataset)
    print(f"wrote {len(rep.dataset)} samples to {args.out} (dropped {rep.dropped})")
    write_manifest(args.out, "gen-data", args, [], [args.out], started,
                   {"system_config": cfg.to_dict(), "dropped": rep.dropped, "kept": len(rep.dataset)})


def cmd_train(args):
    started = _now()
    ds = dataset_read(args.data)
    problem = args.problem or ds.problem
    if ds.problem != problem:
        raise UsageError(f"{args.data} holds {ds.problem} targets, not {problem}")
    if args.stage == "hybrid" and problem != "p3":
        raise UsageError("--stage hybrid is only valid for p3 data")
    cfg = TrainConfig(batch_size=args.batch, epochs=args.epochs, seed=args.seed, lr=args.lr)
    rows = []

    def log(epoch, a, b):
        rows.append((len(rows) + 1, float(a), float(b)))

    if args.stage == "hybrid":
        stage2 = bnn.Stage2Config(epochs=args.stage2_epochs, lr=args.stage2_lr, batch_size=args.batch,
                                  seed=args.seed)
        _, model = bnn.train_p3_hybrid(ds, cfg, stage2, log=log)
    else:
        model = bnn.train_model(problem, ds, cfg, log=log)
    bnn.save_model(args.out, model)
    hist = Path(str(args.out) + ".loss.csv") if args.history is None else Path(args.history)
    # stage-2 rows log the negative sum rate and the validation rate
    write_csv(hist, ["epoch", "train_loss", "val_loss"], rows)
    print(f"wrote model to {args.out}, history to {hist}")
    write_manifest(args.out, "train", args, [args.data], [args.out, hist], started,
                   {"stage": model.stage, "target_scale": model.target_scale})


def _eval_rows(report):
    return [(r.method, report.objective_name, r.objective, r.objective_all, r.feasibility,
             r.time_per_sample, r.count) for r in report.rows]


def cmd_eval(args):
    started = _now()
    ds = dataset_read(args.data)
    models = {}
    inputs = [args.data]
    if args.model:
        models["bnn"] = bnn.load_model(args.model)
        inputs.append(args.model)
    if args.model_supervised:
        models["bnn_supervised"] = bnn.load_model(args.model_supervised)
        inputs.append(args.model_supervised)
    methods = args.methods.split(",") if args.methods else list(bnn.METHODS[ds.problem])
    if ds.problem == "p3":
        methods = ["wmmse" if m == "optimal" else m for m in methods]
    methods = [m for m in methods if not m.startswith("bnn") or m in models or args.methods]
    for m in methods:
        if m not in bnn.METHODS[ds.problem]:
            raise UsageError(f"method {m!r} is not available for {ds.problem}; "
                             f"choose from {','.join(bnn.METHODS[ds.problem])}")
        if m.startswith("bnn") and m not in models:
            raise UsageError(f"method {m!r} needs --model" + ("-supervised" if m != "bnn" else ""))
    report = bnn.evaluate(models, methods, ds, args.eps_preset, timing=not args.no_timing,
                          timing_count=args.timing_count, seed=args.seed)
    write_csv(args.out, EVAL_COLUMNS, _eval_rows(report))
    print(f"wrote {len(report.rows)} rows to {args.out}")
    write_manifest(args.out, "eval", args, inputs, [args.out], started)


def cmd_reproduce(args):
    if args.figure not in experiments.FIGURES:
        raise UsageError(f"unknown figure {args.figure!r}; valid ids: {', '.join(experiments.FIGURES)}")
    started = _now()
    scale = experiments.Scale(train_count=args.train_count, test_count=args.test_count, epochs=args.epochs,
                              stage2_epochs=args.stage2_epochs, timing=not args.no_timing,
                              timing_count=args.timing_count)
    header, rows = experiments.run_figure(args.figure, scale, args.seed,
                                          log=None if args.quiet else lambda s: print(s, flush=True))
    write_csv(args.out, header, rows)
    print(f"wrote {len(rows)} points to {args.out}")
    write_manifest(args.out, "reproduce", args, [], [args.out], started, {"figure": args.figure})


def cmd_bench(args):
    started = _now()
    with threadpool_limits(limits=1):
        rows = experiments.bench(args.problem, args.n, args.k, args.count, args.seed,
                                 args.methods.split(",") if args.methods else None,
                                 train_count=args.train_count, epochs=args.epochs,
                                 sinr_db=args.sinr_target_db, p_max_dbm=args.p_max_dbm,
                                 model=bnn.load_model(args.model) if args.model else None)
    write_csv(args.out, BENCH_COLUMNS, rows)
    print(f"wrote {len(rows)} rows to {args.out}")
    write_manifest(args.out, "bench", args, [args.model] if args.model else [], [args.out], started)


# ---------------------------------------------------------------------------
# parser


def _system_flags(p, problem=True):
    if problem:
        p.add_argument("--problem", choices=["p1", "p2", "p3"], default="p1")
    p.add_argument("--n", type=int, default=6, help="transmit antennas")
    p.add_argument("--k", type=int, default=4, help="users")
    p.add_argument("--p-max-dbm", type=float, default=20.0)
    p.add_argument("--sinr-target-db", type=float, default=None, help="P2 SINR floor for every user")
    p.add_argument("--pathloss", choices=["on", "off"], default="on")
    p.add_argument("--snr-db", type=float, default=None,
                   help="with --pathloss off: power budget relative to a unit noise power")
    p.add_argument("--bandwidth", type=float, default=DEFAULT_BANDWIDTH_HZ)


def build_parser():
    ap = argparse.ArgumentParser(prog="beamopt", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate channels and solver targets")
    _system_flags(p)
    p.add_argument("--count", type=int, default=20000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a BNN on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--problem", choices=["p1", "p2", "p3"], default=None)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stage", choices=["supervised", "hybrid"], default="supervised")
    p.add_argument("--stage2-epochs", type=int, default=bnn.STAGE2_EPOCHS)
    p.add_argument("--stage2-lr", type=float, default=bnn.STAGE2_LR)
    p.add_argument("--history", default=None, help="loss CSV path (default <out>.loss.csv)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="compare methods on a test dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--model", default=None)
    p.add_argument("--model-supervised", default=None, help="P3 stage-1 model for bnn_supervised")
    p.add_argument("--methods", default=None, help="comma list, e.g. optimal,zf,rzf,bnn")
    p.add_argument("--eps-preset", choices=sorted(bnn.EPS_PRESETS), default="1e-4")
    p.add_argument("--no-timing", action="store_true", help="skip timing (time column becomes nan)")
    p.add_argument("--timing-count", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("reproduce", help="regenerate the curve points of a figure as CSV")
    p.add_argument("figure", help="figure id: " + ", ".join(experiments.FIGURES))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-count", type=int, default=20000)
    p.add_argument("--test-count", type=int, default=5000)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--stage2-epochs", type=int, default=bnn.STAGE2_EPOCHS)
    p.add_argument("--no-timing", action="store_true")
    p.add_argument("--timing-count", type=int, default=None)
    p.add_argument("--quiet", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reproduce)

    p = sub.add_parser("bench", help="single-threaded per-sample timing")
    p.add_argument("--problem", choices=["p1", "p2", "p3"], default="p2")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--k", type=int, default=6)
    p.add_argument("--p-max-dbm", type=float, default=20.0)
    p.add_argument("--sinr-target-db", type=float, default=5.0)
    p.add_argument("--count", type=int, default=500)
    p.add_argument("--methods", default=None)
    p.add_argument("--model", default=None, help="trained model; otherwise one is trained on the fly")
    p.add_argument("--train-count", type=int, default=2000)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)
    return ap


def _thread_cap():
    n = os.environ.get("BEAMOPT_THREADS")
    if not n:
        return contextlib.nullcontext()
    return threadpool_limits(limits=max(1, int(n)))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        with _thread_cap():
            args.func(args)
    except (UsageError, DomainError, ContractError) as exc:
        print(f"beamopt {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FormatError) as exc:
        print(f"beamopt {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ConvergenceError as exc:
        print(f"beamopt {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except InfeasibleError as exc:
        print(f"beamopt {args.command}: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
