"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure
(numerical divergence, unreadable or malformed files). Machine-readable
output is JSON or CSV; nothing here renders plots.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import io
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import baselines, clustering, data, trainer
from .errors import ConfigError, ProtosegError
from .trainer import TrainConfig

THREADS_ENV = "PROTOSEG_THREADS"
SCALE_COLUMNS = ["scheme", "C", "K", "D", "head_params", "accuracy", "seed"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _int_list(text: str) -> list[int]:
    try:
        out = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not out:
        raise argparse.ArgumentTypeError("empty list")
    return out


def _str_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _common(p: argparse.ArgumentParser, out_help: str) -> None:
    p.add_argument("--config", type=Path, help="flat 'key = value' config file")
    p.add_argument("--seed", type=int, help="override the run seed")
    p.add_argument("--out", type=Path, help=out_help)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="protoseg", description="Nonparametric prototype classifier toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic multi-modal dataset as CSV")
    _common(p, "dataset path (.csv or .csv.gz); required")
    p.add_argument("--classes", type=int)
    p.add_argument("--modes", type=int)
    p.add_argument("--samples", type=int, help="samples per class")
    p.add_argument("--input-dim", type=int)
    p.add_argument("--separation", type=float)
    p.add_argument("--noise", type=float)

    p = sub.add_parser("train", help="train a model and report validation metrics")
    _common(p, "metrics JSON path (default: stdout)")
    p.add_argument("--data", type=Path, help="dataset file; default generates synthetic data")
    p.add_argument("--iterations", type=int)
    p.add_argument("--checkpoint", type=Path, help="directory to write encoder and prototypes")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p, "report JSON path (default: stdout)")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path)
    p.add_argument("--split", choices=[data.TRAIN, data.VAL], default=data.VAL)

    p = sub.add_parser("bench-cluster", help="time the within-class Sinkhorn assignment")
    _common(p, "timing JSON path (default: stdout)")
    p.add_argument("--n", type=int, default=10000)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--iters", type=int, default=clustering.DEFAULT_ITERS)
    p.add_argument("--kappa", type=float, default=clustering.DEFAULT_KAPPA)
    p.add_argument("--reps", type=int, default=30)
    p.add_argument("--dump-assignments", type=Path, help="CSV of the last assignment matrix")

    p = sub.add_parser("scale-study", help="head parameter counts over a sweep of class counts")
    _common(p, "CSV path (default: stdout)")
    p.add_argument("--classes", type=_int_list, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--protos", type=_int_list, default=[10])
    p.add_argument("--scheme", choices=[baselines.PARAMETRIC, baselines.NONPARAMETRIC, "both"], default="both")
    p.add_argument("--train", action="store_true", help="also train on synthetic data per row")

    p = sub.add_parser("ablate", help="train one model per value of an ablation axis")
    _common(p, "CSV path (default: stdout)")
    p.add_argument("--axis", choices=trainer.AXES, required=True)
    p.add_argument("--values", type=_str_list, required=True)
    p.add_argument("--seeds", type=int, default=5, help="number of seeds starting at --seed")
    p.add_argument("--data", type=Path)

    p = sub.add_parser("export-embeddings", help="dump embeddings and prototype assignments as CSV")
    _common(p, "CSV path (default: stdout)")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path)
    p.add_argument("--split", choices=[data.TRAIN, data.VAL], default=data.VAL)
    return parser


def _config(args) -> TrainConfig:
    cfg = trainer.load_config(args.config) if args.config else TrainConfig()
    if getattr(args, "data", None):
        cfg = dataclasses.replace(cfg, data=str(args.data))
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "iterations", None) is not None:
        if args.iterations < 0:
            raise UsageError("--iterations must be >= 0")
        cfg = dataclasses.replace(cfg, sgd=dataclasses.replace(cfg.sgd, iterations=args.iterations))
    cfg.validate()
    return cfg


@contextlib.contextmanager
def _output(path: Path | None):
    if path is None:
        yield sys.stdout
        return
    buf = io.StringIO(newline="")
    yield buf
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            fh.write(buf.getvalue())
    except OSError as exc:
        raise RuntimeError(f"cannot write {path}: {exc.strerror or exc}") from None


def _dump_json(obj, path: Path | None) -> None:
    with _output(path) as fh:
        fh.write(json.dumps(obj, indent=1, sort_keys=True, allow_nan=False) + "\n")


def _write_csv(header, rows, path: Path | None) -> None:
    with _output(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def cmd_gen_data(args) -> None:
    if args.out is None:
        raise UsageError("gen-data requires --out")
    spec = _config(args).synthetic
    overrides = {"C": args.classes, "modes_per_class": args.modes, "samples_per_class": args.samples,
                 "D_in": args.input_dim, "mode_separation": args.separation, "noise_scale": args.noise,
                 "seed": args.seed}
    spec = dataclasses.replace(spec, **{k: v for k, v in overrides.items() if v is not None})
    ds = data.generate(spec)
    data.save(ds, args.out)
    print(f"wrote {len(ds.labels)} samples ({spec.C} classes, D_in={spec.D_in}) to {args.out}", file=sys.stderr)


def cmd_train(args) -> None:
    cfg = _config(args)
    _, report = trainer.train(cfg, checkpoint_dir=args.checkpoint)
    with _output(args.out) as fh:
        fh.write(trainer.metrics_json(cfg, report) + "\n")


def cmd_eval(args) -> None:
    cfg = _config(args)
    state = trainer.load_checkpoint(cfg, args.checkpoint)
    report = trainer.evaluate(state, trainer.resolve_dataset(cfg), args.split)
    out = report.to_dict()
    out["split"] = args.split
    out["head_params"] = report.head_params
    _dump_json(out, args.out)


def cmd_bench_cluster(args) -> None:
    if min(args.n, args.k, args.dim, args.iters) < 1 or args.reps < 30:
        raise UsageError("--n, --k, --dim, --iters must be positive and --reps >= 30")
    seed = 0 if args.seed is None else args.seed
    rng = np.random.default_rng(seed)
    P = rng.standard_normal((args.dim, args.k))
    P /= np.linalg.norm(P, axis=0)
    X = rng.standard_normal((args.dim, args.n))
    X /= np.linalg.norm(X, axis=0)
    clustering.sinkhorn_assign(P, X, args.kappa, args.iters)  # warm-up
    times = []
    for _ in range(args.reps):
        t0 = time.perf_counter()
        res = clustering.sinkhorn_assign(P, X, args.kappa, args.iters)
        times.append(time.perf_counter() - t0)
    if args.dump_assignments:
        clustering.write_assignment_csv(res.L, args.dump_assignments)
    ms = np.array(times) * 1e3
    _dump_json({"n": args.n, "k": args.k, "dim": args.dim, "iters": args.iters, "kappa": args.kappa,
                "reps": args.reps, "seed": seed,
                "median_ms": float(np.median(ms)), "p95_ms": float(np.percentile(ms, 95))}, args.out)


def cmd_scale_study(args) -> None:
    if min(args.classes) < 1 or args.dim < 1 or min(args.protos) < 1:
        raise UsageError("--classes, --dim and --protos must be positive")
    schemes = [baselines.PARAMETRIC, baselines.NONPARAMETRIC] if args.scheme == "both" else [args.scheme]
    base = _config(args) if args.train else None
    seed = 0 if args.seed is None else args.seed
    rows = []
    for scheme in schemes:
        for K in args.protos:
            for C in args.classes:
                n = baselines.param_count(scheme, C, K, args.dim).learnable_head_params
                acc = ""
                if args.train:
                    cfg = dataclasses.replace(
                        base, embed_dim=args.dim,
                        synthetic=dataclasses.replace(base.synthetic, C=C),
                        scheme=trainer.NONPARAMETRIC if scheme == baselines.NONPARAMETRIC
                        else trainer.PARAMETRIC_SOFTMAX,
                        head_protos=K, hyper=dataclasses.replace(base.hyper, K=K))
                    acc = format(trainer.train(cfg.with_seed(seed))[1].accuracy, ".17g")
                rows.append([scheme, C, K, args.dim, n, acc, seed])
    _write_csv(SCALE_COLUMNS, rows, args.out)


def cmd_ablate(args) -> None:
    cfg = _config(args)
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    start = cfg.sgd.seed
    values = args.values
    cast = {"K": int, "mu": float}.get(args.axis)
    if cast is not None:
        try:
            values = [cast(v) for v in values]
        except ValueError:
            raise UsageError(f"bad --values for axis {args.axis}: {','.join(values)}") from None
    rows = trainer.ablation_sweep(cfg, args.axis, values, seeds=range(start, start + args.seeds))
    cols = ["axis", "value", "seed", "accuracy", "miou", "head_params"]
    _write_csv(cols, [[r[c] if not isinstance(r[c], float) else format(r[c], ".17g") for c in cols]
                      for r in rows], args.out)


def cmd_export_embeddings(args) -> None:
    cfg = _config(args)
    state = trainer.load_checkpoint(cfg, args.checkpoint)
    X, y = trainer.resolve_dataset(cfg).subset(args.split)
    if y.size == 0:
        raise RuntimeError(f"split {args.split!r} is empty")
    e = state.embed(X)
    pred = trainer.predict(state, X)
    if state.bank is not None:
        hp = cfg.hyper
        k = clustering.cluster_batch_by_class(e, y, state.bank, hp.kappa, hp.sinkhorn_iters, hp.measure).k
        k = [int(v) for v in k]
    else:
        k = [""] * len(y)
    header = ["label", "pred", "proto"] + [f"e{j}" for j in range(e.shape[1])]
    rows = [[int(a), int(b), c] + [format(float(v), ".17g") for v in row]
            for a, b, c, row in zip(y, pred, k, e)]
    _write_csv(header, rows, args.out)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench-cluster": cmd_bench_cluster,
    "scale-study": cmd_scale_study,
    "ablate": cmd_ablate,
    "export-embeddings": cmd_export_embeddings,
}


def _thread_limit() -> int | None:
    raw = os.environ.get(THREADS_ENV, "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 0:
        raise UsageError(f"{THREADS_ENV} must be >= 0")
    return n or None


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        limit = _thread_limit()
        ctx = threadpool_limits(limits=limit) if limit else contextlib.nullcontext()
        with ctx:
            COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ProtosegError, RuntimeError, OSError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
