"""``romo`` command line: gen-data, train, optimize, run-bench.

Exit codes: 0 success, 1 validation or computation error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench
from . import config as config_mod
from .dataset import bin_select, load_csv, select_mediocre, split, write_csv
from .model import METHODS, TrainingError, load_checkpoint, parse_method, save_checkpoint, train
from .oracle import OracleError, OracleHandle, evaluate_batch, generate_hartmann_dataset
from .particle import AscentError, write_trajectory_csv

log = logging.getLogger("romo")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # bad usage is a validation error (exit 1); exit 2 is reserved for I/O
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# flag -> dotted config key, shared by the subcommands that accept them
OVERRIDE_FLAGS = {
    "epochs": "train.epochs",
    "batch_size": "train.batch_size",
    "lr": "train.net_lr",
    "tau": "train.tau",
    "dual_lr": "train.dual_lr",
    "patience": "train.patience",
    "hidden": "train.hidden",
    "k": "retrieval.k",
    "similarity": "retrieval.similarity",
    "sigma": "retrieval.sigma",
    "gamma": "aggregation.gamma",
    "ridge_lambda": "aggregation.lam",
    "protocol": "optimize.protocol",
    "eta": "optimize.eta",
    "max_steps": "optimize.max_steps",
    "converge_tol": "optimize.converge_tol",
    "T": "optimize.T",
    "Q": "optimize.Q",
    "n_total": "data.n_total",
    "trim": "data.trim",
}


def _add_config_args(p: argparse.ArgumentParser, groups: tuple[str, ...]) -> None:
    p.add_argument("--config", help="JSON config file (sections as in `romo show-config`)")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override any config key; repeatable")
    for flag, key in OVERRIDE_FLAGS.items():
        if key.split(".")[0] in groups:
            p.add_argument(f"--{flag.replace('_', '-')}", dest=f"ov_{flag}", metavar=key.split(".")[1].upper(), help=f"sets {key}: {config_mod.HELP[key]}")


def _resolve(args) -> dict:
    overrides = list(args.set)
    for flag, key in OVERRIDE_FLAGS.items():
        value = getattr(args, f"ov_{flag}", None)
        if value is not None:
            overrides.append(f"{key}={value}")
    return config_mod.resolve(args.config, overrides)


def _oracle(spec: str | None) -> OracleHandle | None:
    if not spec:
        return None
    if spec == "hartmann":
        return OracleHandle("hartmann3")
    return OracleHandle("external", spec)


# -- commands ------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    if args.task != "hartmann":
        raise ValueError(f"unknown task {args.task!r}; only 'hartmann' can be generated")
    ds = generate_hartmann_dataset(args.n_total, args.trim, args.seed)
    out = Path(args.out)
    with bench.partial_output(out) as tmp:
        write_csv(ds, tmp)
    print(f"N={len(ds)} d={ds.dim} y∈[{ds.y.min():.6g},{ds.y.max():.6g}] -> {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve(args)
    method = parse_method(args.method)
    ds = load_csv(args.data)
    k = int(cfg["retrieval"]["k"])
    sp = split(ds, tuple(cfg["data"]["fractions"]), seed=args.seed, k=k)
    tcfg = config_mod.train_config(cfg, args.seed)
    model, tlog = train(ds, sp, method, tcfg, k=k, sim=config_mod.similarity_kind(cfg), agg=config_mod.aggregation_kind(cfg))
    out = Path(args.out)
    with bench.partial_output(out) as tmp:
        save_checkpoint(model, tmp, tcfg)
    log_path = Path(args.log) if args.log else out.with_name(out.stem + ".log.csv")
    with bench.partial_output(log_path) as tmp:
        tlog.to_csv(tmp)
    last = tlog.rows[-1]
    print(
        f"{method}: {len(tlog.rows)} epochs, valid MSE {min(r['valid_mse'] for r in tlog.rows):.5f}, "
        f"L_c {last['l_c']:.4f}, lambda {model.lambda_dual:.4f} -> {out}"
    )
    return 0


def cmd_optimize(args) -> int:
    cfg = _resolve(args)
    if args.fix is not None:
        cfg["optimize"]["fix"] = args.fix
    ds = load_csv(args.data)
    model = load_checkpoint(args.model, ds)
    if args.init == "bins":
        idx = bin_select(ds, int(cfg["init"]["bin_dim"]), int(cfg["init"]["n_bins"]), int(cfg["init"]["per_bin"]))
    else:
        idx = select_mediocre(ds, bottom_k=min(int(cfg["init"]["bottom_k"]), len(ds)))
    X0 = ds.X[idx]
    cand, pred, state, _ = bench._optimize(model, X0, cfg["optimize"]["fix"], cfg, record=args.trajectory is not None)
    if cand.ndim == 3:
        n, q, d = cand.shape
        cand, pred, y0 = cand.reshape(n * q, d), pred.ravel(), np.repeat(ds.y[idx], q)
    else:
        y0 = ds.y[idx]
    oracle = _oracle(args.oracle)
    truth = evaluate_batch(oracle, cand) if oracle is not None else None
    bench.write_candidates_csv(args.out, cand, y0, pred, truth)
    if args.trajectory:
        with bench.partial_output(Path(args.trajectory)) as tmp:
            write_trajectory_csv(state, tmp, to_raw=model.normalizer.denormalize_x, h_to_raw=model.normalizer.denormalize_y)
    scores = truth if truth is not None else pred
    s = bench.percentile_summary(scores)
    kind = "truth" if truth is not None else "PREDICTED"
    print(f"{len(cand)} candidates from {len(idx)} particles; {kind} mean {s['mean']:.4f} max {s['p100']:.4f} -> {args.out}")
    return 0


def _parse_seeds(text: str) -> list[int]:
    """``"5"`` -> seeds 0..4; ``"0,3,7"`` -> exactly those."""
    text = text.strip()
    if "," in text:
        return [int(s) for s in text.split(",") if s.strip()]
    n = int(text)
    if n < 1:
        raise ValueError("--seeds must be a positive count or a comma-separated list")
    return list(range(n))


def cmd_run_bench(args) -> int:
    cfg = _resolve(args)
    b = cfg["bench"]
    if args.methods:
        b["methods"] = [parse_method(m) for m in args.methods.split(",") if m.strip()]
    if args.seeds:
        b["seeds"] = _parse_seeds(args.seeds)
    if args.task:
        b["task"] = args.task
    if args.data:
        b["data"] = args.data
    if args.oracle:
        b["oracle"] = args.oracle
    config_mod.validate(cfg)
    if b["task"] == "csv" and not b["oracle"]:
        print(bench.PREDICTED_BANNER)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reports = bench.run_bench(cfg, out)
    print(bench.markdown_tables(reports), end="")
    print(f"reports written to {out}")
    return 0


def cmd_show_config(args) -> int:
    cfg = _resolve(args)
    print(json.dumps(cfg, indent=2))
    return 0


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="romo", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate the synthetic Hartmann dataset")
    g.add_argument("--task", default="hartmann")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-total", type=int, default=config_mod.DEFAULTS["data"]["n_total"])
    g.add_argument("--trim", type=int, default=config_mod.DEFAULTS["data"]["trim"])
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one method on a dataset CSV")
    t.add_argument("--method", required=True, help=f"one of {', '.join(METHODS)}")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint JSON")
    t.add_argument("--log", help="per-epoch CSV (default: <out>.log.csv)")
    t.add_argument("--seed", type=int, default=0)
    _add_config_args(t, ("train", "retrieval", "aggregation", "data"))
    t.set_defaults(func=cmd_train)

    o = sub.add_parser("optimize", help="ascend mediocre designs against a checkpoint")
    o.add_argument("--model", required=True)
    o.add_argument("--data", required=True, help="the dataset the checkpoint was trained on")
    o.add_argument("--out", required=True, help="candidate CSV")
    o.add_argument("--fix", help="dimensions held constant, e.g. 2 or 2,5-8")
    o.add_argument("--init", choices=("bottom-k", "bins"), default="bottom-k")
    o.add_argument("--oracle", help="'hartmann' or a shell command scoring CSV designs on stdin")
    o.add_argument("--trajectory", help="optional trajectory CSV")
    _add_config_args(o, ("optimize",))
    o.set_defaults(func=cmd_optimize)

    r = sub.add_parser("run-bench", help="full reproduction: every method over several seeds")
    r.add_argument("--out", default="bench_out")
    r.add_argument("--methods", help="comma-separated subset of methods")
    r.add_argument("--seeds", help="count (seeds 0..n-1) or comma-separated list")
    r.add_argument("--task", choices=("hartmann", "csv"))
    r.add_argument("--data", help="dataset CSV for --task csv")
    r.add_argument("--oracle", help="external oracle command for --task csv")
    _add_config_args(r, ("train", "retrieval", "aggregation", "data", "optimize"))
    r.set_defaults(func=cmd_run_bench)

    s = sub.add_parser("show-config", help="print the resolved configuration")
    _add_config_args(s, tuple(config_mod.DEFAULTS))
    s.set_defaults(func=cmd_show_config)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.DEBUG if args.verbose > 1 else logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, TrainingError, AscentError, OracleError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("interrupted; unfinished outputs keep their .partial suffix", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
