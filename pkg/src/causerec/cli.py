"""Command-line front end.

Every config key is also a ``--flag`` (``lambda_dist`` -> ``--lambda-dist``);
flags override the config file. Exit codes: 0 ok, 2 config error, 3 data
error, 4 divergence.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import CauseError, ConfigError, DimensionError
from .experiment import (
    FIELDS,
    ExperimentConfig,
    evaluate_model,
    load_split,
    parse_config,
    parse_float_list,
    run_experiment,
    run_injection_sweep,
    run_sweep,
    summarize,
)
from .ingest import read_manifest, write_manifest
from .metrics import CSV_HEADER
from .persistence import load_model

log = logging.getLogger("causerec")


def _add_config_flags(parser: argparse.ArgumentParser, skip=()) -> None:
    parser.add_argument("--config", help="key=value config file")
    group = parser.add_argument_group("config keys (override the file)")
    for key, (_, default, help_text) in FIELDS.items():
        if key in skip:
            continue
        shown = default.value if hasattr(default, "value") else default
        group.add_argument("--" + key.replace("_", "-"), dest=f"cfg_{key}", metavar="V",
                           help=f"{help_text} [default: {shown}]")


def _config(args) -> ExperimentConfig:
    cfg = parse_config(args.config) if args.config else ExperimentConfig.defaults()
    flags = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return cfg.with_values(flags) if flags else cfg


def _print_rows(rows, header=CSV_HEADER, out=None):
    out = out or sys.stdout
    out.write(",".join(header) + "\n")
    for r in rows:
        out.write(r.csv_row() + "\n")


def cmd_skew(args) -> int:
    cfg = _config(args).replace(dataset=args.ratings)
    if cfg.data_format() == "manifest":
        raise ConfigError("skew reads a rating log; use --format csv or dat")
    split = load_split(cfg, cfg.seed)
    write_manifest(args.out, split)
    print(" ".join(f"{k}={v}" for k, v in split.sizes().items()))
    return 0


def cmd_synth(args) -> int:
    cfg = _config(args).replace(dataset="synthetic")
    split = load_split(cfg, cfg.seed)
    write_manifest(args.out, split)
    print(" ".join(f"{k}={v}" for k, v in split.sizes().items()))
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    result = run_experiment(cfg)
    _print_rows([result.report])
    if result.model_path is not None:
        log.info("model written to %s", result.model_path)
    return 0


def cmd_eval(args) -> int:
    model = load_model(args.model)
    split = read_manifest(args.manifest)
    if model.num_users < split.num_users or model.num_items < split.num_items:
        raise DimensionError("model is smaller than the manifest's id space")
    method = args.method or model.variant
    dataset = args.dataset or Path(args.manifest).stem
    report = evaluate_model(model, split.partition(args.partition), method, dataset, args.seed)
    _print_rows([report])
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    reports = run_sweep(cfg)
    print("method,n_seeds,mse_lift_mean,mse_lift_std,nll_mean,nll_std,auc_mean,auc_std")
    for row in summarize(reports):
        vals = [row[k] for k in ("mse_lift_mean", "mse_lift_std", "nll_mean", "nll_std", "auc_mean", "auc_std")]
        print(",".join([row["method"], str(row["n_seeds"])] + ["" if v is None else f"{v:.6f}" for v in vals]))
    log.info("per-seed rows appended to %s (std is the across-seed sample standard deviation)",
             Path(cfg.output_dir) / cfg.results)
    return 0


def cmd_inject_sweep(args) -> int:
    cfg = _config(args)
    try:
        fractions = parse_float_list(args.fractions)
    except ValueError as exc:
        raise ConfigError(f"--fractions: {exc}") from None
    out = args.out or Path(cfg.output_dir) / "injection.csv"
    rows = run_injection_sweep(cfg, fractions, out_path=out)
    for f, method, mean, std, n in rows:
        print(f"{f:g} {method} mse_lift {'' if mean is None else f'{mean:+.5f}'} "
              f"(sd {'' if std is None else f'{std:.5f}'}, {n} seeds)")
    log.info("plot data written to %s", out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="causerec", description="Causal embeddings for recommendation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("skew", help="binarize a rating log and write a skewed split manifest")
    s.add_argument("ratings")
    s.add_argument("--out", required=True, help="manifest path (a .meta sidecar is written next to it)")
    _add_config_flags(s, skip=("dataset",))
    s.set_defaults(func=cmd_skew)

    s = sub.add_parser("synth", help="simulate a synthetic split and write it as a manifest")
    s.add_argument("--out", required=True)
    _add_config_flags(s, skip=("dataset",))
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="run one experiment: split, train, evaluate, save")
    _add_config_flags(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a saved model on a manifest partition")
    s.add_argument("--model", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--partition", default="test", choices=("s_c", "s_t", "validation", "test"))
    s.add_argument("--method", help="name for the report row (default: model variant)")
    s.add_argument("--dataset")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="every method over every seed, with a mean/std summary")
    _add_config_flags(s)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("inject-sweep", help="MSE lift against the S_t injection fraction")
    s.add_argument("--fractions", required=True, help="strictly increasing, in [0, 0.5], e.g. 0.01,0.1,0.25")
    s.add_argument("--out", help="plot CSV (default: OUTPUT_DIR/injection.csv)")
    _add_config_flags(s)
    s.set_defaults(func=cmd_inject_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except CauseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
