"""``dm`` command line.

    dm gradcheck|stability|separation|fairness|train|eval|plotdata --config FILE [--out DIR] [--seed N]

Exit codes: 0 success, 1 check failure, 2 config/input error, 3 divergence.
Relative output directories are resolved under ``$DM_OUTPUT_ROOT`` when set.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import experiments as ex
from .config import KINDS, ConfigError, ExperimentConfig, load_config
from .trainer import TrainingDiverged

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3
OUTPUT_ROOT_ENV = "DM_OUTPUT_ROOT"

logger = logging.getLogger("scoredm")


def resolve_out(cli_out: str | None, cfg: ExperimentConfig) -> Path:
    out = Path(cli_out or cfg["experiment"]["out"])
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dm", description="Distribution matching with score-based priors.")
    p.add_argument("command", choices=KINDS)
    p.add_argument("--config", required=True, help="experiment config file (INI with typed literals)")
    p.add_argument("--out", help="output directory (default: [experiment] out)")
    p.add_argument("--seed", type=int, help="run a single seed instead of [experiment] seeds")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(command: str, cfg: ExperimentConfig, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    if command == "gradcheck":
        results = ex.run_gradcheck(cfg, out)
        failed = [r for r in results if not r.passed]
        for r in failed[:20]:
            print(f"FAIL {r.check}/{r.case} seed={r.seed} error={r.error:.3e} tol={r.tolerance:.1e}")
        print(f"gradcheck: {len(results) - len(failed)}/{len(results)} checks passed -> {out / 'gradcheck.csv'}")
        return EXIT_CHECK if failed else EXIT_OK
    if command == "stability":
        cells = ex.run_stability(cfg, out)
        for c in cells:
            flag = f" DIVERGED@{c.divergence_step}" if c.diverged else ""
            print(f"{c.mode:5s} sigma_min={c.sigma_min:<6g} seed={c.seed} max_nll={c.max_nll:.3f} "
                  f"final_nll={c.final_nll:.3f}{flag}")
        return EXIT_OK
    if command == "separation":
        rows = ex.run_separation(cfg, out)
        print(f"separation: {len(rows)} cells -> {out / 'separation.csv'}")
        return EXIT_OK
    if command == "fairness":
        res = ex.run_fairness(cfg, out)
        print(f"fairness: unfair dp_gap={res.mean_dp('unfair'):.3f}; spearman(beta, dp_gap)={res.spearman}")
        return EXIT_OK
    if command == "train":
        _, trace = ex.run_train(cfg, out)
        print(f"train: {len(trace)} steps -> {out / 'trace.csv'}, {out / 'checkpoint.txt'}")
        return EXIT_OK
    if command == "eval":
        metrics = ex.run_eval(cfg, out)
        print("eval: " + ", ".join(f"{k}={v:.4f}" for k, v in sorted(metrics.items())))
        return EXIT_OK
    path = ex.run_plotdata(cfg, out)
    print(f"plotdata -> {path}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if cfg.kind and cfg.kind != args.command:
            raise ConfigError(f"config is for {cfg.kind!r}, not {args.command!r}")
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be non-negative")
            cfg = cfg.with_overrides(experiment={"seeds": [args.seed]})
        out = resolve_out(args.out, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return run(args.command, cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ValueError, KeyError, OSError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
