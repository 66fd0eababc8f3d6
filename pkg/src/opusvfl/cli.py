"""Command-line interface: run, sweep, attack, report.

`run` executes one configuration; `sweep` varies a single declared
parameter over a list of values (fixed-noise privacy ablations, token
budget grids, client-count scaling); `attack` trains matched opus/vanilla
pairs across poisoning budgets and optionally evaluates the inference
proxies; `report` renders a run log into a plain-text table.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import statistics
import sys
from pathlib import Path

from . import attacks
from .config import ConfigError, ExperimentConfig, parse_config
from .orchestrator import run_experiment
from .runlog import read_log

log = logging.getLogger(__name__)

SWEEPABLE_INTS = ("n_clients", "total_rounds", "warmup_rounds", "batch_size", "seed")
SWEEPABLE_FLOATS = (
    "epsilon_init", "token_budget", "sensitivity", "alpha", "beta",
    "equity_exponent", "epsilon_step", "client_lr", "server_lr",
)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="path to the experiment config file")
    parser.add_argument("--seed", type=int, default=None, help="override the master seed")
    parser.add_argument("--mode", choices=("opus", "vanilla"), default=None)
    parser.add_argument("--strict", action="store_true", help="fail on design-bound violations")
    parser.add_argument("--out", default=None, help="output directory (or env OPUSVFL_OUT)")


def _resolve_out(args, default_name: str) -> Path:
    base = args.out or os.environ.get("OPUSVFL_OUT") or "runs"
    return Path(base) / default_name


def _load_config(args) -> ExperimentConfig:
    config = parse_config(args.config, strict=args.strict)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    if args.mode is not None:
        config = dataclasses.replace(config, mode=args.mode)
    return config


def _cmd_run(args) -> int:
    config = _load_config(args)
    out = _resolve_out(args, f"run_seed{config.seed}_{config.mode}")
    summary = run_experiment(config, out_dir=out)
    print(f"status: {summary.status} after {summary.rounds_completed} rounds")
    print(f"final test accuracy:  {summary.final_test_accuracy:.4f}")
    print(f"final train accuracy: {summary.final_train_accuracy:.4f}")
    for cid, stats in summary.per_client.items():
        print(
            f"client {cid}: tokens {stats['total_tokens']:.2f}, "
            f"mean importance {stats['mean_importance']:.3f}, "
            f"final epsilon {stats['final_epsilon']:.3f}, "
            f"mean SNR {stats['mean_snr_db']:.2f} dB"
        )
    print(f"logs in {out}")
    return 0


def _sweep_config(config: ExperimentConfig, param: str, value: float) -> ExperimentConfig:
    if param == "epsilon_init":
        # fixed-noise ablations may probe outside the nominal bounds;
        # widen them so the privacy budget still validates
        return dataclasses.replace(
            config,
            epsilon_init=value,
            epsilon_lower=min(config.epsilon_lower, value),
            epsilon_upper=max(config.epsilon_upper, value),
        )
    if param in SWEEPABLE_INTS:
        return dataclasses.replace(config, **{param: int(value)})
    if param in SWEEPABLE_FLOATS:
        return dataclasses.replace(config, **{param: float(value)})
    raise ConfigError(f"parameter {param!r} is not sweepable")


def _cmd_sweep(args) -> int:
    config = _load_config(args)
    values = [float(v) for v in args.values.split(",") if v.strip()]
    out = _resolve_out(args, f"sweep_{args.param}")
    rows = []
    for value in values:
        run_config = _sweep_config(config, args.param, value)
        run_out = out / f"{args.param}={value:g}"
        summary = run_experiment(run_config, out_dir=run_out)
        rows.append(
            {
                "value": value,
                "final_test_accuracy": summary.final_test_accuracy,
                "final_train_accuracy": summary.final_train_accuracy,
                "dropout_count": len(summary.dropout_events),
                "status": summary.status,
                "rounds_completed": summary.rounds_completed,
            }
        )
    (out / "sweep.json").write_text(json.dumps(rows, indent=2) + "\n", encoding="utf-8")
    print(f"{args.param:>16} {'test acc':>9} {'train acc':>9} {'dropouts':>8}  status")
    for row in rows:
        print(
            f"{row['value']:>16g} {row['final_test_accuracy']:>9.4f} "
            f"{row['final_train_accuracy']:>9.4f} {row['dropout_count']:>8d}  {row['status']}"
        )
    print(f"sweep results in {out}")
    return 0


def _cmd_attack(args) -> int:
    config = _load_config(args)
    pds = [float(v) for v in args.pd.split(",") if v.strip()]
    seeds = [config.seed + i for i in range(args.seeds)]
    out = _resolve_out(args, "attack")
    results = []
    print(f"{'pd':>6} {'seed':>5} {'ASR opus':>9} {'ASR vanilla':>11} {'acc opus':>9} {'acc vanilla':>11}")
    for pd in pds:
        for seed in seeds:
            pair = attacks.run_backdoor_evaluation(config, pd, seed, out_dir=out)
            results.append({mode: dataclasses.asdict(report) for mode, report in pair.items()})
            print(
                f"{pd:>6g} {seed:>5d} {pair['opus'].attack_success_rate:>9.4f} "
                f"{pair['vanilla'].attack_success_rate:>11.4f} "
                f"{pair['opus'].clean_accuracy:>9.4f} {pair['vanilla'].clean_accuracy:>11.4f}"
            )
    if args.proxies:
        for seed in seeds:
            pair = attacks.run_inference_evaluation(config, seed, out_dir=out)
            results.append({mode: dataclasses.asdict(report) for mode, report in pair.items()})
            print(
                f"inference proxies seed {seed}: "
                f"label acc opus {pair['opus'].label_inference_accuracy:.4f} "
                f"vs vanilla {pair['vanilla'].label_inference_accuracy:.4f}; "
                f"feature MSE opus {pair['opus'].feature_inference_mse:.4f} "
                f"vs vanilla {pair['vanilla'].feature_inference_mse:.4f}"
            )
    out.mkdir(parents=True, exist_ok=True)
    (out / "attack_reports.json").write_text(json.dumps(results, indent=2) + "\n", encoding="utf-8")
    print(f"attack reports in {out}")
    return 0


def _cmd_report(args) -> int:
    rows = read_log(args.csv)
    if not rows:
        print("empty log")
        return 1
    server_rows = [r for r in rows if r["client_id"] == "-1"]
    client_rows = [r for r in rows if r["client_id"] != "-1"]
    last = server_rows[-1]
    print(f"rounds logged: {len(server_rows)}")
    print(f"final global loss: {float(last['loss_all']):.6g}")
    print(f"final test accuracy: {float(last['test_accuracy']):.4f}")
    if client_rows:
        ids = sorted({int(r["client_id"]) for r in client_rows})
        print(f"{'client':>7} {'mean I':>9} {'sum tokens':>11} {'final eps':>10} {'active':>7}")
        for cid in ids:
            mine = [r for r in client_rows if int(r["client_id"]) == cid]
            mean_importance = statistics.fmean(float(r["importance"]) for r in mine)
            total_tokens = sum(float(r["tokens"]) for r in mine)
            print(
                f"{cid:>7d} {mean_importance:>9.3f} {total_tokens:>11.2f} "
                f"{float(mine[-1]['epsilon']):>10.4f} {mine[-1]['active']:>7}"
            )
    return 0


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = argparse.ArgumentParser(prog="opusvfl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="execute one configuration")
    _add_common(run_p)
    run_p.set_defaults(func=_cmd_run)

    sweep_p = sub.add_parser("sweep", help="vary one parameter over a list of values")
    _add_common(sweep_p)
    sweep_p.add_argument("--param", required=True, help="config field to vary")
    sweep_p.add_argument("--values", required=True, help="comma-separated values")
    sweep_p.set_defaults(func=_cmd_sweep)

    attack_p = sub.add_parser("attack", help="matched opus/vanilla robustness evaluation")
    _add_common(attack_p)
    attack_p.add_argument("--pd", default="0.1,0.5", help="comma-separated poisoning budgets")
    attack_p.add_argument("--seeds", type=int, default=1, help="number of seeds per setting")
    attack_p.add_argument("--proxies", action="store_true", help="also run inference proxies")
    attack_p.set_defaults(func=_cmd_attack)

    report_p = sub.add_parser("report", help="summarize a run log")
    report_p.add_argument("--csv", required=True, help="path to a runlog.csv")
    report_p.set_defaults(func=_cmd_report)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
