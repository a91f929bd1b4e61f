"""Command-line experiment runner.

    stochmpc run --preset table1 --rollouts 10000 --seed 1 --out results/
    stochmpc run --config exp.json --controller indirect --prs one-sided
    stochmpc preset appendixB > exp.json

Exit codes: 0 success, 2 bad configuration, 3 infeasible at the first
step, 4 closed-loop invariant violated, 5 QP iteration cap reached.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, build_controller, initial_state, load_config, parse_config, preset
from .sim import MonteCarloStats, RngSpec, monte_carlo
from .smpc import ControllerVariant, InfeasibleStartError, InvariantViolation, SolverError

log = logging.getLogger("stochmpc")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_INVARIANT = 4
EXIT_SOLVER = 5

BASELINE = ControllerVariant.FIXED_GAIN
PER_STEP_HEADER = ["k", "p_hat", "p_stderr", "mean_cost", "mean_u", "mean_x", "mean_lambda"]
ROLLOUT_HEADER = ["rollout", "k", "x", "u", "lambda", "z0", "cost", "satisfied"]


def fmt(v) -> str:
    return f"{float(v):.9g}"


def _num(v):
    """JSON-safe float: NaN and inf become null."""
    if v is None:
        return None
    v = float(v)
    return v if np.isfinite(v) else None


def write_per_step(path: Path, st: MonteCarloStats) -> None:
    # vector states and inputs report their first component
    with path.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(PER_STEP_HEADER)
        for k in range(st.T):
            w.writerow([k, fmt(st.p_hat[k]), fmt(st.p_stderr[k]), fmt(st.mean_cost[k]), fmt(st.mean_u[k, 0]),
                        fmt(st.mean_x[k, 0]), fmt(st.mean_lambda[k])])


def write_rollouts(path: Path, st: MonteCarloStats) -> None:
    with path.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(ROLLOUT_HEADER)
        for i, rec in enumerate(st.records):
            for k in range(rec.T):
                w.writerow([i, k, fmt(rec.x[k, 0]), fmt(rec.u[k, 0]), fmt(rec.lam[k]), fmt(rec.z0[k, 0]),
                            fmt(rec.cost[k]), int(rec.satisfied[k])])


def _controller_row(variant: ControllerVariant, st: MonteCarloStats, bound: float) -> dict:
    lam_steps = st.mean_lambda[~np.isnan(st.mean_lambda)]
    return {
        "controller": variant.value,
        "avg_cost": _num(st.avg_cost),
        "avg_cost_stderr": _num(st.avg_cost_stderr),
        "cost_ratio": _num(st.cost_ratio),
        "avg_satisfaction": _num(st.avg_satisfaction),
        "min_satisfaction": _num(st.min_satisfaction),
        "trace_bound": _num(bound),
        "cost_to_trace_bound": _num(st.avg_cost / bound) if bound > 0 else None,
        "lambda_mean": _num(st.lambda_mean),
        "lambda_step_mean_min": _num(lam_steps.min()) if lam_steps.size else None,
        "lambda_step_mean_max": _num(lam_steps.max()) if lam_steps.size else None,
    }


def run_experiment(cfg: ExperimentConfig, out_dir: Path, threads: int = 1, save_rollouts: int = 0) -> dict:
    """Simulate every configured controller and write the result files; returns the summary."""
    sim = cfg.simulation
    x0 = initial_state(cfg)
    rng = RngSpec(sim.seed)
    variants = cfg.variants
    results: dict[ControllerVariant, MonteCarloStats] = {}
    bounds = {}
    for v in ([BASELINE] if BASELINE not in variants else []) + variants:
        ctl = build_controller(cfg, v)
        t0 = time.perf_counter()
        results[v] = monte_carlo(ctl, x0, sim.T, sim.rollouts, rng, threads=threads,
                                 keep=save_rollouts if v in variants else 0)
        bounds[v] = float(np.trace(ctl.term.Pf @ ctl.sys.sigma_w))
        log.info("%s: %d rollouts in %.1fs", v.value, sim.rollouts, time.perf_counter() - t0)

    base = results[BASELINE]
    for v in variants:
        results[v].cost_ratio = results[v].ratio_to(base)

    out_dir.mkdir(parents=True, exist_ok=True)
    summary = {
        "baseline": BASELINE.value,
        "rollouts": sim.rollouts,
        "T": sim.T,
        "seed": sim.seed,
        "prs": cfg.prs.model_dump(),
        "controllers": [_controller_row(v, results[v], bounds[v]) for v in variants],
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    for v in variants:
        sub = out_dir if len(variants) == 1 else out_dir / v.value
        sub.mkdir(parents=True, exist_ok=True)
        write_per_step(sub / "per_step.csv", results[v])
        if save_rollouts:
            write_rollouts(sub / "rollouts.csv", results[v])
    return summary


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stochmpc", description="Stochastic MPC closed-loop experiments")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a Monte Carlo experiment")
    src = r.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", type=Path, help="experiment JSON file")
    src.add_argument("--preset", choices=["table1", "appendixB"])
    r.add_argument("--controller", action="append", choices=[v.value for v in ControllerVariant],
                   help="controller variant; repeat to run several (default: from config)")
    r.add_argument("--prs", choices=["symmetric", "one-sided", "ellipsoidal"])
    r.add_argument("--rollouts", type=int)
    r.add_argument("--seed", type=int)
    r.add_argument("--threads", type=int, default=1, help="worker processes, 0 = one per CPU")
    r.add_argument("--out", type=Path, help="output directory (default: output.directory)")
    r.add_argument("--save-rollouts", type=int, default=0, metavar="R",
                   help="also write rollouts.csv with the first R rollouts")
    r.add_argument("-v", "--verbose", action="store_true")

    s = sub.add_parser("preset", help="print a preset configuration as JSON")
    s.add_argument("name", choices=["table1", "appendixB"])
    return p


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    data = json.loads(cfg.to_json())
    if args.controller:
        data["controller"]["variant"] = args.controller[0] if len(args.controller) == 1 else args.controller
    if args.prs:
        data["prs"]["shape"] = args.prs
    if args.rollouts is not None:
        data["simulation"]["rollouts"] = args.rollouts
    if args.seed is not None:
        data["simulation"]["seed"] = args.seed
    if args.out is not None:
        data["output"]["directory"] = str(args.out)
    return parse_config(data)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "preset":
        print(preset(args.name).to_json())
        return EXIT_OK

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config) if args.config else preset(args.preset)
        cfg = _apply_overrides(cfg, args)
        if args.threads < 0 or args.save_rollouts < 0:
            raise ConfigError("--threads and --save-rollouts must be non-negative")
        run_experiment(cfg, Path(cfg.output.directory), args.threads, args.save_rollouts)
    except InfeasibleStartError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
