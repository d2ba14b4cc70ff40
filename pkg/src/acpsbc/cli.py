"""Command-line front end: ``acpsbc run|sweep|compare|batch``.

Exit codes: 0 on success, 2 on a configuration error (the message names the
offending field), 3 when the solver aborts after repeated hard failures.
Plot generation never changes the exit status.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from . import plots, sim
from .config import METHODS, Scenario, load_scenario
from .dynamics import NoiseSpec
from .errors import ConfigurationError, SolverAbort

log = logging.getLogger("acpsbc")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ABORT = 3
SEED_ENV = "ACPSBC_SEED"
SWEEP_PARAMETERS = ("H", "gamma", "alpha")
U64_MAX = 2**64 - 1


def noise_variants() -> dict:
    """The three motion-noise settings used by ``compare``: unit Gaussian, uniform on [-1, 1], and their mixture."""
    g = NoiseSpec.gaussian(1.0)
    u = NoiseSpec.uniform(-1.0, 1.0)
    return {"gaussian": g, "uniform": u, "mixture": NoiseSpec.mixture([g, u])}


@dataclass
class RunConfig:
    scenario: str
    out: Path
    seed: Optional[int] = None
    method: Optional[str] = None
    plots: bool = True

    def load(self) -> Scenario:
        sc = load_scenario(self.scenario)
        changes = {}
        if self.seed is not None:
            changes["seed"] = self.seed
        if self.method is not None:
            changes["method"] = self.method
        return sc.with_(**changes).validate() if changes else sc


def _parse_seed(text, source: str) -> int:
    try:
        seed = int(text)
    except (TypeError, ValueError):
        raise ConfigurationError(f"expected an unsigned 64-bit integer, got {text!r}", field=source) from None
    if not 0 <= seed <= U64_MAX:
        raise ConfigurationError(f"expected an unsigned 64-bit integer, got {text!r}", field=source)
    return seed


def resolve_seed(flag: Optional[str], env=None) -> Optional[int]:
    """``--seed`` wins; otherwise the ``ACPSBC_SEED`` variable; otherwise the scenario's own seed."""
    if flag is not None:
        return _parse_seed(flag, "seed")
    env = os.environ if env is None else env
    raw = env.get(SEED_ENV)
    if raw not in (None, ""):
        return _parse_seed(raw, SEED_ENV)
    return None


def _try_plots(fn, *args) -> None:
    try:
        fn(*args)
    except Exception as exc:  # plots are best effort and must not change the exit status
        log.warning("plot generation failed: %s", exc)


def _emit(log_: sim.TrajectoryLog, sc: Scenario, out: Path, want_plots: bool) -> sim.Metrics:
    out.mkdir(parents=True, exist_ok=True)
    sim.write_log(log_, out)
    m = sim.metrics(log_)
    sim.write_metrics(m, out / "metrics.json")
    if want_plots:
        _try_plots(plots.write_run_plots, log_, out, sc.obstacles, sc.workspace)
    return m


def cmd_run(cfg: RunConfig) -> int:
    sc = cfg.load()
    m = _emit(sim.run(sc), sc, Path(cfg.out), cfg.plots)
    print(json.dumps(m.to_dict(), sort_keys=True))
    return EXIT_OK


def _parse_values(parameter: str, values: Sequence[str]) -> list:
    if not values:
        raise ConfigurationError("need at least one value", field="values")
    out = []
    for v in values:
        try:
            out.append(int(v) if parameter == "H" else float(v))
        except ValueError:
            raise ConfigurationError(f"cannot parse {v!r}", field="values") from None
    return out


def sweep_scenario(sc: Scenario, parameter: str, value) -> Scenario:
    if parameter == "H":
        return sc.with_(mpc=dataclasses.replace(sc.mpc, horizon=int(value))).validate()
    if parameter == "gamma":
        return sc.with_(gamma=float(value)).validate()
    if parameter == "alpha":
        return sc.with_(acp=dataclasses.replace(sc.acp, alpha=float(value))).validate()
    raise ConfigurationError(f"must be one of {SWEEP_PARAMETERS}", field="parameter")


SWEEP_COLUMNS = ("parameter", "value", "min_clearance", "coverage_lag1", "goal_step", "min_h", "collided")


def _min_clearance(m: sim.Metrics) -> float:
    return min(m.min_clearance_rr, m.min_clearance_ro)


def cmd_sweep(cfg: RunConfig, parameter: str, values: Sequence) -> int:
    if parameter not in SWEEP_PARAMETERS:
        raise ConfigurationError(f"must be one of {SWEEP_PARAMETERS}", field="parameter")
    values = _parse_values(parameter, [str(v) for v in values])
    base = cfg.load()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    logs, rows = [], []
    for v in values:
        sc = sweep_scenario(base, parameter, v)
        lg = sim.run(sc)
        m = _emit(lg, sc, out / f"{parameter}_{v}", False)
        logs.append(lg)
        rows.append({"parameter": parameter, "value": v, "min_clearance": repr(_min_clearance(m)),
                     "coverage_lag1": "" if "1" not in m.coverage else repr(m.coverage["1"]),
                     "goal_step": "" if m.goal_step is None else m.goal_step, "min_h": repr(m.min_h),
                     "collided": int(m.collided)})
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    if cfg.plots:
        _try_plots(lambda: (out / "sweep.svg").write_text(plots.sweep_svg(parameter, values, logs)))
    for r in rows:
        print(",".join(str(r[c]) for c in SWEEP_COLUMNS))
    return EXIT_OK


COMPARE_COLUMNS = ("method", "noise", "min_h", "collided")


def compare_rows(sc: Scenario, out: Optional[Path] = None, want_plots: bool = False) -> list:
    rows = []
    for method in METHODS:
        for name, spec in noise_variants().items():
            run_sc = sc.with_(method=method, noise=(spec,) * sc.n_robots).validate()
            lg = sim.run(run_sc)
            if out is not None:
                m = _emit(lg, run_sc, out / f"{method}_{name}", want_plots)
            else:
                m = sim.metrics(lg)
            rows.append({"method": method, "noise": name, "min_h": m.min_h, "collided": m.collided})
    return rows


def cmd_compare(cfg: RunConfig) -> int:
    sc = cfg.load()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = compare_rows(sc, out, cfg.plots)
    with open(out / "compare.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COMPARE_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({**r, "min_h": repr(r["min_h"]), "collided": int(r["collided"])})
    for r in rows:
        print(f"{r['method']:<13} {r['noise']:<9} min_h={r['min_h']:+.6f} collided={r['collided']}")
    return EXIT_OK


def aggregate(metrics: Sequence[sim.Metrics]) -> dict:
    """Worst case over seeds; independent of the order of ``metrics``."""
    steps = [m.goal_step for m in metrics]
    return {
        "n_seeds": len(metrics),
        "min_h": min(m.min_h for m in metrics),
        "collided": any(m.collided for m in metrics),
        "all_reached": all(s is not None for s in steps),
        "worst_goal_step": None if any(s is None for s in steps) else max(steps),
        "seeds": sorted(m.seed for m in metrics),
    }


def cmd_batch(cfg: RunConfig, n_seeds: int, workers: Optional[int] = None) -> int:
    if n_seeds < 1:
        raise ConfigurationError("must be >= 1", field="n_seeds")
    sc = cfg.load()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    results = sim.batch_run(sc, range(1, n_seeds + 1), workers)
    for m in results:
        d = out / f"seed_{m.seed}"
        d.mkdir(exist_ok=True)
        sim.write_metrics(m, d / "metrics.json")
    agg = aggregate(results)
    text = json.dumps(agg, indent=2, sort_keys=True, default=lambda x: None)
    (out / "aggregate.json").write_text(text + "\n")
    print(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", required=True, help="scenario JSON file or bundled scenario name")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", default=None, help=f"seed override (falls back to ${SEED_ENV})")
    common.add_argument("--method", choices=METHODS, default=None)
    common.add_argument("--plots", choices=("on", "off"), default="on")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="acpsbc", description="ACP-tightened barrier MPC simulator")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="simulate one scenario")
    sw = sub.add_parser("sweep", parents=[common], help="one run per parameter value")
    sw.add_argument("--parameter", required=True, choices=SWEEP_PARAMETERS)
    sw.add_argument("--values", required=True, help="comma-separated values, e.g. 2,5,8")
    sub.add_parser("compare", parents=[common], help="both methods under three noise distributions")
    ba = sub.add_parser("batch", parents=[common], help="independent runs over seeds 1..n")
    ba.add_argument("--n-seeds", type=int, required=True)
    ba.add_argument("--workers", type=int, default=None)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig(args.scenario, Path(args.out), resolve_seed(args.seed), args.method, args.plots == "on")
        if args.command == "run":
            return cmd_run(cfg)
        if args.command == "sweep":
            return cmd_sweep(cfg, args.parameter, [v for v in args.values.split(",") if v.strip()])
        if args.command == "compare":
            return cmd_compare(cfg)
        return cmd_batch(cfg, args.n_seeds, args.workers)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverAbort as exc:
        print(f"solver abort: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
