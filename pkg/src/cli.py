"""Command-line front end.

    python main.py validate --config src/configs/three_regime.json
    python main.py solve    --config ... [--mode reduced|general] [--dt 0.002] [--out psi.csv]
    python main.py oracle   --config ... [--paths 100000] [--seed 7] [--threads 4]
    python main.py sweep    --config ... --axis v|T|theta [--out sweep.csv]
    python main.py residual --config ... [--out residual.csv]

Exit codes: 0 ok, 1 validation failure, 2 parse/config error, 3 sweep monotonicity violation,
4 solver failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Sequence

import numpy as np
import pandas as pd

from config import LOG_FORMAT, LOW_PRECISION_SE, ORACLE_Z_MAX, SOLVER_CROSS_CHECK_TOL, VERSION
from src.control.hamiltonian import Hamiltonian
from src.errors import ConfigError, ConvergenceError, MarketError, QuadratureError, RegimeError, SingularSystemError
from src.market.market import MarketSpec, validate
from src.oracle.mc_oracle import estimate_psi
from src.regimes.semi_markov import RegimeChain
from src.run_config import RunConfig, config_hash, load_config, sweep_markets
from src.solver.psi_grid import PsiGrid, optimal_wealth
from src.solver.volterra import optimal_control_curve, pde_residual, solve

log = logging.getLogger("riskswitch")

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_CONFIG = 2
EXIT_MONOTONICITY = 3
EXIT_SOLVER = 4

# axis -> +1 strictly increasing, -1 strictly decreasing
MONOTONE_DIRECTION = {"v": 1, "T": 1, "theta": -1}


def setup_logging(verbose: bool = False) -> None:
    root = logging.getLogger()
    if not root.handlers:
        logging.basicConfig(level=logging.INFO, format=LOG_FORMAT)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


def output_header(cfg: RunConfig) -> dict:
    return {"config_hash": config_hash(cfg), "seed": cfg.numerics.seed, "version": VERSION}


def write_table(frame: pd.DataFrame, path: str, header: dict) -> None:
    """CSV preceded by '# key=value' lines."""
    with open(path, "w", newline="") as fh:
        for k, v in header.items():
            fh.write(f"# {k}={v}\n")
        frame.to_csv(fh, index=False, float_format="%.17g")
    log.info("Wrote %d rows to %s", len(frame), path)


# ---------------------------------------------------------------------------
# Shared steps
# ---------------------------------------------------------------------------

def build(cfg: RunConfig, theta: float | None = None, horizon: float | None = None) -> tuple[MarketSpec, list[RegimeChain]]:
    return cfg.build_market(theta, horizon), cfg.build_chains()


def check_or_fail(spec: MarketSpec, chains: Sequence[RegimeChain]) -> bool:
    report = validate(spec, chains)
    if not report.passed:
        print(json.dumps({"passed": False, "failures": [c.__dict__ for c in report.failures]}, indent=2))
    return report.passed


def solve_grid(cfg: RunConfig, spec: MarketSpec, chains: Sequence[RegimeChain], mode: str,
               hamiltonian: Hamiltonian | None = None) -> PsiGrid:
    return solve(spec, chains, cfg.numerics.dt, mode, cfg.numerics.age_grid(mode), hamiltonian)


def psi_at(grid: PsiGrid, x: Sequence[int], y: Sequence[float]) -> float:
    """psi(0, x, y) from a grid of either mode, given full regime and age vectors."""
    if grid.mode == "reduced":
        driver = grid.meta.get("driver", 0)
        return grid.initial(x[driver], y[driver])
    return grid.initial(tuple(x), list(y))


def point_label(x: Sequence[int], y: Sequence[float]) -> str:
    return f"x={'-'.join(map(str, x))}|y={';'.join(f'{a:g}' for a in y)}"


def phi_value(grid: PsiGrid, cfg: RunConfig, v: float) -> float:
    if grid.mode == "reduced":
        driver = grid.meta.get("driver", 0)
        return optimal_wealth(grid, v, cfg.x0[driver], cfg.y0[driver])
    return optimal_wealth(grid, v, cfg.x0, list(cfg.y0))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_validate(cfg: RunConfig, args: argparse.Namespace) -> int:
    try:
        spec, chains = build(cfg)
    except (RegimeError, MarketError) as exc:
        print(json.dumps({"passed": False, "failures": [{"name": type(exc).__name__, "detail": str(exc)}]}, indent=2))
        return EXIT_VALIDATION
    report = validate(spec, chains)
    for line in report.lines():
        print(line)
    if not report.passed:
        print(json.dumps({"passed": False, "failures": [c.__dict__ for c in report.failures]}, indent=2))
        return EXIT_VALIDATION
    return EXIT_OK


def cmd_solve(cfg: RunConfig, args: argparse.Namespace) -> int:
    spec, chains = build(cfg)
    if not check_or_fail(spec, chains):
        return EXIT_VALIDATION
    ham = Hamiltonian(spec)
    grid = solve_grid(cfg, spec, chains, args.mode, ham)
    phi = phi_value(grid, cfg, cfg.numerics.v)
    header = {**output_header(cfg), "v": cfg.numerics.v, "phi": f"{phi:.17g}"}
    grid.to_csv(args.out or cfg.output.psi, header)
    if cfg.output.checkpoint:
        grid.write_binary(cfg.output.checkpoint)

    if args.mode == "general" and spec.single_driver and spec.n_components == 1:
        reduced = solve_grid(cfg, spec, chains, "reduced", ham)
        diff = float(np.max(np.abs(reduced.values[:, :, 0] - grid.values[:, :, 0])))
        level = logging.INFO if diff <= SOLVER_CROSS_CHECK_TOL else logging.WARNING
        log.log(level, "General vs reduced solver at age 0: max |diff| = %.3e", diff)

    print(f"phi(v={cfg.numerics.v:g}, x={cfg.x0}, y={cfg.y0}) = {phi:.10f}")
    times = np.linspace(0.0, spec.horizon, 5)
    for x in spec.regimes():
        print(f"regime {x}")
        print(optimal_control_curve(spec, times, x, ham).to_string(index=False))
    return EXIT_OK


def cmd_oracle(cfg: RunConfig, args: argparse.Namespace) -> int:
    spec, chains = build(cfg)
    if not check_or_fail(spec, chains):
        return EXIT_VALIDATION
    ham = Hamiltonian(spec)
    grid = solve_grid(cfg, spec, chains, args.mode, ham)
    rows, low = [], []
    for x, y in cfg.probes:
        est = estimate_psi(spec, chains, 0.0, x, y, cfg.numerics.n_paths, cfg.numerics.seed,
                           threads=args.threads, hamiltonian=ham)
        reference = psi_at(grid, x, y)
        label = point_label(x, y)
        rows.append({"point": label, "psi_solver": reference, "psi_mc": est.mean, "se": est.std_error,
                     "z": est.z_score(reference)})
        if est.low_precision:
            low.append(label)
    frame = pd.DataFrame(rows, columns=["point", "psi_solver", "psi_mc", "se", "z"])
    write_table(frame, args.out or cfg.output.oracle, output_header(cfg))
    print(frame.to_string(index=False))
    if low:
        print(f"low precision (SE > {LOW_PRECISION_SE:g}) at: {', '.join(low)}")
    worst = float(frame["z"].max()) if len(frame) else 0.0
    if worst > ORACLE_Z_MAX:
        log.error("Oracle disagreement: max |z| = %.2f > %.1f", worst, ORACLE_Z_MAX)
        return EXIT_VALIDATION
    return EXIT_OK


def check_monotone(axis: str, phi: Sequence[float]) -> list[int]:
    """Indices n where phi[n] -> phi[n + 1] breaks the expected strict trend."""
    steps = np.diff(np.asarray(phi, dtype=np.float64)) * MONOTONE_DIRECTION[axis]
    return [int(n) for n in np.flatnonzero(~(steps > 0))]


def sweep_values(cfg: RunConfig, axis: str, mode: str) -> pd.DataFrame:
    values = cfg.sweep.values(axis)
    if axis == "v":
        spec, chains = build(cfg)
        grid = solve_grid(cfg, spec, chains, mode)
        phi = [phi_value(grid, cfg, v) for v in values]
    else:
        chains = cfg.build_chains()
        phi = []
        for value, spec in zip(values, sweep_markets(cfg, axis, values)):
            grid = solve_grid(cfg, spec, chains, mode)
            phi.append(phi_value(grid, cfg, cfg.numerics.v))
            log.info("Sweep %s=%g: phi=%.10f", axis, value, phi[-1])
    return pd.DataFrame({"axis": axis, "value": values, "phi": phi}, columns=["axis", "value", "phi"])


def cmd_sweep(cfg: RunConfig, args: argparse.Namespace) -> int:
    spec, chains = build(cfg)
    if not check_or_fail(spec, chains):
        return EXIT_VALIDATION
    frame = sweep_values(cfg, args.axis, args.mode)
    write_table(frame, args.out or cfg.output.sweep, output_header(cfg))
    print(frame.to_string(index=False))
    broken = check_monotone(args.axis, frame["phi"])
    if broken:
        trend = "increasing" if MONOTONE_DIRECTION[args.axis] > 0 else "decreasing"
        pairs = [(frame["value"][n], frame["value"][n + 1]) for n in broken]
        log.error("phi is not strictly %s in %s between %s", trend, args.axis, pairs)
        return EXIT_MONOTONICITY
    return EXIT_OK


def cmd_residual(cfg: RunConfig, args: argparse.Namespace) -> int:
    spec, chains = build(cfg)
    if not check_or_fail(spec, chains):
        return EXIT_VALIDATION
    ham = Hamiltonian(spec)
    grid = solve_grid(cfg, spec, chains, args.mode, ham)
    eps = cfg.numerics.residual_eps
    times = cfg.numerics.residual_times or tuple(spec.horizon * np.array([0.25, 0.5, 0.75]))
    driver = grid.meta.get("driver", 0)
    rows = []
    for t in times:
        for x, y in cfg.probes:
            if grid.mode == "reduced":
                value = pde_residual(grid, spec, chains[driver], t, x[driver], y[driver], eps, ham)
            else:
                value = pde_residual(grid, spec, chains, t, x, y, eps, ham)
            rows.append({"t": t, "point": point_label(x, y), "residual": value})
    frame = pd.DataFrame(rows, columns=["t", "point", "residual"])
    write_table(frame, args.out or cfg.output.residual, {**output_header(cfg), "eps": eps, "dt": cfg.numerics.dt})
    print(frame.to_string(index=False))
    return EXIT_OK


COMMANDS = {
    "validate": cmd_validate,
    "solve": cmd_solve,
    "oracle": cmd_oracle,
    "sweep": cmd_sweep,
    "residual": cmd_residual,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="riskswitch",
        description="Risk-sensitive portfolio optimisation under age-dependent semi-Markov regimes.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=__doc__,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {VERSION}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="Run configuration (JSON).")
        p.add_argument("--out", default=None, help="Output CSV path; defaults to the config's output block.")
        p.add_argument("--mode", choices=("reduced", "general"), default="reduced", help="Solver scheme.")
        p.add_argument("--dt", type=float, default=None, help="Override numerics.dt.")
        p.add_argument("--seed", type=int, default=None, help="Override numerics.seed.")
        p.add_argument("--paths", type=int, default=None, help="Override numerics.n_paths.")
        p.add_argument("--threads", type=int, default=None, help="Worker threads; defaults to $RISKSWITCH_THREADS or 1.")
        p.add_argument("--verbose", "-v", action="store_true", help="Debug logging.")
        if name == "sweep":
            p.add_argument("--axis", choices=tuple(MONOTONE_DIRECTION), required=True, help="Swept parameter.")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)
    try:
        cfg = load_config(args.config).with_overrides(dt=args.dt, seed=args.seed, n_paths=args.paths)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except (RegimeError, MarketError) as exc:
        log.error("Invalid model: %s", exc)
        return EXIT_VALIDATION
    except (ConvergenceError, SingularSystemError, QuadratureError) as exc:
        log.error("Solver failure: %s", exc)
        if isinstance(exc, ConvergenceError) and exc.diagnostics:
            log.error("Diagnostics: %s", json.dumps(exc.diagnostics, default=str))
        return EXIT_SOLVER
    except ValueError as exc:
        log.error("Bad parameter: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
