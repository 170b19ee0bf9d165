"""Command-line entry point.

Exit codes: 0 success, 1 domain or assumption failure, 2 input error.
"""

from __future__ import annotations

import argparse
import json
import math
import re
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .backward_systems import DEFAULT_STEPS
from .config import ConfigParseError, ProblemConfig, load_config
from .errors import (
    AssumptionError,
    ConfigurationError,
    ConservationError,
    InfeasibleError,
    RateError,
    RegimeALMError,
    StructuralError,
)
from .market_model import check_mv_assumptions, min_sigma_eigenvalue, mv_to_lq, validate_lq_assumptions
from .montecarlo import SimConfig, perturbation_optimality_check, verify_frontier
from .mv_alm import auto_z_grid, solve_mv, write_frontier_csv

EXIT_OK, EXIT_DOMAIN, EXIT_INPUT = 0, 1, 2
_INPUT_ERRORS = (ConfigurationError, StructuralError, RateError, ConservationError)
_PLACEHOLDER = re.compile(r'"\\u0000f(\d+)"')


def dumps(obj) -> str:
    """JSON with every float written to 17 significant digits
    (non-finite values become null)."""
    floats: list[str] = []

    def conv(o):
        if isinstance(o, dict):
            return {k: conv(v) for k, v in o.items()}
        if isinstance(o, (list, tuple)):
            return [conv(v) for v in o]
        if isinstance(o, (bool, np.bool_)):
            return bool(o)
        if isinstance(o, (int, np.integer)):
            return int(o)
        if isinstance(o, (float, np.floating)):
            x = float(o)
            floats.append(format(x, ".17g") if math.isfinite(x) else "null")
            return f"\0f{len(floats) - 1}"
        return o

    text = json.dumps(conv(obj), indent=2)
    return _PLACEHOLDER.sub(lambda m: floats[int(m.group(1))], text) + "\n"


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {s!r}")


def _z_list(s: str) -> list[float]:
    try:
        return [float(v) for v in s.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad --z-grid: {exc}") from exc


def _u64(s: str) -> int:
    v = int(s, 0)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="regime-alm",
        description="Regime-switching mean-variance asset-liability management.",
    )
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, steps_help, steps_default):
        sp.add_argument("--config", required=True, help="problem document (JSON)")
        sp.add_argument("--out", default=".", help="output directory")
        sp.add_argument("--steps", type=int, default=steps_default, help=steps_help)

    v = sub.add_parser("validate", help="check the standing assumptions")
    common(v, "backward grid steps (unused)", DEFAULT_STEPS)

    f = sub.add_parser("frontier", help="efficient frontier -> frontier.csv, report.json")
    common(f, "backward RK4 steps", DEFAULT_STEPS)
    f.add_argument("--z-grid", type=_z_list, default=None, help="comma-separated targets")

    for name, hlp in (("simulate", "Monte Carlo check of the frontier"),
                      ("verify", "frontier check plus perturbation optimality check")):
        s = sub.add_parser(name, help=hlp + " -> verification.json")
        common(s, "Euler steps", 500)
        s.add_argument("--z", type=float, default=None, help="target (default: config z)")
        s.add_argument("--paths", type=int, default=200_000)
        s.add_argument("--seed", type=_u64, default=0)
        s.add_argument("--antithetic", type=_bool, default=False)
        s.add_argument("--grid-steps", type=int, default=DEFAULT_STEPS, help="backward RK4 steps")
        s.add_argument("--workers", type=int, default=1)
        if name == "verify":
            s.add_argument("--eps", type=float, default=0.1, help="perturbation size")
    return p


def _manifest(args, cfg: ProblemConfig, grid_steps: int, sim: SimConfig | None = None) -> dict:
    return {
        "configPath": str(args.config),
        "command": args.command,
        "outputDir": str(args.out),
        "gridSteps": grid_steps,
        "simConfig": None if sim is None else sim.to_dict(),
        "toolVersion": __version__,
        "configChecksum": cfg.checksum,
    }


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write(out: Path, name: str, doc: dict) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(dumps(doc), encoding="utf-8")
    return path


def cmd_validate(args, cfg: ProblemConfig) -> int:
    data = cfg.data
    lq = validate_lq_assumptions(mv_to_lq(data, 0.0))
    lam = min_sigma_eigenvalue(data)
    ok = lam >= data.delta - 1e-10
    report = {
        "manifest": _manifest(args, cfg, args.steps),
        "ellipticity": {"minEigSigmaSigmaT": lam, "delta": data.delta, "holds": ok},
        "lq": lq.to_dict(),
        "valid": bool(ok and not lq.fatal),
    }
    print(dumps(report), end="")
    if not ok:
        print(
            f"error: uniform ellipticity (sigma sigma' >= delta I) fails: "
            f"min eigenvalue {lam:.6g} < delta {data.delta:.6g}",
            file=sys.stderr,
        )
        return EXIT_DOMAIN
    if lq.fatal:
        print("error: neither the standard nor the singular LQ case holds", file=sys.stderr)
        return EXIT_DOMAIN
    return EXIT_OK


def cmd_frontier(args, cfg: ProblemConfig) -> int:
    sol = solve_mv(cfg.data, cfg.gen, args.steps)
    front = sol.frontier
    zs = auto_z_grid(front) if args.z_grid is None else args.z_grid
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "frontier.csv", "w", encoding="utf-8", newline="") as fh:
        write_frontier_csv(fh, front, zs)
    _write(out, "report.json", {
        "manifest": _manifest(args, cfg, args.steps),
        "feasibility": sol.feasibility.to_dict(),
        "frontier": front.to_dict(),
        "zGrid": [float(z) for z in zs],
        "generatedAt": _now(),
    })
    print(f"frontier: {len(zs)} points, lambdaStar={front.lambda_star:.10g}, "
          f"Var(z)={front.variance(front.z):.10g} -> {out}")
    return EXIT_OK


def _sim_commands(args, cfg: ProblemConfig) -> int:
    sim = SimConfig(args.paths, args.steps, args.seed, args.antithetic, workers=args.workers)
    sol = solve_mv(cfg.data, cfg.gen, args.grid_steps)
    z = cfg.data.z if args.z is None else args.z
    check = verify_frontier(cfg.data, cfg.gen, sol.frontier, sol, sim, z)
    doc = {"manifest": _manifest(args, cfg, args.grid_steps, sim), "frontierCheck": check}
    statuses = [check["status"]]
    if args.command == "verify":
        pert = perturbation_optimality_check(
            cfg.data, cfg.gen, sol, sol.frontier.lambda_star_at(z), sim, eps=args.eps, z=z
        )
        doc["perturbationCheck"] = pert
        statuses.append(pert["status"])
    if "fail" in statuses:
        status = "fail"
    elif "inconclusive" in statuses:
        status = "inconclusive"
    else:
        status = "pass"
    doc["status"] = status
    doc["generatedAt"] = _now()
    path = _write(Path(args.out), "verification.json", doc)
    print(f"{args.command}: {status} -> {path}")
    if status == "inconclusive":
        print("note: standard errors too large to conclude (too few paths)", file=sys.stderr)
    return EXIT_DOMAIN if status == "fail" else EXIT_OK


_COMMANDS = {
    "validate": cmd_validate,
    "frontier": cmd_frontier,
    "simulate": _sim_commands,
    "verify": _sim_commands,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    for flag in ("steps", "paths", "grid_steps", "workers"):
        if getattr(args, flag, 1) is not None and getattr(args, flag, 1) < 1:
            print(f"error: --{flag.replace('_', '-')} must be >= 1", file=sys.stderr)
            return EXIT_INPUT
    if getattr(args, "paths", 2) < 2:
        print("error: --paths must be >= 2", file=sys.stderr)
        return EXIT_INPUT
    try:
        cfg = load_config(args.config)
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ConfigParseError as exc:
        print(f"error: malformed config at line {exc.line}, column {exc.column}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except _INPUT_ERRORS as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_INPUT
    try:
        if args.command != "validate":
            check_mv_assumptions(cfg.data)
        return _COMMANDS[args.command](args, cfg)
    except AssumptionError as exc:
        print(f"error: {exc} (uniform ellipticity sigma sigma' >= delta I required)", file=sys.stderr)
        return EXIT_DOMAIN
    except InfeasibleError as exc:
        print(f"error: infeasible targets: {exc} (the feasibility metric "
              "E int |psi mu|^2 dt must be positive)", file=sys.stderr)
        return EXIT_DOMAIN
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except _INPUT_ERRORS as exc:
        print(f"error: invalid input: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except RegimeALMError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
