"""Command line entry point: ``parahom <subcommand> [flags]``."""

import argparse
import json
import logging
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from .cell import dump_solution_csv, solve_correctors
from .effective import (
    build_flux_correctors,
    build_flux_mismatch,
    constraint_residual,
    effective_tensor,
    effective_tensor_field,
    flux_identity_residual,
)
from .errors import ConfigError, ParahomError
from .fields import MacroGrid, sample_cell
from .smoothing import verify_scaling
from .solvers import mms_orders
from .study import StudyConfig, run_study

log = logging.getLogger("parahom")


def preset_names():
    return sorted(p.name[:-5] for p in resources.files("parahom.presets").iterdir() if p.name.endswith(".toml"))


def load_config(ref):
    """A TOML path, or the name of a bundled preset (``default-1d``, ``separable-2d``)."""
    if ref is None:
        ref = "default-1d"
    path = Path(ref)
    if path.exists():
        return StudyConfig.from_toml(path)
    if ref in preset_names():
        with resources.as_file(resources.files("parahom.presets") / f"{ref}.toml") as p:
            return StudyConfig.from_toml(p)
    raise ConfigError(f"no config file or preset named {ref!r} (presets: {', '.join(preset_names())})")


def _point(cfg, args):
    x = np.asarray(args.x if args.x is not None else [0.5] * cfg.d, dtype=float)
    if x.shape != (cfg.d,):
        raise ConfigError(f"--x needs {cfg.d} coordinate(s)")
    return x, float(args.t)


def _emit(obj):
    print(json.dumps(obj, indent=2, sort_keys=True, default=lambda o: o.tolist() if hasattr(o, "tolist") else str(o)))


def cmd_cell(args):
    cfg = load_config(args.config)
    x, t = _point(cfg, args)
    cellA = sample_cell(cfg.spec, x, t, cfg.grid.ny, cfg.grid.ntau)
    sols = solve_correctors(cellA, dual=args.dual, res_tol=cfg.res_tol)
    out = {
        "x": x, "t": t, "ny": cfg.grid.ny, "ntau": cfg.grid.ntau, "dual": args.dual,
        "correctors": [{"j": s.j, "residual": s.residual, "mean": s.mean, "iterations": s.iterations} for s in sols],
    }
    if args.dump_fields:
        out_dir = Path(args.out or cfg.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for s in sols:
            name = out_dir / f"{'dual_' if args.dual else ''}chi_{s.j + 1}.csv"
            dump_solution_csv(s, name)
        out["dumped_to"] = str(out_dir)
    _emit(out)


def cmd_effective(args):
    cfg = load_config(args.config)
    g = cfg.grid
    nt = g.ahat_nt if cfg.spec.time_dependent else 1
    grid = MacroGrid(cfg.d, g.ahat_n, nt, cfg.T)
    field = effective_tensor_field(cfg.spec, grid, g.ny, g.ntau, jobs=args.jobs or cfg.jobs)
    out_dir = Path(args.out or cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{cfg.name}_ahat.csv"
    field.to_csv(path)
    _emit({"csv": str(path), "min_eig": field.min_eig, "certified": field.certify(cfg.spec.mu)})


def cmd_flux(args):
    cfg = load_config(args.config)
    x, t = _point(cfg, args)
    cellA = sample_cell(cfg.spec, x, t, cfg.grid.ny, cfg.grid.ntau)
    chi = [s.fn for s in solve_correctors(cellA, res_tol=cfg.res_tol)]
    B = build_flux_mismatch(cellA, chi)
    fc = build_flux_correctors(B)
    frak = fc.frak
    skew = float(np.abs(frak + np.swapaxes(frak, 0, 1)).max())
    _emit({
        "x": x, "t": t, "ahat": effective_tensor(cellA, chi),
        "mismatch_means": B.means(),
        "skew_symmetry": skew,
        "identity_residual": flux_identity_residual(fc, B),
        "constraint_residual": constraint_residual(fc),
        "potential_residual": fc.info["residual"],
    })


def cmd_smooth_check(args):
    eps = [0.2, 0.1, 0.05, 0.025]
    out = {
        "spike": verify_scaling("spike", eps, p=1, p1=np.inf),
        "smooth": verify_scaling("smooth", eps, p=2, p1=2),
        "gradient": verify_scaling("gradient", [0.1, 0.05, 0.025]),
    }
    _emit(out)


def cmd_study(args):
    cfg = load_config(args.config)
    out_dir = args.out or cfg.out_dir
    report = run_study(cfg, out_dir=out_dir, jobs=args.jobs, dump_fields=args.dump_fields)
    _emit({"csv": str(Path(out_dir) / f"{cfg.name}.csv"), "slopes": report.slopes})
    failed = [x for x in report.extras if x["status"] != "ok"]
    return 1 if failed else 0


def cmd_mms(args):
    d = 1 if args.config is None else load_config(args.config).d
    _emit(mms_orders(d=d))


COMMANDS = {
    "cell": (cmd_cell, "solve the cell problems at one macro point and report diagnostics"),
    "effective": (cmd_effective, "compute the effective tensor over a macro grid and export CSV"),
    "flux": (cmd_flux, "build the flux correctors at one macro point and print identity residuals"),
    "smooth-check": (cmd_smooth_check, "run the smoothing-operator scaling checks"),
    "study": (cmd_study, "run the full convergence study"),
    "mms": (cmd_mms, "manufactured-solution self-verification of the time steppers"),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="parahom", description="Periodic parabolic homogenization toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="TOML config path or preset name")
        p.add_argument("--out", default=None, help="output directory (default: the config's output.dir)")
        p.add_argument("--jobs", type=int, default=None, help="parallel workers")
        p.add_argument("--dump-fields", action="store_true", help="write grid fields as CSV")
        p.add_argument("--seed", type=int, default=None, help="seed for randomized checks")
        if name in ("cell", "flux"):
            p.add_argument("--x", type=float, nargs="+", help="macro point (default: centre)")
            p.add_argument("--t", type=float, default=0.0, help="macro time")
        if name == "cell":
            p.add_argument("--dual", action="store_true", help="solve the adjoint cell problems")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.seed is not None:
        np.random.seed(args.seed)
    try:
        return COMMANDS[args.command][0](args) or 0
    except ParahomError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
