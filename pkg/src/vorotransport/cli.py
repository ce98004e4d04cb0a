"""Command-line entry point.

Exit codes: 0 success, 1 certification failed, 2 invalid input,
3 non-convergence or unmet demand.
"""

from __future__ import annotations

import argparse
import sys
from itertools import combinations
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from . import io
from .diagram import TIE_TOL, assign, raster_labels, site_demands, site_positions, transport_cost
from .measure import EmptyMeasureError, InvalidDensityError
from .metrics import gamma_range, parse_metric, probe_admissibility
from .oracle import SLACK_TOL, certify
from .plotting import colorize, plot_partition, plot_phi_trace
from .solver import SolverConfig, d_bound, default_phi_tol, fit_weights, rebalance_ties

EXIT_OK = 0
EXIT_UNCERTIFIED = 1
EXIT_INPUT = 2
EXIT_UNSOLVED = 3

VERIFY_GAP = 1e-6
VERIFY_MASS = 1e-6


class UsageError(Exception):
    pass


def _problem_args(p: argparse.ArgumentParser, weights: bool = False) -> None:
    p.add_argument("--metric", default="euclidean",
                   help="euclidean | sqeuclidean | pnorm:<p> | concave-sqrt")
    p.add_argument("--sites", required=True, help="CSV with header x,y,demand")
    p.add_argument("--density", required=True, help="density raster or atom list")
    p.add_argument("--format", choices=io.FORMATS, default=None,
                   help="density format (default: from the file suffix)")
    p.add_argument("--normalize", action="store_true", help="scale measure and demands to total 1")
    p.add_argument("--cell-size", type=float, default=None, help="raster cell edge (default 1/max(rows, cols))")
    p.add_argument("--origin", type=float, nargs=2, default=(0.0, 0.0), metavar=("X", "Y"))
    p.add_argument("--tie-tol", type=float, default=TIE_TOL)
    p.add_argument("--out", default=".", help="output directory")
    if weights:
        p.add_argument("--weights", required=True, help="weights.json from solve")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vorotransport",
                                     description="Fit and certify weighted Voronoi transport partitions.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="fit weights so each region captures its demand")
    _problem_args(p)
    p.add_argument("--phi-tol", type=float, default=None)
    p.add_argument("--max-iters", type=int, default=None)
    p.add_argument("--seed", type=int, default=None, help="random start in [0, D]^n instead of zeros")
    p.add_argument("--trace", action="store_true", help="also write trace.json")
    p.add_argument("--no-figures", action="store_true", help="skip the PNG figures")

    p = sub.add_parser("assign", help="partition the atoms under given weights")
    _problem_args(p, weights=True)

    p = sub.add_parser("cost", help="transport cost of the partition under given weights")
    _problem_args(p, weights=True)

    p = sub.add_parser("verify", help="certify a partition against the exact transport LP")
    _problem_args(p, weights=True)
    p.add_argument("--slack-tol", type=float, default=SLACK_TOL)

    p = sub.add_parser("render", help="color raster of the weighted regions")
    _problem_args(p, weights=True)
    p.add_argument("--image", default=None, help="output PPM (default OUT/render.ppm)")

    p = sub.add_parser("probe", help="monotonicity and jump report for the region sweep of site pairs")
    _problem_args(p)
    p.add_argument("--steps", type=int, default=100)
    return parser


def _load(args):
    try:
        fam = parse_metric(args.metric)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.cell_size is not None and not args.cell_size > 0:
        raise UsageError("--cell-size must be positive")
    if args.tie_tol < 0:
        raise UsageError("--tie-tol must be nonnegative")
    try:
        m = io.load_measure(args.density, args.format, args.cell_size, tuple(args.origin), args.normalize)
        sites = io.read_sites_csv(args.sites, normalized=args.normalize, total_mass=m.total_mass)
    except (OSError, io.InputError, EmptyMeasureError, InvalidDensityError) as exc:
        raise UsageError(str(exc)) from None
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return fam, m, sites


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _weights(args, n):
    try:
        return io.read_weights(args.weights, n)
    except io.InputError as exc:
        raise UsageError(str(exc)) from None


def _floats(a) -> list[float]:
    return [float(x) for x in a]


def _write_labels(out: Path, sites, w, fam, m, tie_tol) -> None:
    labels, ties = raster_labels(sites, w, fam, m.grid, tie_tol)
    io.write_pgm(out / "labels.pgm", labels[::-1], max(len(sites) - 1, 1))
    rows, cols = np.nonzero(ties[::-1])
    io.write_json(out / "labels_ties.json", {
        "convention": "row 0 is the top image row",
        "tie_pixels": [[int(r), int(c)] for r, c in zip(rows, cols)],
    })


def cmd_solve(args) -> int:
    fam, m, sites = _load(args)
    if args.phi_tol is not None and not args.phi_tol > 0:
        raise UsageError("--phi-tol must be positive")
    if args.max_iters is not None and args.max_iters < 0:
        raise UsageError("--max-iters must be nonnegative")
    cfg = SolverConfig(phi_tol=args.phi_tol, max_outer_iters=args.max_iters, tie_tol=args.tie_tol)
    w0 = None
    if args.seed is not None and len(sites) > 1:
        w0 = np.random.default_rng(args.seed).uniform(0.0, d_bound(sites, fam, m), len(sites))
    res = fit_weights(sites, fam, m, cfg, w0=w0)
    out = _outdir(args)
    err = res.mass_error(sites)
    io.write_weights(out / "weights.json", res.weights)
    io.write_assignment_csv(out / "assignment.csv", res.assignment, m)
    report = {
        "metric": fam.name,
        "n_sites": len(sites),
        "n_atoms": len(m),
        "total_mass": m.total_mass,
        "phi_final": res.phi_final,
        "iters": res.outer_iters,
        "converged": res.converged,
        "exact": res.exact,
        "D_bound": res.D_bound,
        "weights": _floats(res.weights),
        "region_mass": _floats(res.assignment.region_mass),
        "demand": _floats(site_demands(sites)),
        "mass_error": _floats(err),
        "max_abs_mass_error": float(np.abs(err).max()),
    }
    io.write_json(out / "report.json", report)
    if args.trace:
        io.write_json(out / "trace.json", {
            "phi_trace": res.phi_trace,
            "deltas": _floats(res.deltas),
            "block_sizes": [int(b) for b in res.block_sizes],
        })
    if not args.no_figures:
        tol = args.phi_tol if args.phi_tol is not None else default_phi_tol(m.total_mass)
        plot_phi_trace(res.phi_trace, out / "phi_trace.png", phi_tol=tol)
        if m.grid is not None:
            labels, ties = raster_labels(sites, res.weights, fam, m.grid, args.tie_tol)
            g = m.grid
            extent = (g.origin[0], g.origin[0] + g.shape[1] * g.cell_size,
                      g.origin[1], g.origin[1] + g.shape[0] * g.cell_size)
            plot_partition(labels, ties, extent, sites, out / "partition.png")
    sys.stdout.write(io.dumps(report))
    return EXIT_OK if res.converged else EXIT_UNSOLVED


def cmd_assign(args) -> int:
    fam, m, sites = _load(args)
    w = _weights(args, len(sites))
    a = assign(sites, w, fam, m, args.tie_tol)
    out = _outdir(args)
    io.write_assignment_csv(out / "assignment.csv", a, m)
    if m.grid is not None:
        _write_labels(out, sites, w, fam, m, args.tie_tol)
    tie = a.tie_mask
    report = {
        "region_mass": _floats(a.region_mass),
        "demand": _floats(site_demands(sites)),
        "tie_atoms": int(tie.sum()),
        "tie_mass": float(m.masses[tie].sum()),
    }
    io.write_json(out / "assign.json", report)
    sys.stdout.write(io.dumps(report))
    return EXIT_OK


def cmd_cost(args) -> int:
    fam, m, sites = _load(args)
    w = _weights(args, len(sites))
    a = rebalance_ties(sites, w, fam, m, args.tie_tol)
    report = {
        "transport_cost": transport_cost(a, sites, fam, m),
        "region_mass": _floats(a.region_mass),
        "demand": _floats(site_demands(sites)),
    }
    io.write_json(_outdir(args) / "cost.json", report)
    sys.stdout.write(io.dumps(report))
    return EXIT_OK


def cmd_verify(args) -> int:
    fam, m, sites = _load(args)
    w = _weights(args, len(sites))
    a = rebalance_ties(sites, w, fam, m, args.tie_tol)
    err = a.region_mass - site_demands(sites)
    out = _outdir(args)
    report = {"mass_error": _floats(err), "max_abs_mass_error": float(np.abs(err).max())}
    if report["max_abs_mass_error"] > VERIFY_MASS * m.total_mass:
        report["status"] = "demand mismatch"
        io.write_json(out / "verify.json", report)
        sys.stdout.write(io.dumps(report))
        return EXIT_UNSOLVED
    result = SimpleNamespace(weights=w, assignment=a, converged=True)
    try:
        cert = certify(sites, fam, m, result, slack_tol=args.slack_tol, tie_tol=args.tie_tol)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    report.update(cert.to_dict())
    ok = cert.relative_gap <= VERIFY_GAP and cert.duals_match
    report["status"] = "certified" if ok else "not certified"
    io.write_json(out / "verify.json", report)
    sys.stdout.write(io.dumps(report))
    return EXIT_OK if ok else EXIT_UNCERTIFIED


def cmd_render(args) -> int:
    fam, m, sites = _load(args)
    if m.grid is None:
        raise UsageError("render needs a raster density (csv or pgm)")
    w = _weights(args, len(sites))
    labels, ties = raster_labels(sites, w, fam, m.grid, args.tie_tol)
    path = Path(args.image) if args.image else _outdir(args) / "render.ppm"
    path.parent.mkdir(parents=True, exist_ok=True)
    io.write_ppm(path, colorize(labels, ties))
    counts = np.bincount(labels[~ties], minlength=len(sites))
    report = {"image": str(path), "pixels": [int(c) for c in counts], "tie_pixels": int(ties.sum())}
    sys.stdout.write(io.dumps(report))
    return EXIT_OK


def cmd_probe(args) -> int:
    fam, m, sites = _load(args)
    if args.steps < 2:
        raise UsageError("--steps must be at least 2")
    pos = site_positions(sites)
    pairs = []
    for i, j in combinations(range(len(sites)), 2):
        rep = probe_admissibility(fam, pos[i], pos[j], m, args.steps)
        rng = gamma_range(fam, pos[i], pos[j], m)
        pairs.append({"p": i, "q": j, "m_pq": rng.lo, "M_pq": rng.hi,
                      "monotone": rep.monotone, "max_jump": rep.max_jump})
    report = {
        "metric": fam.name,
        "steps": args.steps,
        "monotone": all(p["monotone"] for p in pairs),
        "max_jump": max((p["max_jump"] for p in pairs), default=0.0),
        "pairs": pairs,
    }
    io.write_json(_outdir(args) / "probe.json", report)
    sys.stdout.write(io.dumps(report))
    return EXIT_OK


COMMANDS = {
    "solve": cmd_solve,
    "assign": cmd_assign,
    "cost": cmd_cost,
    "verify": cmd_verify,
    "render": cmd_render,
    "probe": cmd_probe,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        sys.stderr.write(f"vorotransport {args.command}: {exc}\n")
        return EXIT_INPUT


if __name__ == "__main__":
    raise SystemExit(main())
