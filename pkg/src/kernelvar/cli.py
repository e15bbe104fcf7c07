"""Command-line entry point: ``kernelvar <subcommand> [options]``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from ._io import atomic_write
from .crossval import CvGrid, DEFAULT_GAMMA_MULT, DEFAULT_MU, grid_search, scaled_kernels
from .feeder import (
    ConditioningError,
    FeederValidationError,
    TopologyError,
    build_cost_transform,
    build_sensitivities,
    compute_y,
    cost_batch,
    ieee13_feeder,
    read_feeder,
)
from .kernels import KernelSpec
from .policy import DispatchError, PolicyFileError, TrainingError, optimal_dispatch, save_policies, train_policies
from .scenario import (
    FeatureSelector,
    ScenarioWindow,
    SynthesisOptions,
    TimeseriesError,
    load_timeseries,
    reference_day,
    select_features,
    write_timeseries,
)
from .simulator import METHODS, SimulationConfig, cost_gap_report, run_simulation, write_manifest

logger = logging.getLogger("kernelvar")

EXIT_OK, EXIT_ERROR, EXIT_USAGE = 0, 1, 2
RUN_ERRORS = (
    ConditioningError,
    DispatchError,
    FeederValidationError,
    OSError,
    PolicyFileError,
    RuntimeError,
    TimeseriesError,
    TopologyError,
    TrainingError,
    ValueError,
)


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# argument helpers


def _float_list(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _hours(text: str) -> tuple[float, float]:
    try:
        a, b = (float(v) for v in text.split("-"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected START-END hours, got {text!r}") from None
    return a, b


def _selector(text: str) -> FeatureSelector:
    try:
        return FeatureSelector.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _kernel_arg(text: str):
    """Full kernel spec, or a bare family name whose width comes from the median heuristic."""
    name = text.strip().lower()
    if name in ("gaussian", "rbf"):
        return "gaussian"
    if name in ("poly", "polynomial"):
        return "polynomial"
    try:
        return KernelSpec.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _load_feeder(args):
    if (args.lines is None) != (args.buses is None):
        raise UsageError("--lines and --buses must be given together")
    if args.lines is None:
        topo, peaks = ieee13_feeder()
        source = "ieee13 (bundled)"
    else:
        topo, peaks = read_feeder(args.lines, args.buses, v0=args.v0)
        source = f"{args.lines}, {args.buses}"
    return topo, peaks, source


def _load_series(args, topo):
    return load_timeseries(args.timeseries, n_buses=topo.n_buses)


def _window(records, topo, end_minute, T):
    by_t = {r.t_min: r for r in records}
    if end_minute is None:
        end_minute = max(by_t) + 1
    wanted = range(end_minute - T, end_minute)
    missing = [t for t in wanted if t not in by_t]
    if missing:
        raise TimeseriesError(f"training window needs minutes {wanted.start}..{wanted.stop - 1}; missing {missing[0]}")
    return ScenarioWindow.from_records([by_t[t] for t in wanted], topo)


def _manifest_path(out: Path) -> Path:
    return out.with_name(out.name + ".manifest.json")


def _write_manifest(path: Path, args, extra: dict) -> None:
    cfg = {k: (str(v) if isinstance(v, (Path, FeatureSelector, KernelSpec)) else v) for k, v in vars(args).items()
           if k != "func"}
    doc = {"tool": "kernelvar", "version": __version__, "command": args.command, "args": cfg, **extra}
    with atomic_write(path) as fh:
        json.dump(doc, fh, indent=1, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return str(obj)


def _grid(args) -> CvGrid:
    return CvGrid(args.mu_grid, args.gamma_grid, args.folds, shuffle=not args.blocked)


# ---------------------------------------------------------------------------
# subcommands


def cmd_sensitivities(args) -> int:
    topo, _, source = _load_feeder(args)
    sens = build_sensitivities(topo)
    eig = {name: float(np.linalg.eigvalsh(M)[0]) for name, M in (("R", sens.R), ("X", sens.X))}
    for name, lo in eig.items():
        if lo <= 0:
            raise ConditioningError(f"{name} is not positive definite (min eigenvalue {lo:.3e})")
    out = Path(args.out)
    header = [""] + [str(b) for b in range(1, topo.n_buses + 1)]
    for name, M in (("R", sens.R), ("X", sens.X)):
        with atomic_write(out / f"{name}.csv", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for b, row in enumerate(M, start=1):
                w.writerow([b] + [repr(float(v)) for v in row])
    _write_manifest(out / "manifest.json", args, {"feeder": source, "min_eigenvalue": eig})
    print(f"wrote {out / 'R.csv'} and {out / 'X.csv'} ({topo.n_buses} buses)")
    return EXIT_OK


def cmd_dispatch(args) -> int:
    topo, _, source = _load_feeder(args)
    records = _load_series(args, topo)
    rec = next((r for r in records if r.t_min == args.minute), None)
    if rec is None:
        raise TimeseriesError(f"minute {args.minute} not present in {args.timeseries}")
    win = ScenarioWindow.from_records([rec], topo)
    sens = build_sensitivities(topo)
    tr = build_cost_transform(sens, args.lam)
    y = compute_y(rec.p_g, rec.p_c, rec.q_c, tr, sens)
    q = optimal_dispatch(tr, y, win.q_bar[0])
    cost = float(cost_batch(sens, args.lam, rec.p_g, rec.p_c, rec.q_c, q))
    zero_cost = float(cost_batch(sens, args.lam, rec.p_g, rec.p_c, rec.q_c, np.zeros_like(q)))
    out = Path(args.out)
    with atomic_write(out, newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bus", "q_g_pu"])
        for b, v in enumerate(q, start=1):
            w.writerow([b, repr(float(v))])
    _write_manifest(_manifest_path(out), args, {"feeder": source, "cost": cost, "zero_injection_cost": zero_cost})
    print(f"minute {args.minute}: cost {cost:.6e} (zero injection {zero_cost:.6e})")
    return EXIT_OK


def _kernels_for(args, feats):
    if isinstance(args.kernel, KernelSpec):
        return args.kernel, None
    return scaled_kernels(args.kernel, feats, args.gamma_mult), args.gamma_mult


def cmd_train(args) -> int:
    if args.mu < 0:
        raise UsageError("--mu must be non-negative")
    if args.mu == 0 and not args.unsafe_mu_zero:
        raise UsageError("--mu 0 removes the regularizer; pass --unsafe-mu-zero to allow it")
    topo, _, source = _load_feeder(args)
    records = _load_series(args, topo)
    win = _window(records, topo, args.end_minute, args.window)
    feats = select_features(win, args.features, topo)
    sens = build_sensitivities(topo)
    tr = build_cost_transform(sens, args.lam)
    kern, gm = _kernels_for(args, feats)
    ps = train_policies(win, tr, sens, feats, kern, args.mu, allow_zero_mu=args.unsafe_mu_zero,
                        features_label=str(args.features))
    out = Path(args.out)
    save_policies(ps, out)
    sol = ps.diagnostics["solution"]
    _write_manifest(_manifest_path(out), args, {
        "feeder": source,
        "train_minutes": [int(win.t_min[0]), int(win.t_min[-1])],
        "objective": ps.diagnostics["objective"],
        "fit": ps.diagnostics["fit"],
        "solver": {"iterations": sol.iterations, "primal_residual": sol.primal_residual,
                   "dual_residual": sol.dual_residual, "polished": sol.polished},
        "kernels": {str(b): str(p.kernel) for b, p in ps.policies.items()},
    })
    print(f"trained {len(ps.policies)} rules on minutes {win.t_min[0]}..{win.t_min[-1]}; "
          f"objective {ps.diagnostics['objective']:.6e}")
    return EXIT_OK


def cmd_crossval(args) -> int:
    topo, _, source = _load_feeder(args)
    kind = args.kernel.kind if isinstance(args.kernel, KernelSpec) else args.kernel
    records = _load_series(args, topo)
    win = _window(records, topo, args.end_minute, args.window)
    if args.folds > win.T:
        raise UsageError(f"--folds {args.folds} exceeds the window of {win.T} scenarios")
    feats = select_features(win, args.features, topo)
    sens = build_sensitivities(topo)
    tr = build_cost_transform(sens, args.lam)
    res = grid_search(win, feats, kind, _grid(args), tr, sens, seed=args.seed, threads=args.threads)
    out = Path(args.out)
    with atomic_write(out, newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mu", "gamma", "score"])
        for mu, g, score in res.scores:
            w.writerow([repr(mu), repr(g), repr(score)])
    _write_manifest(_manifest_path(out), args, {
        "feeder": source, "kernel_family": kind, "selected": {"mu": res.mu, "gamma_multiplier": res.gamma_multiplier},
    })
    print(f"selected mu={res.mu:g}, gamma multiplier={res.gamma_multiplier:g}")
    return EXIT_OK


def _simulation_config(args) -> SimulationConfig:
    return SimulationConfig(
        window=args.window,
        retrain_period=args.retrain_period,
        lam=args.lam,
        methods=tuple(args.methods),
        stale_delay=args.stale_delay,
        features=args.features,
        hours=args.hours,
        cv=None if args.no_cv else _grid(args),
        cv_once=args.cv_once,
        mu=args.mu,
        gamma_multiplier=args.gamma_mult,
        seed=args.seed,
        threads=args.threads,
    )


def cmd_simulate(args) -> int:
    try:
        cfg = _simulation_config(args)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    topo, _, source = _load_feeder(args)
    records = _load_series(args, topo)
    t0 = time.perf_counter()
    res = run_simulation(topo, records, cfg)
    out = Path(args.out)
    cost_gap_report(res, out)
    write_manifest(res, _manifest_path(out), {
        "tool": "kernelvar", "version": __version__, "command": "simulate", "feeder": source,
        "timeseries": str(args.timeseries), "runtime_s": round(time.perf_counter() - t0, 3),
    })
    print(f"simulated minutes {cfg.start_min}..{cfg.end_min - 1}; report in {out}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    topo, peaks, source = _load_feeder(args)
    if peaks is None:
        raise UsageError("gen-data needs a load_peak_pu column in the buses file")
    opts = SynthesisOptions(cloud_noise=args.cloud_noise, clear_sky_peak=args.clear_sky_peak)
    records = reference_day(topo, peaks, args.seed, opts)
    out = Path(args.out)
    write_timeseries(records, out)
    _write_manifest(_manifest_path(out), args, {"feeder": source, "minutes": len(records)})
    print(f"wrote {len(records)} minutes for {topo.n_buses} buses to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--lines", type=Path, help="feeder lines.csv (default: bundled IEEE 13-bus)")
    common.add_argument("--buses", type=Path, help="feeder buses.csv (default: bundled IEEE 13-bus)")
    common.add_argument("--v0", type=float, default=1.0, help="substation voltage in p.u.")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--lambda", dest="lam", type=float, default=0.5, help="voltage-vs-loss weight in [0, 1]")
    common.add_argument("--threads", type=int, default=1, help="worker cap for cross-validation")
    common.add_argument("-v", "--verbose", action="store_true")

    series = argparse.ArgumentParser(add_help=False)
    series.add_argument("--timeseries", type=Path, required=True)

    learn = argparse.ArgumentParser(add_help=False)
    learn.add_argument("--window", type=int, default=30, help="training scenarios (minutes)")
    learn.add_argument("--features", type=_selector, default=FeatureSelector("local"),
                       help="local | global | hybrid:<line>,<line>,...")

    grid = argparse.ArgumentParser(add_help=False)
    grid.add_argument("--mu-grid", type=_float_list, default=list(DEFAULT_MU))
    grid.add_argument("--gamma-grid", type=_float_list, default=list(DEFAULT_GAMMA_MULT),
                      help="multipliers of the median squared feature distance")
    grid.add_argument("--folds", type=int, default=5)
    grid.add_argument("--blocked", action="store_true", help="contiguous folds instead of shuffled ones")

    p = argparse.ArgumentParser(prog="kernelvar", description="Kernel-based inverter reactive power rules.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("sensitivities", parents=[common], help="write the R and X matrices")
    s.add_argument("--out", type=Path, required=True, help="output directory")
    s.set_defaults(func=cmd_sensitivities)

    s = sub.add_parser("dispatch", parents=[common, series], help="optimal setpoints for one minute")
    s.add_argument("--minute", type=int, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_dispatch)

    s = sub.add_parser("train", parents=[common, series, learn], help="fit rules on one window")
    s.add_argument("--end-minute", type=int, help="train on the window ending just before this minute")
    s.add_argument("--kernel", type=_kernel_arg, default=KernelSpec.linear(),
                   help="linear | poly:<beta>,<gamma> | gaussian:<gamma> | gaussian (median heuristic)")
    s.add_argument("--gamma-mult", type=float, default=1.0, help="median-heuristic multiplier for bare families")
    s.add_argument("--mu", type=float, default=1e-3)
    s.add_argument("--unsafe-mu-zero", action="store_true", help="allow --mu 0")
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("crossval", parents=[common, series, learn, grid], help="k-fold grid search on one window")
    s.add_argument("--end-minute", type=int)
    s.add_argument("--kernel", type=_kernel_arg, default="gaussian", help="kernel family to tune")
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_crossval)

    s = sub.add_parser("simulate", parents=[common, series, learn, grid], help="rolling-horizon comparison")
    s.add_argument("--methods", type=lambda t: [m.strip() for m in t.split(",") if m.strip()], default=list(METHODS))
    s.add_argument("--stale-delay", type=int, default=5)
    s.add_argument("--hours", type=_hours, default=(11.0, 18.0), help="reporting hours, e.g. 11-18")
    s.add_argument("--retrain-period", type=int, default=30)
    s.add_argument("--cv-once", action="store_true", help="tune on the first window only")
    s.add_argument("--no-cv", action="store_true", help="use --mu and --gamma-mult instead of tuning")
    s.add_argument("--mu", type=float, default=1e-3)
    s.add_argument("--gamma-mult", type=float, default=1.0)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("gen-data", parents=[common], help="write a seeded synthetic day")
    s.add_argument("--cloud-noise", type=float, default=0.5)
    s.add_argument("--clear-sky-peak", type=float, default=0.9)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if not 0.0 <= args.lam <= 1.0:
        parser.error("--lambda must lie in [0, 1]")
    if args.threads < 1:
        parser.error("--threads must be at least 1")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except RUN_ERRORS as exc:
        print(f"kernelvar {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
