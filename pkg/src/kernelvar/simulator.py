"""Rolling-horizon comparison of reactive-power control methods.

Every ``retrain_period`` minutes the kernel rules are refitted on the previous
``window`` minutes; during the following period each method's setpoints are
applied minute by minute and scored with the true cost at the current data.
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from ._io import atomic_write
from .crossval import CvGrid, grid_search, scaled_kernels
from .feeder import (
    FeederTopology,
    build_cost_transform,
    build_sensitivities,
    compute_y,
    cost_batch,
)
from .policy import DispatchError, TrainingError, optimal_dispatch, project_to_limits, train_policies
from .qp import SolverSettings
from .scenario import FeatureSelector, ScenarioRecord, ScenarioWindow, TimeseriesError, select_features, stack_records

logger = logging.getLogger(__name__)

METHODS = ("optimal", "gaussian", "linear", "stale", "zero")
KERNEL_METHODS = ("gaussian", "linear")


@dataclass
class SimulationConfig:
    window: int = 30
    retrain_period: int = 30
    lam: float = 0.5
    methods: tuple = METHODS
    stale_delay: int = 5
    features: FeatureSelector = field(default_factory=lambda: FeatureSelector("local"))
    hours: tuple = (11.0, 18.0)
    cv: CvGrid | None = field(default_factory=CvGrid)
    cv_once: bool = False
    mu: float = 1e-3
    gamma_multiplier: float = 1.0
    seed: int = 0
    threads: int = 1
    train_settings: SolverSettings | None = None
    cv_settings: SolverSettings | None = None

    def __post_init__(self):
        self.methods = tuple(self.methods)
        if self.window < 1 or self.retrain_period < 1:
            raise ValueError("window and retrain period must be at least one minute")
        if self.stale_delay < 0:
            raise ValueError("stale delay must be non-negative")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ValueError(f"unknown methods {bad}; choose from {METHODS}")
        # canonical order keeps reports independent of how methods were listed
        self.methods = tuple(m for m in METHODS if m in self.methods or m == "optimal")
        if not 0 <= self.hours[0] < self.hours[1] <= 24:
            raise ValueError(f"bad hours of interest {self.hours}")
        if self.cv is not None and self.cv.folds > self.window:
            raise ValueError("more folds than training scenarios")
        if self.mu <= 0 or self.gamma_multiplier <= 0:
            raise ValueError("mu and gamma multiplier must be positive")

    @property
    def start_min(self) -> int:
        return int(round(self.hours[0] * 60))

    @property
    def end_min(self) -> int:
        return int(round(self.hours[1] * 60))

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in ("features", "cv", "train_settings", "cv_settings")}
        d["methods"] = list(self.methods)
        d["hours"] = list(self.hours)
        d["features"] = str(self.features)
        d["cv"] = None if self.cv is None else {
            "mu_values": list(self.cv.mu_values),
            "gamma_multipliers": list(self.cv.gamma_multipliers),
            "folds": self.cv.folds,
        }
        for key in ("train_settings", "cv_settings"):
            s = getattr(self, key)
            d[key] = None if s is None else asdict(s)
        return d


@dataclass
class SimulationResult:
    """Per-step and per-interval outcome of :func:`run_simulation`.

    ``step_cost[m]`` and ``applied[m]`` are indexed like ``t_min``; steps a
    method could not serve hold NaN. ``avg_cost`` and ``gap`` hold one value
    per entry of ``interval_start``.
    """

    config: SimulationConfig
    methods: tuple
    t_min: np.ndarray
    q_bar: np.ndarray
    step_cost: dict
    applied: dict
    interval_start: np.ndarray
    avg_cost: dict
    gap: dict
    selections: list = field(default_factory=list)


def _check_records(records: Sequence[ScenarioRecord], topology: FeederTopology):
    t = np.array([r.t_min for r in records])
    if t.size == 0:
        raise TimeseriesError("empty time series")
    if np.any(np.diff(t) != 1):
        raise TimeseriesError("time series must cover consecutive minutes")
    if records[0].p_g.shape != (topology.n_buses,):
        raise TimeseriesError(f"records have {records[0].p_g.size} buses, feeder has {topology.n_buses}")
    return t


def _fit_kernel_method(kind, win, feats, transform, sens, cfg, chosen, boundary):
    """Train one kernel family on a window; returns the policy set and the (mu, gamma mult) used."""
    if cfg.cv is not None and (not cfg.cv_once or kind not in chosen):
        res = grid_search(
            win, feats, kind, cfg.cv, transform, sens,
            seed=[cfg.seed, boundary], settings=cfg.cv_settings, threads=cfg.threads,
        )
        chosen[kind] = (res.mu, res.gamma_multiplier)
    mu, gm = chosen.get(kind, (cfg.mu, cfg.gamma_multiplier))
    kern = scaled_kernels(kind, feats, gm)
    ps = train_policies(win, transform, sens, feats, kern, mu, cfg.train_settings, features_label=str(cfg.features))
    return ps, mu, gm


def run_simulation(topology: FeederTopology, records: Sequence[ScenarioRecord], config: SimulationConfig) -> SimulationResult:
    cfg = config
    t_all = _check_records(records, topology)
    t0 = int(t_all[0])
    start, end = cfg.start_min, cfg.end_min
    history = max(cfg.window, cfg.stale_delay if "stale" in cfg.methods else 0)
    if start - history < t0 or end - 1 > t_all[-1]:
        raise TimeseriesError(
            f"time series covers minutes {t0}..{t_all[-1]}, need {start - history}..{end - 1}"
        )
    _, P_g, P_c, Q_c = stack_records(records)
    sens = build_sensitivities(topology)
    transform = build_cost_transform(sens, cfg.lam)
    full = ScenarioWindow.from_records(list(records), topology)
    Q_bar = full.q_bar

    first = start - (cfg.stale_delay if "stale" in cfg.methods else 0)
    dispatch = {}
    for t in range(first, end):
        i = t - t0
        y = compute_y(P_g[i], P_c[i], Q_c[i], transform, sens)
        try:
            dispatch[t] = optimal_dispatch(transform, y, Q_bar[i])
        except DispatchError as exc:
            warnings.warn(f"minute {t}: dispatch failed ({exc}); step excluded", RuntimeWarning)

    steps = np.arange(start, end)
    n_steps = len(steps)
    applied = {m: np.full((n_steps, topology.n_buses), np.nan) for m in cfg.methods}
    selections = []
    chosen: dict = {}
    policies = {}
    for s, t in enumerate(steps):
        i = t - t0
        if (t - start) % cfg.retrain_period == 0:
            win = full.subset(np.arange(i - cfg.window, i))
            feats = select_features(win, cfg.features, topology)
            for kind in KERNEL_METHODS:
                if kind not in cfg.methods:
                    continue
                try:
                    ps, mu, gm = _fit_kernel_method(kind, win, feats, transform, sens, cfg, chosen, t)
                except (TrainingError, RuntimeError) as exc:
                    warnings.warn(f"minute {t}: {kind} training failed ({exc}); interval excluded", RuntimeWarning)
                    policies[kind] = None
                    continue
                policies[kind] = ps
                selections.append({"t_min": int(t), "method": kind, "mu": mu, "gamma_multiplier": gm})
        if t not in dispatch:
            continue
        qb = Q_bar[i]
        applied["optimal"][s] = dispatch[t]
        if "zero" in cfg.methods:
            applied["zero"][s] = 0.0
        if "stale" in cfg.methods and (t - cfg.stale_delay) in dispatch:
            applied["stale"][s] = project_to_limits(dispatch[t - cfg.stale_delay], qb)
        now = ScenarioWindow(t_min=np.array([t]), p_g=P_g[i:i + 1], p_c=P_c[i:i + 1], q_c=Q_c[i:i + 1],
                             q_bar=Q_bar[i:i + 1])
        feats_now = None
        for kind in KERNEL_METHODS:
            if policies.get(kind) is None:
                continue
            if feats_now is None:
                feats_now = select_features(now, cfg.features, topology)
            raw = policies[kind].evaluate(feats_now, topology.n_buses)[0]
            applied[kind][s] = project_to_limits(raw, qb)

    step_cost = {}
    for m in cfg.methods:
        step_cost[m] = cost_batch(sens, cfg.lam, P_g[steps - t0], P_c[steps - t0], Q_c[steps - t0], applied[m])

    starts = np.arange(start, end, cfg.retrain_period)
    avg_cost = {m: np.full(len(starts), np.nan) for m in cfg.methods}
    gap = {m: np.full(len(starts), np.nan) for m in cfg.methods}
    base = step_cost["optimal"]
    for k, s0 in enumerate(starts):
        sel = (steps >= s0) & (steps < s0 + cfg.retrain_period)
        for m in cfg.methods:
            c = step_cost[m][sel]
            ok = ~np.isnan(c) & ~np.isnan(base[sel])
            if not ok.any():
                continue
            avg_cost[m][k] = float(np.mean(c[ok]))
            gap[m][k] = 0.0 if m == "optimal" else float(np.mean(c[ok] - base[sel][ok]))
    return SimulationResult(
        config=cfg,
        methods=cfg.methods,
        t_min=steps,
        q_bar=Q_bar[steps - t0],
        step_cost=step_cost,
        applied=applied,
        interval_start=starts,
        avg_cost=avg_cost,
        gap=gap,
        selections=selections,
    )


def cost_gap_report(result: SimulationResult, path) -> None:
    """CSV ``interval_start_min,method,avg_cost,gap_to_optimal`` sorted by interval then method."""
    with atomic_write(path, newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["interval_start_min", "method", "avg_cost", "gap_to_optimal"])
        for k, s0 in enumerate(result.interval_start):
            for m in result.methods:
                w.writerow([int(s0), m, repr(float(result.avg_cost[m][k])), repr(float(result.gap[m][k]))])


def write_manifest(result: SimulationResult, path, extra: dict | None = None) -> None:
    doc = {"config": result.config.to_dict(), "selections": result.selections}
    if extra:
        doc.update(extra)
    with atomic_write(path) as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
