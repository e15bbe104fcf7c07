"""K-fold selection of the regularization weight and the Gaussian width multiplier."""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .feeder import CostTransform, Sensitivities, compute_y
from .kernels import KernelSpec, median_sq_distance
from .policy import TrainingError, prepare_inputs, project_to_limits, train_policies
from .qp import SolverSettings
from .scenario import ScenarioWindow

logger = logging.getLogger(__name__)

DEFAULT_MU = (1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1)
DEFAULT_GAMMA_MULT = (0.25, 0.5, 1.0, 2.0, 4.0)


@dataclass(frozen=True)
class CvGrid:
    mu_values: Sequence[float] = DEFAULT_MU
    gamma_multipliers: Sequence[float] = DEFAULT_GAMMA_MULT
    folds: int = 5
    shuffle: bool = True

    def __post_init__(self):
        object.__setattr__(self, "mu_values", tuple(float(m) for m in self.mu_values))
        object.__setattr__(self, "gamma_multipliers", tuple(float(g) for g in self.gamma_multipliers))
        if not self.mu_values or not self.gamma_multipliers:
            raise ValueError("grid lists must be non-empty")
        if any(m <= 0 for m in self.mu_values) or any(g <= 0 for g in self.gamma_multipliers):
            raise ValueError("grid values must be positive")
        if self.folds < 2:
            raise ValueError("need at least 2 folds")

    def points(self, kind: str) -> list[tuple[float, float]]:
        """Grid points ``(mu, gamma_multiplier)``; the multiplier is irrelevant for linear kernels."""
        gammas = self.gamma_multipliers if kind != "linear" else (1.0,)
        return [(m, g) for m in self.mu_values for g in gammas]


@dataclass
class CvResult:
    mu: float
    gamma_multiplier: float
    scores: list[tuple[float, float, float]] = field(default_factory=list)


def kfold_split(T: int, k: int, seed=None, shuffle: bool = True) -> list[np.ndarray]:
    """Cut ``range(T)`` into ``k`` folds whose sizes differ by at most one.

    With ``shuffle=False`` the folds are contiguous blocks of time.
    """
    if k > T:
        raise ValueError(f"cannot split {T} scenarios into {k} folds")
    if k < 1:
        raise ValueError("k must be positive")
    perm = np.random.default_rng(seed).permutation(T) if shuffle else np.arange(T)
    return [np.sort(f) for f in np.array_split(perm, k)]


def scaled_kernels(
    kind: str, features: Mapping[int, np.ndarray], gamma_multiplier: float, beta: int = 2
) -> dict[int, KernelSpec]:
    """Per-inverter kernel specs with ``gamma = multiplier * median squared distance``.

    Distances are measured on the inputs the kernel actually sees, i.e. after
    standardization for non-linear kernels.
    """
    out = {}
    for b, Z in features.items():
        if kind == "linear":
            out[b] = KernelSpec.linear()
            continue
        probe = KernelSpec.gaussian(1.0) if kind == "gaussian" else KernelSpec.polynomial(beta, 1.0)
        _, Zs = prepare_inputs(probe, np.atleast_2d(Z))
        gamma = gamma_multiplier * median_sq_distance(Zs)
        out[b] = KernelSpec.gaussian(gamma) if kind == "gaussian" else KernelSpec.polynomial(beta, gamma)
    return out


def holdout_cost(policies, window: ScenarioWindow, features, transform: CostTransform, sens: Sensitivities) -> float:
    """Average ``|C q + y|^2`` of the projected rule outputs over the window's scenarios."""
    n = window.p_g.shape[1]
    q = np.zeros((window.T, n))
    for b, pol in policies.policies.items():
        raw = pol.evaluate_many(features[b])
        q[:, b - 1] = project_to_limits(raw, window.q_bar[:, b - 1])
    y = compute_y(window.p_g, window.p_c, window.q_c, transform, sens)
    r = q @ transform.C.T + y
    return float(np.mean(np.sum(r * r, axis=1)))


def cv_score(
    window: ScenarioWindow,
    features: Mapping[int, np.ndarray],
    kind: str,
    mu: float,
    gamma_multiplier: float,
    transform: CostTransform,
    sens: Sensitivities,
    folds: int = 5,
    seed=0,
    settings: SolverSettings | None = None,
    beta: int = 2,
    shuffle: bool = True,
) -> float:
    """Mean held-out cost of the deployed (projected) rules; ``inf`` if any fold fails to train."""
    splits = kfold_split(window.T, folds, seed, shuffle)
    costs = []
    for hold in splits:
        train = np.setdiff1d(np.arange(window.T), hold)
        tr_feat = {b: Z[train] for b, Z in features.items()}
        ho_feat = {b: Z[hold] for b, Z in features.items()}
        kern = scaled_kernels(kind, tr_feat, gamma_multiplier, beta)
        try:
            ps = train_policies(window.subset(train), transform, sens, tr_feat, kern, mu, settings)
        except TrainingError as exc:
            warnings.warn(f"cv fold failed for mu={mu}, gamma x{gamma_multiplier}: {exc}", RuntimeWarning)
            return math.inf
        costs.append(holdout_cost(ps, window.subset(hold), ho_feat, transform, sens))
    return float(np.mean(costs))


def select_best(scores: Sequence[tuple[float, float, float]]) -> tuple[float, float]:
    """Argmin over ``(mu, gamma_mult, score)``; ties go to larger mu, then larger gamma."""
    finite = [s for s in scores if math.isfinite(s[2])]
    if not finite:
        raise RuntimeError("every grid point failed to train")
    best = min(s[2] for s in finite)
    tied = [s for s in finite if s[2] <= best]
    mu, g, _ = max(tied, key=lambda s: (s[0], s[1]))
    return mu, g


def grid_search(
    window: ScenarioWindow,
    features: Mapping[int, np.ndarray],
    kind: str,
    grid: CvGrid,
    transform: CostTransform,
    sens: Sensitivities,
    seed=0,
    settings: SolverSettings | None = None,
    threads: int = 1,
    beta: int = 2,
) -> CvResult:
    points = grid.points(kind)

    def run(pt):
        return cv_score(window, features, kind, pt[0], pt[1], transform, sens, grid.folds, seed, settings, beta, grid.shuffle)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            values = list(ex.map(run, points))
    else:
        values = [run(pt) for pt in points]
    scores = [(m, g, v) for (m, g), v in zip(points, values)]
    mu, g = select_best(scores)
    return CvResult(mu=mu, gamma_multiplier=g, scores=scores)
