"""Joint kernel-based training of inverter reactive-power rules.

Each inverter ``n`` follows ``q_n(z) = sum_t K_n(z, z_{n,t}) a_{n,t} + b_n``.
The coefficients of all inverters are fitted together by one QP that averages
the squared-norm grid cost ``|C q_t + y_t|^2`` over training scenarios, adds
``mu * a_n' K_n a_n`` per inverter, and keeps every training-scenario injection
inside its reactive limit.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import kernels
from ._io import atomic_write
from .feeder import CostTransform, Sensitivities, compute_y
from .kernels import KernelSpec
from .qp import QpProblem, QpSolution, SolverSettings, solve, solve_box
from .scenario import FeatureStandardizer, ScenarioWindow, fit_standardizer

logger = logging.getLogger(__name__)

DEFAULT_JITTER = 1e-8
POLICY_SCHEMA = "kernelvar-policy"
POLICY_VERSION = 1


class TrainingError(RuntimeError):
    pass


class DispatchError(RuntimeError):
    pass


class PolicyFileError(ValueError):
    pass


@dataclass(eq=False)
class InverterPolicy:
    bus: int
    kernel: KernelSpec
    training_inputs: np.ndarray
    a: np.ndarray
    b: float
    standardizer: FeatureStandardizer | None = None

    def __post_init__(self):
        self.training_inputs = np.atleast_2d(np.asarray(self.training_inputs, dtype=float))
        self.a = np.asarray(self.a, dtype=float).ravel()
        self.b = float(self.b)
        if self.a.size != self.training_inputs.shape[0]:
            raise ValueError(f"{self.a.size} coefficients for {self.training_inputs.shape[0]} training inputs")
        if not (np.all(np.isfinite(self.a)) and np.isfinite(self.b)):
            raise ValueError(f"non-finite coefficients for the inverter at bus {self.bus}")
        self._basis = self._prep(self.training_inputs)

    @property
    def dim(self) -> int:
        return self.training_inputs.shape[1]

    def _prep(self, Z):
        return self.standardizer.apply(Z) if self.standardizer is not None else np.asarray(Z, dtype=float)

    def evaluate_many(self, Z) -> np.ndarray:
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        if Z.shape[1] != self.dim:
            raise ValueError(f"policy for bus {self.bus} expects {self.dim} features, got {Z.shape[1]}")
        return kernels.cross_gram(self.kernel, self._prep(Z), self._basis) @ self.a + self.b

    def __eq__(self, other):
        if not isinstance(other, InverterPolicy):
            return NotImplemented
        same_std = (self.standardizer is None) == (other.standardizer is None)
        if same_std and self.standardizer is not None:
            same_std = np.array_equal(self.standardizer.mean, other.standardizer.mean) and np.array_equal(
                self.standardizer.std, other.standardizer.std
            )
        return (
            self.bus == other.bus
            and self.kernel == other.kernel
            and np.array_equal(self.training_inputs, other.training_inputs)
            and np.array_equal(self.a, other.a)
            and self.b == other.b
            and same_std
        )


def evaluate_policy(policy: InverterPolicy, z) -> float:
    """Representer-form rule output for one feature vector (no projection)."""
    z = np.asarray(z, dtype=float).ravel()
    return float(policy.evaluate_many(z[None, :])[0])


def project_to_limits(q, q_bar):
    """Clip ``q`` into ``[-q_bar, q_bar]``; works element-wise on arrays."""
    if np.any(np.asarray(q_bar) < 0):
        raise ValueError("q_bar must be non-negative")
    out = np.maximum(np.minimum(q, q_bar), -np.asarray(q_bar))
    return float(out) if np.ndim(out) == 0 else out


@dataclass(eq=False)
class PolicySet:
    policies: dict[int, InverterPolicy]
    lam: float
    mu: float
    train_t_min: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    features: str = ""
    diagnostics: dict = field(default_factory=dict)

    @property
    def buses(self) -> list[int]:
        return sorted(self.policies)

    def evaluate(self, features: Mapping[int, np.ndarray], n_buses: int) -> np.ndarray:
        """Raw (unprojected) injections for all buses; rows of ``features[bus]`` are scenarios."""
        rows = {b: np.atleast_2d(features[b]) for b in self.policies}
        T = next(iter(rows.values())).shape[0] if rows else 1
        q = np.zeros((T, n_buses))
        for b, pol in self.policies.items():
            q[:, b - 1] = pol.evaluate_many(rows[b])
        return q

    def __eq__(self, other):
        if not isinstance(other, PolicySet):
            return NotImplemented
        return (
            self.lam == other.lam
            and self.mu == other.mu
            and self.features == other.features
            and np.array_equal(self.train_t_min, other.train_t_min)
            and self.buses == other.buses
            and all(self.policies[b] == other.policies[b] for b in self.buses)
        )


@dataclass(eq=False)
class TrainingProblem:
    """Data of the joint training QP.

    ``C`` is the N x N cost factor, ``Y`` the N x T matrix of per-scenario
    offsets, ``grams[k]`` and ``q_bar[k]`` the T x T Gram matrix and the T
    reactive limits of the k-th inverter, located at bus index ``inv_idx[k]``
    (0-based).
    """

    C: np.ndarray
    Y: np.ndarray
    grams: Sequence[np.ndarray]
    q_bar: np.ndarray
    mu: float
    inv_idx: np.ndarray | None = None
    jitter: float = DEFAULT_JITTER

    def __post_init__(self):
        self.Y = np.atleast_2d(np.asarray(self.Y, dtype=float))
        self.C = np.atleast_2d(np.asarray(self.C, dtype=float))
        N, T = self.Y.shape
        if self.inv_idx is None:
            self.inv_idx = np.arange(N)
        self.inv_idx = np.asarray(self.inv_idx, dtype=int)
        self.q_bar = np.atleast_2d(np.asarray(self.q_bar, dtype=float))
        n_inv = len(self.inv_idx)
        if self.C.shape != (N, N):
            raise ValueError(f"C has shape {self.C.shape}, expected {(N, N)}")
        if len(self.grams) != n_inv or any(np.shape(K) != (T, T) for K in self.grams):
            raise ValueError(f"need {n_inv} Gram matrices of shape {(T, T)}")
        if self.q_bar.shape != (n_inv, T):
            raise ValueError(f"q_bar has shape {self.q_bar.shape}, expected {(n_inv, T)}")
        if np.any(self.q_bar < 0):
            raise ValueError("reactive limits must be non-negative")
        if self.mu < 0:
            raise ValueError("mu must be non-negative")

    @property
    def T(self) -> int:
        return self.Y.shape[1]

    def split(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Decision vector ``[a_1; b_1; ...]`` -> ``(a (n_inv x T), b (n_inv,))``."""
        blocks = np.asarray(x).reshape(len(self.inv_idx), self.T + 1)
        return blocks[:, :-1], blocks[:, -1]

    def injections(self, x: np.ndarray) -> np.ndarray:
        """Per-inverter training injections ``K_n a_n + b_n`` (n_inv x T)."""
        a, b = self.split(x)
        return np.vstack([K @ a_n for K, a_n in zip(self.grams, a)]) + b[:, None]

    def fit_term(self, x: np.ndarray) -> float:
        Q = np.zeros_like(self.Y)
        Q[self.inv_idx] = self.injections(x)
        R = self.C @ Q + self.Y
        return float(np.sum(R * R) / self.T)

    def objective(self, x: np.ndarray) -> float:
        a, _ = self.split(x)
        reg = sum(float(a_n @ K @ a_n) for K, a_n in zip(self.grams, a))
        return self.fit_term(x) + self.mu * reg

    def constant(self) -> float:
        """Objective value dropped by the QP form (the zero-policy fit)."""
        return float(np.sum(self.Y * self.Y) / self.T)


def assemble_training_qp(tp: TrainingProblem) -> QpProblem:
    """Build ``0.5 x'Px + c'x`` with ``l <= Ax <= u`` over ``x = [a_1; b_1; ...; a_N; b_N]``.

    The QP objective plus :meth:`TrainingProblem.constant` equals the training
    objective. Injection blocks ``E_n = [K_n 1]`` are combined through index
    arithmetic on the inverter pair weights ``(C'C)_{nm}``; the scenario-major
    stacking is never formed explicitly.
    """
    T = tp.T
    n_inv = len(tp.inv_idx)
    d = n_inv * (T + 1)
    Ci = tp.C[:, tp.inv_idx]
    W = Ci.T @ Ci
    E = [np.hstack([K, np.ones((T, 1))]) for K in tp.grams]
    F = np.hstack(E)  # T x d
    P = (2.0 / T) * np.kron(W, np.ones((T + 1, T + 1))) * (F.T @ F)
    CtY = Ci.T @ tp.Y  # n_inv x T
    c = np.empty(d)
    for k in range(n_inv):
        sl = slice(k * (T + 1), (k + 1) * (T + 1))
        c[sl] = (2.0 / T) * (E[k].T @ CtY[k])
        if tp.mu:
            K = tp.grams[k] + tp.jitter * np.eye(T)
            P[sl, sl][:T, :T] += 2.0 * tp.mu * K
    P = 0.5 * (P + P.T)
    A = np.zeros((n_inv * T, d))
    for k in range(n_inv):
        A[k * T:(k + 1) * T, k * (T + 1):(k + 1) * (T + 1)] = E[k]
    qb = tp.q_bar.ravel()
    return QpProblem(P, c, A, -qb, qb)


def optimal_dispatch(
    transform: CostTransform, y, q_bar, settings: SolverSettings | None = None
) -> np.ndarray:
    """Minimizer of ``|C q + y|^2`` over the box ``|q| <= q_bar``."""
    y = np.asarray(y, dtype=float)
    q_bar = np.asarray(q_bar, dtype=float)
    if np.any(q_bar < 0):
        raise ValueError("q_bar must be non-negative")
    C = transform.C
    sol = solve_box(2.0 * C.T @ C, 2.0 * C.T @ y, -q_bar, q_bar, settings)
    if not sol.solved:
        raise DispatchError(f"dispatch QP failed: {sol.status.value}")
    return np.clip(sol.x, -q_bar, q_bar)


def _kernel_for(kernel, bus) -> KernelSpec:
    return kernel[bus] if isinstance(kernel, Mapping) else kernel


def prepare_inputs(kernel: KernelSpec, Z: np.ndarray, standardize: bool | None = None):
    """Standardizer (or ``None``) and the transformed training inputs for one inverter.

    By default only non-linear kernels see standardized inputs, so linear
    rules stay affine in the raw measurements.
    """
    if standardize is None:
        standardize = kernel.kind != "linear"
    if standardize and Z.shape[0] >= 2:
        std = fit_standardizer(Z)
        return std, std.apply(Z)
    return None, Z


def train_policies(
    window: ScenarioWindow,
    transform: CostTransform,
    sens: Sensitivities,
    features: Mapping[int, np.ndarray],
    kernel: KernelSpec | Mapping[int, KernelSpec],
    mu: float,
    settings: SolverSettings | None = None,
    jitter: float = DEFAULT_JITTER,
    allow_zero_mu: bool = False,
    standardize: bool | None = None,
    features_label: str = "",
) -> PolicySet:
    """Fit rules for every inverter in ``features`` jointly on the window's scenarios.

    ``kernel`` may be a single spec or one spec per bus. ``mu = 0`` is refused
    unless ``allow_zero_mu`` is set (intended for test oracles).
    """
    if mu < 0 or (mu == 0 and not allow_zero_mu):
        raise ValueError("mu must be > 0 (mu = 0 needs allow_zero_mu=True)")
    if window.T < 1:
        raise TrainingError("empty training window")
    buses = sorted(features)
    if not buses:
        raise TrainingError("no inverters to train")
    preps = {}
    grams = []
    for b in buses:
        spec = _kernel_for(kernel, b)
        Z = np.atleast_2d(np.asarray(features[b], dtype=float))
        if Z.shape[0] != window.T:
            raise ValueError(f"bus {b}: {Z.shape[0]} feature rows for {window.T} scenarios")
        std, Zs = prepare_inputs(spec, Z, standardize)
        preps[b] = (spec, Z, std)
        grams.append(kernels.gram_matrix(spec, Zs))
    Y = compute_y(window.p_g, window.p_c, window.q_c, transform, sens).T
    inv_idx = np.array(buses) - 1
    tp = TrainingProblem(
        C=transform.C, Y=Y, grams=grams, q_bar=window.q_bar[:, inv_idx].T, mu=mu, inv_idx=inv_idx, jitter=jitter
    )
    sol = solve(assemble_training_qp(tp), settings)
    if not sol.solved:
        raise TrainingError(
            f"training QP not solved ({sol.status.value}, primal {sol.primal_residual:.2e}, dual {sol.dual_residual:.2e})"
        )
    a, b_vec = tp.split(sol.x)
    policies = {
        b: InverterPolicy(bus=b, kernel=preps[b][0], training_inputs=preps[b][1], a=a[k], b=b_vec[k],
                          standardizer=preps[b][2])
        for k, b in enumerate(buses)
    }
    diag = {
        "objective": tp.objective(sol.x),
        "fit": tp.fit_term(sol.x),
        "injections": tp.injections(sol.x),
        "q_bar": tp.q_bar,
        "solution": sol,
        "problem": tp,
    }
    return PolicySet(policies, lam=transform.lam, mu=float(mu), train_t_min=np.asarray(window.t_min),
                     features=features_label, diagnostics=diag)


# ---------------------------------------------------------------------------
# persistence


def _policy_to_dict(p: InverterPolicy) -> dict:
    return {
        "bus": p.bus,
        "kernel": p.kernel.to_dict(),
        "standardizer": None
        if p.standardizer is None
        else {"mean": p.standardizer.mean.tolist(), "std": p.standardizer.std.tolist()},
        "training_inputs": p.training_inputs.tolist(),
        "a": p.a.tolist(),
        "b": p.b,
    }


def save_policies(ps: PolicySet, path) -> None:
    """Write a self-describing JSON policy file (floats round-trip exactly)."""
    doc = {
        "schema": POLICY_SCHEMA,
        "version": POLICY_VERSION,
        "lambda": ps.lam,
        "mu": ps.mu,
        "features": ps.features,
        "train_t_min": [int(t) for t in ps.train_t_min],
        "inverters": [_policy_to_dict(ps.policies[b]) for b in ps.buses],
    }
    with atomic_write(path) as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_policies(path) -> PolicySet:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise PolicyFileError(f"{path}: corrupt policy file ({exc})") from None
    if not isinstance(doc, dict) or doc.get("schema") != POLICY_SCHEMA:
        raise PolicyFileError(f"{path}: not a policy file")
    if doc.get("version") != POLICY_VERSION:
        raise PolicyFileError(f"{path}: unsupported policy version {doc.get('version')!r}")
    try:
        policies = {}
        for d in doc["inverters"]:
            std = d["standardizer"]
            pol = InverterPolicy(
                bus=int(d["bus"]),
                kernel=KernelSpec.from_dict(d["kernel"]),
                training_inputs=np.array(d["training_inputs"], dtype=float),
                a=np.array(d["a"], dtype=float),
                b=float(d["b"]),
                standardizer=None
                if std is None
                else FeatureStandardizer(np.array(std["mean"], dtype=float), np.array(std["std"], dtype=float)),
            )
            policies[pol.bus] = pol
        return PolicySet(
            policies,
            lam=float(doc["lambda"]),
            mu=float(doc["mu"]),
            train_t_min=np.array(doc["train_t_min"], dtype=int),
            features=str(doc.get("features", "")),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise PolicyFileError(f"{path}: malformed policy file ({exc})") from None
