"""Dense operator-splitting (ADMM) solver for convex QPs.

Solves::

    minimize    0.5 x'Px + c'x
    subject to  l <= Ax <= u

The iteration splits the equality-constrained linear solve in ``x`` from the
projection onto the box ``[l, u]``, with Ruiz equilibration, over-relaxation,
adaptive penalty and an active-set polish step.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.optimize import nnls

logger = logging.getLogger(__name__)

INFTY = 1e20  # bounds at or beyond this magnitude are treated as absent
RHO_MIN = 1e-6
RHO_MAX = 1e6
RHO_EQ_SCALE = 1e3
MIN_SCALING = 1e-4
MAX_SCALING = 1e4
WALK_RATIO = 10.0
WALK_AFTER = 200


class Status(enum.Enum):
    SOLVED = "solved"
    MAX_ITER = "max_iter"
    NUMERICAL_FAILURE = "numerical_failure"


@dataclass
class SolverSettings:
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    eps_abs: float = 1e-8
    eps_rel: float = 1e-8
    max_iter: int = 100_000
    polish: bool = True
    adaptive_rho: bool = True
    adaptive_rho_interval: int = 50
    scaling_iter: int = 10
    check_interval: int = 10
    polish_refine_iter: int = 5
    polish_delta: float = 1e-11
    polish_rounds: int = 15
    record_history: bool = False

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not 0 < self.alpha < 2:
            raise ValueError("alpha must lie in (0, 2)")
        if self.eps_abs < 0 or self.eps_rel < 0 or (self.eps_abs == 0 and self.eps_rel == 0):
            raise ValueError("tolerances must be non-negative and not both zero")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass(eq=False)
class QpProblem:
    P: np.ndarray
    c: np.ndarray
    A: np.ndarray
    l: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        self.P = np.atleast_2d(np.asarray(self.P, dtype=float))
        self.c = np.asarray(self.c, dtype=float).ravel()
        d = self.c.size
        self.A = np.asarray(self.A, dtype=float).reshape(-1, d)
        self.l = np.asarray(self.l, dtype=float).ravel()
        self.u = np.asarray(self.u, dtype=float).ravel()
        m = self.A.shape[0]
        if self.P.shape != (d, d):
            raise ValueError(f"P has shape {self.P.shape}, expected {(d, d)}")
        if self.l.shape != (m,) or self.u.shape != (m,):
            raise ValueError("bounds must have one entry per constraint row")
        scale = max(np.abs(self.P).max(initial=0.0), 1.0)
        if np.abs(self.P - self.P.T).max(initial=0.0) > 1e-12 * scale:
            raise ValueError("P must be symmetric")
        if np.any(self.l > self.u):
            raise ValueError("lower bounds exceed upper bounds")
        if np.any(np.isnan(self.l)) or np.any(np.isnan(self.u)):
            raise ValueError("bounds contain NaN")
        if not (np.all(np.isfinite(self.P)) and np.all(np.isfinite(self.c)) and np.all(np.isfinite(self.A))):
            raise ValueError("problem data must be finite")

    @property
    def n_vars(self) -> int:
        return self.c.size

    @property
    def n_cons(self) -> int:
        return self.A.shape[0]

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ self.P @ x + self.c @ x)


@dataclass(eq=False)
class QpSolution:
    x: np.ndarray
    y: np.ndarray
    status: Status
    primal_residual: float
    dual_residual: float
    iterations: int
    objective: float
    polished: bool = False
    rho_updates: int = 0
    history: list = field(default_factory=list)

    @property
    def solved(self) -> bool:
        return self.status is Status.SOLVED


class _Workspace:
    """Scaled problem data and factorization for one solve."""

    def __init__(self, prob: QpProblem, st: SolverSettings):
        self.prob = prob
        self.st = st
        P, c, A = prob.P, prob.c, prob.A
        if st.scaling_iter > 0 and prob.n_vars > 0:
            self.D, self.E, self.cscale = self._scale(P, c, A, st.scaling_iter)
        else:
            self.D, self.E, self.cscale = np.ones(prob.n_vars), np.ones(prob.n_cons), 1.0
        D, E, cs = self.D, self.E, self.cscale
        self.P = cs * (D[:, None] * P * D[None, :])
        self.c = cs * D * c
        self.A = E[:, None] * A * D[None, :]
        l = np.where(prob.l <= -INFTY, -np.inf, prob.l)
        u = np.where(prob.u >= INFTY, np.inf, prob.u)
        self.l = E * l
        self.u = E * u
        self.free = np.isinf(l) & np.isinf(u)
        self.eq = (u - l) < 1e-12 * np.maximum(1.0, np.abs(u))
        self.rho = st.rho
        self._factor()

    @staticmethod
    def _scale(P, c, A, n_iter):
        d, m = P.shape[0], A.shape[0]
        D, E, cs = np.ones(d), np.ones(m), 1.0
        Ps, As, c_s = P.copy(), A.copy(), c.copy()
        for _ in range(n_iter):
            col = np.maximum(np.abs(Ps).max(axis=0, initial=0.0), np.abs(As).max(axis=0, initial=0.0))
            dd = np.where(col > 0, 1.0 / np.sqrt(np.clip(col, MIN_SCALING, MAX_SCALING)), 1.0)
            row = np.abs(As).max(axis=1, initial=0.0)
            ee = np.where(row > 0, 1.0 / np.sqrt(np.clip(row, MIN_SCALING, MAX_SCALING)), 1.0)
            Ps = dd[:, None] * Ps * dd[None, :]
            As = ee[:, None] * As * dd[None, :]
            c_s = dd * c_s
            D *= dd
            E *= ee
            g = max(np.abs(Ps).max(axis=0, initial=0.0).mean(), np.abs(c_s).max(initial=0.0))
            g = 1.0 / np.clip(g, MIN_SCALING, MAX_SCALING) if g > 0 else 1.0
            Ps *= g
            c_s *= g
            cs *= g
        return D, E, cs

    def rho_vec(self) -> np.ndarray:
        r = np.full(self.prob.n_cons, self.rho)
        r[self.eq] = RHO_EQ_SCALE * self.rho
        r[self.free] = RHO_MIN
        return r

    def _factor(self):
        self.rv = self.rho_vec()
        K = self.P + self.st.sigma * np.eye(self.prob.n_vars) + self.A.T @ (self.rv[:, None] * self.A)
        try:
            self.chol = sla.cho_factor(K, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            self.chol = None

    def unscale(self, xs, zs, ys):
        x = self.D * xs
        z = zs / self.E
        y = self.E * ys / self.cscale
        return x, z, y

    def residuals(self, x, z, y):
        """Unscaled primal/dual residuals and their tolerance normalizers."""
        p = self.prob
        Ax = p.A @ x
        Px = p.P @ x
        Aty = p.A.T @ y
        fin = ~self.free
        prim = np.abs(Ax[fin] - z[fin]).max(initial=0.0)
        dual = np.abs(Px + p.c + Aty).max(initial=0.0)
        prim_norm = max(np.abs(Ax[fin]).max(initial=0.0), np.abs(z[fin]).max(initial=0.0))
        dual_norm = max(np.abs(Px).max(initial=0.0), np.abs(Aty).max(initial=0.0), np.abs(p.c).max(initial=0.0))
        return prim, dual, prim_norm, dual_norm


def _project(v, l, u):
    return np.minimum(np.maximum(v, l), u)


def _kkt_solve(ws: _Workspace, low, upp):
    """Equality-constrained KKT solve with the rows in ``low | upp`` held at their bounds."""
    st = ws.st
    act = np.flatnonzero(low | upp)
    d = ws.prob.n_vars
    Aact = ws.A[act]
    bact = np.where(low[act], ws.l[act], ws.u[act])
    k = len(act)
    K = np.zeros((d + k, d + k))
    K[:d, :d] = ws.P
    K[:d, d:] = Aact.T
    K[d:, :d] = Aact
    Kreg = K.copy()
    Kreg[np.arange(d), np.arange(d)] += st.polish_delta
    Kreg[np.arange(d, d + k), np.arange(d, d + k)] -= st.polish_delta
    rhs = np.concatenate([-ws.c, bact])
    try:
        lu = sla.lu_factor(Kreg, check_finite=False)
    except (np.linalg.LinAlgError, ValueError):
        return None
    sol = sla.lu_solve(lu, rhs, check_finite=False)
    for _ in range(st.polish_refine_iter):
        sol = sol + sla.lu_solve(lu, rhs - K @ sol, check_finite=False)
    if not np.all(np.isfinite(sol)):
        return None
    ys = np.zeros(ws.prob.n_cons)
    ys[act] = sol[d:]
    return sol[:d], ys


def _polish(ws: _Workspace, xs, zs, ys):
    """Refine the ADMM iterate on a guessed active set.

    Starts from the ADMM guess and runs a few primal-dual active-set rounds:
    rows whose multiplier has the wrong sign are released, violated rows are
    added at the violated bound. Yields the scaled ``(x, y)`` of every round.
    """
    low = ws.eq | ((zs - ws.l) < -ys)
    upp = ~low & ((ws.u - zs) < ys)
    low &= ~ws.free
    upp &= ~ws.free
    for _ in range(ws.st.polish_rounds):
        res = _kkt_solve(ws, low, upp)
        if res is None:
            return
        xp, yp = res
        yield xp, yp
        # classify in unscaled units against a fraction of the acceptance tolerances
        x, z_cl, y = ws.unscale(xp, ws.A @ xp, yp)
        z = ws.prob.A @ x
        _, _, pn, dn = ws.residuals(x, _project(z, ws.prob.l, ws.prob.u), y)
        ptol = 0.1 * (ws.st.eps_abs + ws.st.eps_rel * pn)
        ytol = 0.1 * (ws.st.eps_abs + ws.st.eps_rel * dn)
        act = low | upp
        viol_low = ~act & ~ws.free & (z < ws.prob.l - ptol)
        viol_upp = ~act & ~ws.free & (z > ws.prob.u + ptol)
        bad_low = low & ~ws.eq & (y > ytol)
        bad_upp = upp & ~ws.eq & (y < -ytol)
        if not (viol_low.any() or viol_upp.any() or bad_low.any() or bad_upp.any()):
            return
        low = (low & ~bad_low) | viol_low
        upp = (upp & ~bad_upp) | viol_upp


def solve(problem: QpProblem, settings: SolverSettings | None = None) -> QpSolution:
    """Solve a convex QP; see :class:`QpSolution` for the returned diagnostics."""
    st = settings or SolverSettings()
    d, m = problem.n_vars, problem.n_cons
    if d == 0:
        return QpSolution(np.zeros(0), np.zeros(m), Status.SOLVED, 0.0, 0.0, 0, 0.0)
    ws = _Workspace(problem, st)
    if ws.chol is None:
        return _failure(problem, m, 0)

    xs = np.zeros(d)
    zs = _project(np.zeros(m), ws.l, ws.u)
    ys = np.zeros(m)
    history = []
    rho_updates = 0
    prev_key = tried_key = None
    best = None
    alpha, sigma = st.alpha, st.sigma

    for it in range(1, st.max_iter + 1):
        rv = ws.rv
        rhs = sigma * xs - ws.c + ws.A.T @ (rv * zs - ys)
        xt = sla.cho_solve(ws.chol, rhs, check_finite=False)
        zt = ws.A @ xt
        xs = alpha * xt + (1.0 - alpha) * xs
        zr = alpha * zt + (1.0 - alpha) * zs
        z_new = _project(zr + ys / rv, ws.l, ws.u)
        ys = ys + rv * (zr - z_new)
        zs = z_new

        if st.record_history:
            history.append(problem.objective(ws.D * xs))

        if it % st.check_interval and it != st.max_iter:
            continue
        if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(ys))):
            return _failure(problem, m, it)
        x, z, y = ws.unscale(xs, zs, ys)
        prim, dual, pn, dn = ws.residuals(x, z, y)
        eps_p = st.eps_abs + st.eps_rel * pn
        eps_d = st.eps_abs + st.eps_rel * dn
        if best is None or max(prim / eps_p, dual / eps_d) < best[0]:
            best = (max(prim / eps_p, dual / eps_d), x, y, prim, dual)
        converged = prim <= eps_p and dual <= eps_d

        if st.polish:
            # polish once the active-set guess has stopped moving
            key = (
                np.flatnonzero((zs - ws.l) < -ys).tobytes(),
                np.flatnonzero((ws.u - zs) < ys).tobytes(),
            )
            # the active-set walk is costly, so it waits until ADMM is close or slow
            walk = max(prim / eps_p, dual / eps_d) <= WALK_RATIO or it >= WALK_AFTER
            if (key == prev_key or converged) and (key, walk) != tried_key:
                tried_key = (key, walk)
                out = _try_polish(ws, problem, xs, zs, ys, st, it, rho_updates, history, walk)
                if out is not None:
                    return out
            prev_key = key
        if converged:
            return QpSolution(x, y, Status.SOLVED, prim, dual, it, problem.objective(x),
                              rho_updates=rho_updates, history=history)

        if st.adaptive_rho and it % st.adaptive_rho_interval == 0:
            new_rho = _rho_estimate(ws, prim, dual, eps_p, eps_d)
            if new_rho > 5 * ws.rho or new_rho < 0.2 * ws.rho:
                ws.rho = new_rho
                ws._factor()
                rho_updates += 1
                if ws.chol is None:
                    return _failure(problem, m, it)

    _, x, y, prim, dual = best
    return QpSolution(x, y, Status.MAX_ITER, prim, dual, st.max_iter, problem.objective(x),
                      rho_updates=rho_updates, history=history)


def _certify(ws: _Workspace, xs_p, ys_p):
    """Unscaled ``(x, y, prim, dual)`` if ``xs_p`` passes the KKT test, else ``None``.

    Multipliers from the reduced KKT solve are tried first; when the active rows
    are (nearly) dependent those are not unique and may carry the wrong sign, so
    sign-constrained multipliers are then fitted by non-negative least squares on
    the rows sitting at their bounds.
    """
    st, prob = ws.st, ws.prob
    x = ws.D * xs_p
    Ax = prob.A @ x
    z = _project(Ax, prob.l, prob.u)
    y = ws.E * ys_p / ws.cscale
    prim, dual, pn, dn = ws.residuals(x, z, y)
    eps_p = st.eps_abs + st.eps_rel * pn
    eps_d = st.eps_abs + st.eps_rel * dn
    if prim > eps_p:
        return None
    at_low = ~ws.free & (Ax - prob.l <= eps_p)
    at_upp = ~ws.free & (prob.u - Ax <= eps_p)
    y = np.where(at_low, np.minimum(y, 0.0), 0.0) + np.where(at_upp, np.maximum(y, 0.0), 0.0)
    _, dual, _, dn = ws.residuals(x, z, y)
    eps_d = st.eps_abs + st.eps_rel * dn
    if dual <= eps_d:
        return x, y, prim, dual
    lo, up = np.flatnonzero(at_low), np.flatnonzero(at_upp)
    if lo.size + up.size == 0:
        return None
    g = ws.P @ xs_p + ws.c
    M = np.hstack([-ws.A[lo].T, ws.A[up].T])
    coef, _ = nnls(M, -g, maxiter=50 * M.shape[1])
    ys = np.zeros(prob.n_cons)
    ys[lo] -= coef[: lo.size]
    ys[up] += coef[lo.size:]
    y = ws.E * ys / ws.cscale
    _, dual, _, dn = ws.residuals(x, z, y)
    if dual <= st.eps_abs + st.eps_rel * dn:
        return x, y, prim, dual
    return None


def _primal_active_set(ws: _Workspace, xs, max_iter: int):
    """Primal active-set iterations from a feasible scaled point ``xs``.

    Yields the scaled ``(x, y)`` at each face minimizer reached.
    """
    A, l, u = ws.A, ws.l, ws.u
    Ax = A @ xs
    tol = 1e-12 * np.maximum(1.0, np.abs(Ax))
    low = ~ws.free & ((Ax - l <= tol) | ws.eq)
    upp = ~ws.free & ~low & (u - Ax <= tol)
    x = xs.copy()
    for _ in range(max_iter):
        res = _kkt_solve(ws, low, upp)
        if res is None:
            return
        xe, ye = res
        p = xe - x
        if np.abs(p).max(initial=0.0) <= 1e-12 * max(1.0, np.abs(x).max(initial=0.0)):
            yield xe, ye
            wrong = np.where(low & ~ws.eq, ye, 0.0).clip(min=0.0) - np.where(upp, ye, 0.0).clip(max=0.0)
            k = int(np.argmax(wrong))
            if wrong[k] <= 0:
                return
            low[k] = upp[k] = False
            x = xe
            continue
        Ax, Ap = A @ x, A @ p
        act = low | upp | ws.free
        with np.errstate(divide="ignore", invalid="ignore"):
            t_low = np.where(~act & (Ap < 0), (l - Ax) / Ap, np.inf)
            t_upp = np.where(~act & (Ap > 0), (u - Ax) / Ap, np.inf)
        t = np.minimum(t_low, t_upp)
        k = int(np.argmin(t))
        step = min(1.0, max(t[k], 0.0))
        x = x + step * p
        if step < 1.0:
            if t_low[k] <= t_upp[k]:
                low[k] = True
            else:
                upp[k] = True


def _try_polish(ws, problem, xs, zs, ys, st, it, rho_updates, history, walk=True):
    def done(out):
        x, y, prim, dual = out
        return QpSolution(x, y, Status.SOLVED, prim, dual, it, problem.objective(x), polished=True,
                          rho_updates=rho_updates, history=history)

    for xs_p, ys_p in _polish(ws, xs, zs, ys):
        out = _certify(ws, xs_p, ys_p)
        if out is not None:
            return done(out)
        x = ws.D * xs_p
        Ax = problem.A @ x
        if walk and np.abs(Ax - _project(Ax, problem.l, problem.u))[~ws.free].max(initial=0.0) <= 1e-12 * max(
            1.0, np.abs(Ax).max(initial=0.0)
        ):
            # feasible but not optimal: walk to the optimum from here
            for xs_a, ys_a in _primal_active_set(ws, xs_p, st.polish_rounds * 4):
                out = _certify(ws, xs_a, ys_a)
                if out is not None:
                    return done(out)
            return None
    return None


def _rho_estimate(ws: _Workspace, prim, dual, eps_p, eps_d) -> float:
    """Rebalance the penalty so both residuals approach their tolerances at the same pace."""
    ratio = (prim / eps_p) / max(dual / eps_d, 1e-30)
    return float(np.clip(ws.rho * np.sqrt(ratio), RHO_MIN, RHO_MAX))


def _failure(problem, m, it):
    d = problem.n_vars
    return QpSolution(np.full(d, np.nan), np.full(m, np.nan), Status.NUMERICAL_FAILURE,
                      np.inf, np.inf, it, np.nan)


def solve_box(P, c, lb, ub, settings: SolverSettings | None = None) -> QpSolution:
    """Box-constrained special case ``lb <= x <= ub``."""
    c = np.asarray(c, dtype=float).ravel()
    return solve(QpProblem(P, c, np.eye(c.size), lb, ub), settings)
