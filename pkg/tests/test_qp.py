import numpy as np
import pytest

from oracles import dual_projected_gradient, grid_minimum_2d, random_qp
from kernelvar.qp import QpProblem, SolverSettings, Status, solve, solve_box


def test_clipped_scalar():
    sol = solve_box([[2.0]], [-6.0], [-1.0], [1.0])
    assert sol.solved
    assert sol.x[0] == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("target, lo, hi", [(3.0, -1.0, 1.0), (-3.0, -1.0, 1.0), (0.25, -1.0, 1.0), (2.0, 2.0, 2.0)])
def test_scalar_cases(target, lo, hi):
    sol = solve_box([[1.0]], [-target], [lo], [hi])
    assert sol.x[0] == pytest.approx(min(max(target, lo), hi), abs=1e-6)


def test_unconstrained(rng):
    M = rng.normal(size=(4, 4))
    P = M.T @ M + 0.5 * np.eye(4)
    c = rng.normal(size=4)
    sol = solve(QpProblem(P, c, np.eye(4), np.full(4, -np.inf), np.full(4, np.inf)))
    assert sol.solved
    np.testing.assert_allclose(sol.x, -np.linalg.solve(P, c), atol=1e-6)


def test_inactive_box_matches_stationarity(rng):
    P = np.diag([1.0, 2.0, 4.0])
    c = np.array([0.1, -0.2, 0.3])
    sol = solve_box(P, c, np.full(3, -10.0), np.full(3, 10.0))
    st = SolverSettings()
    np.testing.assert_allclose(sol.x, -c / np.diag(P), atol=10 * st.eps_abs)


def test_box_examples():
    sol = solve_box(np.eye(2), np.zeros(2), -np.ones(2), np.ones(2))
    np.testing.assert_allclose(sol.x, 0.0, atol=1e-9)
    sol = solve_box(np.eye(2), [-10.0, 10.0], -np.ones(2), np.ones(2))
    np.testing.assert_allclose(sol.x, [1.0, -1.0], atol=1e-9)


@pytest.mark.parametrize("seed", range(50))
def test_random_qp_against_dual_oracle(seed):
    rng = np.random.default_rng(seed)
    P, c, A, l, u = random_qp(rng)
    sol = solve(QpProblem(P, c, A, l, u))
    assert sol.solved
    ref, _ = dual_projected_gradient(P, c, A, l, u)
    assert abs(sol.objective - ref) <= 1e-5 * max(abs(ref), 1.0)
    ax = A @ sol.x
    tol = 1e-8 + 1e-8 * np.abs(ax).max()
    assert np.all(ax >= l - tol) and np.all(ax <= u + tol)


@pytest.mark.parametrize("seed", range(5))
def test_box_against_grid(seed):
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(2, 2))
    P = M.T @ M + 0.05 * np.eye(2)
    c = rng.normal(size=2) * 2
    lo = -rng.uniform(0.1, 1, 2)
    hi = rng.uniform(0.1, 1, 2)
    sol = solve_box(P, c, lo, hi)

    def f(X):
        return 0.5 * np.einsum("ij,jk,ik->i", X, P, X) + X @ c

    best, _ = grid_minimum_2d(f, lo, hi)
    h = 1e-3 * (hi - lo)
    bound = 0.5 * np.linalg.eigvalsh(P)[-1] * np.sum((h / 2) ** 2)
    assert sol.objective <= best + 1e-9
    assert best - sol.objective <= bound + 1e-9


def test_psd_singular_p(rng):
    # rank-one P: the box decides the minimizer along the flat direction
    v = np.array([1.0, 1.0]) / np.sqrt(2)
    P = np.outer(v, v)
    c = np.array([-1.0, 0.0])
    sol = solve_box(P, c, np.array([-1.0, -1.0]), np.array([1.0, 1.0]))
    assert sol.solved
    ref = min(0.5 * (a + b) ** 2 / 2 - a for a in np.linspace(-1, 1, 401) for b in np.linspace(-1, 1, 401))
    assert sol.objective <= ref + 1e-9


def test_deterministic(rng):
    P, c, A, l, u = random_qp(rng, 5, 7)
    a = solve(QpProblem(P, c, A, l, u))
    b = solve(QpProblem(P, c, A, l, u))
    np.testing.assert_array_equal(a.x, b.x)
    assert a.iterations == b.iterations


def test_objective_trend_without_polish(rng):
    P, c, A, l, u = random_qp(rng, 6, 8)
    st = SolverSettings(polish=False, record_history=True, adaptive_rho=False, eps_abs=1e-10, eps_rel=1e-10, max_iter=3000)
    sol = solve(QpProblem(P, c, A, l, u), st)
    h = np.array(sol.history)
    assert len(h) >= 200
    # compare averages of consecutive 100-iteration windows after the transient
    blocks = [h[i:i + 100].mean() for i in range(100, len(h) - 99, 100)]
    final = h[-1]
    excess = np.abs(np.array(blocks) - final)
    assert np.all(np.diff(excess) <= 1e-6 * max(1.0, abs(final)))


def test_max_iter_reports_best_iterate(rng):
    P, c, A, l, u = random_qp(rng, 6, 8)
    sol = solve(QpProblem(P, c, A, l, u), SolverSettings(max_iter=3, polish=False))
    assert sol.status is Status.MAX_ITER
    assert np.all(np.isfinite(sol.x))


@pytest.mark.parametrize(
    "kwargs",
    [dict(rho=0.0), dict(sigma=-1.0), dict(alpha=2.0), dict(eps_abs=0.0, eps_rel=0.0), dict(max_iter=0)],
)
def test_settings_validation(kwargs):
    with pytest.raises(ValueError):
        SolverSettings(**kwargs)


def test_problem_validation():
    with pytest.raises(ValueError):
        QpProblem([[1.0, 2.0], [0.0, 1.0]], [0.0, 0.0], np.eye(2), [0, 0], [1, 1])
    with pytest.raises(ValueError):
        QpProblem(np.eye(2), [0.0, 0.0], np.eye(2), [1, 0], [0, 1])
    with pytest.raises(ValueError):
        QpProblem(np.eye(2), [0.0, 0.0], np.eye(2), [0, 0], [1])


def test_degenerate_equality_rows(rng):
    # many rows pinned to zero plus a nearly singular quadratic, as in training with zero headroom
    T = 12
    K = rng.normal(size=(T, 3))
    G = K @ K.T + 1e-12 * np.eye(T)
    d = T + 1
    P = np.zeros((d, d))
    P[:T, :T] = G @ G + 1e-4 * G
    P[:T, T] = P[T, :T] = G.sum(axis=1)
    P[T, T] = T
    P = 0.5 * (P + P.T)
    c = np.concatenate([G @ rng.normal(size=T), [0.3]])
    A = np.hstack([G, np.ones((T, 1))])
    ub = np.where(rng.random(T) < 0.5, 0.0, 0.2)
    sol = solve(QpProblem(P, c, A, -ub, ub))
    assert sol.solved
    ax = A @ sol.x
    assert np.all(np.abs(ax) <= ub + 1e-8)
