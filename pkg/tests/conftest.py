import numpy as np
import pytest

from kernelvar.feeder import FeederTopology, Line


def shuffled_tree(n, rng, rating=0.5):
    """Random radial feeder whose lines are listed in random order and orientation."""
    perm = np.concatenate([[0], rng.permutation(n) + 1])
    lines = []
    for k in range(1, n + 1):
        u, v = int(perm[rng.integers(0, k)]), int(perm[k])
        if rng.random() < 0.5:
            u, v = v, u
        lines.append(Line(u, v, float(rng.uniform(0.01, 0.1)), float(rng.uniform(0.01, 0.1))))
    order = rng.permutation(n)
    return FeederTopology(n_buses=n, lines=tuple(lines[i] for i in order), inverter_ratings=np.full(n, rating))


def root_paths(topology):
    """Set of line indices on each bus's path to the substation, by plain graph search."""
    adj = {b: [] for b in range(topology.n_buses + 1)}
    for k, ln in enumerate(topology.lines):
        adj[ln.from_bus].append((ln.to_bus, k))
        adj[ln.to_bus].append((ln.from_bus, k))
    paths = {0: frozenset()}
    stack = [0]
    while stack:
        u = stack.pop()
        for v, k in adj[u]:
            if v not in paths:
                paths[v] = paths[u] | {k}
                stack.append(v)
    return paths


def chain(r, x, ratings=None):
    n = len(r)
    lines = tuple(Line(i, i + 1, r[i], x[i]) for i in range(n))
    return FeederTopology(n_buses=n, lines=lines, inverter_ratings=np.zeros(n) if ratings is None else ratings)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


class Day:
    """Reference synthetic day on the bundled feeder with cached model matrices."""

    def __init__(self, seed=7, lam=0.5):
        from kernelvar.feeder import build_cost_transform, build_sensitivities, ieee13_feeder
        from kernelvar.scenario import ScenarioWindow, reference_day

        self.topo, self.peaks = ieee13_feeder()
        self.records = reference_day(self.topo, self.peaks, seed)
        self.sens = build_sensitivities(self.topo)
        self.transform = build_cost_transform(self.sens, lam)
        self.full = ScenarioWindow.from_records(self.records, self.topo)

    def window(self, end, T=30):
        return self.full.subset(np.arange(end - T, end))


@pytest.fixture(scope="session")
def day():
    return Day()
