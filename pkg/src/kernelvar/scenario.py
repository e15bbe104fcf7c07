"""Load/solar time series: ingestion, synthesis, reactive limits and per-inverter features."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ._io import atomic_write
from .feeder import FeederTopology, line_flow_features

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-8
TIMESERIES_HEADER = ["t_min", "bus", "p_load_pu", "q_load_pu", "p_solar_pu"]
MINUTES_PER_DAY = 1440


class TimeseriesError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ScenarioRecord:
    t_min: int
    p_g: np.ndarray
    p_c: np.ndarray
    q_c: np.ndarray

    def __post_init__(self):
        if np.any(self.p_g < 0) or np.any(self.p_c < 0):
            raise TimeseriesError(f"negative active power at minute {self.t_min}")


def reactive_limit(s_bar: float, p_g: float) -> float:
    """Reactive headroom ``sqrt(s_bar^2 - p_g^2)``; 0 (with a warning) when ``p_g > s_bar``."""
    if s_bar < 0 or p_g < 0:
        raise ValueError(f"s_bar and p_g must be non-negative, got {s_bar}, {p_g}")
    if p_g > s_bar:
        warnings.warn(f"solar output {p_g} exceeds rating {s_bar}; reactive limit clipped to 0", RuntimeWarning)
        return 0.0
    return float(np.sqrt(s_bar * s_bar - p_g * p_g))


def reactive_limits(s_bar: np.ndarray, p_g: np.ndarray) -> np.ndarray:
    """Vectorized :func:`reactive_limit`; broadcasts ``s_bar`` over leading axes of ``p_g``."""
    s_bar = np.asarray(s_bar, dtype=float)
    p_g = np.asarray(p_g, dtype=float)
    if np.any(s_bar < 0) or np.any(p_g < 0):
        raise ValueError("s_bar and p_g must be non-negative")
    over = p_g > s_bar
    if np.any(over):
        warnings.warn(
            f"{int(over.sum())} solar readings exceed inverter ratings; reactive limits clipped to 0",
            RuntimeWarning,
        )
    return np.sqrt(np.maximum(s_bar * s_bar - p_g * p_g, 0.0))


@dataclass(frozen=True, eq=False)
class ScenarioWindow:
    """T consecutive scenarios stacked row-wise (arrays of shape ``(T, N)``)."""

    t_min: np.ndarray
    p_g: np.ndarray
    p_c: np.ndarray
    q_c: np.ndarray
    q_bar: np.ndarray

    def __post_init__(self):
        if len(self.t_min) < 1:
            raise TimeseriesError("a scenario window needs at least one record")

    @classmethod
    def from_records(cls, records: Sequence[ScenarioRecord], topology: FeederTopology) -> "ScenarioWindow":
        if not records:
            raise TimeseriesError("a scenario window needs at least one record")
        p_g = np.vstack([r.p_g for r in records])
        return cls(
            t_min=np.array([r.t_min for r in records]),
            p_g=p_g,
            p_c=np.vstack([r.p_c for r in records]),
            q_c=np.vstack([r.q_c for r in records]),
            q_bar=reactive_limits(topology.inverter_ratings, p_g),
        )

    @property
    def T(self) -> int:
        return len(self.t_min)

    def subset(self, idx) -> "ScenarioWindow":
        idx = np.asarray(idx)
        return ScenarioWindow(self.t_min[idx], self.p_g[idx], self.p_c[idx], self.q_c[idx], self.q_bar[idx])


# ---------------------------------------------------------------------------
# time series I/O


def load_timeseries(path, n_buses: int | None = None) -> list[ScenarioRecord]:
    """Read ``timeseries.csv`` (``t_min,bus,p_load_pu,q_load_pu,p_solar_pu``).

    Missing (bus, minute) cells and whole missing minutes inside the covered
    range are filled with zeros and reported with a warning. An empty
    ``q_load_pu`` cell reads as 0.
    """
    path = Path(path)
    cells: dict[tuple[int, int], tuple[float, float, float]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        header = [h.strip() for h in header]
        if header != TIMESERIES_HEADER:
            raise TimeseriesError(f"{path}: expected header {TIMESERIES_HEADER}, got {header}")
        for row in reader:
            lineno = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 5:
                raise TimeseriesError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
            try:
                t, bus = int(row[0]), int(row[1])
                p_load = float(row[2])
                q_load = float(row[3]) if row[3].strip() else 0.0
                p_solar = float(row[4])
            except ValueError:
                raise TimeseriesError(f"{path}:{lineno}: malformed row {row}") from None
            if not all(np.isfinite(v) for v in (p_load, q_load, p_solar)):
                raise TimeseriesError(f"{path}:{lineno}: non-finite value")
            if bus < 1 or (n_buses is not None and bus > n_buses):
                raise TimeseriesError(f"{path}:{lineno}: bus {bus} out of range")
            if p_load < 0 or p_solar < 0:
                raise TimeseriesError(f"{path}:{lineno}: negative active power")
            if (t, bus) in cells:
                raise TimeseriesError(f"{path}:{lineno}: duplicate entry for minute {t}, bus {bus}")
            cells[(t, bus)] = (p_load, q_load, p_solar)
    if not cells:
        return []
    n = n_buses if n_buses is not None else max(b for _, b in cells)
    t_lo = min(t for t, _ in cells)
    t_hi = max(t for t, _ in cells)
    n_minutes = t_hi - t_lo + 1
    data = np.zeros((n_minutes, 3, n))
    for (t, bus), vals in cells.items():
        data[t - t_lo, :, bus - 1] = vals
    missing = n_minutes * n - len(cells)
    if missing:
        warnings.warn(f"{path}: {missing} missing (minute, bus) cells filled with zeros", RuntimeWarning)
    return [
        ScenarioRecord(t_min=t_lo + i, p_c=data[i, 0].copy(), q_c=data[i, 1].copy(), p_g=data[i, 2].copy())
        for i in range(n_minutes)
    ]


def write_timeseries(records: Sequence[ScenarioRecord], path) -> None:
    with atomic_write(path, newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TIMESERIES_HEADER)
        for rec in records:
            for n in range(len(rec.p_g)):
                w.writerow([rec.t_min, n + 1, repr(float(rec.p_c[n])), repr(float(rec.q_c[n])), repr(float(rec.p_g[n]))])


def stack_records(records: Sequence[ScenarioRecord]) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """``(t_min, p_g, p_c, q_c)`` as arrays with one row per record."""
    return (
        np.array([r.t_min for r in records]),
        np.vstack([r.p_g for r in records]),
        np.vstack([r.p_c for r in records]),
        np.vstack([r.q_c for r in records]),
    )


def _unstack(t, p_g, p_c, q_c) -> list[ScenarioRecord]:
    return [ScenarioRecord(int(t[i]), p_g[i].copy(), p_c[i].copy(), q_c[i].copy()) for i in range(len(t))]


def scale_profiles(records, target_peak_fraction: float, benchmark_peaks) -> list[ScenarioRecord]:
    """Rescale each bus so its peak load is ``target_peak_fraction * benchmark_peaks[n]``.

    Solar output at the bus is multiplied by the same factor. Buses with a
    benchmark peak of 0 are left untouched.
    """
    t, p_g, p_c, q_c = stack_records(records)
    peaks = np.asarray(benchmark_peaks, dtype=float)
    factor = np.ones(p_c.shape[1])
    for n in np.flatnonzero(peaks > 0):
        cur = p_c[:, n].max()
        if cur <= 0:
            raise TimeseriesError(f"bus {n + 1} has an all-zero load series and cannot be scaled")
        factor[n] = target_peak_fraction * peaks[n] / cur
    return _unstack(t, p_g * factor, p_c * factor, q_c * factor)


def draw_reactive_loads(records, pf_range=(0.90, 0.95), seed=None, power_factors=None) -> list[ScenarioRecord]:
    """Fill ``q_c`` from ``p_c`` with one lagging power factor per bus.

    Power factors are drawn uniformly from ``pf_range`` unless given explicitly.
    """
    if not records:
        raise TimeseriesError("no records to assign reactive loads to")
    lo, hi = pf_range
    if not (0 < lo <= hi <= 1):
        raise ValueError(f"power-factor range must lie in (0, 1], got {pf_range}")
    t, p_g, p_c, _ = stack_records(records)
    if power_factors is None:
        power_factors = np.random.default_rng(seed).uniform(lo, hi, size=p_c.shape[1])
    pf = np.asarray(power_factors, dtype=float)
    q_c = p_c * np.tan(np.arccos(pf))
    return _unstack(t, p_g, p_c, q_c)


# ---------------------------------------------------------------------------
# synthetic day


@dataclass
class SynthesisOptions:
    """Knobs of the synthetic minute-resolution day.

    Times are minutes after midnight; ``load_peaks`` are per-bus peak active
    loads in p.u. (defaults to the inverter rating when omitted).
    """

    solar_noon_min: float = 780.0
    daylight_min: float = 720.0
    clear_sky_peak: float = 0.8
    cloud_noise: float = 0.0
    cloud_timescale_min: float = 6.0
    load_peaks: np.ndarray | None = None
    load_jitter: float = 0.03
    morning_peak_min: float = 450.0
    evening_peak_min: float = 1170.0
    base_load: float = 0.35


def _smooth_noise(rng: np.random.Generator, n: int, width: float) -> np.ndarray:
    """Unit-variance Gaussian-filtered white noise."""
    pad = int(4 * width) + 1
    white = rng.standard_normal(n + 2 * pad)
    k = np.arange(-pad, pad + 1)
    kern = np.exp(-0.5 * (k / width) ** 2)
    kern /= np.sqrt(np.sum(kern**2))
    return np.convolve(white, kern, mode="valid")[:n]


def clear_sky_shape(t_min: np.ndarray, noon: float, daylight: float) -> np.ndarray:
    return np.maximum(np.cos(np.pi * (np.asarray(t_min, dtype=float) - noon) / daylight), 0.0)


def residential_shape(t_min: np.ndarray, morning: float, evening: float, base: float) -> np.ndarray:
    """Two-hump daily load shape normalized to a maximum of 1."""
    t = np.asarray(t_min, dtype=float)
    grid = np.arange(MINUTES_PER_DAY, dtype=float)

    def raw(s):
        return base + 0.35 * np.exp(-(((s - morning) / 80.0) ** 2)) + 0.65 * np.exp(-(((s - evening) / 130.0) ** 2))

    return raw(t) / raw(grid).max()


def synthesize_day(topology: FeederTopology, seed: int, options: SynthesisOptions | None = None) -> list[ScenarioRecord]:
    """1440 minute records of solar output and active load (``q_c`` left at 0).

    Solar follows a truncated cosine scaled by the inverter rating and the
    clear-sky peak, attenuated by a feeder-wide cloud process; loads follow a
    morning/evening residential shape with slow per-bus jitter.
    """
    opts = options or SynthesisOptions()
    rng = np.random.default_rng(seed)
    n = topology.n_buses
    t = np.arange(MINUTES_PER_DAY)
    s_bar = topology.inverter_ratings
    peaks = s_bar if opts.load_peaks is None else np.asarray(opts.load_peaks, dtype=float)

    shape = clear_sky_shape(t, opts.solar_noon_min, opts.daylight_min)
    cloud_common = _smooth_noise(rng, MINUTES_PER_DAY, opts.cloud_timescale_min)
    cloud_local = np.column_stack([_smooth_noise(rng, MINUTES_PER_DAY, opts.cloud_timescale_min) for _ in range(n)])
    # cloud cover in [0, 1]: passing clouds when the smoothed process is positive
    cover = np.clip(0.8 * cloud_common[:, None] + 0.3 * cloud_local, 0.0, 1.0)
    attenuation = 1.0 - opts.cloud_noise * cover
    p_g = opts.clear_sky_peak * shape[:, None] * s_bar[None, :] * attenuation
    p_g = np.minimum(np.maximum(p_g, 0.0), s_bar[None, :])

    load = np.empty((MINUTES_PER_DAY, n))
    for b in range(n):
        shift = rng.uniform(-30.0, 30.0)
        base = residential_shape(t - shift, opts.morning_peak_min, opts.evening_peak_min, opts.base_load)
        jitter = 1.0 + opts.load_jitter * _smooth_noise(rng, MINUTES_PER_DAY, 20.0)
        load[:, b] = peaks[b] * np.maximum(base * jitter, 0.0)
    q_c = np.zeros_like(load)
    return _unstack(t, p_g, load, q_c)


def reference_day(topology: FeederTopology, benchmark_peaks, seed: int, options: SynthesisOptions | None = None):
    """Seeded synthetic day with loads at half the benchmark peaks and drawn reactive loads.

    Partly cloudy by default (cloud noise 0.5, clear-sky peak 0.9).
    """
    peaks = 0.5 * np.asarray(benchmark_peaks, dtype=float)
    opts = options or SynthesisOptions(cloud_noise=0.5, clear_sky_peak=0.9)
    opts = SynthesisOptions(**{**opts.__dict__, "load_peaks": peaks})
    ss = np.random.SeedSequence(seed)
    day_seed, pf_seed = (int(c.generate_state(1)[0]) for c in ss.spawn(2))
    return draw_reactive_loads(synthesize_day(topology, day_seed, opts), seed=pf_seed)


# ---------------------------------------------------------------------------
# features


@dataclass(frozen=True)
class FeatureSelector:
    """Which grid quantities feed each inverter rule.

    ``local``: ``[p_g, q_bar, p_c, q_c]`` at the inverter's bus; ``global``: the
    full ``(p_c, q_c, p_g)`` vector; ``hybrid``: local plus active flows on
    ``lines``.
    """

    mode: str = "local"
    lines: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if self.mode not in ("local", "global", "hybrid"):
            raise ValueError(f"unknown feature mode {self.mode!r}")
        if self.mode == "hybrid" and not self.lines:
            raise ValueError("hybrid features need at least one line")

    @classmethod
    def parse(cls, text: str) -> "FeatureSelector":
        """``local``, ``global`` or ``hybrid:1-2,1-3,1-5``."""
        mode, _, rest = text.partition(":")
        mode = mode.strip().lower()
        lines = tuple(s.strip() for s in rest.split(",") if s.strip()) if rest else ()
        return cls(mode, lines)

    def __str__(self):
        return self.mode if self.mode != "hybrid" else "hybrid:" + ",".join(str(s) for s in self.lines)

    def dimension(self, topology: FeederTopology) -> int:
        if self.mode == "global":
            return 3 * topology.n_buses
        return 4 + (len(self.lines) if self.mode == "hybrid" else 0)


def select_features(
    window: ScenarioWindow, selector: FeatureSelector, topology: FeederTopology, buses: Sequence[int] | None = None
) -> dict[int, np.ndarray]:
    """Per-inverter feature matrices ``{bus: (T, M_n)}``."""
    buses = topology.inverter_buses if buses is None else list(buses)
    for b in buses:
        if not 1 <= b <= topology.n_buses or topology.inverter_ratings[b - 1] <= 0:
            raise ValueError(f"bus {b} has no inverter")
    out = {}
    if selector.mode == "global":
        z = np.hstack([window.p_c, window.q_c, window.p_g])
        return {b: z for b in buses}
    flows = None
    if selector.mode == "hybrid":
        flows = line_flow_features(topology, window.p_g, window.p_c, selector.lines)
    for b in buses:
        i = b - 1
        local = np.column_stack([window.p_g[:, i], window.q_bar[:, i], window.p_c[:, i], window.q_c[:, i]])
        out[b] = local if flows is None else np.hstack([local, flows])
    return out


@dataclass(frozen=True, eq=False)
class FeatureStandardizer:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, z: np.ndarray) -> np.ndarray:
        return (np.asarray(z, dtype=float) - self.mean) / self.std

    def invert(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=float) * self.std + self.mean


def fit_standardizer(features: np.ndarray) -> FeatureStandardizer:
    Z = np.atleast_2d(np.asarray(features, dtype=float))
    if Z.shape[0] < 2:
        raise ValueError("standardization needs at least two training scenarios")
    return FeatureStandardizer(mean=Z.mean(axis=0), std=np.maximum(Z.std(axis=0), STD_FLOOR))
