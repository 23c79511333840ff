"""Shipped synthetic scenarios.

Three families:

* two-OD delay toys (``immediate`` / ``lagged`` sensor layouts) where link
  traversal takes exactly one interval, so counts land either in the
  departure interval or one interval later with no fractional spill;
* an eight-segment freeway stretch with an off-ramp bottleneck whose queue
  cascades back to the entry segment mid-horizon;
* a medium multi-corridor grid (200 ODs, 50 sensors) with block-sparse
  gradient structure.

Demand realizations are seeded: a lognormal fluctuation with AR(1)
persistence around the mean profile, so deviations from the historical
profile are temporally correlated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .network import DemandTable, Network, Route, Segment, Sensor

__all__ = ["DemandModel", "Scenario", "build_delay_toy",
           "build_congested_toy", "build_medium_grid"]


@dataclass(frozen=True)
class DemandModel:
    """Mean demand profile plus a seeded multiplicative fluctuation model.

    ``profile`` is (H, n) vehicles/hour. A realization draws a standard
    normal AR(1) path z per OD (persistence ``rho``) and scales the profile
    by exp(sigma * z - sigma^2 / 2), which keeps the mean at the profile.
    ``sigma of 0`` reproduces the profile exactly.
    """

    profile: np.ndarray
    sigma: np.ndarray
    rho: float = 0.0

    def __post_init__(self):
        profile = np.asarray(self.profile, dtype=float)
        sigma = np.broadcast_to(np.asarray(self.sigma, dtype=float),
                                (profile.shape[1],)).copy()
        if np.any(profile < 0):
            raise ValueError("demand profile must be non-negative")
        if np.any(sigma < 0):
            raise ValueError("sigma must be non-negative")
        if not -1.0 < self.rho < 1.0:
            raise ValueError("rho must be in (-1, 1)")
        object.__setattr__(self, "profile", profile)
        object.__setattr__(self, "sigma", sigma)

    @property
    def horizon(self) -> int:
        return self.profile.shape[0]

    @property
    def n_ods(self) -> int:
        return self.profile.shape[1]

    def realize(self, seed: int | None) -> DemandTable:
        if seed is None or np.all(self.sigma == 0.0):
            return DemandTable(rates=self.profile.copy())
        rng = np.random.default_rng(seed)
        H, n = self.profile.shape
        z = np.empty((H, n))
        z[0] = rng.standard_normal(n)
        innov_scale = np.sqrt(1.0 - self.rho ** 2)
        for h in range(1, H):
            z[h] = self.rho * z[h - 1] + innov_scale * rng.standard_normal(n)
        factor = np.exp(self.sigma * z - 0.5 * self.sigma ** 2)
        return DemandTable(rates=self.profile * factor)


@dataclass(frozen=True)
class Scenario:
    """Everything a calibration run needs besides the observed data."""

    name: str
    network: Network
    interval_seconds: float
    n_intervals: int
    substeps: int
    demand: DemandModel
    exact_sensors: bool = False
    filter_defaults: dict = field(default_factory=dict)
    splits: dict = field(default_factory=lambda: {"train": 4, "validation": 2,
                                                  "test": 1})
    seeds: dict = field(default_factory=lambda: {"demand": 1234})

    @property
    def historical_rates(self) -> np.ndarray:
        """Design-mean demand, the natural historical profile for the toys."""
        return self.demand.profile


def build_delay_toy(layout: str = "immediate",
                    n_intervals: int = 2) -> Scenario:
    """Two ODs merging into a shared link; traversal takes one full interval.

    ``immediate``: one sensor at each approach entry, so every OD is read off
    in its departure interval. ``lagged``: the approach sensor of the first
    OD is replaced by a sensor at the shared-link entry, which sees both ODs
    one interval late.
    """
    if layout not in ("immediate", "lagged"):
        raise ValueError(f"unknown layout {layout!r}")
    speed_mph = 30.0
    speed_ms = speed_mph * 0.44704
    length = speed_ms * 3600.0  # exactly one interval at free flow
    segs = [
        Segment("approach_1", length, speed_mph, 1e9, 1e12),
        Segment("approach_2", length, speed_mph, 1e9, 1e12),
        Segment("shared", length, speed_mph, 1e9, 1e12),
    ]
    routes = [
        Route("od_1", ("approach_1", "shared")),
        Route("od_2", ("approach_2", "shared")),
    ]
    if layout == "immediate":
        sensors = [Sensor("s1", "approach_1", at_entry=True),
                   Sensor("s2", "approach_2", at_entry=True)]
    else:
        sensors = [Sensor("s2", "approach_2", at_entry=True),
                   Sensor("s3", "shared", at_entry=True)]
    net = Network(segments=tuple(segs), routes=tuple(routes),
                  sensors=tuple(sensors))
    base = np.array([[30.0, 20.0], [24.0, 18.0]])
    if n_intervals > 2:
        extra = np.tile(base[-1], (n_intervals - 2, 1))
        profile = np.vstack([base, extra])
    else:
        profile = base[:n_intervals]
    demand = DemandModel(profile=profile, sigma=np.zeros(2))
    return Scenario(
        name=f"delay_toy_{layout}", network=net,
        interval_seconds=3600.0, n_intervals=n_intervals, substeps=64,
        demand=demand, exact_sensors=True,
        filter_defaults={"degree": 1 if layout == "immediate" else 2,
                         "gradient": "fd", "constraint": "nonneg",
                         "gain_regularization": 0.0},
        seeds={"demand": 0},
    )


# Freeway stretch: lengths (m) and free-flow speeds (mph) per segment.
# The off-ramp capacity sets the bottleneck severity: low enough that the
# peak ramp demand queues and spills into the mainline, high enough that
# throughput stays demand-sensitive and the queue drains after the peak.
_FREEWAY_LENGTHS = (297.5, 553.8, 493.1, 351.2, 408.6, 666.7, 377.3, 183.0)
_FREEWAY_SPEEDS = (50.0, 50.0, 50.0, 50.0, 20.0, 50.0, 50.0, 50.0)
_FREEWAY_CAPS = (6000.0, 6000.0, 6000.0, 5400.0, 500.0, 6000.0, 6000.0, 6000.0)
_FREEWAY_JAM = (240.0, 150.0, 130.0, 100.0, 55.0, 150.0, 150.0, 150.0)


def _peaked_profile(n_intervals, base, amplitude, center, width):
    t = np.arange(n_intervals, dtype=float)
    return base + amplitude * np.exp(-0.5 * ((t - center) / width) ** 2)


def build_congested_toy(n_intervals: int = 60) -> Scenario:
    """Freeway mainline with a low-capacity off-ramp.

    Mainline OD runs segments 1-4 (about 76 s free flow), the off-ramp OD
    leaves after segment 2 through the 20-mph ramp (about 84 s). Segments
    6-8 continue downstream of the mainline exit and stay empty. At the
    demand peak the ramp queue fills, blocks segment 2 and then segment 1,
    pushing the segment-1 traversal time beyond one interval mid-horizon.
    """
    segs = tuple(
        Segment(f"seg{i + 1}", _FREEWAY_LENGTHS[i], _FREEWAY_SPEEDS[i],
                _FREEWAY_CAPS[i], _FREEWAY_JAM[i])
        for i in range(8))
    routes = (
        Route("mainline", ("seg1", "seg2", "seg3", "seg4")),
        Route("offramp", ("seg1", "seg2", "seg5")),
    )
    sensors = tuple(Sensor(f"s{i + 1}", f"seg{i + 1}") for i in range(8))
    # 1 m/s floor keeps jammed segments crawling rather than frozen, so
    # throughput stays demand-sensitive and the queue drains after the peak
    net = Network(segments=segs, routes=routes, sensors=sensors,
                  min_speed_ms=1.0)
    mainline = _peaked_profile(n_intervals, 3800.0, 1150.0,
                               0.55 * n_intervals, n_intervals / 6.0)
    offramp = _peaked_profile(n_intervals, 120.0, 520.0,
                              0.55 * n_intervals, n_intervals / 6.0)
    profile = np.column_stack([mainline, offramp])
    demand = DemandModel(profile=profile, sigma=np.array([0.05, 0.20]),
                         rho=0.85)
    return Scenario(
        name="congested_toy", network=net,
        interval_seconds=300.0, n_intervals=n_intervals, substeps=64,
        demand=demand,
        filter_defaults={"degree": 3, "gradient": "fd",
                         "constraint": "nonneg", "ar_max_order": 5},
        splits={"train": 4, "validation": 2, "test": 1},
        seeds={"demand": 20},
    )


def build_medium_grid(n_corridors: int = 25, entries: int = 8,
                      n_intervals: int = 16) -> Scenario:
    """Independent corridors with staggered on-ramps.

    Each corridor is a chain of ``entries`` segments with one OD entering at
    every segment and running to the corridor end; sensors sit halfway and
    at the end. ODs of different corridors never share a sensor, so the
    conflict graph is a disjoint union of cliques and colors with
    ``entries`` colors instead of one per OD.
    """
    segs, routes, sensors = [], [], []
    for c in range(n_corridors):
        names = [f"c{c:02d}_seg{i}" for i in range(entries)]
        segs.extend(Segment(nm, 500.0, 50.0, 4000.0, 80.0) for nm in names)
        for i in range(entries):
            routes.append(Route(f"c{c:02d}_od{i}", tuple(names[i:])))
        sensors.append(Sensor(f"c{c:02d}_mid", names[entries // 2 - 1]))
        sensors.append(Sensor(f"c{c:02d}_end", names[-1]))
    net = Network(segments=tuple(segs), routes=tuple(routes),
                  sensors=tuple(sensors))
    n_ods = n_corridors * entries
    rng = np.random.default_rng(7)
    base = rng.uniform(150.0, 320.0, size=n_ods)
    bumps = rng.uniform(80.0, 160.0, size=n_ods)
    t = np.arange(n_intervals, dtype=float)
    shape = np.exp(-0.5 * ((t - 0.5 * n_intervals) / (n_intervals / 4.0)) ** 2)
    profile = base[None, :] + bumps[None, :] * shape[:, None]
    demand = DemandModel(profile=profile, sigma=np.full(n_ods, 0.15), rho=0.8)
    return Scenario(
        name="medium_grid", network=net,
        interval_seconds=300.0, n_intervals=n_intervals, substeps=10,
        demand=demand,
        filter_defaults={"degree": 1, "gradient": "psp",
                         "constraint": "nonneg", "ar_max_order": 3},
        splits={"train": 2, "validation": 1, "test": 1},
        seeds={"demand": 40},
    )
