"""Network description for the link-queue simulator.

A network is a set of directed segments plus one fixed route per OD pair.
Topology is implied by the routes: consecutive segments on a route are
connected. Sensors sit at a segment's entry or exit and report aggregated
flow counts and mean speed per interval.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MPH_TO_MS = 0.44704

__all__ = ["MPH_TO_MS", "Segment", "Sensor", "Route", "Network", "DemandTable"]


@dataclass(frozen=True)
class Segment:
    """One directed roadway piece with point-queue parameters."""

    segment_id: str
    length_m: float
    free_flow_mph: float
    capacity_vph: float
    jam_storage_veh: float

    def __post_init__(self):
        if self.length_m <= 0:
            raise ValueError(f"segment {self.segment_id}: length must be positive")
        if self.free_flow_mph <= 0:
            raise ValueError(f"segment {self.segment_id}: speed must be positive")
        if self.capacity_vph <= 0:
            raise ValueError(f"segment {self.segment_id}: capacity must be positive")
        if self.jam_storage_veh <= 0:
            raise ValueError(f"segment {self.segment_id}: jam storage must be positive")

    @property
    def free_flow_ms(self) -> float:
        return self.free_flow_mph * MPH_TO_MS

    @property
    def free_flow_time_s(self) -> float:
        return self.length_m / self.free_flow_ms


@dataclass(frozen=True)
class Sensor:
    sensor_id: str
    segment: str
    at_entry: bool = False  # default: counts vehicles discharging at the exit


@dataclass(frozen=True)
class Route:
    od_id: str
    segments: tuple

    def __post_init__(self):
        if len(self.segments) == 0:
            raise ValueError(f"OD {self.od_id}: route must cover at least one segment")
        object.__setattr__(self, "segments", tuple(self.segments))


@dataclass(frozen=True)
class Network:
    segments: tuple
    routes: tuple
    sensors: tuple
    min_speed_ms: float = 0.5

    # derived flat arrays, filled in __post_init__
    _derived: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        object.__setattr__(self, "routes", tuple(self.routes))
        object.__setattr__(self, "sensors", tuple(self.sensors))
        seg_index = {s.segment_id: i for i, s in enumerate(self.segments)}
        if len(seg_index) != len(self.segments):
            raise ValueError("duplicate segment ids")
        for route in self.routes:
            for sid in route.segments:
                if sid not in seg_index:
                    raise ValueError(f"OD {route.od_id}: unknown segment {sid!r}")
        placements = set()
        for sensor in self.sensors:
            if sensor.segment not in seg_index:
                raise ValueError(f"sensor {sensor.sensor_id}: unknown segment")
            key = (sensor.segment, sensor.at_entry)
            if key in placements:
                raise ValueError(
                    f"sensor {sensor.sensor_id}: duplicate placement on "
                    f"{sensor.segment} ({'entry' if sensor.at_entry else 'exit'})")
            placements.add(key)
        od_ids = [r.od_id for r in self.routes]
        if len(set(od_ids)) != len(od_ids):
            raise ValueError("duplicate OD ids")
        self._derived.update(self._build_arrays(seg_index))

    def _build_arrays(self, seg_index) -> dict:
        S = len(self.segments)
        length = np.array([s.length_m for s in self.segments])
        vfree = np.array([s.free_flow_ms for s in self.segments])
        cap_s = np.array([s.capacity_vph / 3600.0 for s in self.segments])
        jam = np.array([s.jam_storage_veh for s in self.segments], dtype=float)
        kjam = jam / length
        kcrit = cap_s / vfree  # veh/m at which capacity flow moves at free speed
        # Backward-wave slope of the triangular relation; degenerate storage
        # (kjam <= kcrit) collapses to instant blocking.
        wave = np.where(kjam > kcrit, cap_s / np.maximum(kjam - kcrit, 1e-12), np.inf)

        route_segs, route_offs = [], [0]
        for route in self.routes:
            route_segs.extend(seg_index[sid] for sid in route.segments)
            route_offs.append(len(route_segs))

        entry_sensor = np.full(S, -1, dtype=np.int32)
        exit_sensor = np.full(S, -1, dtype=np.int32)
        for i, sensor in enumerate(self.sensors):
            seg = seg_index[sensor.segment]
            if sensor.at_entry:
                entry_sensor[seg] = i
            else:
                exit_sensor[seg] = i

        order = self._discharge_order(seg_index)
        return {
            "seg_len": length, "seg_vf": vfree, "seg_cap_s": cap_s,
            "seg_jam": jam, "seg_kjam": kjam, "seg_kcrit": kcrit,
            "seg_w": wave,
            "route_segs": np.array(route_segs, dtype=np.int32),
            "route_offs": np.array(route_offs, dtype=np.int32),
            "entry_sensor": entry_sensor, "exit_sensor": exit_sensor,
            "discharge_order": order,
        }

    def _discharge_order(self, seg_index) -> np.ndarray:
        """Downstream-first processing order (reverse topological when acyclic)."""
        S = len(self.segments)
        succ = [set() for _ in range(S)]
        indeg = np.zeros(S, dtype=int)
        edges = set()
        for route in self.routes:
            idx = [seg_index[s] for s in route.segments]
            for a, b in zip(idx, idx[1:]):
                if (a, b) not in edges:
                    edges.add((a, b))
                    succ[a].add(b)
                    indeg[b] += 1
        ready = sorted(i for i in range(S) if indeg[i] == 0)
        topo = []
        indeg = indeg.copy()
        while ready:
            v = ready.pop(0)
            topo.append(v)
            for u in sorted(succ[v]):
                indeg[u] -= 1
                if indeg[u] == 0:
                    ready.append(u)
            ready.sort()
        if len(topo) < S:  # cycle: fall back to index order
            return np.arange(S - 1, -1, -1, dtype=np.int32)
        return np.array(topo[::-1], dtype=np.int32)

    @property
    def n_segments(self) -> int:
        return len(self.segments)

    @property
    def n_ods(self) -> int:
        return len(self.routes)

    @property
    def n_sensors(self) -> int:
        return len(self.sensors)

    @property
    def od_ids(self) -> list:
        return [r.od_id for r in self.routes]

    @property
    def sensor_ids(self) -> list:
        return [s.sensor_id for s in self.sensors]

    def arrays(self) -> dict:
        return self._derived

    def segment_by_id(self, segment_id: str) -> Segment:
        for seg in self.segments:
            if seg.segment_id == segment_id:
                return seg
        raise KeyError(segment_id)

    def sensor_reach_time(self, sensor: Sensor, route: Route) -> float | None:
        """Free-flow travel time from the route's origin to the sensor, or None."""
        total = 0.0
        for sid in route.segments:
            seg = self.segment_by_id(sid)
            if sensor.segment == sid and sensor.at_entry:
                return total
            total += seg.free_flow_time_s
            if sensor.segment == sid and not sensor.at_entry:
                return total
        return None


@dataclass(frozen=True)
class DemandTable:
    """Departure rates (vehicles/hour) per interval and OD: shape (H, n)."""

    rates: np.ndarray

    def __post_init__(self):
        rates = np.asarray(self.rates, dtype=float)
        if rates.ndim != 2:
            raise ValueError("demand rates must be (intervals, ods)")
        if np.any(rates < 0) or not np.all(np.isfinite(rates)):
            raise ValueError("demand rates must be finite and non-negative")
        object.__setattr__(self, "rates", rates)

    @property
    def horizon(self) -> int:
        return self.rates.shape[0]

    @property
    def n_ods(self) -> int:
        return self.rates.shape[1]
