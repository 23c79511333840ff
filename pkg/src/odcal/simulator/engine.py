"""Deterministic link-queue traffic simulator.

The simulator is the measurement function of the calibration loop: demand
rates in, per-interval sensor counts out. State (in-transit packets, origin
backlogs, cumulative totals) snapshots losslessly, so simulation can resume
bit-identically from any interval boundary — the property the gradient
sweeps and the rolling calibration window rely on.

The substep kernel comes in two interchangeable builds: a compiled Cython
extension and a pure-Python twin. Selection happens at import; set
``ODCAL_DISABLE_NATIVE=1`` to force the Python kernel.
"""

from __future__ import annotations

import os
import threading
from dataclasses import dataclass

import numpy as np

from . import _kernel_py
from .network import DemandTable, Network

try:  # pragma: no cover - exercised when the extension is built
    from . import _kernel as _kernel_native
except ImportError:  # pragma: no cover
    _kernel_native = None

__all__ = ["KERNEL", "kernel_name", "SensorFrame", "SimulatorSnapshot",
           "SharedCounter", "Simulator"]


def _select_kernel(prefer: str = "auto"):
    if prefer == "python":
        return _kernel_py, "python"
    if prefer == "native":
        if _kernel_native is None:
            raise RuntimeError("native kernel requested but not built")
        return _kernel_native, "native"
    if prefer != "auto":
        raise ValueError(f"unknown kernel {prefer!r}")
    if _kernel_native is not None and not os.environ.get("ODCAL_DISABLE_NATIVE"):
        return _kernel_native, "native"
    return _kernel_py, "python"


KERNEL = _select_kernel()[1]


def kernel_name(prefer: str = "auto") -> str:
    return _select_kernel(prefer)[1]


@dataclass(frozen=True)
class SensorFrame:
    """Aggregated per-sensor outputs for one interval."""

    interval_index: int  # 1-based
    counts: np.ndarray
    mean_speeds: np.ndarray


@dataclass(frozen=True)
class SimulatorSnapshot:
    """Complete traffic state at an interval boundary.

    Packets are stored compacted in FIFO order per segment; restoring and
    re-running reproduces the original continuation bit for bit.
    """

    interval_index: int
    pk_od: np.ndarray
    pk_pos: np.ndarray
    pk_cnt: np.ndarray
    pk_ready: np.ndarray
    pk_entry: np.ndarray
    seg_counts: np.ndarray  # packets per segment, FIFO order
    occ: np.ndarray
    backlog: np.ndarray
    loaded_total: np.ndarray
    exited_total: np.ndarray


class SharedCounter:
    """Interval counter shared across simulator clones (thread-safe)."""

    def __init__(self):
        self._lock = threading.Lock()
        self.intervals = 0

    def add(self, k: int = 1):
        with self._lock:
            self.intervals += k


_POOL_SLACK = 64


class Simulator:
    """Single-threaded simulator instance; clone via snapshots for parallel use."""

    def __init__(self, network: Network, interval_seconds: float,
                 substeps: int = 64, kernel: str = "auto",
                 counter: SharedCounter | None = None):
        if interval_seconds <= 0:
            raise ValueError("interval length must be positive")
        if substeps < 1:
            raise ValueError("need at least one substep per interval")
        self.network = network
        self.interval_seconds = float(interval_seconds)
        self.substeps = int(substeps)
        self.dt = self.interval_seconds / self.substeps
        self._kernel, self.kernel = _select_kernel(kernel)
        self.counter = counter if counter is not None else SharedCounter()
        arrays = network.arrays()
        self._static = arrays
        self._route_segs = arrays["route_segs"]
        self._route_offs = arrays["route_offs"]
        self.reset()

    # --- state management -------------------------------------------------

    def reset(self):
        net = self.network
        cap = max(4 * net.n_ods + _POOL_SLACK, 256)
        self.interval_index = 0  # intervals completed so far
        self._alloc_pool(cap)
        self.q_head = np.full(net.n_segments, -1, dtype=np.int32)
        self.q_tail = np.full(net.n_segments, -1, dtype=np.int32)
        self.occ = np.zeros(net.n_segments)
        self.backlog = np.zeros(net.n_ods)
        self.loaded_total = np.zeros(net.n_ods)
        self.exited_total = np.zeros(net.n_ods)
        self.sens_count = np.zeros(net.n_sensors)
        self.sens_speed_mass = np.zeros(net.n_sensors)

    def _alloc_pool(self, cap: int):
        self.pk_od = np.zeros(cap, dtype=np.int32)
        self.pk_pos = np.zeros(cap, dtype=np.int32)
        self.pk_cnt = np.zeros(cap)
        self.pk_ready = np.zeros(cap)
        self.pk_entry = np.zeros(cap)
        self.pk_next = np.arange(1, cap + 1, dtype=np.int32)
        self.pk_next[-1] = -1
        self.pool_state = np.array([0, 0], dtype=np.int64)  # [free_head, used]

    def _grow_pool(self, need_free: int):
        cap = self.pk_od.shape[0]
        used = int(self.pool_state[1])
        if cap - used >= need_free:
            return
        new_cap = max(2 * cap, used + need_free)
        for name in ("pk_od", "pk_pos", "pk_cnt", "pk_ready", "pk_entry"):
            old = getattr(self, name)
            grown = np.zeros(new_cap, dtype=old.dtype)
            grown[:cap] = old
            setattr(self, name, grown)
        grown_next = np.arange(1, new_cap + 1, dtype=np.int32)
        grown_next[:cap] = self.pk_next
        grown_next[-1] = int(self.pool_state[0])
        # New slots go to the head of the free list, chained to the old one.
        self.pk_next = grown_next
        self.pool_state[0] = cap

    # --- stepping ----------------------------------------------------------

    def step(self, rates: np.ndarray) -> SensorFrame:
        """Advance one interval with the given per-OD demand rates (veh/h)."""
        rates = np.asarray(rates, dtype=float)
        if rates.shape != (self.network.n_ods,):
            raise ValueError("rates must have one entry per OD pair")
        self._grow_pool(self.substeps * self.network.n_ods + _POOL_SLACK)
        t0 = self.interval_index * self.interval_seconds
        self.sens_count[:] = 0.0
        self.sens_speed_mass[:] = 0.0
        st = self._static
        status = self._kernel.run_interval(
            self.substeps, t0, self.dt, rates,
            self.pk_od, self.pk_pos, self.pk_cnt, self.pk_ready,
            self.pk_entry, self.pk_next,
            self.q_head, self.q_tail, self.occ,
            self.backlog, self.loaded_total, self.exited_total,
            self.pool_state,
            self.sens_count, self.sens_speed_mass,
            self._route_segs, self._route_offs,
            st["seg_len"], st["seg_vf"], st["seg_cap_s"], st["seg_jam"],
            st["seg_kcrit"], st["seg_kjam"], st["seg_w"],
            st["entry_sensor"], st["exit_sensor"],
            st["discharge_order"], self.network.min_speed_ms,
        )
        if status != 0:
            raise RuntimeError("packet pool exhausted; pre-growth bound violated")
        self.interval_index += 1
        self.counter.add()
        counts = self.sens_count.copy()
        speeds = np.empty_like(counts)
        exit_seg_vf = self._sensor_free_speeds()
        nonzero = counts > 0
        speeds[nonzero] = self.sens_speed_mass[nonzero] / counts[nonzero]
        speeds[~nonzero] = exit_seg_vf[~nonzero]
        return SensorFrame(interval_index=self.interval_index,
                           counts=counts, mean_speeds=speeds)

    def _sensor_free_speeds(self) -> np.ndarray:
        vf = self._static["seg_vf"]
        seg_idx = {s.segment_id: i for i, s in enumerate(self.network.segments)}
        return np.array([vf[seg_idx[s.segment]] for s in self.network.sensors])

    def run(self, demand: DemandTable) -> list[SensorFrame]:
        """Run the full demand horizon from the current state."""
        return [self.step(demand.rates[h]) for h in range(demand.horizon)]

    def run_window(self, snapshot: SimulatorSnapshot,
                   rates_window: np.ndarray) -> list[SensorFrame]:
        """Restore the snapshot and step once per row of ``rates_window``.

        The caller's snapshot is untouched; repeated calls from the same
        snapshot return identical frames.
        """
        rates_window = np.atleast_2d(np.asarray(rates_window, dtype=float))
        self.restore(snapshot)
        return [self.step(r) for r in rates_window]

    # --- snapshot / restore --------------------------------------------------

    def snapshot(self) -> SimulatorSnapshot:
        """Capture the full state (valid at an interval boundary)."""
        order = []
        seg_counts = np.zeros(self.network.n_segments, dtype=np.int64)
        for s in range(self.network.n_segments):
            h = int(self.q_head[s])
            while h >= 0:
                order.append(h)
                seg_counts[s] += 1
                h = int(self.pk_next[h])
        idx = np.array(order, dtype=np.int64)
        return SimulatorSnapshot(
            interval_index=self.interval_index,
            pk_od=self.pk_od[idx].copy(), pk_pos=self.pk_pos[idx].copy(),
            pk_cnt=self.pk_cnt[idx].copy(), pk_ready=self.pk_ready[idx].copy(),
            pk_entry=self.pk_entry[idx].copy(),
            seg_counts=seg_counts, occ=self.occ.copy(),
            backlog=self.backlog.copy(),
            loaded_total=self.loaded_total.copy(),
            exited_total=self.exited_total.copy(),
        )

    def restore(self, snap: SimulatorSnapshot):
        if snap.seg_counts.shape[0] != self.network.n_segments:
            raise ValueError("snapshot does not match this network")
        n_pk = snap.pk_od.shape[0]
        cap = max(2 * n_pk + self.substeps * self.network.n_ods + _POOL_SLACK, 256)
        self._alloc_pool(cap)
        self.q_head = np.full(self.network.n_segments, -1, dtype=np.int32)
        self.q_tail = np.full(self.network.n_segments, -1, dtype=np.int32)
        if n_pk:
            self.pk_od[:n_pk] = snap.pk_od
            self.pk_pos[:n_pk] = snap.pk_pos
            self.pk_cnt[:n_pk] = snap.pk_cnt
            self.pk_ready[:n_pk] = snap.pk_ready
            self.pk_entry[:n_pk] = snap.pk_entry
        pos = 0
        for s in range(self.network.n_segments):
            cnt = int(snap.seg_counts[s])
            if cnt == 0:
                continue
            self.q_head[s] = pos
            for i in range(pos, pos + cnt - 1):
                self.pk_next[i] = i + 1
            self.pk_next[pos + cnt - 1] = -1
            self.q_tail[s] = pos + cnt - 1
            pos += cnt
        self.pool_state[0] = n_pk if n_pk < cap else -1
        self.pool_state[1] = n_pk
        self.interval_index = snap.interval_index
        self.occ = snap.occ.copy()
        self.backlog = snap.backlog.copy()
        self.loaded_total = snap.loaded_total.copy()
        self.exited_total = snap.exited_total.copy()
        self.sens_count = np.zeros(self.network.n_sensors)
        self.sens_speed_mass = np.zeros(self.network.n_sensors)

    def clone(self) -> "Simulator":
        """Independent copy sharing the (immutable) network and the counter."""
        twin = Simulator(self.network, self.interval_seconds, self.substeps,
                         kernel=self.kernel, counter=self.counter)
        twin.restore(self.snapshot())
        return twin

    @property
    def vehicles_in_network(self) -> float:
        return float(np.sum(self.occ) + np.sum(self.backlog))
