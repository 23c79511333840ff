"""Online calibration loop and the offline preparation pipeline.

The loop keeps one stored snapshot at the start of the sliding estimation
window. Each interval it simulates the window at the prior (one run serves
as both lead-in and innovation baseline), sweeps the newest interval's
parameters over the staggered horizon to refresh the Jacobian cache,
applies the constrained filter update, then re-simulates the window at the
posterior. That last run advances the stored snapshot past the interval
leaving the window, reports the fitted counts, and leaves the simulator at
the start of the next interval for rolling sensor predictions.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .filter import FilterConfig, LinearizedMeasurement, run_interval
from .gradient import (
    BlockCache,
    EvalCounter,
    IncidenceMatrix,
    fd_jacobian,
    multi_start_color,
    psp_jacobian,
)
from .simulator import DemandTable, Network, SharedCounter, Simulator
from .simulator.scenarios import Scenario
from .statespace import (
    ARTransitionModel,
    AugmentedState,
    HistoricalProfile,
    MeasurementNoiseModel,
    build_companion,
    estimate_q,
    estimate_r,
    fit_ar,
    select_ar_order,
)

__all__ = [
    "RunConfig", "ObservedDay", "PreparedInputs", "HorizonMetrics",
    "MetricsReport", "IntervalRecord", "OnlineResult", "CalibrationError",
    "generate_day", "historical_counts", "topological_incidence",
    "distinguishable_od_count", "compute_metrics",
    "bootstrap_variances", "SimulatorMeasurementSystem", "run_online", "prepare_inputs",
    "run_pipeline",
]

VARIANCE_BANDS = (1.0, 500.0, 2500.0, 5000.0, 10000.0, 20000.0, np.inf)


class CalibrationError(RuntimeError):
    """Interval failure; carries a resumable checkpoint."""

    def __init__(self, message, interval, checkpoint):
        super().__init__(message)
        self.interval = interval
        self.checkpoint = checkpoint


@dataclass
class RunConfig:
    scenario: Scenario
    degree: int = 1
    gradient_mode: str = "fd"  # or "psp"
    constraint_mode: str = "nonneg"
    prediction_steps: int = 3
    workers: int | None = None
    delta_frac: float = 0.05
    delta_floor: float = 1.0
    gain_regularization: float = 1e-8
    initial_covariance: float | None = None  # default: process variance q
    incidence_mode: str = "topological"  # or "bootstrap"
    incidence: IncidenceMatrix | None = None  # overrides incidence_mode
    coloring_starts: int = 30
    coloring_seed: int = 0
    recompute_gradients: bool = False
    ar_max_order: int = 5
    bootstrap_degree: int = 1
    kernel: str = "auto"

    def __post_init__(self):
        if self.degree < 1:
            raise ValueError("degree must be >= 1")
        if self.prediction_steps < 0:
            raise ValueError("prediction_steps must be >= 0")
        if self.gradient_mode not in ("fd", "psp"):
            raise ValueError(f"unknown gradient mode {self.gradient_mode!r}")
        if self.incidence_mode not in ("topological", "bootstrap"):
            raise ValueError(f"unknown incidence mode {self.incidence_mode!r}")

    @property
    def label(self) -> str:
        tag = "CEKF" if self.constraint_mode == "nonneg" else "EKF"
        return f"{tag}({self.degree})"

    def filter_config(self) -> FilterConfig:
        return FilterConfig(degree=self.degree,
                            constraint_mode=self.constraint_mode,
                            gain_regularization=self.gain_regularization)


@dataclass
class ObservedDay:
    """One day of data: sensor counts, plus ground truth when synthetic."""

    counts: np.ndarray  # (H, m)
    truth: DemandTable | None = None


@dataclass
class PreparedInputs:
    historical: HistoricalProfile
    transition: ARTransitionModel  # carries the fitted process variance q
    noise: MeasurementNoiseModel


@dataclass
class HorizonMetrics:
    rmse: float
    wsse: float
    rmsn: float
    band_rmse: dict = field(default_factory=dict)


@dataclass
class MetricsReport:
    horizons: dict = field(default_factory=dict)

    def horizon(self, name: str) -> HorizonMetrics:
        return self.horizons[name]


@dataclass
class IntervalRecord:
    interval: int
    innovation_norm: float
    gain_norm: float
    active_constraints: int
    gradient_intervals: int
    nominal_intervals: int
    prediction_intervals: int
    wall_clock: float


@dataclass
class OnlineResult:
    estimates: np.ndarray           # (H, n) reconstructed OD flows
    deviations: np.ndarray          # (H, n)
    estimated_counts: np.ndarray    # (H, m) simulated at the posterior
    predicted_counts: dict          # step -> (H, m), NaN where unavailable
    observed_counts: np.ndarray
    posteriors: list
    records: list
    metrics: MetricsReport | None
    gradient_evaluations: int
    num_colors: int | None
    recorded_jacobians: list
    label: str


def bootstrap_variances(mean_values: np.ndarray,
                        coefficient_of_variation: float = 0.1) -> np.ndarray:
    """Diagonal variances assuming a fixed coefficient of variation."""
    return (coefficient_of_variation * np.asarray(mean_values, dtype=float)) ** 2


def generate_day(scenario: Scenario, seed: int | None,
                 kernel: str = "auto") -> ObservedDay:
    """Realize demand for one synthetic day and simulate its sensor counts."""
    truth = scenario.demand.realize(seed)
    sim = Simulator(scenario.network, scenario.interval_seconds,
                    scenario.substeps, kernel=kernel)
    frames = sim.run(truth)
    counts = np.stack([f.counts for f in frames])
    return ObservedDay(counts=counts, truth=truth)


def historical_counts(scenario: Scenario, demand: np.ndarray,
                      kernel: str = "auto") -> np.ndarray:
    """Counts produced by simulating a demand profile from an empty network."""
    sim = Simulator(scenario.network, scenario.interval_seconds,
                    scenario.substeps, kernel=kernel)
    frames = sim.run(DemandTable(rates=np.asarray(demand, dtype=float)))
    return np.stack([f.counts for f in frames])


def topological_incidence(network: Network, interval_seconds: float,
                          degree: int) -> IncidenceMatrix:
    """Route-based over-approximation of the stacked gradient structure.

    Sensor i can respond to OD j at lag l when the sensor lies on j's route
    and free-flow travel reaches it within l intervals; congestion only
    delays the response, so every later lag within the window stays marked.
    """
    m, n = network.n_sensors, network.n_ods
    entries = np.zeros((degree * m, n), dtype=np.uint8)
    for j, route in enumerate(network.routes):
        for i, sensor in enumerate(network.sensors):
            reach = network.sensor_reach_time(sensor, route)
            if reach is None:
                continue
            first_lag = int(reach // interval_seconds)
            for lag in range(first_lag, degree):
                entries[lag * m + i, j] = 1
    return IncidenceMatrix(entries=entries)


def distinguishable_od_count(network: Network, degree: int,
                             interval_seconds: float) -> int:
    """ODs whose identifying sensor responds within ``degree`` intervals.

    The identifying sensor is the first on the OD's route that no other OD
    sharing the same origin crosses; ODs without one are never counted.
    """
    count = 0
    for route in network.routes:
        competitor_segments = set()
        for other in network.routes:
            if other.od_id != route.od_id and other.segments[0] == route.segments[0]:
                competitor_segments.update(other.segments)
        best_reach = None
        for sensor in network.sensors:
            if sensor.segment in competitor_segments:
                continue
            reach = network.sensor_reach_time(sensor, route)
            if reach is not None and (best_reach is None or reach < best_reach):
                best_reach = reach
        if best_reach is not None and int(best_reach // interval_seconds) <= degree - 1:
            count += 1
    return count


def _horizon_metrics(estimated: np.ndarray, observed: np.ndarray,
                     noise: MeasurementNoiseModel,
                     bands=VARIANCE_BANDS) -> HorizonMetrics:
    err = estimated - observed
    valid = np.all(np.isfinite(err), axis=1)
    err = err[valid]
    obs = observed[valid]
    if err.size == 0:
        raise ValueError("no aligned observations for this horizon")
    sq = err ** 2
    rmse = float(np.sqrt(np.mean(sq)))
    r = noise.r_diagonal
    weights = np.where(r > 0, 1.0 / np.where(r > 0, r, 1.0), 0.0)
    wsse = float(np.sum(sq * weights[None, :]))
    total_obs = float(np.sum(obs))
    if total_obs <= 0:
        raise ValueError("total observed flow is zero; RMSN undefined")
    rmsn = float(np.sqrt(err.size * np.sum(sq)) / total_obs)
    band_rmse = {}
    for lo, hi in zip(bands[:-1], bands[1:]):
        members = (r >= lo) & (r < hi)
        if np.any(members):
            band_rmse[f"[{lo:g},{hi:g})"] = float(np.sqrt(np.mean(sq[:, members])))
    return HorizonMetrics(rmse=rmse, wsse=wsse, rmsn=rmsn, band_rmse=band_rmse)


def compute_metrics(estimated, observed, noise: MeasurementNoiseModel,
                    horizon: str = "estimation") -> MetricsReport:
    """Metrics for one aligned (estimated, observed) series pair."""
    estimated = np.asarray(estimated, dtype=float)
    observed = np.asarray(observed, dtype=float)
    if estimated.ndim == 1:
        estimated = estimated[:, None]
        observed = observed[:, None]
    if estimated.shape != observed.shape:
        raise ValueError("estimated and observed series are not aligned")
    return MetricsReport(
        horizons={horizon: _horizon_metrics(estimated, observed, noise)})


class SimulatorMeasurementSystem:
    """Simulator-backed measurement model with staggered Jacobian caching."""

    def __init__(self, config: RunConfig, prepared: PreparedInputs,
                 observed_counts: np.ndarray, frozen: dict | None = None):
        self.config = config
        self.scenario = config.scenario
        self.historical = prepared.historical
        self.transition_model = prepared.transition
        self.observed = np.asarray(observed_counts, dtype=float)
        self.degree = config.degree
        self.horizon = self.scenario.n_intervals
        net = self.scenario.network
        self.n = net.n_ods
        self.m = net.n_sensors
        self.frozen = frozen if frozen is not None else {}
        self.counter = SharedCounter()
        self.sim = Simulator(net, self.scenario.interval_seconds,
                             self.scenario.substeps, kernel=config.kernel,
                             counter=self.counter)
        self.window_snapshot = self.sim.snapshot()
        self.cache = BlockCache(self.m, self.n)
        self.eval_counter = EvalCounter()
        self.recorded_jacobians = []
        self.phase_intervals = {"gradient": 0, "nominal": 0, "prediction": 0}
        self.coloring = None
        self.incidence = None
        if config.gradient_mode == "psp":
            self.incidence = config.incidence
            if self.incidence is None:
                self.incidence = topological_incidence(
                    net, self.scenario.interval_seconds, self.degree)
            expected_rows = self.degree * self.m
            if self.incidence.entries.shape != (expected_rows, self.n):
                raise ValueError(
                    f"incidence must be ({expected_rows}, {self.n}) "
                    f"for degree {self.degree}")
            self.coloring = multi_start_color(
                self.incidence, config.coloring_starts,
                seed=config.coloring_seed)
        self._transient_start = None  # state at the start of the current interval
        self._post_interval = None    # state at the start of the next interval

    # -- demand reconstruction ------------------------------------------------

    def _window_start(self, interval: int) -> int:
        return max(1, interval - self.degree + 1)

    def _window_demands(self, interval: int, state: AugmentedState) -> np.ndarray:
        """Reconstructed OD rates for [window_start, interval], oldest first."""
        start = self._window_start(interval)
        rows = []
        for k in range(start, interval + 1):
            delta = state.block(interval - k)
            rows.append(np.maximum(self.historical.demand_at(k) + delta, 0.0))
        return np.stack(rows)

    def _future_demands(self, interval: int, state: AugmentedState,
                        steps: int) -> np.ndarray:
        """AR-rolled demand for intervals interval+1 .. interval+steps.

        The recursion uses all AR lags: window blocks first, then frozen
        estimates, then zeros before the horizon start.
        """
        if steps <= 0:
            return np.zeros((0, self.n))
        order = self.transition_model.order
        history = []
        for lag in range(order):
            k = interval - lag
            if lag < self.degree:
                history.append(state.block(lag))
            elif k >= 1 and k in self.frozen:
                history.append(self.frozen[k])
            else:
                history.append(np.zeros(self.n))
        rows = []
        for j in range(1, steps + 1):
            nxt = self.transition_model.predict_next(np.stack(history))
            history = [nxt] + history[:-1]
            rows.append(np.maximum(
                self.historical.demand_at(interval + j) + nxt, 0.0))
        return np.stack(rows)

    # -- filter interface -------------------------------------------------------

    def linearize(self, interval: int,
                  prior: AugmentedState) -> LinearizedMeasurement:
        window = self._window_demands(interval, prior)
        base = self.counter.intervals
        self.sim.restore(self.window_snapshot)
        for row in window[:-1]:
            self.sim.step(row)
        self._transient_start = self.sim.snapshot()
        base_frame = self.sim.step(window[-1])
        self.phase_intervals["nominal"] += self.counter.intervals - base
        self._refresh_blocks(interval, prior, window[-1])
        theta = self.cache.assemble_row(interval, self.degree)
        hist_counts = self.historical.counts_at(interval)
        return LinearizedMeasurement(
            theta=theta,
            base_prediction=base_frame.counts - hist_counts,
            observed_deviation=self.observed[interval - 1] - hist_counts)

    def _refresh_blocks(self, interval: int, prior: AugmentedState,
                        current_demand: np.ndarray):
        sweep_len = min(self.degree, self.horizon - interval + 1)
        needed = [(interval + i, interval) for i in range(sweep_len)]
        if not self.config.recompute_gradients and all(
                self.cache.has(h, k) for h, k in needed):
            return
        future = self._future_demands(interval, prior, sweep_len - 1)
        start_snapshot = self._transient_start
        base = self.counter.intervals
        parallel = bool(self.config.workers and self.config.workers > 1)

        def sweep_eval(x):
            worker = self.sim.clone() if parallel else self.sim
            worker.restore(start_snapshot)
            frames = [worker.step(np.maximum(x, 0.0))]
            for row in future:
                frames.append(worker.step(row))
            return np.concatenate([f.counts for f in frames])

        delta = np.maximum(
            self.config.delta_frac * self.historical.demand_at(interval),
            self.config.delta_floor)
        if self.config.gradient_mode == "fd":
            stacked = fd_jacobian(sweep_eval, current_demand, delta,
                                  workers=self.config.workers,
                                  counter=self.eval_counter)
        else:
            rows = sweep_len * self.m
            incidence = IncidenceMatrix(entries=self.incidence.entries[:rows])
            steps = np.array([
                float(np.mean(delta[self.coloring.members(k)]))
                if self.coloring.members(k).size else self.config.delta_floor
                for k in range(self.coloring.num_colors)])
            stacked = psp_jacobian(sweep_eval, current_demand, self.coloring,
                                   incidence, steps,
                                   workers=self.config.workers,
                                   counter=self.eval_counter)
        self.phase_intervals["gradient"] += self.counter.intervals - base
        self.recorded_jacobians.append(stacked)
        for i, (h, k) in enumerate(needed):
            self.cache.store(h, k, stacked[i * self.m:(i + 1) * self.m])

    # -- post-update bookkeeping -------------------------------------------------

    def finalize(self, interval: int, posterior: AugmentedState) -> np.ndarray:
        """Re-simulate the window at the posterior.

        Advances the stored snapshot past the interval leaving the window,
        records the frozen estimate, returns the fitted counts for
        ``interval``, and leaves the simulator at the start of the next
        interval.
        """
        window = self._window_demands(interval, posterior)
        window_full = interval - self._window_start(interval) == self.degree - 1
        base = self.counter.intervals
        self.sim.restore(self.window_snapshot)
        frame = None
        for i, row in enumerate(window):
            frame = self.sim.step(row)
            if i == 0 and window_full:
                # oldest interval leaves the window: freeze and roll forward
                self.window_snapshot = self.sim.snapshot()
                self.frozen[self._window_start(interval)] = \
                    posterior.block(self.degree - 1).copy()
        self._post_interval = self.sim.snapshot()
        self.phase_intervals["nominal"] += self.counter.intervals - base
        self.cache.prune_before(self._window_start(interval + 1))
        return frame.counts

    def predict(self, interval: int, posterior: AugmentedState,
                steps: int) -> np.ndarray:
        """Roll demand forward with the transition and simulate from now."""
        steps = min(steps, self.horizon - interval)
        if steps <= 0:
            return np.zeros((0, self.m))
        future = self._future_demands(interval, posterior, steps)
        base = self.counter.intervals
        self.sim.restore(self._post_interval)
        out = np.stack([self.sim.step(row).counts for row in future])
        self.phase_intervals["prediction"] += self.counter.intervals - base
        return out


def _full_ar_override(transition_model: ARTransitionModel,
                      previous: AugmentedState, frozen: dict, interval: int,
                      degree: int, n: int) -> np.ndarray:
    """Mean prior for the newest block using every AR lag.

    ``previous`` is the posterior of ``interval - 1``; lags beyond the
    window come from frozen estimates (zeros before the horizon start).
    """
    history = []
    for lag in range(1, transition_model.order + 1):
        k = interval - lag
        window_lag = (interval - 1) - k
        if 0 <= window_lag < degree:
            history.append(previous.block(window_lag))
        elif k >= 1 and k in frozen:
            history.append(frozen[k])
        else:
            history.append(np.zeros(n))
    return transition_model.predict_next(np.stack(history))


def run_online(config: RunConfig, prepared: PreparedInputs,
               observed: ObservedDay | np.ndarray,
               system=None) -> OnlineResult:
    """Run the full online loop over the scenario horizon.

    ``system`` may replace the simulator-backed measurement model with any
    object exposing ``linearize`` (e.g. a fixed linear map in tests); the
    snapshot bookkeeping, fitted counts, and predictions then stay off.
    """
    counts = observed.counts if isinstance(observed, ObservedDay) else observed
    counts = np.asarray(counts, dtype=float)
    scenario = config.scenario
    H = scenario.n_intervals
    n = prepared.historical.n_parameters
    m = counts.shape[1]
    degree = config.degree
    trans_model = prepared.transition
    trans = build_companion(trans_model, degree)
    fcfg = config.filter_config()
    p0 = (config.initial_covariance if config.initial_covariance is not None
          else trans_model.noise_variance_q)
    state = AugmentedState(stacked=np.zeros(degree * n),
                           covariance=np.eye(degree * n) * p0,
                           degree=degree)
    frozen: dict[int, np.ndarray] = {}
    simulator_backed = system is None
    if simulator_backed:
        system = SimulatorMeasurementSystem(config, prepared, counts,
                                            frozen=frozen)

    estimates = np.full((H, n), np.nan)
    deviations = np.full((H, n), np.nan)
    estimated_counts = np.full((H, m), np.nan)
    predicted = {s: np.full((H, m), np.nan)
                 for s in range(1, config.prediction_steps + 1)}
    posteriors, records = [], []
    use_override = fcfg.full_ar_mean_prior and trans_model.order > degree

    for t in range(1, H + 1):
        tick = time.perf_counter()
        phases0 = (dict(system.phase_intervals) if simulator_backed else None)
        override = None
        if use_override and t > 1:
            override = _full_ar_override(trans_model, posteriors[-1], frozen,
                                         t, degree, n)
        try:
            state, diag = run_interval(state, trans, system, prepared.noise,
                                       fcfg, prepared.historical, t,
                                       mean_prior_override=override)
            if simulator_backed:
                estimated_counts[t - 1] = system.finalize(t, state)
                rolled = system.predict(t, state, config.prediction_steps)
                for j in range(rolled.shape[0]):
                    predicted[j + 1][t + j] = rolled[j]
        except Exception as exc:
            checkpoint = {"interval": t,
                          "state": posteriors[-1] if posteriors else None}
            if simulator_backed:
                from .simulator import snapshot as snapio
                checkpoint["window_snapshot"] = snapio.to_bytes(
                    system.window_snapshot)
            raise CalibrationError(
                f"calibration failed at interval {t}: {exc}", t,
                checkpoint) from exc
        posteriors.append(state)
        for lag in range(min(degree, t)):
            k = t - lag
            deviations[k - 1] = state.block(lag)
            estimates[k - 1] = np.maximum(
                prepared.historical.demand_at(k) + state.block(lag), 0.0)
        if not simulator_backed and t - degree + 1 >= 1:
            frozen[t - degree + 1] = state.block(degree - 1).copy()
        if simulator_backed:
            spent = {k: system.phase_intervals[k] - phases0[k]
                     for k in phases0}
        else:
            spent = {"gradient": 0, "nominal": 0, "prediction": 0}
        records.append(IntervalRecord(
            interval=t, innovation_norm=diag.innovation_norm,
            gain_norm=diag.gain_norm,
            active_constraints=diag.active_constraints,
            gradient_intervals=spent["gradient"],
            nominal_intervals=spent["nominal"],
            prediction_intervals=spent["prediction"],
            wall_clock=time.perf_counter() - tick))

    metrics = None
    if simulator_backed:
        horizons = {"estimation": _horizon_metrics(estimated_counts, counts,
                                                   prepared.noise)}
        for step, pred in predicted.items():
            valid = np.all(np.isfinite(pred), axis=1)
            if np.any(valid):
                horizons[f"step{step}"] = _horizon_metrics(
                    pred[valid], counts[valid], prepared.noise)
        metrics = MetricsReport(horizons=horizons)
    return OnlineResult(
        estimates=estimates, deviations=deviations,
        estimated_counts=estimated_counts, predicted_counts=predicted,
        observed_counts=counts, posteriors=posteriors, records=records,
        metrics=metrics,
        gradient_evaluations=(system.eval_counter.evaluations
                              if simulator_backed else 0),
        num_colors=(system.coloring.num_colors
                    if simulator_backed and system.coloring else None),
        recorded_jacobians=(system.recorded_jacobians
                            if simulator_backed else []),
        label=config.label)


def prepare_inputs(scenario: Scenario, training: list, validation: list,
                   config: RunConfig | None = None) -> PreparedInputs:
    """Offline pipeline: bootstrap calibrations, covariances, AR selection.

    Bootstrap covariances assume a 10% coefficient of variation around the
    seed profile. Every training/validation day is calibrated with the
    non-augmented filter; residuals give the sensor variances, calibrated
    deviations give the AR model (validation one-step error picks the
    order) and its process variance. The historical profile is the mean of
    the calibrated demand over all days.
    """
    if not training:
        raise ValueError("need at least one training day")
    config = config or RunConfig(scenario=scenario)
    seed_demand = scenario.historical_rates
    seed_counts = historical_counts(scenario, seed_demand, config.kernel)
    bootstrap_hist = HistoricalProfile(demand=seed_demand, counts=seed_counts)
    mean_counts = np.maximum(seed_counts.mean(axis=0), 1.0)
    bootstrap_noise = MeasurementNoiseModel(
        r_diagonal=bootstrap_variances(mean_counts))
    mean_seed = np.maximum(seed_demand.mean(axis=0), config.delta_floor)
    bootstrap_ar = ARTransitionModel(
        order=1, coefficients=np.array([1.0]),
        noise_variance_q=float(np.mean(bootstrap_variances(mean_seed))),
        n_parameters=scenario.network.n_ods)
    bootstrap_prepared = PreparedInputs(historical=bootstrap_hist,
                                        transition=bootstrap_ar,
                                        noise=bootstrap_noise)
    boot_config = RunConfig(
        scenario=scenario, degree=config.bootstrap_degree,
        gradient_mode="fd", constraint_mode="nonneg", prediction_steps=0,
        delta_frac=config.delta_frac, delta_floor=config.delta_floor,
        workers=config.workers, kernel=config.kernel)

    calibrated, residual_days = [], []
    for day in training + validation:
        result = run_online(boot_config, bootstrap_prepared, day)
        calibrated.append(result.estimates)
        residual_days.append(day.counts - result.estimated_counts)
    noise = estimate_r(residual_days)
    # keep variances strictly positive: zero would declare a sensor exact
    noise = MeasurementNoiseModel(
        r_diagonal=np.maximum(noise.r_diagonal, 1e-6))

    historical_demand = np.mean(np.stack(calibrated), axis=0)
    hist_counts = historical_counts(scenario, historical_demand, config.kernel)
    historical = HistoricalProfile(demand=historical_demand,
                                   counts=hist_counts)

    n_train = len(training)
    train_dev = [est - historical_demand for est in calibrated[:n_train]]
    val_dev = [est - historical_demand for est in calibrated[n_train:]]
    pooled_train = np.concatenate(train_dev, axis=0)
    best_order = select_ar_order(pooled_train, config.ar_max_order)
    if val_dev:
        best_err = np.inf
        for order in range(1, config.ar_max_order + 1):
            try:
                model = fit_ar(pooled_train, order)
            except Exception:
                continue
            err = 0.0
            for dev in val_dev:
                for h in range(order, dev.shape[0]):
                    history = dev[h - order:h][::-1]
                    pred = model.predict_next(history)
                    err += float(np.sum((dev[h] - pred) ** 2))
            if err < best_err - 1e-12:
                best_err, best_order = err, order
    model = fit_ar(pooled_train, best_order)
    q = estimate_q(train_dev + val_dev, model)
    transition = ARTransitionModel(order=model.order,
                                   coefficients=model.coefficients,
                                   noise_variance_q=q,
                                   n_parameters=model.n_parameters)
    return PreparedInputs(historical=historical, transition=transition,
                          noise=noise)


def run_pipeline(config: RunConfig, prepared: PreparedInputs | None = None):
    """Generate synthetic days per the scenario splits, prepare, calibrate.

    Returns (prepared inputs, test day, online result).
    """
    scenario = config.scenario
    seeds = scenario.seeds
    base = seeds.get("train_base", 100)
    if prepared is None:
        training = [generate_day(scenario, base + d, config.kernel)
                    for d in range(scenario.splits.get("train", 1))]
        validation = [generate_day(scenario, base + 50 + d, config.kernel)
                      for d in range(scenario.splits.get("validation", 0))]
        prepared = prepare_inputs(scenario, training, validation, config)
    test_day = generate_day(scenario, seeds.get("demand", 0), config.kernel)
    result = run_online(config, prepared, test_day)
    return prepared, test_day, result
