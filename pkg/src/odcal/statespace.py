"""Deviation-form state model for time-varying OD demand.

States are deviations of OD flows from their historical values, stacked
over the last ``r`` intervals so that measurements arriving with a delay
can still update past demand. The transition is a linear autoregression
with one scalar coefficient per lag, shared across OD pairs, wrapped into
a block-companion matrix for the stacked state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DegenerateFitError",
    "ParameterVector",
    "HistoricalProfile",
    "DeviationState",
    "ARTransitionModel",
    "AugmentedState",
    "CompanionTransition",
    "MeasurementNoiseModel",
    "build_companion",
    "time_update",
    "fit_ar",
    "select_ar_order",
    "estimate_r",
    "estimate_q",
]


class DegenerateFitError(ValueError):
    """Raised when the AR normal equations are singular (e.g. constant-zero data)."""


def _as_series(series) -> np.ndarray:
    """Accept a (H, n) array or a list of ParameterVector; return (H, n) floats."""
    if isinstance(series, np.ndarray):
        out = np.asarray(series, dtype=float)
        if out.ndim == 1:
            out = out[:, None]
        return out
    rows = [np.asarray(p.values, dtype=float) for p in series]
    return np.stack(rows, axis=0)


@dataclass(frozen=True)
class ParameterVector:
    """OD flows (vehicles/hour) for one departure interval."""

    values: np.ndarray
    interval_index: int

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(values)):
            raise ValueError("parameter vector contains non-finite entries")
        object.__setattr__(self, "values", values)


@dataclass(frozen=True)
class HistoricalProfile:
    """Per-interval historical OD flows and the sensor counts they produce.

    ``demand`` is (H, n), ``counts`` is (H, m). Interval indices are 1-based;
    lookups below 1 clamp to the first interval (used only for the zero-padded
    blocks at the start of a run).
    """

    demand: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        demand = np.asarray(self.demand, dtype=float)
        counts = np.asarray(self.counts, dtype=float)
        if demand.ndim != 2 or counts.ndim != 2:
            raise ValueError("historical demand and counts must be 2-D")
        if demand.shape[0] != counts.shape[0]:
            raise ValueError("historical demand/counts cover different horizons")
        if np.any(demand < 0) or np.any(counts < 0):
            raise ValueError("historical values must be non-negative")
        object.__setattr__(self, "demand", demand)
        object.__setattr__(self, "counts", counts)

    @property
    def horizon(self) -> int:
        return self.demand.shape[0]

    @property
    def n_parameters(self) -> int:
        return self.demand.shape[1]

    def demand_at(self, interval: int) -> np.ndarray:
        return self.demand[max(interval, 1) - 1]

    def counts_at(self, interval: int) -> np.ndarray:
        return self.counts[max(interval, 1) - 1]

    def stacked_demand(self, interval: int, degree: int) -> np.ndarray:
        """Window [interval, interval-1, ...] of historical demand, newest first."""
        return np.concatenate(
            [self.demand_at(interval - i) for i in range(degree)])


@dataclass(frozen=True)
class DeviationState:
    """OD-flow deviation from the historical value for one interval."""

    delta: np.ndarray
    interval_index: int

    def __post_init__(self):
        delta = np.asarray(self.delta, dtype=float)
        if not np.all(np.isfinite(delta)):
            raise ValueError("deviation contains non-finite entries")
        object.__setattr__(self, "delta", delta)

    def reconstruct(self, historical: HistoricalProfile) -> np.ndarray:
        """Actual OD flows implied by this deviation (clipped at zero)."""
        return np.maximum(historical.demand_at(self.interval_index) + self.delta, 0.0)


@dataclass(frozen=True)
class ARTransitionModel:
    """Autoregression with a single scalar coefficient per lag.

    Each lag coefficient acts as ``coefficients[l] * I`` on the OD vector;
    ``coefficient_matrix`` materializes the dense block when needed. The
    process noise is a universal variance applied to every OD pair.
    """

    order: int
    coefficients: np.ndarray  # shape (order,)
    noise_variance_q: float
    n_parameters: int

    def __post_init__(self):
        coefficients = np.asarray(self.coefficients, dtype=float)
        if self.order < 1:
            raise ValueError("AR order must be >= 1")
        if coefficients.shape != (self.order,):
            raise ValueError("need exactly one coefficient per lag")
        if self.noise_variance_q < 0:
            raise ValueError("process-noise variance must be non-negative")
        if self.n_parameters < 1:
            raise ValueError("n_parameters must be positive")
        object.__setattr__(self, "coefficients", coefficients)

    def coefficient_matrix(self, lag: int) -> np.ndarray:
        """Dense n-by-n effect matrix for ``lag`` in 1..order."""
        if not 1 <= lag <= self.order:
            raise ValueError(f"lag {lag} outside 1..{self.order}")
        return self.coefficients[lag - 1] * np.eye(self.n_parameters)

    def predict_next(self, history: np.ndarray) -> np.ndarray:
        """One-step mean prediction from ``history`` rows (newest first)."""
        history = np.asarray(history, dtype=float)
        if history.shape[0] < self.order:
            raise ValueError("history shorter than AR order")
        out = np.zeros(history.shape[1])
        for lag in range(self.order):
            out += self.coefficients[lag] * history[lag]
        return out


@dataclass
class AugmentedState:
    """Stacked deviation state over the last ``degree`` intervals with covariance."""

    stacked: np.ndarray
    covariance: np.ndarray
    degree: int

    SYMMETRY_TOL = 1e-8

    def __post_init__(self):
        self.stacked = np.asarray(self.stacked, dtype=float)
        self.covariance = np.asarray(self.covariance, dtype=float)
        if self.degree < 1:
            raise ValueError("augmentation degree must be >= 1")
        dim = self.stacked.shape[0]
        if dim % self.degree != 0:
            raise ValueError("stacked length must be a multiple of the degree")
        if self.covariance.shape != (dim, dim):
            raise ValueError("covariance shape does not match stacked state")
        asym = np.max(np.abs(self.covariance - self.covariance.T), initial=0.0)
        if asym > self.SYMMETRY_TOL:
            raise ValueError(f"covariance asymmetry {asym:.2e} above tolerance")

    @property
    def block_size(self) -> int:
        return self.stacked.shape[0] // self.degree

    def block(self, lag: int) -> np.ndarray:
        """Deviation block ``lag`` intervals behind the newest (lag 0 = newest)."""
        n = self.block_size
        return self.stacked[lag * n:(lag + 1) * n]


@dataclass(frozen=True)
class CompanionTransition:
    """Block-companion transition for the stacked state.

    Row blocks 2..r of ``phi`` are the exact shift ``[I | 0]``; the top block
    row carries the AR lag coefficients. Process noise enters only the newest
    block, so ``q_expanded`` is zero outside the top-left n-by-n block.
    """

    phi: np.ndarray
    q_expanded: np.ndarray

    def __post_init__(self):
        phi = np.asarray(self.phi, dtype=float)
        q = np.asarray(self.q_expanded, dtype=float)
        if phi.shape != q.shape or phi.ndim != 2 or phi.shape[0] != phi.shape[1]:
            raise ValueError("phi and q_expanded must be square and same shape")
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "q_expanded", q)

    @property
    def dim(self) -> int:
        return self.phi.shape[0]


@dataclass(frozen=True)
class MeasurementNoiseModel:
    """Diagonal sensor-noise variances; zero only for sensors flagged exact."""

    r_diagonal: np.ndarray
    exact: np.ndarray = field(default=None)

    def __post_init__(self):
        r = np.asarray(self.r_diagonal, dtype=float)
        exact = self.exact
        if exact is None:
            exact = np.zeros(r.shape, dtype=bool)
        exact = np.asarray(exact, dtype=bool)
        if r.ndim != 1 or exact.shape != r.shape:
            raise ValueError("r_diagonal and exact flags must be 1-D and aligned")
        if np.any(r < 0):
            raise ValueError("sensor variances must be non-negative")
        if np.any((r == 0) & ~exact):
            raise ValueError("zero variance only allowed for sensors flagged exact")
        object.__setattr__(self, "r_diagonal", r)
        object.__setattr__(self, "exact", exact)

    @property
    def n_sensors(self) -> int:
        return self.r_diagonal.shape[0]

    def matrix(self) -> np.ndarray:
        return np.diag(self.r_diagonal)


def build_companion(ar: ARTransitionModel, degree: int,
                    q_diagonal: np.ndarray | None = None) -> CompanionTransition:
    """Assemble the block-companion transition for a stacked state.

    When ``degree`` is below the AR order the top row keeps only the first
    ``degree`` lag coefficients (the upper-left sub-matrix of the full
    companion form). ``q_diagonal`` optionally replaces the universal
    variance with per-OD values on the newest block.
    """
    if degree < 1:
        raise ValueError("degree must be >= 1")
    n = ar.n_parameters
    dim = degree * n
    phi = np.zeros((dim, dim))
    for lag in range(min(ar.order, degree)):
        block = slice(lag * n, (lag + 1) * n)
        phi[:n, block] = np.eye(n) * ar.coefficients[lag]
    if degree > 1:
        shift = dim - n
        phi[n:, :shift] = np.eye(shift)
    q = np.zeros((dim, dim))
    if q_diagonal is not None:
        q_diagonal = np.asarray(q_diagonal, dtype=float)
        if q_diagonal.shape != (n,):
            raise ValueError("q_diagonal must have one entry per OD pair")
        q[:n, :n] = np.diag(q_diagonal)
    else:
        q[:n, :n] = np.eye(n) * ar.noise_variance_q
    return CompanionTransition(phi=phi, q_expanded=q)


def time_update(state: AugmentedState, trans: CompanionTransition) -> AugmentedState:
    """A-priori mean and covariance for the next interval.

    The covariance is re-symmetrized after propagation; roundoff otherwise
    accumulates asymmetry over long runs.
    """
    if trans.dim != state.stacked.shape[0]:
        raise ValueError("transition dimension does not match state")
    mean = trans.phi @ state.stacked
    cov = trans.phi @ state.covariance @ trans.phi.T + trans.q_expanded
    cov = (cov + cov.T) / 2.0
    return AugmentedState(stacked=mean, covariance=cov, degree=state.degree)


def _lag_regression(data: np.ndarray, order: int, start: int):
    """Pooled lag design for scalar-per-lag AR: returns (X, y) stacked over ODs.

    Row for interval h (0-based, h >= start) and OD i is
    [data[h-1, i], ..., data[h-order, i]] with target data[h, i].
    """
    H, n = data.shape
    if start < order:
        raise ValueError("start index must allow all lags")
    rows = H - start
    if rows < 1:
        raise ValueError("series too short for requested order")
    y = data[start:, :].reshape(-1)
    X = np.empty((rows * n, order))
    for lag in range(1, order + 1):
        X[:, lag - 1] = data[start - lag:H - lag, :].reshape(-1)
    return X, y


def _fit_pooled(data: np.ndarray, order: int, start: int):
    """Least-squares scalar-per-lag fit; returns (coefficients, rss, n_obs)."""
    X, y = _lag_regression(data, order, start)
    gram = X.T @ X
    rhs = X.T @ y
    # Singular normal equations mean the lagged predictors carry no signal
    # (e.g. an all-zero series); report that instead of returning noise.
    if np.linalg.matrix_rank(gram) < order:
        raise DegenerateFitError(
            f"normal equations singular for AR({order}); series is degenerate")
    coeffs = np.linalg.solve(gram, rhs)
    resid = y - X @ coeffs
    rss = float(resid @ resid)
    return coeffs, rss, y.shape[0]


def fit_ar(series, order: int) -> ARTransitionModel:
    """Fit one scalar coefficient per lag by pooled least squares.

    The residual mean square over all ODs and intervals becomes the
    universal process-noise variance.
    """
    data = _as_series(series)
    H, n = data.shape
    if order < 1:
        raise ValueError("order must be >= 1")
    if H <= order + 1:
        raise ValueError(f"series of length {H} too short for AR({order})")
    coeffs, rss, n_obs = _fit_pooled(data, order, order)
    return ARTransitionModel(order=order, coefficients=coeffs,
                             noise_variance_q=rss / n_obs, n_parameters=n)


def select_ar_order(series, max_order: int) -> int:
    """Pick the AR order in 1..max_order minimizing Gaussian AIC.

    All candidate orders are scored on the common sample (intervals with
    ``max_order`` lags available) so their likelihoods are comparable.
    Ties go to the smaller order.
    """
    if max_order < 1:
        raise ValueError("max_order must be >= 1")
    data = _as_series(series)
    if data.shape[0] <= max_order + 1:
        raise ValueError("series too short to compare the requested orders")
    best_order, best_aic = None, np.inf
    last_error = None
    for order in range(1, max_order + 1):
        try:
            _, rss, n_obs = _fit_pooled(data, order, max_order)
        except DegenerateFitError as exc:
            # Collinear lag design (e.g. a deterministic lower-order
            # recursion); this order is simply not a candidate.
            last_error = exc
            continue
        if rss <= 0.0:
            aic = -np.inf
        else:
            aic = n_obs * np.log(rss / n_obs) + 2.0 * order
        if aic < best_aic:
            best_order, best_aic = order, aic
    if best_order is None:
        raise last_error
    return best_order


def estimate_r(residuals) -> MeasurementNoiseModel:
    """Per-sensor mean squared simulated-vs-observed residual.

    ``residuals`` is (days, intervals, sensors) or a list of per-day
    (intervals, sensors) arrays.
    """
    if isinstance(residuals, np.ndarray) and residuals.ndim == 3:
        days = [residuals[d] for d in range(residuals.shape[0])]
    else:
        days = [np.asarray(day, dtype=float) for day in residuals]
    if not days:
        raise ValueError("need at least one day of residuals")
    stacked = np.concatenate([np.atleast_2d(day) for day in days], axis=0)
    if stacked.shape[0] == 0:
        raise ValueError("empty residual set")
    r = np.mean(stacked ** 2, axis=0)
    return MeasurementNoiseModel(r_diagonal=r, exact=(r == 0.0))


def estimate_q(states, trans: ARTransitionModel) -> float:
    """Pooled mean squared one-step transition residual.

    ``states`` is a list of per-day (intervals, n) series (or a single
    array). Residuals are formed wherever all AR lags are available.
    """
    if isinstance(states, np.ndarray) and states.ndim == 2:
        states = [states]
    total, count = 0.0, 0
    for day in states:
        data = _as_series(day)
        H = data.shape[0]
        if H < 2:
            raise ValueError("need at least two intervals per day")
        start = min(trans.order, H - 1)
        for h in range(start, H):
            pred = np.zeros(data.shape[1])
            for lag in range(1, min(trans.order, h) + 1):
                pred += trans.coefficients[lag - 1] * data[h - lag]
            resid = data[h] - pred
            total += float(resid @ resid)
            count += resid.shape[0]
    return total / count
