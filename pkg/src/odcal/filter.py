"""Recursive estimator for stacked demand deviations.

One interval of work: propagate the state through the companion transition,
linearize the simulator around the prior, apply the Kalman measurement
update (Joseph-form covariance), then project the posterior onto the set of
non-negative reconstructed OD flows with a bound-constrained QP.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .statespace import (
    AugmentedState,
    CompanionTransition,
    HistoricalProfile,
    MeasurementNoiseModel,
    time_update,
)

__all__ = [
    "FilterConfig",
    "LinearizedMeasurement",
    "UpdateDiagnostics",
    "InnovationSingularError",
    "ConstraintSolveError",
    "measurement_update",
    "constrain_posterior",
    "solve_bound_qp",
    "run_interval",
]


class InnovationSingularError(np.linalg.LinAlgError):
    """Innovation covariance not invertible even after regularization."""


class ConstraintSolveError(RuntimeError):
    """QP projection failed to reach the KKT tolerance within the iteration cap."""

    def __init__(self, message: str, kkt_residual: float):
        super().__init__(message)
        self.kkt_residual = kkt_residual


@dataclass
class FilterConfig:
    """Knobs for one calibration run.

    ``gain_regularization`` scales the ridge added to the innovation matrix:
    lambda = gain_regularization * trace(S) / m. Set it to 0 for exact-sensor
    scenarios. ``full_ar_mean_prior`` keeps the full AR recursion for the mean
    prior when the augmentation degree is below the AR order (the covariance
    always uses the truncated companion).
    """

    degree: int = 1
    constraint_mode: str = "nonneg"  # or "unconstrained"
    gain_regularization: float = 1e-8
    qp_tolerance: float = 1e-9
    qp_max_iter: int = 200
    full_ar_mean_prior: bool = True

    def __post_init__(self):
        if self.degree < 1:
            raise ValueError("degree must be >= 1")
        if self.constraint_mode not in ("nonneg", "unconstrained"):
            raise ValueError(f"unknown constraint mode {self.constraint_mode!r}")
        if self.qp_tolerance <= 0:
            raise ValueError("qp_tolerance must be positive")
        if self.gain_regularization < 0:
            raise ValueError("gain_regularization must be non-negative")


@dataclass
class LinearizedMeasurement:
    """Measurement equation linearized around the prior, in deviation space.

    ``theta`` is the (m, r*n) Jacobian over the stacked state,
    ``base_prediction`` the simulated count deviation at the prior, and
    ``observed_deviation`` the observed count deviation. Their difference is
    the innovation; the shared historical baseline cancels out of it.
    """

    theta: np.ndarray
    base_prediction: np.ndarray
    observed_deviation: np.ndarray

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        self.base_prediction = np.asarray(self.base_prediction, dtype=float)
        self.observed_deviation = np.asarray(self.observed_deviation, dtype=float)
        m = self.theta.shape[0]
        if not np.all(np.isfinite(self.theta)):
            raise ValueError("jacobian contains non-finite entries")
        if self.base_prediction.shape != (m,) or self.observed_deviation.shape != (m,):
            raise ValueError("prediction/observation length must match jacobian rows")
        if not (np.all(np.isfinite(self.base_prediction))
                and np.all(np.isfinite(self.observed_deviation))):
            raise ValueError("measurement deviations contain non-finite entries")

    @property
    def innovation(self) -> np.ndarray:
        return self.observed_deviation - self.base_prediction


@dataclass
class UpdateDiagnostics:
    interval: int | None = None
    innovation_norm: float = 0.0
    gain_norm: float = 0.0
    active_constraints: int = 0


def measurement_update(prior: AugmentedState, lin: LinearizedMeasurement,
                       noise: MeasurementNoiseModel,
                       config: FilterConfig | None = None,
                       interval: int | None = None
                       ) -> tuple[AugmentedState, UpdateDiagnostics]:
    """A-posteriori mean and covariance from one interval's measurements.

    The covariance uses the Joseph form (I-K Theta) P (I-K Theta)^T + K R K^T,
    which stays positive semidefinite under roundoff where the textbook
    short form does not.
    """
    config = config or FilterConfig()
    theta = lin.theta
    m, dim = theta.shape
    if dim != prior.stacked.shape[0]:
        raise ValueError("jacobian width does not match state dimension")
    if noise.n_sensors != m:
        raise ValueError("noise model does not match sensor count")
    P = prior.covariance
    PHt = P @ theta.T
    S = theta @ PHt + noise.matrix()
    if config.gain_regularization > 0.0:
        ridge = config.gain_regularization * np.trace(S) / m
        S = S + ridge * np.eye(m)
    try:
        gain = np.linalg.solve(S, PHt.T).T
    except np.linalg.LinAlgError as exc:
        label = f"interval {interval}" if interval is not None else "update"
        raise InnovationSingularError(
            f"innovation covariance singular at {label}") from exc
    innovation = lin.innovation
    mean = prior.stacked + gain @ innovation
    A = np.eye(dim) - gain @ theta
    cov = A @ P @ A.T + gain @ noise.matrix() @ gain.T
    cov = (cov + cov.T) / 2.0
    post = AugmentedState(stacked=mean, covariance=cov, degree=prior.degree)
    diag = UpdateDiagnostics(interval=interval,
                             innovation_norm=float(np.linalg.norm(innovation)),
                             gain_norm=float(np.linalg.norm(gain)))
    return post, diag


def solve_bound_qp(mean: np.ndarray, cov: np.ndarray, lower: np.ndarray,
                   tolerance: float = 1e-9, max_iter: int = 200) -> np.ndarray:
    """Minimize (z-mean)^T cov^{-1} (z-mean) subject to z >= lower.

    Primal active-set on the bounds. With an active set A the minimizer over
    the free block is the Gaussian conditional mean given z_A pinned at the
    bound; multipliers come from cov^{-1}(z-mean). The objective is strictly
    convex for positive-definite cov, so the loop terminates.
    """
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    lower = np.asarray(lower, dtype=float)
    dim = mean.shape[0]
    if np.all(mean >= lower):
        return mean.copy()
    active = mean < lower
    z = mean.copy()
    worst = np.inf
    for _ in range(max_iter):
        idx_a = np.flatnonzero(active)
        idx_f = np.flatnonzero(~active)
        z = mean.copy()
        z[idx_a] = lower[idx_a]
        if idx_f.size and idx_a.size:
            caa = cov[np.ix_(idx_a, idx_a)]
            cfa = cov[np.ix_(idx_f, idx_a)]
            shift = np.linalg.solve(caa, lower[idx_a] - mean[idx_a])
            z[idx_f] = mean[idx_f] + cfa @ shift
        violated = z < lower - tolerance
        if np.any(violated):
            active |= violated
            continue
        grad = np.linalg.solve(cov, z - mean)
        mult = grad[idx_a] if idx_a.size else np.empty(0)
        worst = float(max(np.max(lower - z, initial=0.0),
                          np.max(-mult, initial=0.0)))
        if mult.size == 0 or np.min(mult) >= -tolerance:
            return np.maximum(z, lower)
        # Release the most wrongly-signed bound and retry.
        drop = idx_a[int(np.argmin(mult))]
        active[drop] = False
    raise ConstraintSolveError(
        f"bound QP did not converge in {max_iter} iterations "
        f"(worst KKT residual {worst:.3e})", kkt_residual=worst)


def constrain_posterior(post: AugmentedState, historical: HistoricalProfile,
                        interval: int, config: FilterConfig | None = None
                        ) -> AugmentedState:
    """Project the posterior mean onto non-negative reconstructed OD flows.

    Deviations must satisfy delta >= -x_hist elementwise over the stacked
    window. A feasible posterior is returned unchanged (same object).
    """
    config = config or FilterConfig(degree=post.degree)
    lower = -historical.stacked_demand(interval, post.degree)
    if np.all(post.stacked >= lower):
        return post
    z = solve_bound_qp(post.stacked, post.covariance, lower,
                       tolerance=config.qp_tolerance,
                       max_iter=config.qp_max_iter)
    return AugmentedState(stacked=z, covariance=post.covariance,
                          degree=post.degree)


class MeasurementSystem(Protocol):
    """What the filter needs from the simulator side for one interval."""

    def linearize(self, interval: int, prior: AugmentedState) -> LinearizedMeasurement:
        """Jacobian and base prediction at the prior, in deviation space."""
        ...


def run_interval(prior: AugmentedState, trans: CompanionTransition,
                 system: MeasurementSystem, noise: MeasurementNoiseModel,
                 config: FilterConfig, historical: HistoricalProfile,
                 interval: int,
                 mean_prior_override: np.ndarray | None = None
                 ) -> tuple[AugmentedState, UpdateDiagnostics]:
    """One full filter cycle: time update, linearization, update, projection.

    ``mean_prior_override`` replaces the top block of the propagated mean
    (used when the full AR recursion extends past the augmentation window).
    """
    predicted = time_update(prior, trans)
    if mean_prior_override is not None:
        n = predicted.block_size
        stacked = predicted.stacked.copy()
        stacked[:n] = mean_prior_override
        predicted = AugmentedState(stacked=stacked,
                                   covariance=predicted.covariance,
                                   degree=predicted.degree)
    lin = system.linearize(interval, predicted)
    post, diag = measurement_update(predicted, lin, noise, config, interval)
    if config.constraint_mode == "nonneg":
        constrained = constrain_posterior(post, historical, interval, config)
        if constrained is not post:
            lower = -historical.stacked_demand(interval, post.degree)
            diag.active_constraints = int(np.sum(
                np.isclose(constrained.stacked, lower, atol=1e-9)))
        post = constrained
    return post, diag
