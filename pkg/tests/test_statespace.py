import numpy as np
import pytest

from odcal.statespace import (
    ARTransitionModel,
    AugmentedState,
    DegenerateFitError,
    HistoricalProfile,
    MeasurementNoiseModel,
    build_companion,
    estimate_q,
    estimate_r,
    fit_ar,
    select_ar_order,
    time_update,
)


def ar(coeffs, n=1, q=0.0):
    coeffs = np.atleast_1d(np.asarray(coeffs, dtype=float))
    return ARTransitionModel(order=coeffs.size, coefficients=coeffs,
                             noise_variance_q=q, n_parameters=n)


def simulate_ar(coeffs, steps, noise_std, seed, n=1):
    rng = np.random.default_rng(seed)
    p = len(coeffs)
    data = np.zeros((steps, n))
    data[:p] = rng.standard_normal((p, n))
    for h in range(p, steps):
        for lag in range(p):
            data[h] += coeffs[lag] * data[h - lag - 1]
        data[h] += noise_std * rng.standard_normal(n)
    return data


class TestBuildCompanion:
    def test_scalar_ar2(self):
        trans = build_companion(ar([0.884, 0.0967]), degree=2)
        np.testing.assert_allclose(trans.phi, [[0.884, 0.0967], [1.0, 0.0]])

    def test_random_walk(self):
        trans = build_companion(ar([1.0]), degree=1)
        np.testing.assert_array_equal(trans.phi, [[1.0]])

    def test_block_layout_n2_r3(self):
        trans = build_companion(ar([0.5], n=2), degree=3)
        expected = np.zeros((6, 6))
        expected[:2, :2] = 0.5 * np.eye(2)
        expected[2:, :4] = np.eye(4)
        np.testing.assert_array_equal(trans.phi, expected)

    def test_truncation_below_order(self):
        # degree below the AR order keeps the upper-left sub-matrix
        trans = build_companion(ar([0.6, 0.3, 0.1]), degree=2)
        np.testing.assert_allclose(trans.phi, [[0.6, 0.3], [1.0, 0.0]])

    def test_noise_only_on_newest_block(self):
        trans = build_companion(ar([0.5], n=2, q=2.5), degree=3)
        expected = np.zeros((6, 6))
        expected[:2, :2] = 2.5 * np.eye(2)
        np.testing.assert_array_equal(trans.q_expanded, expected)

    def test_q_diagonal_override(self):
        trans = build_companion(ar([0.5], n=2, q=1.0), degree=1,
                                q_diagonal=np.array([4.0, 9.0]))
        np.testing.assert_array_equal(trans.q_expanded, np.diag([4.0, 9.0]))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            build_companion(ar([0.5]), degree=1,
                            q_diagonal=np.array([1.0, 2.0]))


class TestTimeUpdate:
    def test_scalar(self):
        state = AugmentedState(stacked=np.array([2.0]),
                               covariance=np.array([[1.0]]), degree=1)
        trans = build_companion(ar([1.0], q=0.5), degree=1)
        out = time_update(state, trans)
        assert out.stacked[0] == 2.0
        assert out.covariance[0, 0] == 1.5

    def test_ar2_companion_mean(self):
        state = AugmentedState(stacked=np.array([10.0, 5.0]),
                               covariance=np.eye(2), degree=2)
        trans = build_companion(ar([0.884, 0.0967]), degree=2)
        out = time_update(state, trans)
        assert out.stacked[0] == pytest.approx(9.3235, abs=1e-12)
        assert out.stacked[1] == 10.0

    def test_zero_state_updates_covariance_only(self):
        state = AugmentedState(stacked=np.zeros(2), covariance=2.0 * np.eye(2),
                               degree=2)
        trans = build_companion(ar([0.7, 0.1], q=1.0), degree=2)
        out = time_update(state, trans)
        np.testing.assert_array_equal(out.stacked, np.zeros(2))
        assert not np.array_equal(out.covariance, state.covariance)

    def test_history_shift_is_exact(self):
        rng = np.random.default_rng(3)
        n, r = 3, 4
        stacked = rng.normal(size=n * r)
        state = AugmentedState(stacked=stacked, covariance=np.eye(n * r),
                               degree=r)
        trans = build_companion(ar(rng.normal(size=2), n=n, q=0.1), degree=r)
        out = time_update(state, trans)
        np.testing.assert_array_equal(out.stacked[n:], stacked[:-n])

    def test_covariance_stays_symmetric_psd(self):
        rng = np.random.default_rng(11)
        n, r = 2, 3
        A = rng.normal(size=(n * r, n * r))
        state = AugmentedState(stacked=rng.normal(size=n * r),
                               covariance=A @ A.T, degree=r)
        trans = build_companion(ar([0.9, 0.05], n=n, q=0.3), degree=r)
        for _ in range(50):
            state = time_update(state, trans)
        P = state.covariance
        assert np.max(np.abs(P - P.T)) < 1e-10
        eigmin = np.min(np.linalg.eigvalsh(P))
        assert eigmin >= -1e-8 * np.linalg.norm(P)


class TestFitAr:
    def test_recovers_published_ar2(self):
        data = simulate_ar([0.884, 0.0967], 5000, np.sqrt(17.6), seed=5)
        model = fit_ar(data, order=2)
        assert model.coefficients[0] == pytest.approx(0.884, abs=0.03)
        assert model.coefficients[1] == pytest.approx(0.0967, abs=0.03)

    def test_noiseless_ar1_exact(self):
        data = np.zeros((200, 1))
        data[0, 0] = 3.0
        for h in range(1, 200):
            data[h] = 0.5 * data[h - 1]
        model = fit_ar(data, order=1)
        assert model.coefficients[0] == 0.5
        assert model.noise_variance_q == 0.0

    def test_noiseless_recovery_tight(self):
        data = simulate_ar([0.6, 0.25], 400, 0.0, seed=9)
        # pure recursion decays; re-seed amplitude so the design has signal
        data += simulate_ar([0.6, 0.25], 400, 0.0, seed=10)
        model = fit_ar(data, order=2)
        np.testing.assert_allclose(model.coefficients, [0.6, 0.25], atol=1e-9)

    def test_constant_series_gives_unit_coefficient(self):
        data = np.full((50, 1), 7.0)
        model = fit_ar(data, order=1)
        assert model.coefficients[0] == pytest.approx(1.0, abs=1e-12)

    def test_zero_series_degenerate(self):
        with pytest.raises(DegenerateFitError):
            fit_ar(np.zeros((50, 2)), order=1)

    def test_too_short(self):
        with pytest.raises(ValueError):
            fit_ar(np.ones((3, 1)), order=2)


class TestSelectArOrder:
    def test_recovers_ar2_across_seeds(self):
        # Monte-Carlo oracle over 100 seeds: plain AIC picks the true order 2
        # as the clear mode (72/100 here) and never underfits; the remaining
        # picks are the usual AIC overselection of 3..5.
        picks = []
        for seed in range(100):
            data = simulate_ar([0.884, 0.0967], 5000, np.sqrt(17.6), seed=seed)
            picks.append(select_ar_order(data, max_order=5))
        picks = np.array(picks)
        assert np.all(picks >= 2)
        assert np.sum(picks == 2) >= 60
        values, counts = np.unique(picks, return_counts=True)
        assert values[np.argmax(counts)] == 2

    def test_white_noise_prefers_smallest(self):
        rng = np.random.default_rng(0)
        data = rng.standard_normal((2000, 1))
        assert select_ar_order(data, max_order=4) == 1

    def test_deterministic_ar1(self):
        data = np.zeros((100, 1))
        data[0] = 1.0
        for h in range(1, 100):
            data[h] = 0.9 * data[h - 1]
        assert select_ar_order(data, max_order=3) == 1


class TestEstimateR:
    def test_two_residuals(self):
        noise = estimate_r(np.array([[[3.0], [-3.0]]]))
        assert noise.r_diagonal[0] == 9.0

    def test_all_zero_marks_exact(self):
        noise = estimate_r(np.zeros((2, 4, 3)))
        np.testing.assert_array_equal(noise.r_diagonal, np.zeros(3))
        assert noise.exact.all()

    def test_four_residuals(self):
        noise = estimate_r(np.array([[[1.0], [2.0], [3.0], [4.0]]]))
        assert noise.r_diagonal[0] == 7.5

    def test_matches_brute_force(self):
        rng = np.random.default_rng(2)
        resid = rng.normal(size=(3, 7, 5))
        noise = estimate_r(resid)
        D, N, m = resid.shape
        for i in range(m):
            total = 0.0
            for d in range(D):
                for h in range(N):
                    total += resid[d, h, i] ** 2
            assert noise.r_diagonal[i] == pytest.approx(total / (D * N),
                                                        rel=1e-13)

    def test_empty_errors(self):
        with pytest.raises(ValueError):
            estimate_r([])


class TestEstimateQ:
    def test_synthetic_ar2_variance(self):
        days = [simulate_ar([0.884, 0.0967], 3000, np.sqrt(17.6), seed=s)
                for s in range(4)]
        model = ar([0.884, 0.0967])
        assert estimate_q(days, model) == pytest.approx(17.6, rel=0.05)

    def test_exact_transition_zero(self):
        data = np.zeros((50, 1))
        data[0] = 4.0
        for h in range(1, 50):
            data[h] = 0.5 * data[h - 1]
        assert estimate_q(data, ar([0.5])) == 0.0

    def test_two_residuals(self):
        # one OD, transitions leave residuals {2, -2}
        data = np.array([[0.0], [2.0], [-2.0]])
        assert estimate_q(data, ar([0.0])) == 4.0

    def test_matches_brute_force(self):
        rng = np.random.default_rng(8)
        days = [rng.normal(size=(20, 3)) for _ in range(2)]
        model = ar([0.7, 0.2], n=3)
        total, count = 0.0, 0
        for day in days:
            for h in range(2, 20):
                pred = 0.7 * day[h - 1] + 0.2 * day[h - 2]
                for i in range(3):
                    total += (day[h, i] - pred[i]) ** 2
                    count += 1
        assert estimate_q(days, model) == pytest.approx(total / count, rel=1e-13)


class TestTypes:
    def test_noise_model_rejects_silent_zero(self):
        with pytest.raises(ValueError):
            MeasurementNoiseModel(r_diagonal=np.array([0.0, 1.0]))
        ok = MeasurementNoiseModel(r_diagonal=np.array([0.0, 1.0]),
                                   exact=np.array([True, False]))
        assert ok.r_diagonal[0] == 0.0

    def test_augmented_state_symmetry_guard(self):
        bad = np.array([[1.0, 0.5], [0.0, 1.0]])
        with pytest.raises(ValueError):
            AugmentedState(stacked=np.zeros(2), covariance=bad, degree=2)

    def test_historical_profile_stacking(self):
        prof = HistoricalProfile(demand=np.arange(6.0).reshape(3, 2),
                                 counts=np.zeros((3, 1)))
        stacked = prof.stacked_demand(2, 3)  # clamps below interval 1
        np.testing.assert_array_equal(stacked, [2.0, 3.0, 0.0, 1.0, 0.0, 1.0])
