import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.base import clone

from conftest import field
from stochns.estimators import (
    DecayEstimator,
    Ensemble,
    EstimatorError,
    MomentEstimator,
    OccupationEstimator,
    PathStats,
    bootstrap_curve,
    continuity_test,
    decay_test,
    histogram_agreement,
    moment_bound,
    moment_curve,
    occupation_bound,
    occupation_measure,
)
from stochns.integrator import IntegratorConfig
from stochns.spectral import SpectralField, Truncation, sobolev_norm_sq

T2 = Truncation(2)
GEO = "exponential_geometric_em"


def quiet(t_end=1.0, paths=2, **kw):
    return Ensemble(IntegratorConfig(t_end=t_end, **kw), None, None, paths)


class TestPathStats:
    @given(st.lists(st.floats(-1e3, 1e3), min_size=4, max_size=40), st.integers(2, 100))
    def test_merge_equals_pooled(self, values, cut):
        values = np.array(values)
        cut = 2 + cut % (len(values) - 3)
        a, b = PathStats.from_values(values[:cut]), PathStats.from_values(values[cut:])
        m, pooled = a.merge(b), PathStats.from_values(values)
        assert m.count == pooled.count
        assert m.mean == pytest.approx(pooled.mean, rel=1e-9, abs=1e-9)
        assert m.m2 == pytest.approx(pooled.m2, rel=1e-7, abs=1e-6)

    def test_stderr_needs_two(self):
        with pytest.raises(EstimatorError):
            PathStats.from_values([1.0]).stderr

    def test_stderr_value(self):
        s = PathStats.from_values([0.0, 2.0])
        assert s.stderr == pytest.approx(1.0)


class TestBounds:
    def test_moment_bound_without_slack(self):
        x = field(T2, 2.0)
        assert moment_bound(x, 1.5, 4.0) == pytest.approx(math.sqrt(2.0))

    def test_moment_bound_grows_linearly_with_slack(self):
        x = field(T2, 1.0)
        assert moment_bound(x, 1.5, 2.0, 1.0) == pytest.approx(1.0 + 0.25 * 2.0)

    def test_occupation_bound_from_zero(self):
        z = SpectralField.zeros(T2)
        for T in (2.0, 4.0, 8.0):
            assert occupation_bound(z, 1.5, T) == pytest.approx(0.75)

    def test_occupation_bound_decreases_with_horizon(self):
        x = field(T2, 1.0)
        vals = [occupation_bound(x, 1.5, T) for T in (2, 4, 8)]
        assert vals == pytest.approx([1.5 + 2 / T for T in (2, 4, 8)])


class TestMoments:
    def test_zero_data_zero_noise(self):
        c = moment_curve(quiet(), SpectralField.zeros(T2))
        assert np.all(c.values == 0) and np.all(c.stderr == 0)

    def test_zero_noise_curve_deterministic_and_decreasing(self):
        ens = quiet(paths=3)
        res = ens.run(field(T2, 1.0, 2))
        assert np.array_equal(res.final[0, 0], res.final[0, 2])
        c = moment_curve(ens, field(T2, 1.0, 2), p=0.5, result=res)
        assert np.all(c.stderr <= 1e-15)
        assert np.all(np.diff(c.values) <= 0)
        assert c.passed

    def test_bound_checked_for_default_moment(self):
        c = moment_curve(quiet(), field(T2, 1.0, 2))
        assert c.bound == pytest.approx(1.0) and c.passed

    def test_rejects_bad_power(self):
        with pytest.raises(ValueError):
            moment_curve(quiet(), field(T2), p=3.0)

    def test_refuses_when_most_paths_stopped(self):
        ens = quiet(r_threshold=0.5)
        with pytest.raises(EstimatorError, match="unstopped"):
            moment_curve(ens, field(T2, 1.0))

    def test_untracked_norm(self):
        with pytest.raises(ValueError, match="tracked"):
            moment_curve(quiet(), field(T2), s=0.25)

    def test_certified_noise_below_bound(self, basis, noise):
        ens = Ensemble(IntegratorConfig(t_end=0.5, scheme=GEO), basis, noise, 40)
        c = moment_curve(ens, field(T2, 1.0, 11))
        assert c.passed and c.sup_value <= c.bound
        assert c.integral_mean > 0


class TestBootstrap:
    def test_zero(self):
        c = bootstrap_curve(quiet(), SpectralField.zeros(T2), 0.1)
        assert np.all(c.values == 0) and c.integral_mean == 0

    def test_rough_data_is_smoothed(self):
        x = field(T2, 1.0, 3, decay=-1.0)
        c = bootstrap_curve(quiet(t_end=0.5), x, 0.1)
        assert c.values[0] < 0.5 * c.extra["t0_value"]

    def test_sup_monotone_in_eps(self, basis, noise):
        ens = Ensemble(IntegratorConfig(t_end=0.5, scheme=GEO), basis, noise, 10)
        x = field(T2, 1.0, 3)
        res = ens.run(x)
        sups = [bootstrap_curve(ens, x, e, result=res).sup_value for e in (0.05, 0.1, 0.2)]
        assert sups[0] >= sups[1] >= sups[2]

    def test_needs_snapshot_in_window(self):
        with pytest.raises(EstimatorError):
            bootstrap_curve(quiet(snapshot_stride=100), field(T2), 0.01)

    def test_rejects_non_positive_eps(self):
        with pytest.raises(ValueError):
            bootstrap_curve(quiet(), field(T2), 0.0)


class TestDecay:
    def test_zero_start_trivially_passes(self, basis, noise):
        ens = Ensemble(IntegratorConfig(t_end=1.0, scheme=GEO), basis, noise, 4)
        fit = decay_test(ens, SpectralField.zeros(T2), True, check_times=(0.5, 1.0))
        assert fit.passed and fit.verdict == "passed"

    def test_uncertified_not_covered(self):
        fit = decay_test(quiet(), field(T2), certified=False)
        assert fit.verdict == "not covered" and not fit.covered and not fit.passed

    def test_uncertified_run_is_unverified(self):
        fit = decay_test(quiet(t_end=1.0), field(T2, 1.0, 2), certified=False, check_times=(0.5, 1.0),
                         run_uncovered=True)
        assert fit.verdict == "unverified" and not fit.passed
        assert fit.mean_test

    def test_zero_noise_decays_faster_than_bound(self):
        fit = decay_test(quiet(t_end=2.0), field(T2, 1.0, 2), True, check_times=(0.5, 1.0, 2.0))
        assert fit.passed and fit.kappa_hat > fit.kappa_bound == 0.25

    def test_unknown_check_time(self):
        with pytest.raises(EstimatorError):
            decay_test(quiet(t_end=1.0), field(T2), True, check_times=(0.5, 0.5005))


class TestContinuity:
    def test_zero_noise_is_lipschitz(self):
        rep = continuity_test(quiet(t_end=0.5), field(T2, 1.0, 2))
        assert rep.zero_exact and rep.monotone and rep.below_linear and rep.passed

    def test_noisy_pairs(self, basis, noise):
        ens = Ensemble(IntegratorConfig(t_end=0.3, scheme=GEO), basis, noise, 16)
        rep = continuity_test(ens, field(T2, 1.0, 11))
        assert rep.zero_exact and rep.monotone

    def test_flags_stopping_dominated(self, basis, noise):
        from stochns.noise import KirchhoffNoise

        ens = Ensemble(IntegratorConfig(t_end=0.5, scheme=GEO, r_threshold=1.1), basis,
                       KirchhoffNoise((0.5,) * 4), 16)
        rep = continuity_test(ens, field(T2, 1.0, 11), sizes=(0.5, 0.25, 0.1))
        assert rep.stopping_dominated and not rep.passed


class TestOccupation:
    def test_zero_noise_zero_start_is_point_mass(self):
        stats = occupation_measure(quiet(t_end=4.0), horizons=(2, 4), trunc=T2)
        for s in stats:
            assert s.functional_mean == 0.0
            assert s.histogram[0] == pytest.approx(1.0) and sum(s.histogram[1:]) == 0.0

    def test_histogram_sums_to_one(self, basis, noise):
        ens = Ensemble(IntegratorConfig(t_end=2.0, scheme=GEO), basis, noise, 8)
        for s in occupation_measure(ens, horizons=(1, 2), start=field(T2, 1.0, 11)):
            assert sum(s.histogram) == pytest.approx(1.0)

    def test_horizon_past_run_end(self):
        with pytest.raises(EstimatorError):
            occupation_measure(quiet(t_end=1.0), horizons=(2,), trunc=T2)

    def test_needs_start_or_truncation(self):
        with pytest.raises(ValueError):
            occupation_measure(quiet(), horizons=(1,))

    def test_agreement_with_itself(self):
        s = occupation_measure(quiet(t_end=2.0), horizons=(2,), start=field(T2, 1.0))[0]
        agree, tv = histogram_agreement(s, s)
        assert agree and tv == 0.0


class TestWrappers:
    def test_clone_keeps_params(self, basis, noise):
        est = MomentEstimator(basis, noise, n_paths=7, t_end=0.3)
        c = clone(est)
        assert c.get_params()["n_paths"] == 7 and c.get_params()["t_end"] == 0.3

    def test_fit_sets_attributes(self):
        est = MomentEstimator(n_paths=2, t_end=0.2).fit(field(T2, 1.0, 2))
        assert est.curve_.passed
        dec = DecayEstimator(n_paths=2, t_end=1.0, certified=True, check_times=(0.5, 1.0)).fit(field(T2, 1.0, 2))
        assert dec.kappa_hat_ > 0.25

    def test_occupation_wrapper(self):
        est = OccupationEstimator(n_paths=2, t_end=2.0, horizons=(1.0, 2.0)).fit(SpectralField.zeros(T2))
        assert [s.horizon for s in est.stats_] == [1.0, 2.0]

    def test_results_are_deterministic(self, basis, noise):
        a = MomentEstimator(basis, noise, n_paths=5, t_end=0.2, seed=3, scheme=GEO).fit(field(T2, 1.0, 1))
        b = MomentEstimator(basis, noise, n_paths=5, t_end=0.2, seed=3, scheme=GEO).fit(field(T2, 1.0, 1))
        assert np.array_equal(a.curve_.values, b.curve_.values)
        assert sobolev_norm_sq(field(T2, 1.0, 1), 0.5) == pytest.approx(1.0)
