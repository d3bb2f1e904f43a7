import math

import numpy as np
import pytest

from conftest import field
from stochns.integrator import (
    IntegratorConfig,
    IntegratorFault,
    NoiseIncrement,
    SdeRun,
    TrajectoryRecord,
    draw_increments,
    path_streams,
    run_path,
    self_convergence,
    simulate,
    step,
)
from stochns.noise import KirchhoffNoise, TransportNoiseBasis
from stochns.spectral import SpectralField, Truncation, divergence_residual, sobolev_norm_sq

T2 = Truncation(2)
GEO = "exponential_geometric_em"


def shear(trunc=T2, k=(1, 0, 0), amp=0.7 + 0.2j):
    return SpectralField.from_modes(trunc, {k: np.array([0, amp, 0])})


class TestConfig:
    @pytest.mark.parametrize("kw", [{"dt": 0}, {"t_end": -1}, {"scheme": "rk4"}, {"snapshot_stride": 0},
                                    {"r_threshold": 0}, {"chunk": 0}])
    def test_rejects_bad_values(self, kw):
        with pytest.raises(ValueError):
            IntegratorConfig(**kw)

    def test_step_count(self):
        assert IntegratorConfig(dt=1e-3, t_end=0.5).n_steps == 500


class TestLinearStokes:
    @pytest.mark.parametrize("k", [(1, 0, 0), (2, 1, 0), (2, 2, 2)])
    def test_exponential_scheme_exact_per_step(self, k):
        t = T2
        kk = np.array(k, float)
        theta = np.cross(kk, [0, 0, 1.0]) if k[2] == 0 else np.cross(kk, [1.0, 0, 0])
        u = SpectralField.from_modes(t, {k: theta * (0.3 - 0.4j)})
        cfg = IntegratorConfig(dt=1e-3, t_end=0.2, snapshot_stride=1)
        res = simulate(u, cfg, None, None, 1, keep_states=True)
        idx = np.flatnonzero(np.all(t.half_wavevectors == np.array(k) * np.sign(k[0] or 1), axis=1))[0]
        states = res.states[0, 0, :, idx]
        ratio = states[1:] / np.where(states[:-1] == 0, 1, states[:-1])
        nz = np.abs(states[:-1]) > 0
        assert np.max(np.abs(ratio[nz] - math.exp(-kk @ kk * cfg.dt))) <= 1e-12

    def test_semi_implicit_factor(self):
        u = shear()
        cfg = IntegratorConfig(dt=1e-2, t_end=0.01, scheme="semi_implicit_em")
        out = simulate(u, cfg, None, None, 1).final[0, 0]
        assert np.allclose(out, u.coeffs / (1 + 1e-2), rtol=1e-14, atol=0)


class TestEnergy:
    def test_zero_noise_energy_non_increasing(self):
        u = field(T2, 1.0, 3)
        cfg = IntegratorConfig(dt=1e-3, t_end=10.0, snapshot_stride=1)
        res = simulate(u, cfg, None, None, 1, keep_states=True)
        energy = 2.0 * np.sum(np.abs(res.states[0, 0]) ** 2, axis=(1, 2))
        assert len(energy) == 10001
        assert np.all(np.diff(energy) <= 1e-10)
        assert energy[-1] < energy[0]

    def test_zero_noise_run_path_decays(self):
        rec = run_path(field(T2, 1.0, 4), IntegratorConfig(t_end=0.5), None, None)
        assert not rec.stopped
        assert rec.h_half_sq[-1] < rec.h_half_sq[0]


class TestDeterminism:
    def test_fixed_seed_bit_identical(self, basis, noise):
        cfg = IntegratorConfig(t_end=0.2, seed=5, scheme=GEO)
        a = simulate(field(T2), cfg, basis, noise, 4)
        b = simulate(field(T2), cfg, basis, noise, 4)
        assert np.array_equal(a.final, b.final)
        assert np.array_equal(a.norms["h_half"], b.norms["h_half"])

    def test_run_path_matches_ensemble_path_zero(self, basis, noise):
        cfg = IntegratorConfig(t_end=0.2, seed=8)
        ens = simulate(field(T2), cfg, basis, noise, 3)
        rec = run_path(field(T2), cfg, basis, noise)
        assert np.array_equal(rec.final.coeffs, ens.final[0, 0])

    def test_chunk_size_does_not_change_paths(self, basis, noise):
        a = simulate(field(T2), IntegratorConfig(t_end=0.1, chunk=7), basis, noise, 2)
        b = simulate(field(T2), IntegratorConfig(t_end=0.1, chunk=256), basis, noise, 2)
        assert np.array_equal(a.final, b.final)

    def test_explicit_increments_match_streams(self, basis, noise):
        cfg = IntegratorConfig(t_end=0.05, seed=2)
        dim = len(basis) + len(noise.alphas)
        inc = np.stack([draw_increments(g, cfg.n_steps, dim, cfg.dt) for g in path_streams(2, 2)])
        a = simulate(field(T2), cfg, basis, noise, 2, increments=inc)
        b = simulate(field(T2), cfg, basis, noise, 2)
        assert np.array_equal(a.final, b.final)

    def test_path_streams_independent(self):
        g1, g2 = path_streams(0, 2)
        assert not np.array_equal(g1.standard_normal(5), g2.standard_normal(5))


class TestStep:
    def test_matches_simulate(self, basis, noise):
        cfg = IntegratorConfig(dt=1e-3, t_end=1e-3)
        inc = np.array([[[0.01, -0.02, 0.03, 0.0, 0.02, -0.01, 0.0, 0.04]]])
        u = field(T2, 1.0, 6)
        a = simulate(u, cfg, basis, noise, 1, increments=inc).final[0, 0]
        run = step(SdeRun(u), cfg, basis, noise, NoiseIncrement(inc[0, 0, :4], inc[0, 0, 4:]))
        assert np.array_equal(run.state.coeffs, a)
        assert run.t == pytest.approx(1e-3)

    def test_wrong_dimensions(self, basis, noise):
        with pytest.raises(ValueError, match="dims"):
            step(SdeRun(field(T2)), IntegratorConfig(), basis, noise, NoiseIncrement(np.zeros(3), np.zeros(4)))

    def test_stopped_run_rejected(self, basis, noise):
        with pytest.raises(ValueError):
            step(SdeRun(field(T2), stopped=True), IntegratorConfig(), basis, noise,
                 NoiseIncrement(np.zeros(4), np.zeros(4)))

    def test_integral_radius_stop(self):
        run = SdeRun(field(T2, 0.1, 1), accumulators={"h32": 0.0, "weighted": 0.999999})
        out = step(run, IntegratorConfig(r_threshold=1.0), None, None, NoiseIncrement(np.zeros(0), np.zeros(0)))
        assert out.stopped and out.stop_reason == "integral_radius"


class TestStopping:
    def test_forced_crossing(self, basis):
        x = field(T2, 1.0, 11)
        cfg = IntegratorConfig(t_end=1.0, r_threshold=1.5, scheme=GEO)
        res = simulate(x, cfg, basis, KirchhoffNoise((0.5,) * 4), 20)
        hit = res.stopped[0]
        assert hit.any()
        assert set(res.stop_reason[0][hit]) == {"h_half_radius"}
        # the first snapshot at or after the stop sees the state at radius
        for p in np.flatnonzero(hit):
            assert res.stop_time[0, p] > 0
            i = np.searchsorted(res.times, res.stop_time[0, p] - 1e-12)
            assert res.norms["h_half"][0, p, i] >= 1.5 ** 2 or i == len(res.times)

    def test_stopped_paths_freeze(self, basis):
        x = field(T2, 1.0, 11)
        cfg = IntegratorConfig(t_end=1.0, r_threshold=1.5, scheme=GEO, snapshot_stride=1)
        res = simulate(x, cfg, basis, KirchhoffNoise((0.5,) * 4), 20, keep_states=True)
        p = int(np.flatnonzero(res.stopped[0])[0])
        i = int(round(res.stop_time[0, p] / cfg.dt))
        assert np.all(res.states[0, p, i:] == res.states[0, p, i])
        integ = res.integrals["h32"][0, p]
        assert np.all(integ[i:] == integ[i])

    def test_start_outside_radius_stops_at_zero(self):
        res = simulate(field(T2, 1.0), IntegratorConfig(t_end=0.01, r_threshold=0.5), None, None, 1)
        assert res.stopped[0, 0] and res.stop_time[0, 0] == 0.0

    def test_record_flags(self, basis):
        cfg = IntegratorConfig(t_end=1.0, r_threshold=1.5, scheme=GEO)
        res = simulate(field(T2, 1.0, 11), cfg, basis, KirchhoffNoise((0.5,) * 4), 20)
        p = int(np.flatnonzero(res.stopped[0])[0])
        rec = TrajectoryRecord.from_ensemble(res, T2, 0, p)
        flags = rec.stopped_flags()
        assert flags[0] == 0 and flags[-1] == 1
        rows = list(rec.rows())
        assert len(rows[0]) == len(TrajectoryRecord.COLUMNS)


class TestFault:
    def test_blowup_raises_with_partial(self, basis):
        cfg = IntegratorConfig(dt=1e-2, t_end=1.0)
        with pytest.raises(IntegratorFault) as info:
            simulate(field(T2, 3.0, 11), cfg, basis, KirchhoffNoise((3.0,) * 4), 5)
        exc = info.value
        assert exc.partial is not None and exc.t is not None
        assert exc.partial.times[-1] < exc.t

    def test_run_path_fault_carries_record(self, basis):
        cfg = IntegratorConfig(dt=1e-2, t_end=1.0)
        with pytest.raises(IntegratorFault) as info:
            run_path(field(T2, 3.0, 11), cfg, basis, KirchhoffNoise((3.0,) * 4))
        assert isinstance(info.value.partial, TrajectoryRecord)


class TestStructure:
    @pytest.mark.parametrize("scheme", ["exponential_em", "semi_implicit_em", GEO])
    def test_states_stay_divergence_free(self, basis, noise, scheme):
        cfg = IntegratorConfig(t_end=0.5, scheme=scheme, snapshot_stride=25)
        res = simulate(field(T2, 1.0, 2), cfg, basis, noise, 4, keep_states=True)
        for p in range(4):
            for c in res.states[0, p]:
                assert divergence_residual(SpectralField(T2, c)) <= 1e-10

    def test_coupled_groups_share_noise(self, basis, noise):
        x = field(T2, 1.0, 2)
        res = simulate([x, x], IntegratorConfig(t_end=0.1), basis, noise, 3)
        assert np.all(res.diff_sup[1] == 0) and np.array_equal(res.final[0], res.final[1])

    def test_start_truncations_must_match(self):
        with pytest.raises(ValueError):
            simulate([field(T2), field(Truncation(3))], IntegratorConfig(t_end=0.01), None, None, 1)


class TestWeak:
    @pytest.mark.parametrize("scheme", ["exponential_em", GEO])
    def test_single_mode_mean_under_kirchhoff_noise(self, scheme):
        # g(u) is a multiple of u and B vanishes on one mode; each step keeps the
        # conditional mean e^{-|k|^2 dt} u, so the mean decays like e^{-|k|^2 t}
        u = shear()
        cfg = IntegratorConfig(dt=1e-3, t_end=0.5, scheme=scheme)
        res = simulate(u, cfg, TransportNoiseBasis.empty(), KirchhoffNoise((0.1, 0.1)), 2000)
        idx = np.flatnonzero(np.all(T2.half_wavevectors == [1, 0, 0], axis=1))[0]
        vals = res.final[0, :, idx, 1]
        want = math.exp(-0.5) * (0.7 + 0.2j)
        for part in (np.real, np.imag):
            se = part(vals).std(ddof=1) / math.sqrt(len(vals))
            assert abs(part(vals).mean() - part(want)) <= 4 * se + 1e-12


class TestSelfConvergence:
    def test_deterministic_first_order(self):
        # without noise the exponential step is first order in dt
        st = self_convergence(field(T2, 1.0, 11), IntegratorConfig(t_end=0.2), None, None,
                              [4e-3, 2e-3, 1e-3], n_paths=2, refine=16)
        assert st.errors[0] < st.errors[1] < st.errors[2]
        assert st.slope == pytest.approx(1.0, abs=0.1)

    def test_rejects_incommensurate_dts(self, basis, noise):
        with pytest.raises(ValueError):
            self_convergence(field(T2), IntegratorConfig(t_end=0.1), basis, noise, [1e-2, 3e-3], refine=2)
