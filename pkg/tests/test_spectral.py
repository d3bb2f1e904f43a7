import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stochns.spectral import (
    SamplerError,
    SnapshotError,
    SpectralField,
    Truncation,
    divergence_residual,
    galerkin_project,
    lambda_pow,
    leray_project,
    load_snapshot,
    random_field,
    reality_residual,
    save_snapshot,
    sobolev_inner,
    sobolev_norm,
    sobolev_norm_sq,
    to_grid,
)

seeds = st.integers(0, 2 ** 32 - 1)
indices = st.sampled_from([-1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0])


def rand(n_max=2, norm=1.0, seed=0, s=0.5):
    return random_field(Truncation(n_max), s, norm, np.random.default_rng(seed))


def single(trunc, k, vec):
    return SpectralField.from_modes(trunc, {tuple(k): np.array(vec, dtype=complex)})


class TestTruncation:
    def test_mode_counts(self):
        t = Truncation(2)
        assert t.mode_count == 124
        assert t.half_count == 62

    def test_mode_list_is_antisymmetric(self):
        k = Truncation(3).wavevectors
        assert np.array_equal(k, -k[::-1])

    def test_index_of_roundtrip(self):
        t = Truncation(2)
        assert np.array_equal(t.index_of(t.wavevectors), np.arange(t.mode_count))
        assert t.index_of([0, 0, 0]) == -1
        assert t.index_of([3, 0, 0]) == -1

    @pytest.mark.parametrize("bad", [0, -1, 1.5])
    def test_rejects_bad_n_max(self, bad):
        with pytest.raises(ValueError):
            Truncation(bad)


class TestLeray:
    def test_parallel_coefficient_is_annihilated(self):
        t = Truncation(1)
        out = leray_project(single(t, (1, 0, 0), (1, 0, 0)))
        assert np.allclose(out[(1, 0, 0)], 0.0, atol=1e-15)

    def test_transverse_coefficient_is_kept(self):
        t = Truncation(1)
        out = leray_project(single(t, (1, 0, 0), (0, 1, 0)))
        assert np.allclose(out[(1, 0, 0)], [0, 1, 0], atol=1e-15)

    def test_diagonal_mode_by_hand(self):
        t = Truncation(1)
        out = leray_project(single(t, (1, 1, 0), (1, 0, 0)))
        assert np.allclose(out[(1, 1, 0)], [0.5, -0.5, 0.0], atol=1e-15)
        assert np.allclose(out[(-1, -1, 0)], [0.5, -0.5, 0.0], atol=1e-15)

    @given(seeds)
    def test_idempotent(self, seed):
        rng = np.random.default_rng(seed)
        t = Truncation(2)
        raw = SpectralField(t, rng.standard_normal((t.half_count, 3)) + 1j * rng.standard_normal((t.half_count, 3)))
        once = leray_project(raw)
        twice = leray_project(once)
        assert np.max(np.abs(once.coeffs - twice.coeffs)) <= 1e-12
        assert divergence_residual(once) <= 1e-12


class TestLambda:
    def test_zero_power_is_identity(self):
        u = rand()
        assert lambda_pow(u, 0.0) == u

    def test_one_power_on_norm_two_mode_doubles(self):
        t = Truncation(2)
        u = single(t, (2, 0, 0), (0, 1 + 2j, 0))
        assert np.allclose(lambda_pow(u, 1.0)[(2, 0, 0)], [0, 2 + 4j, 0], rtol=0, atol=1e-15)

    @given(seeds, indices, indices)
    def test_exponents_add(self, seed, s, r):
        u = rand(seed=seed)
        a = lambda_pow(lambda_pow(u, s), r).coeffs
        b = lambda_pow(u, s + r).coeffs
        assert np.max(np.abs(a - b)) <= 1e-13 * np.max(np.abs(b))

    def test_half_and_minus_half_cancel(self):
        u = rand(seed=3)
        assert np.max(np.abs(lambda_pow(lambda_pow(u, 0.5), -0.5).coeffs - u.coeffs)) <= 1e-14


class TestNorms:
    @pytest.mark.parametrize("s", [-1.0, 0.0, 0.5, 2.0])
    def test_zero_field(self, s):
        assert sobolev_norm_sq(SpectralField.zeros(Truncation(2)), s) == 0.0

    @pytest.mark.parametrize("s", [-1.0, 0.0, 0.5, 1.0, 1.5])
    def test_unit_mode_norm_independent_of_s(self, s):
        a = 0.3 - 0.7j
        u = single(Truncation(2), (1, 0, 0), (0, a, 0))
        assert sobolev_norm_sq(u, s) == pytest.approx(2 * abs(a) ** 2, rel=1e-14)

    @pytest.mark.parametrize("s", [-0.5, 0.5, 1.0, 2.0])
    def test_norm_two_mode(self, s):
        a = 1.1 + 0.2j
        u = single(Truncation(2), (2, 0, 0), (0, a, 0))
        assert sobolev_norm_sq(u, s) == pytest.approx(2 * 4 ** s * abs(a) ** 2, rel=1e-14)

    def test_parseval_against_grid_quadrature(self):
        u = rand(seed=5)
        grid = to_grid(u, 8)
        mean_sq = np.mean(np.sum(grid ** 2, axis=0))
        assert mean_sq == pytest.approx(sobolev_norm_sq(u, 0.0), rel=1e-12)

    @given(seeds, indices)
    def test_inner_with_self_is_norm(self, seed, s):
        u = rand(seed=seed)
        assert sobolev_inner(u, u, s) == pytest.approx(sobolev_norm_sq(u, s), rel=1e-13)

    def test_disjoint_modes_are_orthogonal(self):
        t = Truncation(2)
        f = single(t, (1, 0, 0), (0, 1, 0))
        g = single(t, (0, 1, 0), (1, 0, 0))
        assert sobolev_inner(f, g, 0.5) == 0.0

    @given(seeds, indices)
    def test_cauchy_schwarz(self, seed, s):
        f, g = rand(seed=seed), rand(seed=seed + 1)
        assert abs(sobolev_inner(f, g, s)) <= sobolev_norm(f, s) * sobolev_norm(g, s) * (1 + 1e-12)

    def test_poincare_and_interpolation(self):
        for seed in range(200):
            u = rand(seed=seed)
            n0, nh, n1 = (sobolev_norm_sq(u, s) for s in (0.0, 0.5, 1.0))
            assert n0 <= nh * (1 + 1e-12) and nh <= n1 * (1 + 1e-12)
            assert nh <= np.sqrt(n0 * n1) * (1 + 1e-12)


class TestGalerkin:
    def test_identity_when_large_enough(self):
        u = rand(n_max=2)
        up = galerkin_project(u, Truncation(3))
        assert sobolev_norm_sq(up, 1.0) == pytest.approx(sobolev_norm_sq(u, 1.0), rel=1e-14)
        assert galerkin_project(up, Truncation(2)) == u

    def test_high_mode_is_dropped(self):
        t = Truncation(5)
        u = leray_project(single(t, (5, 0, 0), (0, 1, 0)))
        assert sobolev_norm_sq(galerkin_project(u, Truncation(4)), 0.0) == 0.0

    @given(seeds, indices)
    def test_norm_non_increasing(self, seed, s):
        u = rand(n_max=3, seed=seed)
        assert sobolev_norm_sq(galerkin_project(u, Truncation(2)), s) <= sobolev_norm_sq(u, s) * (1 + 1e-14)

    def test_idempotent(self):
        u = rand(n_max=3, seed=8)
        once = galerkin_project(u, Truncation(2))
        assert galerkin_project(once, Truncation(2)) == once


class TestRandomField:
    @given(seeds, st.floats(0.01, 100.0), st.sampled_from([0.5, 1.0]))
    def test_norm_and_invariants(self, seed, norm, s):
        u = random_field(Truncation(2), s, norm, np.random.default_rng(seed))
        assert sobolev_norm(u, s) == pytest.approx(norm, rel=1e-12)
        assert divergence_residual(u) <= 1e-12 * max(1.0, norm)
        assert reality_residual(u.full(), u.trunc) == 0.0

    def test_same_seed_bit_identical(self):
        a, b = rand(seed=42), rand(seed=42)
        assert np.array_equal(a.coeffs, b.coeffs)

    def test_rejects_non_positive_norm(self):
        with pytest.raises(ValueError):
            random_field(Truncation(2), 0.5, 0.0, 0)

    def test_degenerate_sampler_reports(self, monkeypatch):
        class Zero:
            def standard_normal(self, shape):
                return np.zeros(shape)

        monkeypatch.setattr(np.random, "default_rng", lambda rng=None: Zero())
        with pytest.raises(SamplerError):
            random_field(Truncation(1), 0.5, 1.0, None)


class TestFieldArithmetic:
    def test_truncation_mismatch(self):
        with pytest.raises(ValueError):
            rand(n_max=2) + rand(n_max=3)

    def test_grid_values_are_real_parts_of_modes(self):
        t = Truncation(1)
        u = single(t, (1, 0, 0), (0, 0.5, 0))
        g = to_grid(u, 4)
        x = 2 * np.pi * np.arange(4) / 4
        assert np.allclose(g[1][:, 0, 0], np.cos(x), atol=1e-14)

    def test_to_grid_rejects_aliasing_grid(self):
        with pytest.raises(ValueError):
            to_grid(rand(), 4)


class TestSnapshots:
    @pytest.mark.parametrize("binary", [False, True])
    def test_roundtrip_is_exact(self, tmp_path, binary):
        u = rand(seed=9)
        path = tmp_path / "u.snap"
        save_snapshot(path, u, seed=17, t=0.25, binary=binary)
        v, seed, t = load_snapshot(path)
        assert np.array_equal(v.coeffs, u.coeffs)
        assert (seed, t) == (17, 0.25)

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "x.snap"
        path.write_text("hello\n")
        with pytest.raises(SnapshotError):
            load_snapshot(path)

    def test_rejects_truncated_mode_list(self, tmp_path):
        path = tmp_path / "u.snap"
        save_snapshot(path, rand(seed=1))
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[:-1]) + "\n")
        with pytest.raises(SnapshotError):
            load_snapshot(path)
