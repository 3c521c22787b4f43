"""Tests for periodic grids, fields and spectral operators."""
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from brinkman_lab.fields import (
    PeriodicGrid,
    ScalarField,
    VectorField,
    dealiased_product,
    divergence,
    gradient,
    helmholtz_solve,
    laplacian,
    neg_inv_laplacian_div,
    norms,
    read_snapshot,
    spectral_derivatives,
    write_snapshot,
)

TWO_PI = 2.0 * math.pi


def _random_modes(grid, rng, kmax=6):
    """Band-limited random field built from a few Fourier modes."""
    coords = grid.coords()
    out = np.zeros(grid.shape)
    for _ in range(5):
        k = rng.integers(-kmax, kmax + 1, size=grid.dim)
        phase = TWO_PI * sum(ki * x for ki, x in zip(k, coords))
        out += rng.normal() * np.cos(phase + rng.uniform(0, TWO_PI))
    return out


class TestPeriodicGrid:
    def test_spacing_times_n_is_one(self):
        for n in (8, 64, 1024):
            g = PeriodicGrid(1, n)
            assert g.spacing * g.n == 1.0

    @pytest.mark.parametrize("n", [4, 7, 12, 100])
    def test_rejects_bad_sizes(self, n):
        with pytest.raises(ValueError, match="power of two"):
            PeriodicGrid(1, n)

    def test_rejects_dimension_three(self):
        with pytest.raises(ValueError, match="dim"):
            PeriodicGrid(3, 16)

    def test_coords_broadcast_in_2d(self):
        x, y = PeriodicGrid(2, 8).coords()
        assert x.shape == y.shape == (8, 8)
        assert np.all(x[:, 0] == np.arange(8) / 8)
        assert np.all(y[0, :] == np.arange(8) / 8)

    def test_displacement_is_minimum_image(self):
        d = PeriodicGrid(1, 8).displacement()
        np.testing.assert_allclose(d, [0, 1 / 8, 2 / 8, 3 / 8, 4 / 8, 3 / 8, 2 / 8, 1 / 8])


class TestFieldTypes:
    def test_scalar_rejects_nan(self):
        g = PeriodicGrid(1, 8)
        with pytest.raises(ValueError, match="non-finite"):
            ScalarField(g, [np.nan] + [0.0] * 7)

    def test_values_are_frozen(self):
        f = ScalarField.constant(PeriodicGrid(1, 8), 1.0)
        with pytest.raises(ValueError):
            f.values[0] = 2.0

    def test_vector_components_share_grid(self):
        a = ScalarField.constant(PeriodicGrid(2, 8), 1.0)
        b = ScalarField.constant(PeriodicGrid(2, 16), 1.0)
        with pytest.raises(ValueError, match="one grid"):
            VectorField.from_components([a, b])

    def test_mixed_grid_arithmetic_refused(self):
        a = ScalarField.constant(PeriodicGrid(1, 8), 1.0)
        b = ScalarField.constant(PeriodicGrid(1, 16), 1.0)
        with pytest.raises(ValueError, match="different grids"):
            a + b


class TestSpectralDerivatives:
    def test_gradient_of_constant_is_zero(self):
        g = PeriodicGrid(2, 16)
        out = gradient(ScalarField.constant(g, 3.7))
        assert np.max(np.abs(out.values)) < 1e-14

    def test_derivative_of_sine(self):
        g = PeriodicGrid(1, 64)
        f = ScalarField.from_function(g, lambda x: np.sin(TWO_PI * x))
        x, = g.coords()
        np.testing.assert_allclose(gradient(f).values[0], TWO_PI * np.cos(TWO_PI * x), atol=1e-12)

    def test_shear_flow_is_divergence_free(self):
        g = PeriodicGrid(2, 32)
        x, y = g.coords()
        u = VectorField(g, np.stack([np.sin(TWO_PI * y), np.zeros_like(x)]))
        assert np.max(np.abs(divergence(u).values)) < 1e-12

    def test_laplacian_of_mode(self):
        g = PeriodicGrid(2, 32)
        x, y = g.coords()
        f = ScalarField(g, np.cos(TWO_PI * (2 * x + 3 * y)))
        np.testing.assert_allclose(laplacian(f).values, -13 * TWO_PI**2 * f.values, atol=1e-9)

    def test_rank_mismatch_raises(self):
        g = PeriodicGrid(1, 16)
        with pytest.raises(TypeError):
            spectral_derivatives(VectorField.zeros(g), "grad")
        with pytest.raises(TypeError):
            spectral_derivatives(ScalarField.constant(g, 1.0), "div")
        with pytest.raises(ValueError, match="unknown operator"):
            spectral_derivatives(ScalarField.constant(g, 1.0), "curl")

    def test_fft_round_trip(self, rng):
        g = PeriodicGrid(2, 32)
        v = rng.normal(size=g.shape)
        back = np.fft.ifftn(np.fft.fftn(v)).real
        assert np.max(np.abs(back - v)) <= 1e-12 * np.max(np.abs(v))

    @given(a=st.floats(-5, 5), b=st.floats(-5, 5), seed=st.integers(0, 2**16))
    def test_operators_are_linear(self, a, b, seed):
        rng = np.random.default_rng(seed)
        g = PeriodicGrid(2, 16)
        f = ScalarField(g, _random_modes(g, rng))
        h = ScalarField(g, _random_modes(g, rng))
        lhs = gradient(a * f + b * h).values
        rhs = a * gradient(f).values + b * gradient(h).values
        assert np.allclose(lhs, rhs, atol=1e-10 * (1 + abs(a) + abs(b)) * 100)
        lhs = laplacian(a * f + b * h).values
        rhs = a * laplacian(f).values + b * laplacian(h).values
        assert np.allclose(lhs, rhs, atol=1e-9 * (1 + abs(a) + abs(b)) * 1000)


class TestHelmholtz:
    def test_zero_rhs(self):
        g = PeriodicGrid(1, 32)
        assert np.all(helmholtz_solve(VectorField.zeros(g), 1.0, 1.0).values == 0)

    def test_single_mode(self):
        g = PeriodicGrid(1, 64)
        x, = g.coords()
        f = VectorField(g, [(1 + 4 * math.pi**2) * np.sin(TWO_PI * x)])
        np.testing.assert_allclose(helmholtz_solve(f, 1.0, 1.0).values[0], np.sin(TWO_PI * x),
                                   atol=1e-13)

    def test_constant_rhs(self):
        g = PeriodicGrid(2, 16)
        f = VectorField(g, np.full((2, 16, 16), 3.0))
        np.testing.assert_allclose(helmholtz_solve(f, 2.0, 4.0).values, 0.75)

    @pytest.mark.parametrize("mu,alpha", [(0.0, 1.0), (1.0, 0.0), (-1.0, 1.0)])
    def test_rejects_non_positive_parameters(self, mu, alpha):
        with pytest.raises(ValueError):
            helmholtz_solve(VectorField.zeros(PeriodicGrid(1, 8)), mu, alpha)

    @given(mu=st.floats(0.01, 10), alpha=st.floats(0.01, 10), seed=st.integers(0, 2**16))
    def test_inverse_of_operator(self, mu, alpha, seed):
        rng = np.random.default_rng(seed)
        g = PeriodicGrid(2, 32)
        f = VectorField(g, np.stack([_random_modes(g, rng), _random_modes(g, rng)]))
        v = helmholtz_solve(f, mu, alpha)
        back = -mu * laplacian(v).values + alpha * v.values
        err = np.linalg.norm(back - f.values) / np.linalg.norm(f.values)
        assert err <= 1e-10


class TestInverseLaplacianDiv:
    def test_zero(self):
        g = PeriodicGrid(1, 16)
        assert np.all(neg_inv_laplacian_div(VectorField.zeros(g)).values == 0)

    def test_cosine(self):
        g = PeriodicGrid(1, 64)
        x, = g.coords()
        out = neg_inv_laplacian_div(VectorField(g, [np.cos(TWO_PI * x)]))
        np.testing.assert_allclose(out.values, np.sin(TWO_PI * x) / TWO_PI, atol=1e-14)

    def test_constant_vector(self):
        g = PeriodicGrid(2, 16)
        out = neg_inv_laplacian_div(VectorField(g, np.ones((2, 16, 16))))
        assert np.max(np.abs(out.values)) < 1e-15

    @given(seed=st.integers(0, 2**16))
    def test_zero_mean_and_laplacian(self, seed):
        rng = np.random.default_rng(seed)
        g = PeriodicGrid(2, 32)
        R = VectorField(g, np.stack([_random_modes(g, rng), _random_modes(g, rng)]))
        out = neg_inv_laplacian_div(R)
        assert abs(out.values.mean()) < 1e-15
        np.testing.assert_allclose(laplacian(out).values, divergence(R).values, atol=1e-9)


class TestNorms:
    def test_constant(self):
        f = ScalarField.constant(PeriodicGrid(1, 16), -2.5)
        for p in (1, 2, 3.5):
            assert norms(f, "Lp", p) == pytest.approx(2.5)

    def test_sine_l2_and_h1(self):
        g = PeriodicGrid(1, 64)
        f = ScalarField.from_function(g, lambda x: np.sin(TWO_PI * x))
        assert norms(f, "L2") == pytest.approx(1 / math.sqrt(2), rel=1e-14)
        assert norms(f, "H1") == pytest.approx(math.sqrt(0.5 + 2 * math.pi**2), rel=1e-13)

    def test_rejects_p_below_one(self):
        with pytest.raises(ValueError, match="p must be"):
            norms(ScalarField.constant(PeriodicGrid(1, 8), 1.0), "Lp", 0.5)


class TestDealiasing:
    def test_low_modes_exact(self):
        g = PeriodicGrid(1, 64)
        x, = g.coords()
        a = ScalarField(g, np.cos(TWO_PI * 3 * x))
        b = ScalarField(g, np.cos(TWO_PI * 5 * x))
        expected = 0.5 * (np.cos(TWO_PI * 2 * x) + np.cos(TWO_PI * 8 * x))
        np.testing.assert_allclose(dealiased_product(a, b).values, expected, atol=1e-13)

    def test_high_modes_removed(self):
        g = PeriodicGrid(1, 64)
        x, = g.coords()
        a = ScalarField(g, np.cos(TWO_PI * 30 * x))
        assert np.max(np.abs(dealiased_product(a, a).values)) < 1e-13


class TestSnapshots:
    def test_scalar_round_trip(self, tmp_path, rng):
        g = PeriodicGrid(2, 16)
        f = ScalarField(g, rng.normal(size=g.shape))
        path = tmp_path / "rho.bin"
        write_snapshot(path, f, "rho", 0.25)
        header, back = read_snapshot(path)
        assert header == {"dim": 2, "n": 16, "name": "rho", "time": 0.25}
        assert np.array_equal(back.values, f.values)

    def test_vector_round_trip(self, tmp_path, rng):
        g = PeriodicGrid(2, 8)
        u = VectorField(g, rng.normal(size=(2, 8, 8)))
        write_snapshot(tmp_path / "u.bin", u, "u", 1.0)
        _, back = read_snapshot(tmp_path / "u.bin")
        assert isinstance(back, VectorField)
        assert np.array_equal(back.values, u.values)

    def test_header_is_one_json_line(self, tmp_path):
        g = PeriodicGrid(1, 8)
        write_snapshot(tmp_path / "f.bin", ScalarField.constant(g, 1.0), "f", 0.0)
        raw = (tmp_path / "f.bin").read_bytes()
        head, _, body = raw.partition(b"\n")
        assert head.startswith(b"{") and len(body) == 8 * 8
        assert np.frombuffer(body, "<f8").tolist() == [1.0] * 8
