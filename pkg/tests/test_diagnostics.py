"""Tests for the pair moduli, de-weighting, translation moduli and run diagnostics."""
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from brinkman_lab.diagnostics import (
    FULL_MODE_LIMIT,
    DiagnosticsCollector,
    PairSampler,
    SamplerBudgetError,
    commutator_bound_check,
    commutator_constant,
    deweight_bound,
    extra_integrability,
    initial_modulus,
    refinement_study,
    translation_modulus,
    unweighted_modulus,
    weighted_modulus,
)
from brinkman_lab.fields import PeriodicGrid, ScalarField
from brinkman_lab.harmonic import KernelSpec, integrated_kernel
from brinkman_lab.pressure import builtin_law, truncate
from brinkman_lab.solver import SimConfig, Source, run_simulation

TWO_PI = 2.0 * math.pi
GAMMA2 = builtin_law("gamma_law", gamma=2.0)
ALL_LAWS = [
    GAMMA2,
    builtin_law("gamma_law", gamma=1.5),
    builtin_law("nonmonotone_wave", gamma=2.0),
    builtin_law("two_well", gamma=2.0),
    truncate(GAMMA2, 2.0),
]

# Weighted modulus of the indicator of [0, 1/2) with w = 1 on n = 128,
# a = 2, h0 = 1e-2, continuum normalisation. Frozen from an explicit
# double loop over all pairs with a separately coded kernel.
INDICATOR_ORACLE = 2.181556852123067


def _indicator(n):
    g = PeriodicGrid(1, n)
    x, = g.coords()
    return g, ScalarField(g, (x < 0.5).astype(float))


def _brute_force_modulus(rho, w, a, h0, m=32):
    """Full double sum with the 1-d kernel written out from scratch."""
    n = rho.size
    width = -math.log(h0) / m
    hs = np.exp(math.log(h0) + width * (np.arange(m) + 0.5))
    norms = 2.0 * (hs ** (1 - a) - (hs + 0.5) ** (1 - a)) / (a - 1)
    lag = np.arange(n) / n
    r = np.minimum(lag, 1 - lag)
    K = np.array([np.sum(width * (hs + ri) ** (-a) / norms) for ri in r])
    total = 0.0
    for i in range(n):
        for j in range(n):
            total += K[(i - j) % n] * abs(rho[i] - rho[j]) * (w[i] + w[j])
    return total / n**2


class TestPairSampler:
    def test_auto_mode(self):
        assert PairSampler().resolve(PeriodicGrid(2, 64)) == "full"
        assert PairSampler().resolve(PeriodicGrid(2, 128)) == "montecarlo"
        assert PairSampler().resolve(PeriodicGrid(1, 4096)) == "full"
        assert PeriodicGrid(2, 64).n ** 4 == FULL_MODE_LIMIT

    def test_full_mode_limit(self):
        with pytest.raises(ValueError, match="2\\^24"):
            PairSampler(mode="full").resolve(PeriodicGrid(2, 128))

    def test_bad_arguments(self):
        with pytest.raises(ValueError, match="mode"):
            PairSampler(mode="exact")
        with pytest.raises(ValueError, match="sample_count"):
            PairSampler(sample_count=1)


class TestWeightedModulus:
    def test_frozen_oracle(self):
        g, rho = _indicator(128)
        res = weighted_modulus(rho, ScalarField.constant(g, 1.0), KernelSpec(a=2.0, h0=1e-2))
        assert res.mode == "full"
        assert res.value == pytest.approx(INDICATOR_ORACLE, rel=1e-12)

    def test_brute_force(self, rng):
        g = PeriodicGrid(1, 32)
        rho = rng.uniform(0.0, 3.0, 32)
        w = rng.uniform(0.0, 1.0, 32)
        got = weighted_modulus(ScalarField(g, rho), ScalarField(g, w), KernelSpec(a=2.5, h0=0.05))
        assert got.value == pytest.approx(_brute_force_modulus(rho, w, 2.5, 0.05), rel=1e-12)

    def test_unit_weight_is_twice_unweighted(self):
        g, rho = _indicator(128)
        spec = KernelSpec(a=2.0, h0=1e-2)
        Rw = weighted_modulus(rho, ScalarField.constant(g, 1.0), spec).value
        Ru = unweighted_modulus(rho, spec).value
        assert Rw == pytest.approx(2.0 * Ru, rel=1e-13)

    def test_trivial_cases(self):
        g, rho = _indicator(64)
        spec = KernelSpec(a=2.0, h0=1e-2)
        assert weighted_modulus(ScalarField.constant(g, 2.0), ScalarField.constant(g, 1.0),
                                spec).value == 0.0
        assert weighted_modulus(rho, ScalarField.constant(g, 0.0), spec).value == 0.0

    def test_montecarlo_agrees_with_full(self):
        g, rho = _indicator(128)
        w = ScalarField(g, 0.5 + 0.5 * np.cos(TWO_PI * g.coords()[0]))
        spec = KernelSpec(a=2.0, h0=1e-2)
        full = weighted_modulus(rho, w, spec, PairSampler(mode="full")).value
        mc = weighted_modulus(rho, w, spec, PairSampler(mode="montecarlo", sample_count=200_000))
        assert mc.mode == "montecarlo"
        assert abs(mc.value - full) <= 3.0 * mc.stderr

    def test_montecarlo_2d(self, rng):
        g = PeriodicGrid(2, 32)
        rho = ScalarField(g, rng.uniform(0.5, 1.5, g.shape))
        w = ScalarField(g, rng.uniform(0.0, 1.0, g.shape))
        spec = KernelSpec(a=3.0, h0=0.05)
        full = weighted_modulus(rho, w, spec, PairSampler(mode="full")).value
        mc = weighted_modulus(rho, w, spec, PairSampler(mode="montecarlo", sample_count=100_000))
        assert abs(mc.value - full) <= 3.0 * mc.stderr

    def test_budget_refusal(self):
        g, rho = _indicator(128)
        sampler = PairSampler(mode="montecarlo", sample_count=100, target_rel_error=1e-6)
        with pytest.raises(SamplerBudgetError, match="standard error"):
            weighted_modulus(rho, ScalarField.constant(g, 1.0), KernelSpec(a=2.0, h0=1e-2), sampler)

    def test_grid_mismatch(self):
        g, rho = _indicator(64)
        with pytest.raises(ValueError, match="different grids"):
            weighted_modulus(rho, ScalarField.constant(PeriodicGrid(1, 32), 1.0),
                             KernelSpec(a=2.0, h0=1e-2))

    @given(st.integers(0, 2**31 - 1))
    def test_symmetry_under_reflection(self, seed):
        r = np.random.default_rng(seed)
        g = PeriodicGrid(1, 64)
        rho = r.uniform(0, 2, 64)
        w = r.uniform(0, 1, 64)
        spec = KernelSpec(a=2.0, h0=0.05)
        a = weighted_modulus(ScalarField(g, rho), ScalarField(g, w), spec).value
        b = weighted_modulus(ScalarField(g, rho[::-1]), ScalarField(g, w[::-1]), spec).value
        c = weighted_modulus(ScalarField(g, np.roll(rho, 7)), ScalarField(g, np.roll(w, 7)), spec).value
        assert b == pytest.approx(a, rel=1e-12)
        assert c == pytest.approx(a, rel=1e-12)

    @given(st.integers(0, 2**31 - 1), st.floats(1.0, 3.0))
    def test_normalized_bound(self, seed, p):
        r = np.random.default_rng(seed)
        g = PeriodicGrid(1, 256)
        rho = ScalarField(g, r.uniform(0, 2, 256))
        spec = KernelSpec(a=2.0, h0=0.05)
        K = integrated_kernel(spec, g, normalization="continuum").values
        kmass = float(K.sum() * g.cell_volume) / -math.log(0.05)
        val = unweighted_modulus(rho, spec, p=p, normalized=True).value
        lpp = float(np.mean(rho.values**p))
        assert val <= 2.0**p * kmass * lpp * (1 + 1e-12)
        assert kmass == pytest.approx(1.0, abs=0.05)


class TestUnweighted:
    def test_single_scale_spec(self):
        g, rho = _indicator(256)
        val = unweighted_modulus(rho, KernelSpec(a=2.0, h=0.05)).value
        assert 0 < val < 1.0

    def test_p_below_one_refused(self):
        g, rho = _indicator(64)
        with pytest.raises(ValueError, match="p must"):
            unweighted_modulus(rho, KernelSpec(a=2.0, h0=0.1), p=0.5)

    def test_initial_modulus_shrinks_with_h(self):
        g, rho = _indicator(1024)
        values = [initial_modulus(rho, h) for h in (0.1, 0.03, 0.01)]
        assert values[0] > values[1] > values[2] > 0

    def test_kernel_exponent_checked(self):
        g, rho = _indicator(64)
        with pytest.raises(ValueError, match="exceed"):
            unweighted_modulus(rho, KernelSpec(a=1.0, h0=0.1))


class TestDeweight:
    def test_scan_is_optimal(self):
        R, budget, h0 = 0.3, 1.5, 1e-3
        L = -math.log(h0)
        res = deweight_bound(R, budget, h0, L)
        etas = np.linspace(1e-3, 0.999, 100)
        B = R / etas + 2.0 * L * budget / np.abs(np.log(etas))
        assert res["bound"] <= B.min() * (1 + 1e-3)
        assert 0 < res["eta_star"] < 1

    def test_monotone_in_budget(self):
        bounds = [deweight_bound(0.2, b, 1e-2, 4.6)["bound"] for b in (0.0, 0.1, 1.0, 10.0)]
        assert all(x < y for x, y in zip(bounds, bounds[1:]))

    def test_zero_inputs(self):
        assert deweight_bound(0.0, 0.0, 0.1, 2.3) == {"eta_star": 0.5, "bound": 0.0}

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError, match="non-negative"):
            deweight_bound(-1.0, 0.0, 0.1, 1.0)
        with pytest.raises(ValueError, match="infinite"):
            deweight_bound(1.0, math.inf, 0.1, 1.0)
        with pytest.raises(ValueError, match="h0"):
            deweight_bound(1.0, 1.0, 1.5, 1.0)

    @given(st.integers(0, 2**31 - 1))
    def test_bound_dominates_unweighted(self, seed):
        r = np.random.default_rng(seed)
        g = PeriodicGrid(1, 128)
        rho = ScalarField(g, r.uniform(0.0, 2.0, 128))
        w = ScalarField(g, r.uniform(1e-3, 1.0, 128) ** 3)
        h0 = 1e-2
        spec = KernelSpec(a=2.0, h0=h0)
        K = integrated_kernel(spec, g, normalization="continuum").values
        kl1 = float(K.sum() * g.cell_volume)
        Rw = weighted_modulus(rho, w, spec).value
        budget = float(np.mean(rho.values * np.abs(np.log(w.values))))
        Ru = unweighted_modulus(rho, spec).value
        assert deweight_bound(Rw, budget, h0, kl1)["bound"] >= Ru


class TestTranslationModulus:
    def test_sine_half_shift(self):
        g = PeriodicGrid(1, 64)
        rho = ScalarField(g, np.sin(TWO_PI * g.coords()[0]))
        out = translation_modulus(rho, [0.0, 0.5])
        assert out[0.0] == 0.0
        assert out[0.5] == pytest.approx(math.sqrt(2.0), rel=1e-12)

    def test_spectral_shift(self):
        g = PeriodicGrid(1, 32)
        x, = g.coords()
        rho = ScalarField(g, np.sin(TWO_PI * x))
        z = 0.1 / 32 + 0.25
        # ||sin(2 pi x) - sin(2 pi (x+z))||_2 = 2 |sin(pi z)| / sqrt(2)
        exact = math.sqrt(2.0) * abs(math.sin(math.pi * z))
        assert translation_modulus(rho, [z], spectral=True)[z] == pytest.approx(exact, rel=1e-12)
        with pytest.raises(ValueError, match="multiple"):
            translation_modulus(rho, [z])

    def test_2d_keys(self):
        g = PeriodicGrid(2, 16)
        x, y = g.coords()
        rho = ScalarField(g, np.cos(TWO_PI * y))
        out = translation_modulus(rho, [(0.25, 0.0), (0.0, 0.5)], p=2.0)
        assert out[(0.25, 0.0)] == 0.0
        assert out[(0.0, 0.5)] == pytest.approx(math.sqrt(2.0), rel=1e-12)
        with pytest.raises(ValueError, match="dim"):
            translation_modulus(rho, [0.5])

    @given(st.integers(0, 2**31 - 1), st.integers(0, 63), st.integers(0, 63), st.floats(1.0, 4.0))
    def test_subadditive(self, seed, i, j, p):
        r = np.random.default_rng(seed)
        g = PeriodicGrid(1, 64)
        rho = ScalarField(g, r.normal(size=64))
        zi, zj = i / 64, j / 64
        zs = ((i + j) % 64) / 64
        out = translation_modulus(rho, [zi, zj, zs], p=p)
        assert out[zs] <= out[zi] + out[zj] + 1e-12


class TestCommutator:
    @pytest.mark.parametrize("law", ALL_LAWS, ids=lambda law: law.label)
    def test_bound_holds_on_pairs(self, law):
        a, b = np.meshgrid(np.linspace(0, 10, 201), np.linspace(0, 10, 201))
        res = commutator_bound_check(np.stack([a.ravel(), b.ravel()]), law)
        assert res["max_violation"] <= 1e-12
        assert res["C_used"] == pytest.approx(commutator_constant(law))

    def test_constant_formula(self):
        C_fit, Pbar = GAMMA2.fitted_constants
        assert commutator_constant(GAMMA2) == pytest.approx(3 * (C_fit + Pbar + 1))

    def test_field_sampling(self, rng):
        g = PeriodicGrid(1, 64)
        rho = ScalarField(g, rng.uniform(0, 4, 64))
        res = commutator_bound_check(rho, GAMMA2, PairSampler(sample_count=500))
        assert res["pairs"] == 500 and res["max_violation"] <= 0

    def test_tiny_constant_fails(self):
        law = builtin_law("two_well", gamma=2.0)
        a, b = np.meshgrid(np.linspace(0, 4, 81), np.linspace(0, 4, 81))
        res = commutator_bound_check(np.stack([a.ravel(), b.ravel()]), law, C=0.0)
        assert res["max_violation"] > 0

    def test_input_checks(self):
        with pytest.raises(ValueError, match="shape"):
            commutator_bound_check(np.zeros((3, 4)), GAMMA2)
        with pytest.raises(ValueError, match="non-negative"):
            commutator_bound_check(np.array([[-1.0], [1.0]]), GAMMA2)


def _stationary_config(n=32, c=1.5, t_end=0.05, **kw):
    g = PeriodicGrid(1, n)
    return SimConfig(rho0=ScalarField.constant(g, c), law=GAMMA2, dt=0.01, t_end=t_end,
                     kernels=(KernelSpec(a=2.0, h0=0.1),), **kw)


class TestExtraIntegrability:
    def test_constant_state(self):
        cfg = _stationary_config(t_end=0.1)
        res = run_simulation(cfg, keep_every=1)
        out = extra_integrability(res.states[:-1], GAMMA2, cfg.mu, cfg.alpha, cfg.dt, theta=1.0)
        assert out["integral"] == pytest.approx(0.1 * 1.5**3, rel=1e-12)
        assert out["mismatch"] <= 1e-6

    @pytest.mark.parametrize("law", ALL_LAWS, ids=lambda law: law.label)
    def test_identity_on_moving_state(self, law):
        g = PeriodicGrid(1, 64)
        x, = g.coords()
        src = Source.from_list([{"component": 0, "k": [1], "amplitude": 2.0}])
        cfg = SimConfig(rho0=ScalarField(g, 1 + 0.3 * np.cos(TWO_PI * x)), law=law, dt=2e-3,
                        t_end=0.02, source=src)
        res = run_simulation(cfg, keep_every=1)
        out = extra_integrability(res.states, law, cfg.mu, cfg.alpha, cfg.dt, source=src)
        assert out["mismatch"] <= 1e-6

    def test_theta_range(self):
        cfg = _stationary_config()
        res = run_simulation(cfg)
        with pytest.raises(ValueError, match="theta"):
            extra_integrability(res.states, GAMMA2, 1.0, 1.0, 0.01, theta=3.0)
        with pytest.raises(ValueError, match="no states"):
            extra_integrability([], GAMMA2, 1.0, 1.0, 0.01)


class TestCollector:
    def test_records_and_columns(self):
        g = PeriodicGrid(1, 64)
        x, = g.coords()
        src = Source.from_list([{"component": 0, "k": [1], "amplitude": 2.0}])
        cfg = SimConfig(rho0=ScalarField(g, 1 + 0.5 * np.cos(TWO_PI * x)), law=GAMMA2, dt=2e-3,
                        t_end=0.04, source=src, emit_every=5,
                        kernels=(KernelSpec(a=2.0, h0=0.1), KernelSpec(a=2.0, h0=0.05)))
        coll = DiagnosticsCollector(cfg)
        run_simulation(cfg, callbacks=[coll])
        assert len(coll.records) == 5
        rec = coll.records[-1]
        assert len(rec.columns()) == len(rec.row())
        assert "Rh0[0.05]" in rec.columns()
        for r in coll.records:
            for h0 in (0.1, 0.05):
                assert 0 <= r.Rh0[h0] <= 2.0 * r.Rh0_unweighted[h0] * (1 + 1e-12)
                assert r.deweight[h0]["bound"] >= r.Rh0_unweighted[h0] * 0.95
            assert r.commutator_violation <= 0
            assert r.lp[1.0] == pytest.approx(r.mass, rel=1e-12)
        extras = [r.extra_integrability for r in coll.records]
        assert extras[0] == 0 and all(a < b for a, b in zip(extras, extras[1:]))

    def test_stationary_zero_moduli(self):
        cfg = _stationary_config()
        coll = DiagnosticsCollector(cfg)
        run_simulation(cfg, callbacks=[coll])
        assert all(r.Rh0[0.1] == 0.0 and r.g_norm == 0.0 for r in coll.records)


class TestRefinementStudy:
    def test_stationary_table_is_zero(self):
        def make(n):
            return _stationary_config(n=n, t_end=0.02)

        rep = refinement_study(make, [64, 128, 256], [0.1, 0.05, 0.02])
        assert rep["error"] is None
        for row in rep["table"].values():
            assert row == [0.0, 0.0, 0.0]
        assert rep["pass"]

    def test_weighted_below_twice_unweighted(self):
        def make(n):
            g = PeriodicGrid(1, n)
            x, = g.coords()
            return SimConfig(rho0=ScalarField(g, 1 + 0.5 * np.cos(TWO_PI * x)), law=GAMMA2,
                             dt=0.4 / (3 * n), t_end=0.02, emit_every=4,
                             source=Source.from_list([{"component": 0, "k": [1], "amplitude": 2.0}]))

        rep = refinement_study(make, [64, 128, 256], [0.1, 0.05, 0.02])
        for n in rep["resolutions"]:
            for w, u in zip(rep["table"][n], rep["table_unweighted"][n]):
                assert w <= 2.0 * u * (1 + 1e-12)

    def test_needs_three_levels(self):
        with pytest.raises(ValueError, match=">= 3"):
            refinement_study(lambda n: _stationary_config(n=n), [32, 64], [0.1, 0.05, 0.02])
