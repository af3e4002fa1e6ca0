import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from aclogit.errors import ContractError, DomainError
from aclogit.game import GameSpec, builtin
from aclogit.logit import (
    CriticFn,
    ResponseOperator,
    inverse_cdf,
    logit_density,
    logit_fixed_point,
    logit_response_profile,
    random_smooth_density,
    sample_logit,
    solve_equilibria,
)
from aclogit.measure import GridDensity, Interval, dirac, l1_distance, trapezoid

UNIT = Interval(0.0, 1.0)


def critic(fn, m=257, iv=UNIT):
    return CriticFn(iv, fn(iv.nodes(m)))


def gibbs_oracle(u, eta, nodes, fine=8192, iv=UNIT):
    """Gibbs density with the normalizer from a fine trapezoid rule."""
    x = iv.nodes(fine + 1)
    z = np.exp((u(x) - u(x).max()) / eta)
    return np.exp((u(nodes) - u(x).max()) / eta) / integrate.trapezoid(z, x)


class TestCriticFn:
    def test_rejects_nonfinite(self):
        with pytest.raises(ContractError):
            CriticFn(UNIT, [0.0, math.nan])

    def test_rejects_short(self):
        with pytest.raises(ContractError):
            CriticFn(UNIT, [0.0])


class TestLogitDensity:
    def test_constant_is_uniform(self):
        p = logit_density(CriticFn(Interval(0.0, 4.0), np.full(33, 7.0)), 0.3)
        assert np.allclose(p.values, 0.25, rtol=1e-15)

    def test_exponential_value(self):
        p = logit_density(critic(lambda x: x, 1024), 1.0)
        assert p.values[-1] == pytest.approx(math.e / (math.e - 1), rel=1e-6)

    @pytest.mark.parametrize("eta", [0.0, -1.0])
    def test_eta_must_be_positive(self, eta):
        with pytest.raises(DomainError):
            logit_density(critic(lambda x: x), eta)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), eta=st.floats(0.01, 10.0))
    def test_normalized_and_bounded_below(self, seed, eta):
        rng = np.random.default_rng(seed)
        q = CriticFn(UNIT, rng.uniform(-1, 1, 129))
        p = logit_density(q, eta)
        assert abs(trapezoid(p.values, p.spacing) - 1.0) < 1e-12
        assert p.values.min() >= 0.9 * math.exp(-2 * 1.0 / eta)

    @pytest.mark.parametrize("k", [0, 3, 20, 40])
    def test_shift_exact_when_representable(self, k):
        # dyadic values plus a power of two add without rounding
        q = CriticFn(UNIT, np.round(np.random.default_rng(k).uniform(-1, 1, 65) * 1024) / 1024)
        shifted = CriticFn(UNIT, q.values + 2.0**k)
        assert np.array_equal(logit_density(shifted, 0.25).values, logit_density(q, 0.25).values)

    @pytest.mark.parametrize("eta", [0.05, 1.0])
    @pytest.mark.parametrize("scale", [1.0, 1e3, 1e6])
    def test_shift_within_rounding(self, eta, scale):
        rng = np.random.default_rng(int(scale))
        q = CriticFn(UNIT, rng.uniform(-1, 1, 129))
        c = scale * eta * math.pi
        p0 = logit_density(q, eta).values
        p1 = logit_density(CriticFn(UNIT, q.values + c), eta).values
        # adding c rounds each value by half an ulp of |c| + 1
        slack = max(1e-12, 4 * np.spacing(abs(c) + 1.0) / eta)
        assert np.max(np.abs(p1 / p0 - 1.0)) <= slack

    def test_high_temperature_uniform(self):
        q = critic(lambda x: np.sin(7 * x))
        p = logit_density(q, 1e4)
        assert l1_distance(p, GridDensity.uniform(UNIT, 257)) < 1e-3


class TestSampleLogit:
    def test_uniform_ks(self):
        p = GridDensity.uniform(UNIT, 65)
        rng = np.random.default_rng(0)
        draws = [sample_logit(p, rng) for _ in range(10_000)]
        assert stats.kstest(draws, "uniform").pvalue > 0.01

    def test_linear_density_ks(self):
        p = GridDensity.from_function(UNIT, lambda x: 2 * x, 9)
        draws = inverse_cdf(p.values, 0.0, p.spacing, np.random.default_rng(1).random(20_000))
        assert stats.kstest(draws, lambda x: np.clip(x, 0, 1) ** 2).pvalue > 0.01

    def test_inverse_cdf_exact(self):
        x = UNIT.nodes(256)
        u = np.random.default_rng(2).random(1000)
        assert np.allclose(inverse_cdf(2 * x, 0.0, x[1], u), np.sqrt(u), atol=1e-14)
        assert np.allclose(inverse_cdf(np.ones(256), 0.0, x[1], u), u, atol=1e-15)

    def test_stacked_rows_match_single(self):
        rng = np.random.default_rng(3)
        v = rng.random((6, 40)) + 0.01
        h = np.linspace(0.01, 0.06, 6)
        lo = np.linspace(-1, 1, 6)
        u = rng.random(6)
        rows = [inverse_cdf(v[r], lo[r], h[r], u[r]) for r in range(6)]
        assert np.array_equal(inverse_cdf(v, lo, h, u), np.array(rows))

    def test_cold_concentrates(self):
        q = critic(lambda x: -np.abs(x - 0.3), 257)
        p = logit_density(q, 0.001)
        rng = np.random.default_rng(4)
        draws = np.array([sample_logit(p, rng) for _ in range(2000)])
        assert np.mean(np.abs(draws - 0.3) <= 2 * p.spacing) >= 0.99

    def test_deterministic(self):
        p = logit_density(critic(lambda x: np.cos(5 * x)), 0.2)
        r1, r2 = np.random.default_rng(9), np.random.default_rng(9)
        assert [sample_logit(p, r1) for _ in range(50)] == [sample_logit(p, r2) for _ in range(50)]

    def test_unnormalized(self):
        p = GridDensity(UNIT, np.full(5, 2.0), check=False)
        with pytest.raises(ContractError):
            sample_logit(p, np.random.default_rng(0))


class TestResponseProfile:
    def test_single_player_is_gibbs(self):
        g = builtin("quadratic_coordination", n_players=1, kappa=0.0)
        (p,) = logit_response_profile(g, [dirac(0.1, UNIT)], 0.1, 129)
        want = logit_density(critic(lambda x: -((x - 0.5) ** 2), 129), 0.1)
        assert np.allclose(p.values, want.values, rtol=1e-13)

    def test_symmetric(self):
        g = builtin("quadratic_coordination")
        p = random_smooth_density(UNIT, 129, np.random.default_rng(5))
        a, b = logit_response_profile(g, [p, p], 0.1, 129)
        assert np.max(np.abs(a.values - b.values)) < 1e-12

    def test_refinement_oracle(self):
        g = builtin("quadratic_coordination", theta=[0.3, 0.6])
        opp = random_smooth_density(UNIT, 129, np.random.default_rng(6))
        _, got = logit_response_profile(g, [opp, dirac(0.5, UNIT)], 0.1, 129)
        # brute-force double integral at twice the opponent resolution
        x = UNIT.nodes(257)
        w = np.interp(x, opp.nodes, opp.values)
        tw = np.full(257, x[1])
        tw[[0, -1]] /= 2
        a = UNIT.nodes(129)
        U = np.array([(g.utility(1, [x, ai]) * w * tw).sum() for ai in a])
        want = GridDensity.normalized(UNIT, np.exp((U - U.max()) / 0.1))
        assert l1_distance(got, want) < 1e-4

    def test_operator_matches_profile(self):
        g = builtin("cournot_linear")
        rng = np.random.default_rng(7)
        prof = [random_smooth_density(iv, 65, rng) for iv in g.intervals]
        op = ResponseOperator(g, 0.2, 65)
        for a, b in zip(op(prof), logit_response_profile(g, prof, 0.2, 65)):
            assert np.allclose(a.values, b.values, rtol=1e-12)


class TestFixedPoint:
    def test_single_player_one_step(self):
        g = builtin("quadratic_coordination", n_players=1, kappa=0.0)
        res = logit_fixed_point(g, 0.1, 512, damping=1.0)
        assert res.converged and res.iterations == 1
        want = gibbs_oracle(lambda x: -((x - 0.5) ** 2), 0.1, UNIT.nodes(512))
        assert l1_distance(res.profile[0], GridDensity(UNIT, want, check=False)) < 1e-3

    def test_quadratic_symmetric(self):
        res = logit_fixed_point(builtin("quadratic_coordination"), 0.1, 256)
        assert res.converged and res.residual < 1e-6
        assert np.max(np.abs(res.profile[0].values - res.profile[1].values)) < 1e-12

    def test_start_at_fixed_point(self):
        g = builtin("quadratic_coordination")
        first = logit_fixed_point(g, 0.1, 128)
        again = logit_fixed_point(g, 0.1, 128, init=first.profile, tol=1e-8)
        assert again.converged and again.iterations == 0 and again.residual < 1e-8

    def test_max_iter_reports_failure(self):
        res = logit_fixed_point(builtin("quadratic_coordination"), 0.1, 64, max_iter=1)
        assert not res.converged

    @pytest.mark.parametrize("k", [1, 2, 5])
    def test_damped_iterates_stay_in_simplex(self, k):
        g = builtin("cournot_linear", n_players=3)
        res = logit_fixed_point(g, 0.05, 64, damping=0.3, max_iter=k)
        for p in res.profile:
            assert p.values.min() >= 0 and abs(trapezoid(p.values, p.spacing) - 1) < 1e-9

    @pytest.mark.parametrize("name", ["quadratic_coordination", "cournot_linear", "wlu_quadratic"])
    def test_grid_refinement(self, name):
        g = builtin(name)
        coarse = logit_fixed_point(g, 0.1, 257).profile
        fine = logit_fixed_point(g, 0.1, 513).profile
        for c, f in zip(coarse, fine):
            sub = GridDensity.normalized(c.interval, f.values[::2])
            assert l1_distance(c, sub) < 5e-3


class TestSolveEquilibria:
    def test_single_player_one_component(self):
        eq = solve_equilibria(builtin("quadratic_coordination", n_players=1, kappa=0.0), 0.1, 128, restarts=4)
        assert len(eq.components) == 1 and eq.all_converged

    def test_quadratic_one_symmetric_component(self):
        eq = solve_equilibria(builtin("quadratic_coordination"), 0.1, 128, restarts=6)
        assert len(eq.components) == 1 and eq.components[0].members == list(range(6))
        a, b = eq.components[0].profile
        assert np.max(np.abs(a.values - b.values)) < 1e-12

    def test_two_components(self):
        # coordination plus a convex own payoff: both corners attract
        def u(i, a):
            return -3 * (a[0] - a[1]) ** 2 + 2 * (a[i] - 0.5) ** 2

        pot = lambda a: -3 * (a[0] - a[1]) ** 2 + 2 * (a[0] - 0.5) ** 2 + 2 * (a[1] - 0.5) ** 2
        g = GameSpec(2, (UNIT, UNIT), u, pot, u_bound=4.0, lip_bound=8.0)
        eq = solve_equilibria(g, 0.05, 96, restarts=8, tol=1e-9)
        assert len(eq.components) >= 2
