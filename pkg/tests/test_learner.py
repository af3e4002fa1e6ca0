import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from aclogit.errors import ConfigurationError, DomainError
from aclogit.game import builtin, expected_utility_slice, utility_slice
from aclogit.learner import (
    LearnerState,
    StepSchedule,
    calibration_residual,
    critic_update,
    player_rng,
    run,
    run_many,
    schedule_at,
    smoothed_actor,
    step,
)
from aclogit.logit import CriticFn, inverse_cdf, logit_density
from aclogit.measure import AtomicMeasure, GridDensity, Interval, sample_atoms, trapezoid

UNIT = Interval(0.0, 1.0)
DEFAULT = StepSchedule()


@pytest.fixture(scope="module")
def quad():
    return builtin("quadratic_coordination")


def advanced(game, seeds, n, grid=64, eta=0.1, **kw):
    state = LearnerState(game, seeds, grid)
    for _ in range(n):
        state.advance(eta, DEFAULT, **kw)
    return state


class TestSchedule:
    def test_defaults_first_step(self):
        alpha, gamma = schedule_at(DEFAULT, 1)
        assert alpha == 0.5 and gamma == pytest.approx(0.659754, abs=1e-6)
        assert gamma == 2.0**-0.6

    def test_ratio_decreases(self):
        ratios = [a / g for a, g in (DEFAULT.at(n) for n in range(1, 5000))]
        assert all(x > y for x, y in zip(ratios, ratios[1:]))
        assert ratios[-1] == pytest.approx(5000.0**-0.4, rel=1e-12)

    def test_prefix_sums(self):
        n = np.arange(1, 10**6 + 1)
        alpha = 1.0 / (n + 1.0)
        assert math.fsum(alpha**2) < math.pi**2 / 6
        # sum_{k<=N} 1/(k+1) = log N + euler_gamma - 1 + 3/(2N) + O(1/N^2)
        partial = np.cumsum(alpha)
        for N in (10**3, 10**4, 10**5, 10**6):
            assert partial[N - 1] == pytest.approx(math.log(N) + np.euler_gamma - 1, abs=2.0 / N)

    def test_wrong_order(self):
        with pytest.raises(ConfigurationError, match="faster timescale"):
            StepSchedule(rho_alpha=0.6, rho_gamma=1.0)

    def test_not_square_summable(self):
        with pytest.raises(ConfigurationError, match="square-summable"):
            StepSchedule(rho_alpha=0.4, rho_gamma=0.3)

    @pytest.mark.parametrize(
        "kw", [{"a0": 0.0}, {"g0": -1.0}, {"n0": 0}, {"rho_alpha": 1.2}, {"a0": 3.0}]
    )
    def test_other_rejections(self, kw):
        with pytest.raises(ConfigurationError):
            StepSchedule(**kw)

    def test_index_from_one(self):
        with pytest.raises(DomainError):
            DEFAULT.at(0)


class TestCriticUpdate:
    q = CriticFn(UNIT, np.linspace(-1, 1, 33))
    u = np.cos(np.linspace(0, 3, 33))

    def test_gamma_one(self):
        assert np.array_equal(critic_update(self.q, self.u, 1.0).values, self.u)

    def test_gamma_zero(self):
        assert np.array_equal(critic_update(self.q, self.u, 0.0).values, self.q.values)

    def test_geometric_decay(self):
        q, gamma = self.q, 0.3
        d0 = self.q.values - self.u
        # each update rounds to the grid of floats near u, about one ulp
        ulp = np.spacing(np.maximum(np.abs(self.u), np.abs(self.q.values)))
        for k in range(1, 40):
            q = critic_update(q, self.u, gamma)
            err = np.abs(q.values - self.u - (1 - gamma) ** k * d0)
            assert np.all(err <= 4 * ulp / gamma)

    def test_grid_mismatch(self):
        with pytest.raises(DomainError):
            critic_update(self.q, np.zeros(32), 0.5)

    def test_gamma_range(self):
        with pytest.raises(DomainError):
            critic_update(self.q, self.u, 1.5)


def reference_run(game, seed, n, grid, eta):
    """Per-player loop over the public one-step primitives."""
    N = game.n_players
    rngs = [player_rng(seed, i) for i in range(N)]
    blocks = [None] * N
    # insertion-ordered atoms; the u -> atom map depends on the order
    xs = [list(iv.nodes(grid)) for iv in game.intervals]
    ws = [[1.0 / grid] * grid for _ in range(N)]
    critics = [CriticFn(iv, np.zeros(grid)) for iv in game.intervals]
    for it in range(1, n + 1):
        pos = (it - 1) % 1024
        if pos == 0:
            blocks = [g.random((1024, 2)) for g in rngs]
        u = [b[pos] for b in blocks]
        alpha, gamma = DEFAULT.at(it)
        a = [sample_atoms(np.array(xs[i]), np.array(ws[i]), u[i][0]) for i in range(N)]
        for i in range(N):
            opp = [None if j == i else a[j] for j in range(N)]
            critics[i] = critic_update(critics[i], utility_slice(game, i, grid, opp), gamma)
            p = logit_density(critics[i], eta)
            b = float(inverse_cdf(p.values, p.interval.lo, p.spacing, u[i][1]))
            xs[i].append(b)
            ws[i] = [w * (1 - alpha) for w in ws[i]] + [alpha]
    actors = [AtomicMeasure(iv, x, w) for iv, x, w in zip(game.intervals, xs, ws)]
    return actors, critics


class TestStep:
    def test_deterministic(self, quad):
        s1, s2 = advanced(quad, [42], 1000), advanced(quad, [42], 1000)
        for name in ("pos", "wraw", "cum", "Q"):
            assert np.array_equal(getattr(s1, name), getattr(s2, name))

    def test_step_leaves_input(self, quad):
        s = LearnerState(quad, [1], 32)
        before = s.copy()
        after = step(s, quad, 0.1, DEFAULT)
        assert after.iter == 1 and s.iter == 0
        assert np.array_equal(s.Q, before.Q) and not np.array_equal(after.Q, s.Q)

    def test_step_rejects_other_game(self, quad):
        with pytest.raises(DomainError):
            step(LearnerState(quad, [1], 32), builtin("cournot_linear"), 0.1, DEFAULT)

    @pytest.mark.parametrize("name", ["quadratic_coordination", "cournot_linear"])
    def test_matches_reference_loop(self, name):
        g = builtin(name)
        fast = advanced(g, [3], 300, grid=48, eta=0.2)
        actors, critics = reference_run(g, 3, 300, 48, 0.2)
        for i in range(2):
            mine = fast.actor(i)
            assert np.allclose(mine.positions, actors[i].positions, atol=1e-9)
            assert np.allclose(mine.weights, actors[i].weights, rtol=1e-9, atol=1e-15)
            assert np.allclose(fast.Q[0, i], critics[i].values, atol=1e-9)

    def test_batch_invariance(self, quad):
        alone = advanced(quad, [5], 2500, compact_bins=64, compact_every=700)
        batch = advanced(quad, [9, 5, 2], 2500, compact_bins=64, compact_every=700)
        for i in range(2):
            a, b = alone.actor(i, 0), batch.actor(i, 1)
            keep = b.weights > 0
            assert np.array_equal(a.positions, b.positions[keep])
            assert np.allclose(a.weights, b.weights[keep], rtol=1e-12)
        assert np.array_equal(alone.Q[0], batch.Q[1])

    def test_mass_stays_one(self, quad):
        s = advanced(quad, [8], 20_000, compact_bins=128, compact_every=5000)
        for i in range(2):
            assert abs(s.actor_mass(i) - 1.0) < 1e-9

    def test_alpha_one_resets(self, quad):
        s = LearnerState(quad, [1], 32)
        s.advance(0.1, StepSchedule(a0=2.0, n0=1))
        assert s.count == 1 and all(len(p) == 1 for p in s.actors())

    def test_critic_bounded(self):
        g = builtin("cournot_linear", n_players=3)
        s = advanced(g, [4], 3000)
        assert np.max(np.abs(s.Q)) <= g.u_bound

    @settings(max_examples=10, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1))
    def test_support_inside(self, seed):
        g = builtin("cournot_linear", q_max=0.7)
        s = advanced(g, [seed], 200, grid=32)
        for i, iv in enumerate(g.intervals):
            x = s.actor(i).positions
            assert x.min() >= iv.lo and x.max() <= iv.hi

    def test_symmetric_players_stay_symmetric(self, quad):
        s = LearnerState(quad, [11], 64)
        s.share_stream(0, 1)
        for _ in range(1500):
            s.advance(0.1, DEFAULT)
        a, b = s.actors()
        assert np.array_equal(a.positions, b.positions) and np.array_equal(a.weights, b.weights)
        assert np.array_equal(s.Q[0, 0], s.Q[0, 1])

    def test_single_player_gibbs_ks(self):
        # the actor averages logit draws; the critic locks onto the fixed payoff
        g = builtin("quadratic_coordination", n_players=1, kappa=0.0)
        s = advanced(g, [2024], 100_000, grid=256, compact_bins=512, compact_every=1000)
        x = UNIT.nodes(8193)
        w = np.exp(-((x - 0.5) ** 2) / 0.1)
        gibbs = integrate.cumulative_trapezoid(w, x, initial=0.0)
        gibbs /= gibbs[-1]
        assert np.max(np.abs(s.actor(0).cdf(x) - gibbs)) < 0.05


class TestCalibration:
    def test_preset_exact_slice(self, quad):
        s = advanced(quad, [6], 50)
        for i in range(2):
            s.set_critic(i, expected_utility_slice(quad, i, s.grid, s.actors()))
        assert max(calibration_residual(s, quad)) < 1e-10

    def test_full_step_substitution(self, quad):
        # one critic update with gamma = 1 against Dirac opponents
        s = LearnerState(quad, [7], 65)
        a1 = 0.3
        s.set_critic(0, critic_update(s.critic(0), utility_slice(quad, 0, 65, [None, a1]), 1.0).values)
        want = utility_slice(quad, 0, 65, [None, a1]) - expected_utility_slice(quad, 0, 65, s.actors())
        got = calibration_residual(s, quad)[0]
        assert got == math.sqrt(trapezoid(want * want, s.spacing[0]))

    def test_grid_mismatch(self, quad):
        with pytest.raises(DomainError):
            calibration_residual(LearnerState(quad, [1], 32), quad, grid=64)


class TestRun:
    def test_zero_iterations(self, quad):
        rec = run(quad, 0.1, DEFAULT, 0, 1, grid=32)
        assert [d.iter for d in rec.records] == [0]
        assert rec.final.alpha is None and rec.final.residuals[0] > 0

    def test_same_seed_same_records(self, quad):
        kw = dict(grid=32, checkpoints=[0, 50, 100])
        r1, r2 = run(quad, 0.1, DEFAULT, 100, 9, **kw), run(quad, 0.1, DEFAULT, 100, 9, **kw)
        strip = lambda r: [{k: v for k, v in d.to_dict().items() if k != "elapsed_s"} for d in r.records]
        assert strip(r1) == strip(r2) and len(r1.records) == 3

    def test_records_finite(self, quad):
        rec = run(quad, 0.1, DEFAULT, 200, 3, checkpoints=[0, 200], grid=32)
        d = rec.final
        assert all(r >= 0 and math.isfinite(r) for r in d.residuals)
        assert math.isfinite(d.lyapunov) and d.bl_to_ref is None

    def test_reference_distance(self, quad):
        ref = [[GridDensity.uniform(UNIT, 32)] * 2]
        rec = run(quad, 0.1, DEFAULT, 0, 1, reference=ref, grid=32, bl_resolution=128)
        assert rec.final.bl_to_ref < 0.05

    def test_rejects_duplicate_seeds(self, quad):
        with pytest.raises(DomainError):
            run_many(quad, 0.1, DEFAULT, 10, [1, 1])

    def test_sink_sees_every_record(self, quad):
        seen = []
        run_many(quad, 0.1, DEFAULT, 20, [1, 2], checkpoints=[0, 10, 20], grid=32, sink=lambda s, d: seen.append((s, d.iter)))
        assert sorted(seen) == [(s, k) for s in (1, 2) for k in (0, 10, 20)]


class TestSmoothedActor:
    def test_uniform_atoms(self):
        pi = AtomicMeasure(UNIT, UNIT.nodes(65), np.full(65, 1 / 65))
        p = smoothed_actor(pi, 65)
        assert abs(trapezoid(p.values, p.spacing) - 1) < 1e-12
        assert np.allclose(p.values[1:-1], p.values[1])

    def test_dirac_mass_split(self):
        p = smoothed_actor(AtomicMeasure(UNIT, [0.5], [1.0]), 5)
        assert np.count_nonzero(p.values) == 1 and p.values[2] == pytest.approx(4.0)
