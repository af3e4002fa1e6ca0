"""Two-timescale actor-critic learning with logit best responses.

Each iteration, for every player simultaneously:

1. play ``a^i ~ pi^i`` (the actor, a weighted set of atoms);
2. move the critic toward the observed payoff slice,
   ``Q^i <- Q^i + gamma_n (u^i(., a^{-i}) - Q^i)``;
3. draw ``b^i`` from the logit density of the updated critic;
4. move the actor toward it, ``pi^i <- pi^i + alpha_n (delta_{b^i} - pi^i)``.

A :class:`LearnerState` holds several independent replications ("lanes",
one per seed) so that all seeds advance through the same numpy calls. Lanes
never exchange data and every lane-player pair owns its random stream, so a
seed produces the same trajectory whatever other seeds share its batch.

Actor weights are stored unnormalized: the true weight of an atom is its raw
weight times a per-row scale. The mixing step then only shrinks the scale and
appends one atom, instead of rescaling every existing weight.
"""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, DomainError
from .game import GameSpec, expected_utility_slice
from .logit import CriticFn, EquilibriumComponent, inverse_cdf
from .measure import (
    AtomicMeasure,
    GridDensity,
    compact,
    profile_distance,
    trapezoid,
    trapezoid_weights,
)

log = logging.getLogger(__name__)

_UNIFORM_BLOCK = 1024
_RESCALE_BELOW = 1e-150


@dataclass(frozen=True)
class StepSchedule:
    """``alpha_n = a0 (n + n0)^-rho_alpha`` and ``gamma_n = g0 (n + n0)^-rho_gamma``."""

    a0: float = 1.0
    g0: float = 1.0
    rho_alpha: float = 1.0
    rho_gamma: float = 0.6
    n0: int = 1

    def __post_init__(self):
        if not (self.a0 > 0 and self.g0 > 0):
            raise ConfigurationError(f"a0 and g0 must be positive, got a0={self.a0}, g0={self.g0}")
        if self.n0 < 1:
            raise ConfigurationError(f"n0 must be >= 1, got {self.n0}")
        if not self.rho_alpha <= 1.0:
            raise ConfigurationError(
                f"rho_alpha={self.rho_alpha} > 1 makes the actor steps summable; need rho_alpha <= 1"
            )
        if not self.rho_gamma > 0.5:
            raise ConfigurationError(
                f"rho_gamma={self.rho_gamma} <= 0.5 makes the critic steps not square-summable; need rho_gamma > 0.5"
            )
        if not self.rho_gamma < self.rho_alpha:
            raise ConfigurationError(
                f"rho_gamma={self.rho_gamma} must be < rho_alpha={self.rho_alpha} so that "
                "alpha_n / gamma_n -> 0 (the critic must run on the faster timescale)"
            )
        alpha, gamma = self.at(1)
        if not (0 < alpha <= 1 and 0 < gamma <= 1):
            raise ConfigurationError(f"first steps must lie in (0, 1], got alpha={alpha}, gamma={gamma}")

    def at(self, n: int) -> tuple[float, float]:
        if n < 1:
            raise DomainError(f"step index must be >= 1, got {n}")
        m = float(n + self.n0)
        return self.a0 * m**-self.rho_alpha, self.g0 * m**-self.rho_gamma

    def to_dict(self) -> dict:
        return {"a0": self.a0, "g0": self.g0, "rho_alpha": self.rho_alpha, "rho_gamma": self.rho_gamma, "n0": self.n0}


def schedule_at(s: StepSchedule, n: int) -> tuple[float, float]:
    return s.at(n)


def critic_update(q: CriticFn, u_slice, gamma: float) -> CriticFn:
    u = np.asarray(u_slice, dtype=float)
    if u.shape != q.values.shape:
        raise DomainError(f"slice has shape {u.shape}, critic grid is {q.values.shape}")
    if not 0.0 <= gamma <= 1.0:
        raise DomainError(f"gamma must lie in [0, 1], got {gamma}")
    # convex-combination form: gamma = 1 gives u and gamma = 0 gives q bit for bit
    return CriticFn(q.interval, (1.0 - gamma) * q.values + gamma * u)


def player_rng(seed: int, player: int) -> np.random.Generator:
    """Random stream of one player; independent of the number of players."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(player,)))


class LearnerState:
    """Actors, critics and random streams of ``len(seeds)`` replications."""

    def __init__(self, game: GameSpec, seeds: Sequence[int], grid: int = 256, capacity: Optional[int] = None):
        if grid < 2:
            raise DomainError(f"grid must be >= 2, got {grid}")
        seeds = [int(s) for s in seeds]
        if not seeds:
            raise DomainError("need at least one seed")
        self.game = game
        self.seeds = seeds
        self.grid = grid
        self.iter = 0
        S, N, M = len(seeds), game.n_players, grid
        self.nodes = np.stack([iv.nodes(M) for iv in game.intervals])
        self.spacing = np.array([iv.spacing(M) for iv in game.intervals])
        cap = max(capacity or 0, 2 * M)
        R = S * N
        self.pos = np.zeros((R, cap))
        self.wraw = np.zeros((R, cap))
        self.cum = np.zeros((R, cap))
        self.pos[:, :M] = np.tile(self.nodes, (S, 1))
        self.wraw[:, :M] = 1.0 / M
        self.cum[:, :M] = np.cumsum(self.wraw[:, :M], axis=1)
        # every row gains one atom per iteration and shares alpha, so the
        # atom count and the weight scale are common to all rows
        self.count = M
        self.scale = 1.0
        self.Q = np.zeros((S, N, M))
        self._rows = np.arange(R)
        self._row_h = np.tile(self.spacing, S)
        self._row_lo = np.tile([iv.lo for iv in game.intervals], S).astype(float)
        self.rngs = [player_rng(s, i) for s in seeds for i in range(N)]
        self._ubuf = np.empty((R, 0, 2))
        self._upos = 0
        self.last_steps: tuple[Optional[float], Optional[float]] = (None, None)

    @classmethod
    def initial(cls, game: GameSpec, seed: int, grid: int = 256) -> "LearnerState":
        return cls(game, [seed], grid)

    @property
    def lanes(self) -> int:
        return len(self.seeds)

    def copy(self) -> "LearnerState":
        new = copy.copy(self)
        for name in ("pos", "wraw", "cum", "Q", "_ubuf"):
            setattr(new, name, getattr(self, name).copy())
        new.rngs = copy.deepcopy(self.rngs)
        return new

    def _row(self, lane: int, i: int) -> int:
        return lane * self.game.n_players + i

    def actor(self, i: int, lane: int = 0) -> AtomicMeasure:
        r, c = self._row(lane, i), self.count
        return AtomicMeasure.normalized(self.game.intervals[i], self.pos[r, :c], self.wraw[r, :c] * self.scale)

    def actors(self, lane: int = 0) -> list[AtomicMeasure]:
        return [self.actor(i, lane) for i in range(self.game.n_players)]

    def actor_mass(self, i: int, lane: int = 0) -> float:
        r = self._row(lane, i)
        return math.fsum(self.wraw[r, : self.count]) * self.scale

    def critic(self, i: int, lane: int = 0) -> CriticFn:
        return CriticFn(self.game.intervals[i], self.Q[lane, i].copy())

    def critics(self, lane: int = 0) -> list[CriticFn]:
        return [self.critic(i, lane) for i in range(self.game.n_players)]

    def set_critic(self, i: int, values, lane: int = 0) -> None:
        self.Q[lane, i] = np.asarray(values, dtype=float)

    # -- random numbers --------------------------------------------------

    def _uniforms(self) -> np.ndarray:
        if self._upos >= self._ubuf.shape[1]:
            self._ubuf = np.stack([g.random((_UNIFORM_BLOCK, 2)) for g in self.rngs])
            self._upos = 0
        u = self._ubuf[:, self._upos]
        self._upos += 1
        return u

    def share_stream(self, src: int, dst: int, lane: int = 0) -> None:
        """Give player ``dst`` an exact copy of player ``src``'s random stream."""
        a, b = self._row(lane, src), self._row(lane, dst)
        self.rngs[b] = copy.deepcopy(self.rngs[a])
        if self._ubuf.shape[1]:
            self._ubuf[b] = self._ubuf[a]

    # -- iteration ------------------------------------------------------

    def _ensure_capacity(self, extra: int) -> None:
        need = self.count + extra
        cap = self.pos.shape[1]
        if need <= cap:
            return
        new_cap = max(need, 2 * cap)
        for name in ("pos", "wraw", "cum"):
            old = getattr(self, name)
            grown = np.zeros((old.shape[0], new_cap))
            grown[:, :cap] = old
            setattr(self, name, grown)

    def advance(self, eta: float, schedule: StepSchedule, compact_bins: Optional[int] = None, compact_every: int = 1000) -> None:
        """One simultaneous iteration of every player in every lane, in place."""
        if not eta > 0:
            raise DomainError(f"eta must be positive, got {eta}")
        game = self.game
        S, N = self.lanes, game.n_players
        n = self.iter + 1
        alpha, gamma = schedule.at(n)
        u = self._uniforms()
        self._ensure_capacity(1)

        c = self.count
        t = u[:, 0] * self.cum[:, c - 1]
        k = [row[:c].searchsorted(x, "right") for row, x in zip(self.cum, t)]
        a = self.pos[self._rows, np.minimum(k, c - 1)].reshape(S, N)

        U = np.empty_like(self.Q)
        for i in range(N):
            prof = [self.nodes[i][None, :] if j == i else a[:, j : j + 1] for j in range(N)]
            U[:, i] = np.asarray(game.utility(i, prof), float)
        self.Q *= 1.0 - gamma
        self.Q += gamma * U
        q = self.Q.reshape(S * N, self.grid)
        # the sampler is scale-free, so the Gibbs weights need no normalization
        z = np.exp((q - q.max(axis=1, keepdims=True)) / eta)
        b = inverse_cdf(z, self._row_lo, self._row_h, u[:, 1])

        if alpha >= 1.0:
            self.pos[:, 0] = b
            self.wraw[:, 0] = self.cum[:, 0] = 1.0
            self.count, self.scale = 1, 1.0
        else:
            self.scale *= 1.0 - alpha
            raw = alpha / self.scale
            self.pos[:, c] = b
            self.wraw[:, c] = raw
            self.cum[:, c] = self.cum[:, c - 1] + raw
            self.count = c + 1
            if self.scale < _RESCALE_BELOW:
                self._rescale()
        self.iter = n
        self.last_steps = (alpha, gamma)
        if compact_bins and n % compact_every == 0:
            self.compact(compact_bins)

    def _rescale(self) -> None:
        c = self.count
        self.wraw[:, :c] *= self.scale
        self.cum[:, :c] = np.cumsum(self.wraw[:, :c], axis=1)
        self.scale = 1.0

    def compact(self, bins: int = 512) -> None:
        """Pool every actor into ``bins`` cells (see :func:`aclogit.measure.compact`).

        Rows shorter than the longest are padded with zero-weight atoms,
        which the sampler never selects.
        """
        N = self.game.n_players
        pooled = [compact(self.actor(r % N, r // N), bins) for r in range(self.lanes * N)]
        c = max(len(p) for p in pooled)
        for r, p in enumerate(pooled):
            m = len(p)
            self.pos[r, :m] = p.positions
            self.pos[r, m:c] = p.positions[-1]
            self.wraw[r, :m] = p.weights
            self.wraw[r, m:c] = 0.0
            self.cum[r, :c] = np.cumsum(self.wraw[r, :c])
        self.count, self.scale = c, 1.0


def step(state: LearnerState, game: GameSpec, eta: float, schedule: StepSchedule, **kwargs) -> LearnerState:
    """Return the state after one iteration; ``state`` is left untouched."""
    if game is not state.game:
        raise DomainError("state was initialized for a different game")
    new = state.copy()
    new.advance(eta, schedule, **kwargs)
    return new


# -- diagnostics -------------------------------------------------------------


def _l2(v: np.ndarray, h: float) -> float:
    return math.sqrt(max(trapezoid(v * v, h), 0.0))


def calibration_residual(state: LearnerState, game: GameSpec, grid: Optional[int] = None, lane: int = 0) -> list[float]:
    """Per-player L2 distance between critic and the expected payoff slice."""
    grid = state.grid if grid is None else grid
    if grid != state.grid:
        raise DomainError(f"critic grid is {state.grid}, requested {grid}")
    actors = state.actors(lane)
    out = []
    for i in range(game.n_players):
        target = expected_utility_slice(game, i, grid, actors)
        out.append(_l2(state.Q[lane, i] - target, state.spacing[i]))
    return out


def smoothed_actor(pi: AtomicMeasure, grid: int) -> GridDensity:
    """Deposit atoms on grid nodes by linear interpolation, read off a density."""
    iv = pi.interval
    h = iv.spacing(grid)
    s = (pi.positions - iv.lo) / h
    k = np.clip(np.floor(s).astype(np.int64), 0, grid - 2)
    f = np.clip(s - k, 0.0, 1.0)
    mass = np.bincount(k, pi.weights * (1 - f), grid) + np.bincount(k + 1, pi.weights * f, grid)
    return GridDensity.normalized(iv, mass / trapezoid_weights(grid, h))


@dataclass
class Diagnostics:
    iter: int
    alpha: Optional[float]
    gamma: Optional[float]
    residuals: list[float]
    bl_to_ref: Optional[float]
    lyapunov: Optional[float]
    elapsed_s: float

    def to_dict(self) -> dict:
        return {
            "iter": self.iter,
            "alpha": self.alpha,
            "gamma": self.gamma,
            "residuals": self.residuals,
            "bl_to_ref": self.bl_to_ref,
            "lyapunov": self.lyapunov,
            "elapsed_s": self.elapsed_s,
        }


@dataclass
class RunRecord:
    seed: int
    records: list[Diagnostics] = field(default_factory=list)
    actors: list[AtomicMeasure] = field(default_factory=list)
    critics: list[CriticFn] = field(default_factory=list)

    def at(self, iteration: int) -> Diagnostics:
        for rec in self.records:
            if rec.iter == iteration:
                return rec
        raise KeyError(iteration)

    @property
    def final(self) -> Diagnostics:
        return self.records[-1]


def diagnose(
    state: LearnerState,
    lane: int,
    eta: float,
    reference: Optional[Sequence] = None,
    bl_resolution: int = 512,
    elapsed: float = 0.0,
) -> Diagnostics:
    game = state.game
    actors = state.actors(lane)
    residuals = calibration_residual(state, game, lane=lane)
    bl = None
    if reference:
        bl = min(profile_distance(actors, _profile_of(ref), bl_resolution) for ref in reference)
    lyap = None
    if game.potential is not None:
        from .dynamics import lyapunov

        lyap = lyapunov([smoothed_actor(p, state.grid) for p in actors], game, eta)
    alpha, gamma = state.last_steps
    return Diagnostics(state.iter, alpha, gamma, residuals, bl, lyap, elapsed)


def _profile_of(ref) -> list:
    return ref.profile if isinstance(ref, EquilibriumComponent) else list(ref)


def run_many(
    game: GameSpec,
    eta: float,
    schedule: StepSchedule,
    iters: int,
    seeds: Sequence[int],
    checkpoints: Optional[Iterable[int]] = None,
    reference: Optional[Sequence] = None,
    *,
    grid: int = 256,
    compact_bins: Optional[int] = None,
    compact_every: int = 1000,
    bl_resolution: int = 512,
    sink: Optional[Callable[[int, Diagnostics], None]] = None,
) -> list[RunRecord]:
    """Run ``iters`` iterations for each seed; one lane per seed.

    ``checkpoints`` lists the iteration counts (0 = initial state) at which
    diagnostics are recorded; by default only 0 and ``iters``. ``reference``
    is a list of equilibrium profiles (or components); the reported BL
    distance is to the nearest of them. ``sink(seed, diagnostics)`` sees
    each record as soon as it is computed.
    """
    if iters < 0:
        raise DomainError(f"iters must be >= 0, got {iters}")
    if len(set(seeds)) != len(seeds):
        raise DomainError("seeds must be distinct")
    marks = sorted({0, iters} if checkpoints is None else {int(c) for c in checkpoints if 0 <= c <= iters})
    cap = grid + (compact_every + compact_bins if compact_bins else iters) + 1
    state = LearnerState(game, seeds, grid, capacity=cap)
    out = [RunRecord(s) for s in seeds]
    t0 = time.perf_counter()

    def record():
        for lane, rr in enumerate(out):
            d = diagnose(state, lane, eta, reference, bl_resolution, time.perf_counter() - t0)
            rr.records.append(d)
            if sink is not None:
                sink(rr.seed, d)
        log.debug("iteration %d recorded for %d seeds", state.iter, len(out))

    pending = iter(marks)
    nxt = next(pending, None)
    while nxt is not None:
        while state.iter < nxt:
            state.advance(eta, schedule, compact_bins, compact_every)
        record()
        nxt = next(pending, None)
    for lane, rr in enumerate(out):
        rr.actors = state.actors(lane)
        rr.critics = state.critics(lane)
    return out


def run(
    game: GameSpec,
    eta: float,
    schedule: StepSchedule,
    iters: int,
    seed: int,
    checkpoints: Optional[Iterable[int]] = None,
    reference: Optional[Sequence] = None,
    **kwargs,
) -> RunRecord:
    return run_many(game, eta, schedule, iters, [seed], checkpoints, reference, **kwargs)[0]
