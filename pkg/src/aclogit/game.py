"""Continuous-action potential games.

Utilities and potentials are *vectorized* evaluators: ``utility(i, actions)``
receives one array per player (mutually broadcastable) and returns the
broadcast array of payoffs to player ``i``; ``potential(actions)`` likewise.
Scalars work too, so the same callable serves pointwise checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, ContractError, DomainError
from .measure import (
    SAMPLE_TOL,
    AtomicMeasure,
    GridDensity,
    Interval,
    Measure,
    as_interval,
    trapezoid_weights,
)

Utility = Callable[[int, Sequence], np.ndarray]
Potential = Callable[[Sequence], np.ndarray]

EXACT_PRODUCT_LIMIT = 10**6
MC_DRAWS = 10**5
EXACT_POTENTIAL_LIMIT = 1 << 25
_CHUNK_ELEMENTS = 1 << 21


@dataclass(frozen=True)
class GameSpec:
    n_players: int
    intervals: tuple
    utility: Utility = field(repr=False)
    potential: Optional[Potential] = field(default=None, repr=False)
    u_bound: float = 1.0
    lip_bound: float = 1.0
    name: str = "custom"

    def __post_init__(self):
        if self.n_players < 1:
            raise ConfigurationError("a game needs at least one player")
        ivs = tuple(as_interval(iv) for iv in self.intervals)
        if len(ivs) != self.n_players:
            raise ConfigurationError(f"{self.n_players} players but {len(ivs)} intervals")
        for label, v in (("u_bound", self.u_bound), ("lip_bound", self.lip_bound)):
            if not (math.isfinite(v) and v > 0):
                raise ConfigurationError(f"{label} must be finite and positive, got {v}")
        object.__setattr__(self, "intervals", ivs)

    def payoff(self, i: int, actions: Sequence[float]) -> float:
        """Pointwise utility of player ``i`` at a pure action profile."""
        self._check_profile(actions)
        return float(self.utility(i, [float(a) for a in actions]))

    def _check_profile(self, actions):
        if len(actions) != self.n_players:
            raise DomainError(f"expected {self.n_players} actions, got {len(actions)}")
        for j, (a, iv) in enumerate(zip(actions, self.intervals)):
            if not iv.lo <= a <= iv.hi:
                raise DomainError(f"action {a} of player {j} is outside [{iv.lo}, {iv.hi}]")


def identical_interest(game: GameSpec) -> GameSpec:
    """The game in which every player receives the potential.

    Logit responses, and hence the mean-field dynamics, coincide with those of
    ``game`` because each ``u^i - phi`` does not depend on player i's action.
    """
    if game.potential is None:
        raise ConfigurationError(f"game {game.name!r} has no potential function")
    phi = game.potential
    return GameSpec(
        game.n_players, game.intervals, lambda i, a: phi(a), phi,
        game.u_bound, game.lip_bound, f"{game.name}/identical-interest",
    )


# -- slices ---------------------------------------------------------------


def _profile_with(i: int, own, others: dict, n: int) -> list:
    return [own if j == i else others[j] for j in range(n)]


def _evaluate(game: GameSpec, i: int, profile: list, shape) -> np.ndarray:
    out = np.asarray(game.utility(i, profile), dtype=float)
    return np.broadcast_to(out, shape)


def utility_slice(game: GameSpec, i: int, grid: int, opponents: Sequence[float]) -> np.ndarray:
    """``u^i(a, a^{-i})`` at ``grid`` uniform nodes of player i's interval.

    ``opponents`` holds one action per player; entry ``i`` is ignored.
    """
    if len(opponents) != game.n_players:
        raise DomainError(f"expected {game.n_players} entries, got {len(opponents)}")
    nodes = game.intervals[i].nodes(grid)
    others = {}
    for j, a in enumerate(opponents):
        if j == i:
            continue
        iv = game.intervals[j]
        if not iv.lo <= a <= iv.hi:
            raise DomainError(f"action {a} of player {j} is outside [{iv.lo}, {iv.hi}]")
        others[j] = float(a)
    return np.array(_evaluate(game, i, _profile_with(i, nodes, others, game.n_players), nodes.shape))


def _support(mu: Measure) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and quadrature masses representing a measure in expectations."""
    if isinstance(mu, AtomicMeasure):
        if abs(mu.mass - 1.0) > SAMPLE_TOL:
            raise ContractError(f"opponent measure has mass {mu.mass!r}, expected 1")
        return mu.positions, mu.weights
    return mu.nodes, mu.quadrature_weights()


def _draw(mu: Measure, rng: np.random.Generator, size: int) -> np.ndarray:
    if isinstance(mu, AtomicMeasure):
        cum = np.cumsum(mu.weights)
        k = np.searchsorted(cum, rng.random(size) * cum[-1], side="right")
        return mu.positions[np.minimum(k, mu.positions.size - 1)]
    from .logit import inverse_cdf

    return inverse_cdf(mu.values, mu.interval.lo, mu.spacing, rng.random(size))


def expected_utility_slice(
    game: GameSpec,
    i: int,
    grid: int,
    opponents: Sequence[Measure],
    *,
    rng: Optional[np.random.Generator] = None,
    full_output: bool = False,
):
    """``u^i(a, pi^{-i})`` at the grid nodes of player i.

    ``opponents`` holds one measure per player (entry ``i`` is ignored; may be
    None). The expectation is an exact weighted sum over the product of
    opponent supports when that product has at most ``EXACT_PRODUCT_LIMIT``
    elements -- grid densities contribute their trapezoid masses, so this is
    tensor-product trapezoid quadrature. Larger products fall back to Monte
    Carlo with ``MC_DRAWS`` joint draws.

    With ``full_output=True`` returns ``(values, exact, stderr)`` where
    ``stderr`` is the largest Monte Carlo standard error (0 when exact).
    """
    if len(opponents) != game.n_players:
        raise DomainError(f"expected {game.n_players} entries, got {len(opponents)}")
    nodes = game.intervals[i].nodes(grid)
    n = game.n_players
    idx = [j for j in range(n) if j != i]
    for j in idx:
        if opponents[j].interval != game.intervals[j]:
            raise DomainError(f"measure of player {j} lives on the wrong interval")
    if not idx:
        vals = np.array(_evaluate(game, i, [nodes], nodes.shape))
        return (vals, True, 0.0) if full_output else vals

    supports = [_support(opponents[j]) for j in idx]
    sizes = [s[0].size for s in supports]
    total = math.prod(sizes)
    if total <= EXACT_PRODUCT_LIMIT:
        vals = np.zeros(grid)
        chunk = max(1, _CHUNK_ELEMENTS // grid)
        for start in range(0, total, chunk):
            flat = np.arange(start, min(total, start + chunk))
            coords = np.unravel_index(flat, sizes)
            w = np.ones(flat.size)
            others = {}
            for j, (pos, wt), c in zip(idx, supports, coords):
                others[j] = pos[c][None, :]
                w = w * wt[c]
            prof = _profile_with(i, nodes[:, None], others, n)
            vals += _evaluate(game, i, prof, (grid, flat.size)) @ w
        return (vals, True, 0.0) if full_output else vals

    rng = np.random.default_rng(0) if rng is None else rng
    draws = {j: _draw(opponents[j], rng, MC_DRAWS) for j in idx}
    s1 = np.zeros(grid)
    s2 = np.zeros(grid)
    chunk = max(1, _CHUNK_ELEMENTS // grid)
    for start in range(0, MC_DRAWS, chunk):
        stop = min(MC_DRAWS, start + chunk)
        others = {j: d[None, start:stop] for j, d in draws.items()}
        block = _evaluate(game, i, _profile_with(i, nodes[:, None], others, n), (grid, stop - start))
        s1 += block.sum(axis=1)
        s2 += (block * block).sum(axis=1)
    mean = s1 / MC_DRAWS
    var = np.maximum(s2 / MC_DRAWS - mean * mean, 0.0)
    stderr = float(np.sqrt(var.max() / MC_DRAWS))
    return (mean, False, stderr) if full_output else mean


def expected_potential(game: GameSpec, profile: Sequence[Measure], *, rng=None, full_output=False):
    """``phi(pi)`` under the product of the players' measures."""
    if game.potential is None:
        raise ConfigurationError(f"game {game.name!r} has no potential function")
    if len(profile) != game.n_players:
        raise DomainError(f"expected {game.n_players} measures, got {len(profile)}")
    supports = [_support(mu) for mu in profile]
    sizes = [s[0].size for s in supports]
    total = math.prod(sizes)
    n = game.n_players
    if n <= 4 and total <= EXACT_POTENTIAL_LIMIT:
        acc = 0.0
        for start in range(0, total, _CHUNK_ELEMENTS):
            flat = np.arange(start, min(total, start + _CHUNK_ELEMENTS))
            coords = np.unravel_index(flat, sizes)
            w = np.ones(flat.size)
            args = []
            for (pos, wt), c in zip(supports, coords):
                args.append(pos[c])
                w = w * wt[c]
            acc += float(np.broadcast_to(np.asarray(game.potential(args), float), w.shape) @ w)
        return (acc, True, 0.0) if full_output else acc
    rng = np.random.default_rng(0) if rng is None else rng
    args = [_draw(mu, rng, MC_DRAWS) for mu in profile]
    vals = np.broadcast_to(np.asarray(game.potential(args), float), (MC_DRAWS,))
    mean = float(vals.mean())
    se = float(vals.std() / math.sqrt(MC_DRAWS))
    return (mean, False, se) if full_output else mean


# -- potential validation --------------------------------------------------


@dataclass(frozen=True)
class PotentialReport:
    max_residual: float
    samples: int
    tol: float
    passed: bool
    worst_player: int

    def to_dict(self) -> dict:
        return {
            "max_residual": self.max_residual,
            "samples": self.samples,
            "tol": self.tol,
            "passed": self.passed,
            "worst_player": self.worst_player,
        }


def validate_potential(
    game: GameSpec, samples: int = 10_000, tol: float = 1e-9, rng: Optional[np.random.Generator] = None
) -> PotentialReport:
    """Spot-check the potential identity on random unilateral deviations."""
    if game.potential is None:
        raise ConfigurationError(f"game {game.name!r} has no potential function")
    if samples < 1:
        raise DomainError("samples must be >= 1")
    rng = np.random.default_rng(0) if rng is None else rng
    n = game.n_players
    player = rng.integers(0, n, size=samples)
    base = [rng.uniform(iv.lo, iv.hi, size=samples) for iv in game.intervals]
    alt = [rng.uniform(iv.lo, iv.hi, size=samples) for iv in game.intervals]
    worst, worst_i = 0.0, 0
    for i in range(n):
        mask = player == i
        if not mask.any():
            continue
        a = [b[mask] for b in base]
        a_dev = list(a)
        a_dev[i] = alt[i][mask]
        shape = a[0].shape
        du = np.broadcast_to(game.utility(i, a), shape) - np.broadcast_to(game.utility(i, a_dev), shape)
        dphi = np.broadcast_to(game.potential(a), shape) - np.broadcast_to(game.potential(a_dev), shape)
        r = float(np.max(np.abs(du - dphi)))
        if r > worst:
            worst, worst_i = r, i
    return PotentialReport(worst, samples, tol, worst <= tol, worst_i)


# -- constructions ---------------------------------------------------------


def wlu_game(
    global_utility: Potential,
    baselines: Sequence[float],
    intervals: Sequence,
    bounds: tuple[float, float],
    name: str = "wlu",
) -> GameSpec:
    """Wonderful Life Utility game: ``u^i(a) = G(a) - G(baseline^i, a^{-i})``."""
    ivs = tuple(as_interval(iv) for iv in intervals)
    if len(baselines) != len(ivs):
        raise ConfigurationError(f"{len(ivs)} intervals but {len(baselines)} baselines")
    for j, (b, iv) in enumerate(zip(baselines, ivs)):
        if not iv.lo <= b <= iv.hi:
            raise DomainError(f"baseline {b} of player {j} is outside [{iv.lo}, {iv.hi}]")
    base = [float(b) for b in baselines]

    def utility(i, a):
        swapped = list(a)
        swapped[i] = base[i]
        return np.asarray(global_utility(a), float) - np.asarray(global_utility(swapped), float)

    u_bound, lip_bound = bounds
    return GameSpec(len(ivs), ivs, utility, global_utility, u_bound, lip_bound, name)


def _per_player(value, n: int, label: str) -> list[float]:
    if np.ndim(value) == 0:
        return [float(value)] * n
    vals = [float(v) for v in value]
    if len(vals) != n:
        raise ConfigurationError(f"{label} needs {n} entries, got {len(vals)}")
    return vals


def _quadratic_potential(theta, kappa):
    n = len(theta)

    def phi(a):
        total = 0.0
        for i in range(n):
            total = total - (a[i] - theta[i]) ** 2
        for i in range(n):
            for j in range(i + 1, n):
                total = total - kappa * (a[i] - a[j]) ** 2
        return total

    return phi


def quadratic_coordination(n_players: int = 2, theta=0.5, kappa: float = 1.0) -> GameSpec:
    theta = _per_player(theta, n_players, "theta")
    for t in theta:
        if not 0.0 <= t <= 1.0:
            raise ConfigurationError(f"theta entries must lie in [0, 1], got {t}")
    if kappa < 0:
        raise ConfigurationError(f"kappa must be >= 0, got {kappa}")
    phi = _quadratic_potential(theta, kappa)
    pairs = n_players * (n_players - 1) / 2
    u_bound = sum(max(t, 1 - t) ** 2 for t in theta) + kappa * pairs
    lip_bound = 2.0 + 2.0 * kappa * (n_players - 1)
    return GameSpec(
        n_players, tuple(Interval(0.0, 1.0) for _ in range(n_players)),
        lambda i, a: phi(a), phi, max(u_bound, 1e-12), lip_bound, "quadratic_coordination",
    )


def cournot_linear(
    n_players: int = 2, price: float = 1.0, cost: float = 0.1, q_max: float = 1.0, perturb: float = 0.0
) -> GameSpec:
    """Linear-demand Cournot oligopoly.

    ``perturb`` adds ``perturb * (a^1)^2`` to player 0's payoff only, which
    breaks the potential identity (a validation fixture).
    """
    if q_max <= 0:
        raise ConfigurationError(f"q_max must be positive, got {q_max}")
    n = n_players

    def utility(i, a):
        supply = sum(a[j] for j in range(n))
        u = a[i] * (price - supply) - cost * a[i]
        if perturb and i == 0:
            u = u + perturb * a[0] ** 2
        return u

    def phi(a):
        total = 0.0
        for i in range(n):
            total = total + (price - cost) * a[i] - a[i] ** 2
            for j in range(i + 1, n):
                total = total - a[i] * a[j]
        return total

    u_bound = q_max * (abs(price) + n * q_max + abs(cost)) + abs(perturb) * q_max**2
    lip_bound = abs(price) + abs(cost) + (n + 1) * q_max + 2 * abs(perturb) * q_max
    return GameSpec(
        n, tuple(Interval(0.0, q_max) for _ in range(n)), utility, phi, u_bound, lip_bound, "cournot_linear"
    )


def wlu_quadratic(n_players: int = 2, theta=0.5, kappa: float = 1.0, baselines=0.0) -> GameSpec:
    theta = _per_player(theta, n_players, "theta")
    baselines = _per_player(baselines, n_players, "baselines")
    phi = _quadratic_potential(theta, kappa)
    pairs = n_players * (n_players - 1) / 2
    g_bound = sum(max(t, 1 - t) ** 2 for t in theta) + kappa * pairs
    bounds = (2.0 * g_bound, 2.0 * (2.0 + 2.0 * kappa * (n_players - 1)))
    return wlu_game(phi, baselines, [Interval(0.0, 1.0)] * n_players, bounds, "wlu_quadratic")


BUILTINS = {
    "quadratic_coordination": quadratic_coordination,
    "cournot_linear": cournot_linear,
    "wlu_quadratic": wlu_quadratic,
}


def builtin(name: str, **params) -> GameSpec:
    """Construct a named test game; ``omit_potential=True`` drops phi."""
    if name not in BUILTINS:
        raise ConfigurationError(f"unknown game {name!r}; choose from {sorted(BUILTINS)}")
    omit = bool(params.pop("omit_potential", False))
    try:
        game = BUILTINS[name](**params)
    except TypeError as exc:
        raise ConfigurationError(f"bad parameters for {name}: {exc}") from None
    if omit:
        game = GameSpec(game.n_players, game.intervals, game.utility, None, game.u_bound, game.lip_bound, game.name)
    return game
