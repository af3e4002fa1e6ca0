"""Logit (Gibbs) best responses, grid sampling, and logit equilibria."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError, DomainError
from .game import GameSpec, expected_utility_slice
from .measure import (
    DENSITY_FLOOR,
    DENSITY_NORM_TOL,
    GridDensity,
    Interval,
    Measure,
    as_interval,
    profile_distance,
    trapezoid,
    trapezoid_weights,
)

TENSOR_CACHE_LIMIT = 1 << 22


@dataclass(frozen=True, eq=False)
class CriticFn:
    """Value-function estimate sampled at uniform nodes of an interval."""

    interval: Interval
    values: np.ndarray

    def __post_init__(self):
        iv = as_interval(self.interval)
        v = np.array(self.values, dtype=float)
        if v.ndim != 1 or v.size < 2:
            raise ContractError("a critic needs a 1-d array of at least 2 values")
        if not np.all(np.isfinite(v)):
            raise ContractError("critic values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "interval", iv)
        object.__setattr__(self, "values", v)

    @classmethod
    def zeros(cls, interval, m: int) -> "CriticFn":
        return cls(as_interval(interval), np.zeros(m))

    @property
    def grid(self) -> int:
        return self.values.size

    @property
    def nodes(self) -> np.ndarray:
        return self.interval.nodes(self.grid)

    def to_dict(self) -> dict:
        return {"interval": self.interval.to_list(), "grid": self.grid, "values": self.values.tolist()}


def gibbs(q: np.ndarray, h: float, eta: float) -> np.ndarray:
    """Normalized ``exp(q / eta)`` along the last axis (trapezoid rule).

    ``h`` is a scalar or, for stacked rows, one spacing per row.
    """
    z = np.exp((q - q.max(axis=-1, keepdims=True)) / eta)
    norm = h * (np.cumsum(z, axis=-1)[..., -1] - 0.5 * (z[..., 0] + z[..., -1]))
    return z / norm[..., None]


def logit_density(q: CriticFn, eta: float) -> GridDensity:
    if not eta > 0:
        raise DomainError(f"eta must be positive, got {eta}")
    return GridDensity(q.interval, gibbs(q.values, q.interval.spacing(q.grid), eta))


def inverse_cdf(values: np.ndarray, lo: float, h: float, u) -> np.ndarray:
    """Invert the CDF of piecewise-linear densities.

    ``values`` is either one density (shape ``(M,)``, any shape of ``u``) or
    a stack of densities (shape ``(R, M)`` with ``u`` of shape ``(R,)``); in
    the stacked case ``lo`` and ``h`` may also be given per row. Densities
    need not be normalized.
    """
    v = np.asarray(values, dtype=float)
    u = np.asarray(u, dtype=float)
    # G[k] is the mass left of node k in units of h / 2, so that inside cell
    # k with r = t - G[k] the offset solves p_k x + (p_{k+1} - p_k) x^2 / (2h) = r h / 2
    G = np.zeros(v.shape)
    np.cumsum(v[..., :-1] + v[..., 1:], axis=-1, out=G[..., 1:])
    if v.ndim == 1:
        t = u * G[-1]
        k = np.searchsorted(G[1:-1], t, side="right")
        start, pk, pk1 = G[k], v[k], v[k + 1]
    else:
        lo = np.asarray(lo, dtype=float)
        h = np.asarray(h, dtype=float)
        t = u * G[:, -1]
        k = (G[:, 1:-1] <= t[:, None]).sum(axis=1)
        idx = np.arange(0, v.size, v.shape[1]) + k
        flat = v.ravel()
        start, pk, pk1 = G.ravel()[idx], flat[idx], flat[idx + 1]
    r = t - start
    denom = pk + np.sqrt(np.maximum(pk * pk + (pk1 - pk) * r, 0.0))
    dx = np.minimum(r * h / np.maximum(denom, DENSITY_FLOOR), h)
    return np.minimum(lo + k * h + dx, lo + (v.shape[-1] - 1) * h)


def sample_logit(p: GridDensity, rng: np.random.Generator) -> float:
    """One draw from a grid density by exact inverse CDF."""
    total = trapezoid(p.values, p.spacing)
    if abs(total - 1.0) > DENSITY_NORM_TOL or np.any(p.values < 0):
        raise ContractError(f"density integrates to {total!r}, expected 1")
    return float(inverse_cdf(p.values, p.interval.lo, p.spacing, rng.random()))


def random_smooth_density(interval, m: int, rng: np.random.Generator, modes: int = 4, amplitude: float = 1.0) -> GridDensity:
    """A strictly positive, Lipschitz density: exp of a random cosine series."""
    iv = as_interval(interval)
    s = (iv.nodes(m) - iv.lo) / iv.width
    coef = rng.normal(scale=amplitude, size=modes) / np.arange(1, modes + 1)
    phase = rng.uniform(0, 2 * np.pi, size=modes)
    f = sum(c * np.cos(np.pi * (k + 1) * s + ph) for k, (c, ph) in enumerate(zip(coef, phase)))
    return GridDensity.normalized(iv, np.exp(f))


# -- best responses ---------------------------------------------------------


def logit_response(game: GameSpec, i: int, opponents: Sequence[Measure], eta: float, grid: int = 256, rng=None) -> GridDensity:
    """``L^i_eta(pi^{-i})`` as a grid density."""
    q = expected_utility_slice(game, i, grid, opponents, rng=rng)
    return logit_density(CriticFn(game.intervals[i], q), eta)


def logit_response_profile(game: GameSpec, pis: Sequence[Measure], eta: float, grid: int = 256, rng=None) -> list[GridDensity]:
    if len(pis) != game.n_players:
        raise DomainError(f"expected {game.n_players} measures, got {len(pis)}")
    if not eta > 0:
        raise DomainError(f"eta must be positive, got {eta}")
    return [logit_response(game, i, pis, eta, grid, rng) for i in range(game.n_players)]


class ResponseOperator:
    """``L_eta`` restricted to density profiles on fixed per-player grids.

    Payoff tensors over the product grid are evaluated once and cached when
    they hold at most ``TENSOR_CACHE_LIMIT`` entries; larger games fall back
    to :func:`expected_utility_slice` on each call.
    """

    def __init__(self, game: GameSpec, eta: float, grid: int = 256):
        if not eta > 0:
            raise DomainError(f"eta must be positive, got {eta}")
        if grid < 2:
            raise DomainError(f"grid must be >= 2, got {grid}")
        self.game = game
        self.eta = eta
        self.grid = grid
        self.nodes = [iv.nodes(grid) for iv in game.intervals]
        self.spacing = [iv.spacing(grid) for iv in game.intervals]
        self.trap = [trapezoid_weights(grid, h) for h in self.spacing]
        n = game.n_players
        self._tensors = None
        if grid**n <= TENSOR_CACHE_LIMIT:
            self._tensors = []
            for i in range(n):
                args = [self.nodes[j].reshape([grid if k == j else 1 for k in range(n)]) for j in range(n)]
                full = np.broadcast_to(np.asarray(game.utility(i, args), float), (grid,) * n)
                self._tensors.append(np.ascontiguousarray(np.moveaxis(full, i, 0)).reshape(grid, -1))

    def slices(self, values: Sequence[np.ndarray]) -> list[np.ndarray]:
        """Expected payoff slices against densities given as value arrays."""
        n = self.game.n_players
        if self._tensors is None:
            profile = [GridDensity(iv, v, check=False) for iv, v in zip(self.game.intervals, values)]
            return [expected_utility_slice(self.game, i, self.grid, profile) for i in range(n)]
        masses = [np.asarray(v) * w for v, w in zip(values, self.trap)]
        out = []
        for i in range(n):
            w = np.ones(1)
            for j in range(n):
                if j != i:
                    w = np.outer(w, masses[j]).ravel()
            out.append(self._tensors[i] @ w)
        return out

    def respond(self, values: Sequence[np.ndarray]) -> list[np.ndarray]:
        return [gibbs(q, h, self.eta) for q, h in zip(self.slices(values), self.spacing)]

    def __call__(self, profile: Sequence[GridDensity]) -> list[GridDensity]:
        vals = self.respond([self._values(p, i) for i, p in enumerate(profile)])
        return [GridDensity(iv, v) for iv, v in zip(self.game.intervals, vals)]

    def _values(self, p: GridDensity, i: int) -> np.ndarray:
        if p.interval != self.game.intervals[i] or p.grid != self.grid:
            raise DomainError(f"density of player {i} is not on the operator's grid")
        return p.values

    def uniform(self) -> list[np.ndarray]:
        return [np.full(self.grid, 1.0 / iv.width) for iv in self.game.intervals]


def _l1(a: np.ndarray, b: np.ndarray, h: float) -> float:
    return trapezoid(np.abs(a - b), h)


# -- fixed points -----------------------------------------------------------


@dataclass
class FixedPointResult:
    profile: list[GridDensity]
    converged: bool
    iterations: int
    residual: float

    def to_dict(self) -> dict:
        return {
            "converged": self.converged,
            "iterations": self.iterations,
            "residual": self.residual,
            "profile": [p.to_dict() for p in self.profile],
        }


def logit_fixed_point(
    game: GameSpec,
    eta: float,
    grid: int = 256,
    damping: float = 0.5,
    tol: float = 1e-10,
    max_iter: int = 10_000,
    init: Optional[Sequence[GridDensity]] = None,
    operator: Optional[ResponseOperator] = None,
) -> FixedPointResult:
    """Damped iteration ``pi <- (1 - damping) pi + damping L(pi)``.

    Stops once the largest per-player L1 change between successive iterates
    drops below ``tol``; ``iterations`` counts the updates that moved by at
    least ``tol``. Hitting ``max_iter`` returns ``converged=False``.
    """
    if not 0.0 < damping <= 1.0:
        raise DomainError(f"damping must lie in (0, 1], got {damping}")
    if not tol > 0:
        raise DomainError(f"tol must be positive, got {tol}")
    op = operator if operator is not None else ResponseOperator(game, eta, grid)
    if init is None:
        pi = op.uniform()
    else:
        pi = [op._values(p, i).copy() for i, p in enumerate(init)]
    converged = False
    iterations = max_iter
    for k in range(max_iter):
        target = op.respond(pi)
        new = [(1.0 - damping) * p + damping * t for p, t in zip(pi, target)]
        change = max(_l1(a, b, h) for a, b, h in zip(new, pi, op.spacing))
        pi = new
        if change < tol:
            converged, iterations = True, k
            break
    final = op.respond(pi)
    residual = max(_l1(a, b, h) for a, b, h in zip(pi, final, op.spacing))
    profile = [GridDensity.normalized(iv, p) for iv, p in zip(game.intervals, pi)]
    return FixedPointResult(profile, converged, iterations, residual)


@dataclass
class EquilibriumComponent:
    profile: list[GridDensity]
    residual: float
    converged: bool
    members: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "residual": self.residual,
            "converged": self.converged,
            "restarts": self.members,
            "profile": [p.to_dict() for p in self.profile],
        }


@dataclass
class EquilibriumSet:
    components: list[EquilibriumComponent]
    results: list[FixedPointResult]

    @property
    def all_converged(self) -> bool:
        return all(r.converged for r in self.results)


def solve_equilibria(
    game: GameSpec,
    eta: float,
    grid: int = 256,
    restarts: int = 8,
    seed: int = 0,
    tol: float = 1e-10,
    damping: float = 0.5,
    max_iter: int = 10_000,
    resolution: int = 256,
) -> EquilibriumSet:
    """Logit equilibria from several starting profiles, deduplicated.

    Restart 0 starts from the uniform profile, the rest from random smooth
    densities. Results closer than ``10 * tol`` in the product BL distance
    are reported as one component.
    """
    if restarts < 1:
        raise DomainError("restarts must be >= 1")
    op = ResponseOperator(game, eta, grid)
    streams = np.random.SeedSequence(seed).spawn(restarts)
    results = []
    for r in range(restarts):
        init = None
        if r > 0:
            rng = np.random.default_rng(streams[r])
            init = [random_smooth_density(iv, grid, rng) for iv in game.intervals]
        results.append(logit_fixed_point(game, eta, grid, damping, tol, max_iter, init, operator=op))
    components: list[EquilibriumComponent] = []
    for r, res in enumerate(results):
        for comp in components:
            if profile_distance(comp.profile, res.profile, resolution) < 10 * tol:
                comp.members.append(r)
                comp.converged = comp.converged and res.converged
                break
        else:
            components.append(EquilibriumComponent(res.profile, res.residual, res.converged, [r]))
    return EquilibriumSet(components, results)


def equilibrium_to_dict(comp: EquilibriumComponent, eta: float, grid: int) -> dict:
    d = comp.to_dict()
    d.update({"eta": eta, "grid": grid})
    return d
