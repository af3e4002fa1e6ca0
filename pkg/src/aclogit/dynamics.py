"""Mean-field logit best-response dynamics and their Lyapunov function.

The flow is ``d pi / dt = L_eta(pi) - pi`` over profiles of grid densities.
In a potential game it coincides with the flow of the identical-interest game
whose common payoff is the potential, so everything here runs on that
surrogate (:func:`aclogit.game.identical_interest`). The Lyapunov function is

    V(pi) = -[phi(pi) + eta * sum_i entropy(pi^i)]

and along the flow ``dV/dt = -eta * sum_i [KL(l^i || p^i) + KL(p^i || l^i)]``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, DomainError
from .game import GameSpec, expected_potential, identical_interest
from .logit import ResponseOperator
from .measure import DENSITY_FLOOR, GridDensity, entropy, trapezoid, trapezoid_weights

log = logging.getLogger(__name__)

MAX_STEP = 0.1
MONOTONE_SLACK = 1e-7


@dataclass(frozen=True)
class DynamicsConfig:
    eta: float
    h: float = 0.05
    horizon: float = 30.0
    grid: int = 256
    checkpoint_every: int = 1
    record_profiles: bool = False

    def __post_init__(self):
        if not self.eta > 0:
            raise ConfigurationError(f"eta must be positive, got {self.eta}")
        if not 0 < self.h <= MAX_STEP:
            raise ConfigurationError(f"step h must lie in (0, {MAX_STEP}], got {self.h}")
        if not self.horizon > 0:
            raise ConfigurationError(f"horizon must be positive, got {self.horizon}")
        if self.grid < 2:
            raise ConfigurationError(f"grid must be >= 2, got {self.grid}")
        if self.checkpoint_every < 1:
            raise ConfigurationError("checkpoint_every must be >= 1")

    @property
    def steps(self) -> int:
        return int(round(self.horizon / self.h))


def kl(p: GridDensity, q: GridDensity) -> float:
    """``KL(p || q)`` by the trapezoid rule, both densities floored."""
    if not p.same_grid(q):
        raise DomainError("kl needs densities on the same grid")
    return _kl(p.values, q.values, p.spacing)


def _kl(p: np.ndarray, q: np.ndarray, h: float) -> float:
    pf = np.maximum(p, DENSITY_FLOOR)
    qf = np.maximum(q, DENSITY_FLOOR)
    return trapezoid(pf * (np.log(pf) - np.log(qf)), h)


def _entropy(v: np.ndarray, h: float) -> float:
    vf = np.maximum(v, DENSITY_FLOOR)
    return -trapezoid(vf * np.log(vf), h)


class LogitFlow:
    """Vector field, Lyapunov function and KL rate on a fixed grid."""

    def __init__(self, game: GameSpec, eta: float, grid: int = 256):
        self.game = identical_interest(game) if game.potential is not None else game
        self.eta = eta
        self.grid = grid
        self.op = ResponseOperator(self.game, eta, grid)
        self.spacing = self.op.spacing
        self._phi = None
        n = game.n_players
        if self.game.potential is not None and grid**n <= (1 << 22):
            args = [self.op.nodes[j].reshape([grid if k == j else 1 for k in range(n)]) for j in range(n)]
            self._phi = np.broadcast_to(np.asarray(self.game.potential(args), float), (grid,) * n)

    def values(self, profile: Sequence[GridDensity]) -> list[np.ndarray]:
        if len(profile) != self.game.n_players:
            raise DomainError(f"expected {self.game.n_players} densities, got {len(profile)}")
        return [self.op._values(p, i) for i, p in enumerate(profile)]

    def densities(self, values: Sequence[np.ndarray]) -> list[GridDensity]:
        return [GridDensity(iv, v) for iv, v in zip(self.game.intervals, values)]

    def response(self, values):
        return self.op.respond(values)

    def step(self, values, h: float, response=None) -> list[np.ndarray]:
        l = self.response(values) if response is None else response
        out = []
        for p, t, dx in zip(values, l, self.spacing):
            new = (1.0 - h) * p + h * t
            out.append(new / trapezoid(new, dx))
        return out

    def potential(self, values) -> float:
        if self.game.potential is None:
            raise ConfigurationError(f"game {self.game.name!r} has no potential function")
        if self._phi is None:
            return expected_potential(self.game, self.densities(values))
        t = self._phi
        for v, w in zip(values, self.op.trap):
            t = np.tensordot(v * w, t, axes=(0, 0))
        return float(t)

    def lyapunov(self, values, eta: Optional[float] = None) -> float:
        eta = self.eta if eta is None else eta
        ent = sum(_entropy(v, h) for v, h in zip(values, self.spacing)) if eta else 0.0
        return -(self.potential(values) + eta * ent)

    def rate(self, values, response=None) -> float:
        l = self.response(values) if response is None else response
        total = sum(_kl(a, b, h) + _kl(b, a, h) for a, b, h in zip(l, values, self.spacing))
        return -self.eta * total

    def residual(self, values, response=None) -> float:
        l = self.response(values) if response is None else response
        return max(trapezoid(np.abs(a - b), h) for a, b, h in zip(values, l, self.spacing))


def _flow(game, eta, profile) -> LogitFlow:
    if not profile:
        raise DomainError("empty profile")
    return LogitFlow(game, eta, profile[0].grid)


def br_step(profile: Sequence[GridDensity], game: GameSpec, eta: float, h: float) -> list[GridDensity]:
    """One explicit Euler step ``pi + h (L(pi) - pi)``, renormalized."""
    if not 0 < h <= MAX_STEP:
        raise DomainError(f"step h must lie in (0, {MAX_STEP}], got {h}")
    flow = _flow(game, eta, profile)
    return flow.densities(flow.step(flow.values(profile), h))


def lyapunov(profile: Sequence[GridDensity], game: GameSpec, eta: float) -> float:
    if eta < 0:
        raise DomainError(f"eta must be >= 0, got {eta}")
    if game.potential is None:
        raise ConfigurationError(f"game {game.name!r} has no potential function")
    # eta = 0 is allowed here only; the flow itself needs eta > 0
    flow = _flow(game, eta if eta > 0 else 1.0, profile)
    return flow.lyapunov(flow.values(profile), eta)


def lyapunov_rate(profile: Sequence[GridDensity], game: GameSpec, eta: float) -> float:
    if game.potential is None:
        raise ConfigurationError(f"game {game.name!r} has no potential function")
    flow = _flow(game, eta, profile)
    return flow.rate(flow.values(profile))


@dataclass
class Trajectory:
    times: list[float] = field(default_factory=list)
    lyapunov: list[Optional[float]] = field(default_factory=list)
    rate: list[float] = field(default_factory=list)
    residual: list[float] = field(default_factory=list)
    profiles: list[list[GridDensity]] = field(default_factory=list)
    final: list[GridDensity] = field(default_factory=list)
    violations: int = 0

    @property
    def final_residual(self) -> float:
        return self.residual[-1]

    @property
    def monotone(self) -> bool:
        return self.violations == 0


def integrate(
    profile0: Sequence[GridDensity],
    game: GameSpec,
    config: DynamicsConfig,
    sink: Optional[Callable[[dict], None]] = None,
) -> Trajectory:
    """Euler-integrate the logit dynamics from ``profile0``.

    At every checkpoint records time, V, dV/dt and the residual
    ``max_i l1(pi^i, l^i)``; ``sink`` receives each record as a dict.
    A violation is an increase of V between checkpoints larger than
    ``MONOTONE_SLACK * (1 + |V|)`` per elapsed step.
    """
    flow = LogitFlow(game, config.eta, config.grid)
    has_v = flow.game.potential is not None
    values = flow.values(profile0)
    traj = Trajectory()
    n_steps = config.steps
    last_v = None
    last_step = 0
    for k in range(n_steps + 1):
        checkpoint = k % config.checkpoint_every == 0 or k == n_steps
        l = flow.response(values)
        if checkpoint:
            v = flow.lyapunov(values) if has_v else None
            rec = {
                "t": k * config.h,
                "V": v,
                "rate": flow.rate(values, l),
                "residual": flow.residual(values, l),
            }
            if v is not None and last_v is not None:
                slack = MONOTONE_SLACK * (1.0 + abs(last_v)) * (k - last_step)
                if v - last_v > slack:
                    traj.violations += 1
                    log.debug("V increased by %.3e at t=%.3f", v - last_v, rec["t"])
            last_v, last_step = v, k
            traj.times.append(rec["t"])
            traj.lyapunov.append(v)
            traj.rate.append(rec["rate"])
            traj.residual.append(rec["residual"])
            if config.record_profiles:
                dens = flow.densities(values)
                traj.profiles.append(dens)
                rec["profiles"] = [d.to_dict() for d in dens]
            if sink is not None:
                sink(rec)
        if k < n_steps:
            values = flow.step(values, config.h, l)
    traj.final = flow.densities(values)
    return traj


def delta_d_bounds(game: GameSpec, eta: float, i: int) -> tuple[float, float]:
    """Lower and upper density bounds every logit response of player i obeys."""
    width = game.intervals[i].width
    return math.exp(-2 * game.u_bound / eta) / width, math.exp(2 * game.u_bound / eta) / width
