"""Finite measures on compact intervals.

Two representations are used throughout the package:

* :class:`AtomicMeasure` -- weighted Dirac atoms (the actor's mixed strategy).
* :class:`GridDensity` -- a piecewise-linear density sampled at uniform nodes
  (logit responses, equilibria, states of the mean-field dynamics).

Distances between measures use the bounded Lipschitz (BL) norm, estimated by
a linear program over piecewise-linear test functions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
from scipy import optimize, sparse

from .errors import ContractError, DomainError

MERGE_TOL = 1e-12
DENSITY_FLOOR = 1e-300
PROB_TOL = 1e-12
SAMPLE_TOL = 1e-9
DENSITY_NORM_TOL = 1e-9


@dataclass(frozen=True)
class Interval:
    """Compact action interval ``[lo, hi]``."""

    lo: float
    hi: float

    def __post_init__(self):
        lo, hi = float(self.lo), float(self.hi)
        if not (math.isfinite(lo) and math.isfinite(hi)):
            raise DomainError(f"interval bounds must be finite, got [{lo}, {hi}]")
        if not lo < hi:
            raise DomainError(f"interval needs lo < hi, got [{lo}, {hi}]")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def width(self) -> float:
        return self.hi - self.lo

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all((x >= self.lo) & (x <= self.hi)))

    def nodes(self, m: int) -> np.ndarray:
        if m < 2:
            raise DomainError(f"a grid needs at least 2 nodes, got {m}")
        return np.linspace(self.lo, self.hi, m)

    def spacing(self, m: int) -> float:
        return self.width / (m - 1)

    def to_list(self) -> list:
        return [self.lo, self.hi]


def as_interval(iv) -> Interval:
    if isinstance(iv, Interval):
        return iv
    lo, hi = iv
    return Interval(lo, hi)


def trapezoid_weights(m: int, h: float) -> np.ndarray:
    w = np.full(m, h)
    w[0] = w[-1] = 0.5 * h
    return w


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class AtomicMeasure:
    """Weighted atoms on an interval.

    Positions are sorted on construction and atoms closer than ``MERGE_TOL``
    are merged by adding their weights. Zero-weight atoms are dropped.
    """

    interval: Interval
    positions: np.ndarray
    weights: np.ndarray
    probability: bool = True

    def __post_init__(self):
        iv = as_interval(self.interval)
        x = np.atleast_1d(np.asarray(self.positions, dtype=float)).copy()
        w = np.atleast_1d(np.asarray(self.weights, dtype=float)).copy()
        if x.shape != w.shape or x.ndim != 1:
            raise ContractError("positions and weights must be 1-d arrays of equal length")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(w))):
            raise ContractError("atoms must be finite")
        if np.any(w < 0):
            raise ContractError("atom weights must be nonnegative")
        if x.size and (x.min() < iv.lo or x.max() > iv.hi):
            raise DomainError(f"atom positions must lie in [{iv.lo}, {iv.hi}]")
        keep = w > 0
        x, w = x[keep], w[keep]
        order = np.argsort(x, kind="stable")
        x, w = x[order], w[order]
        if x.size > 1:
            starts = np.concatenate(([True], np.diff(x) > MERGE_TOL))
            if not starts.all():
                group = np.cumsum(starts) - 1
                w = np.bincount(group, weights=w)
                x = x[starts]
        if self.probability:
            if x.size == 0:
                raise ContractError("a probability measure needs at least one atom")
            total = math.fsum(w)
            if abs(total - 1.0) > PROB_TOL:
                raise ContractError(f"weights sum to {total!r}, expected 1")
        object.__setattr__(self, "interval", iv)
        object.__setattr__(self, "positions", _readonly(x))
        object.__setattr__(self, "weights", _readonly(w))

    @classmethod
    def from_atoms(cls, interval, atoms, probability: bool = True) -> "AtomicMeasure":
        atoms = list(atoms)
        x = [a for a, _ in atoms]
        w = [b for _, b in atoms]
        return cls(as_interval(interval), np.asarray(x, float), np.asarray(w, float), probability)

    @classmethod
    def normalized(cls, interval, positions, weights) -> "AtomicMeasure":
        """Build a probability measure, rescaling ``weights`` to unit mass."""
        w = np.asarray(weights, dtype=float)
        total = w.sum()
        if not total > 0:
            raise ContractError("total weight must be positive")
        w = w / total
        # one extra pass absorbs the rounding of the first division
        w = w / math.fsum(w)
        return cls(as_interval(interval), positions, w, True)

    @property
    def atoms(self) -> list[tuple[float, float]]:
        return list(zip(self.positions.tolist(), self.weights.tolist()))

    @property
    def mass(self) -> float:
        return math.fsum(self.weights)

    def __len__(self) -> int:
        return self.positions.size

    def cdf(self, x) -> np.ndarray:
        cum = np.cumsum(self.weights)
        idx = np.searchsorted(self.positions, np.asarray(x, float), side="right")
        return np.where(idx > 0, cum[np.maximum(idx - 1, 0)], 0.0)

    def to_dict(self) -> dict:
        return {"interval": self.interval.to_list(), "atoms": [[x, w] for x, w in self.atoms]}


@dataclass(frozen=True, eq=False)
class GridDensity:
    """Density values at ``M`` uniform nodes, linear in between."""

    interval: Interval
    values: np.ndarray
    check: bool = field(default=True, repr=False)

    def __post_init__(self):
        iv = as_interval(self.interval)
        v = np.array(self.values, dtype=float)
        if v.ndim != 1 or v.size < 2:
            raise ContractError("a grid density needs a 1-d array of at least 2 values")
        if not np.all(np.isfinite(v)):
            raise ContractError("density values must be finite")
        if self.check:
            if np.any(v < 0):
                raise ContractError("density values must be nonnegative")
            total = trapezoid(v, iv.spacing(v.size))
            if abs(total - 1.0) > DENSITY_NORM_TOL:
                raise ContractError(f"density integrates to {total!r}, expected 1")
        object.__setattr__(self, "interval", iv)
        object.__setattr__(self, "values", _readonly(v))

    @classmethod
    def normalized(cls, interval, values) -> "GridDensity":
        iv = as_interval(interval)
        v = np.asarray(values, dtype=float)
        total = trapezoid(v, iv.spacing(v.size))
        if not total > 0:
            raise ContractError("cannot normalize a density with zero integral")
        return cls(iv, v / total)

    @classmethod
    def uniform(cls, interval, m: int) -> "GridDensity":
        iv = as_interval(interval)
        return cls(iv, np.full(m, 1.0 / iv.width))

    @classmethod
    def from_function(cls, interval, fn, m: int) -> "GridDensity":
        iv = as_interval(interval)
        return cls.normalized(iv, fn(iv.nodes(m)))

    @property
    def grid(self) -> int:
        return self.values.size

    @property
    def nodes(self) -> np.ndarray:
        return self.interval.nodes(self.grid)

    @property
    def spacing(self) -> float:
        return self.interval.spacing(self.grid)

    def quadrature_weights(self) -> np.ndarray:
        """Trapezoid masses attached to each node (sum to one)."""
        return self.values * trapezoid_weights(self.grid, self.spacing)

    def __call__(self, x) -> np.ndarray:
        return np.interp(x, self.nodes, self.values)

    def cdf(self, x) -> np.ndarray:
        """Exact CDF of the piecewise-linear density."""
        x = np.clip(np.asarray(x, dtype=float), self.interval.lo, self.interval.hi)
        h = self.spacing
        v = self.values
        cells = np.concatenate(([0.0], np.cumsum(0.5 * h * (v[:-1] + v[1:]))))
        k = np.clip(((x - self.interval.lo) / h).astype(int), 0, self.grid - 2)
        t = x - (self.interval.lo + k * h)
        slope = (v[k + 1] - v[k]) / h
        return cells[k] + v[k] * t + 0.5 * slope * t * t

    def same_grid(self, other: "GridDensity") -> bool:
        return self.interval == other.interval and self.grid == other.grid

    def to_dict(self) -> dict:
        return {"interval": self.interval.to_list(), "grid": self.grid, "values": self.values.tolist()}


Measure = Union[AtomicMeasure, GridDensity]


def trapezoid(values: np.ndarray, h: float) -> float:
    v = np.asarray(values, dtype=float)
    return float(h * (v.sum() - 0.5 * (v[0] + v[-1])))


def measure_from_dict(d: dict) -> Measure:
    iv = Interval(*d["interval"])
    if "atoms" in d:
        return AtomicMeasure.from_atoms(iv, [tuple(a) for a in d["atoms"]])
    values = d["values"]
    if len(values) != d["grid"]:
        raise ContractError(f"grid={d['grid']} but {len(values)} values given")
    return GridDensity(iv, np.asarray(values, dtype=float))


# -- actor operations ------------------------------------------------------


def dirac(x: float, iv) -> AtomicMeasure:
    iv = as_interval(iv)
    if not iv.lo <= x <= iv.hi:
        raise DomainError(f"{x} is outside [{iv.lo}, {iv.hi}]")
    return AtomicMeasure(iv, np.array([float(x)]), np.array([1.0]))


def mix_update(pi: AtomicMeasure, b: float, alpha: float) -> AtomicMeasure:
    """Return ``pi + alpha * (delta_b - pi)``."""
    if not 0.0 <= alpha <= 1.0:
        raise DomainError(f"alpha must lie in [0, 1], got {alpha}")
    if not pi.interval.lo <= b <= pi.interval.hi:
        raise DomainError(f"{b} is outside [{pi.interval.lo}, {pi.interval.hi}]")
    if alpha == 0.0:
        return pi
    x = np.append(pi.positions, float(b))
    w = np.append(pi.weights * (1.0 - alpha), alpha)
    return AtomicMeasure(pi.interval, x, w, pi.probability)


def compact(pi: AtomicMeasure, bins: int = 512) -> AtomicMeasure:
    """Pool atoms into ``bins`` uniform cells at their weighted mean position."""
    if bins < 2:
        raise DomainError(f"bins must be >= 2, got {bins}")
    x, w = pi.positions, pi.weights
    cell = cell_index(x, pi.interval, bins)
    mass = np.bincount(cell, weights=w, minlength=bins)
    moment = np.bincount(cell, weights=w * x, minlength=bins)
    occupied = mass > 0
    pos = np.clip(moment[occupied] / mass[occupied], pi.interval.lo, pi.interval.hi)
    return AtomicMeasure(pi.interval, pos, mass[occupied], pi.probability)


def cell_index(x, iv: Interval, bins: int) -> np.ndarray:
    k = np.floor((np.asarray(x, float) - iv.lo) / iv.width * bins).astype(np.int64)
    return np.clip(k, 0, bins - 1)


def sample(pi: AtomicMeasure, rng: np.random.Generator) -> float:
    """Draw one atom position with probability equal to its weight."""
    if abs(pi.mass - 1.0) > SAMPLE_TOL:
        raise ContractError(f"cannot sample from a measure of mass {pi.mass!r}")
    return sample_atoms(pi.positions, pi.weights, rng.random())


def sample_atoms(positions: np.ndarray, weights: np.ndarray, u: float) -> float:
    cum = np.cumsum(weights)
    k = int(np.searchsorted(cum, u * cum[-1], side="right"))
    return float(positions[min(k, positions.size - 1)])


# -- densities ------------------------------------------------------------


def entropy(p: GridDensity) -> float:
    v = np.maximum(p.values, DENSITY_FLOOR)
    return -trapezoid(v * np.log(v), p.spacing)


def l1_distance(p: GridDensity, q: GridDensity) -> float:
    if not p.same_grid(q):
        raise DomainError("l1_distance needs densities on the same grid")
    return trapezoid(np.abs(p.values - q.values), p.spacing)


# -- bounded Lipschitz distance -------------------------------------------


def _hat_masses(mu: Measure, iv: Interval, cells: int) -> np.ndarray:
    """Integrals of each piecewise-linear hat basis function against ``mu``.

    For a test function g that is linear between the ``cells + 1`` nodes,
    ``sum(g_k * masses_k)`` equals the integral of g against ``mu`` exactly.
    """
    H = iv.width / cells
    out = np.zeros(cells + 1)
    if isinstance(mu, AtomicMeasure):
        s = (mu.positions - iv.lo) / H
        k = np.clip(np.floor(s).astype(np.int64), 0, cells - 1)
        frac = np.clip(s - k, 0.0, 1.0)
        out += np.bincount(k, weights=mu.weights * (1.0 - frac), minlength=cells + 1)
        out += np.bincount(k + 1, weights=mu.weights * frac, minlength=cells + 1)
        return out
    # Both the density and the hats are linear on the common refinement, so
    # Simpson's rule is exact on every piece.
    bps = np.union1d(mu.nodes, iv.nodes(cells + 1))
    a, b = bps[:-1], bps[1:]
    keep = b - a > 1e-15 * iv.width
    a, b = a[keep], b[keep]
    m = 0.5 * (a + b)
    pa, pm, pb = mu(a), mu(m), mu(b)
    k = np.clip(np.floor((m - iv.lo) / H).astype(np.int64), 0, cells - 1)
    xl = iv.lo + k * H

    def right(x):
        return np.clip((x - xl) / H, 0.0, 1.0)

    ra, rm, rb = right(a), right(m), right(b)
    span = (b - a) / 6.0
    to_right = span * (pa * ra + 4 * pm * rm + pb * rb)
    total = span * (pa + 4 * pm + pb)
    out += np.bincount(k, weights=total - to_right, minlength=cells + 1)
    out += np.bincount(k + 1, weights=to_right, minlength=cells + 1)
    return out


def _bl_lp(d: np.ndarray, H: float) -> float:
    n = d.size
    # variables: g_0..g_{n-1}, s (sup bound), L (Lipschitz bound)
    eye = sparse.identity(n, format="csr")
    diff = sparse.diags([-np.ones(n - 1), np.ones(n - 1)], [0, 1], shape=(n - 1, n), format="csr")
    col_s = sparse.csr_matrix(np.ones((n, 1)))
    col_l = sparse.csr_matrix(np.full((n - 1, 1), H))
    zn = sparse.csr_matrix((n, 1))
    zd = sparse.csr_matrix((n - 1, 1))
    A = sparse.vstack(
        [
            sparse.hstack([eye, -col_s, zn]),
            sparse.hstack([-eye, -col_s, zn]),
            sparse.hstack([diff, zd, -col_l]),
            sparse.hstack([-diff, zd, -col_l]),
            sparse.csr_matrix(np.concatenate([np.zeros(n), [1.0, 1.0]])[None, :]),
        ],
        format="csr",
    )
    b = np.concatenate([np.zeros(4 * n - 2), [1.0]])
    c = np.concatenate([-d, [0.0, 0.0]])
    bounds = [(None, None)] * n + [(0.0, 1.0), (0.0, 1.0)]
    res = optimize.linprog(
        c, A_ub=A, b_ub=b, bounds=bounds, method="highs",
        options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10},
    )
    if res.status != 0:
        raise RuntimeError(f"BL linear program failed: {res.message}")
    return max(0.0, -float(res.fun))


def bl_distance(mu: Measure, nu: Measure, resolution: int = 512) -> float:
    """Bounded Lipschitz distance ``||mu - nu||_BL``.

    The supremum runs over test functions g with ``sup|g| + Lip(g) <= 1``
    (the additive coupling). g is restricted to functions linear between
    ``resolution + 1`` uniform nodes, so refining by doubling ``resolution``
    can only increase the estimate.
    """
    if mu.interval != nu.interval:
        raise DomainError("bl_distance needs measures on the same interval")
    if resolution < 16:
        raise DomainError(f"resolution must be >= 16, got {resolution}")
    iv = mu.interval
    d = _hat_masses(mu, iv, resolution) - _hat_masses(nu, iv, resolution)
    nz = np.flatnonzero(d)
    if nz.size == 0:
        return 0.0
    # the test-function set is symmetric; fixing the sign makes the result
    # independent of argument order
    if d[nz[0]] < 0:
        d = -d
    return _bl_lp(d, iv.width / resolution)


def profile_distance(mus: Sequence[Measure], nus: Sequence[Measure], resolution: int = 512) -> float:
    if len(mus) != len(nus):
        raise DomainError(f"profiles have different lengths ({len(mus)} vs {len(nus)})")
    return max(bl_distance(m, n, resolution) for m, n in zip(mus, nus))
