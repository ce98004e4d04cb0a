"""Additively weighted Voronoi assignment of atoms to sites.

An atom ``z`` belongs to the site minimizing ``d_{p_j}(z) - w_j``. Atoms whose
best and runner-up scores are within ``tie_tol`` are split among the tied sites.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .measure import AtomicMeasure, GridInfo
from .metrics import DistanceFamily, cost_matrix

TIE_TOL = 1e-9
EXCESS_TIE_TOL = 1e-12
BALANCE_TOL = 1e-9


@dataclass(frozen=True)
class Site:
    position: np.ndarray
    demand: float
    index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "position", np.atleast_1d(np.asarray(self.position, dtype=float)))
        if not self.demand > 0:
            raise ValueError(f"site {self.index}: demand must be positive")


def make_sites(positions, demands) -> list[Site]:
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    demands = np.broadcast_to(np.asarray(demands, dtype=float), (len(positions),))
    sites = [Site(p, float(lam), i) for i, (p, lam) in enumerate(zip(positions, demands))]
    check_sites(sites)
    return sites


def check_sites(sites: Sequence[Site]) -> None:
    if len(sites) == 0:
        raise ValueError("need at least one site")
    pos = site_positions(sites)
    if len(np.unique(pos, axis=0)) != len(pos):
        raise ValueError("site positions must be pairwise distinct")


def site_positions(sites: Sequence[Site]) -> np.ndarray:
    return np.vstack([s.position for s in sites])


def site_demands(sites: Sequence[Site]) -> np.ndarray:
    return np.array([s.demand for s in sites], dtype=float)


def as_weights(w, n: int) -> np.ndarray:
    w = np.asarray(w, dtype=float).ravel()
    if w.shape != (n,):
        raise ValueError(f"weight vector has length {w.size}, expected {n}")
    if not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite")
    return w


def region_masses(fractions: np.ndarray, masses: np.ndarray) -> np.ndarray:
    """Per-site mass with pairwise summation over atoms."""
    contrib = np.ascontiguousarray((fractions * masses[:, None]).T)
    return contrib.sum(axis=1)


@dataclass
class Assignment:
    """Fractional map atoms -> sites.

    ``fractions[k, i]`` is the share of atom ``k`` sent to site ``i``; rows sum to 1.
    """

    fractions: np.ndarray
    region_mass: np.ndarray

    @classmethod
    def from_fractions(cls, fractions: np.ndarray, masses: np.ndarray) -> "Assignment":
        return cls(fractions, region_masses(fractions, masses))

    def shares(self, atom: int) -> list[tuple[int, float]]:
        row = self.fractions[atom]
        return [(int(i), float(row[i])) for i in np.flatnonzero(row > 0)]

    @property
    def tie_mask(self) -> np.ndarray:
        """Atoms shared between two or more sites."""
        return (self.fractions > 0).sum(axis=1) > 1

    @property
    def labels(self) -> np.ndarray:
        """Winning site per atom; a split atom reports its lowest site index."""
        return np.argmax(self.fractions > 0, axis=1)


def scores(sites: Sequence[Site], w, fam: DistanceFamily, m: AtomicMeasure) -> np.ndarray:
    """``d_{p_j}(z_k) - w_j`` for every atom and site."""
    w = as_weights(w, len(sites))
    return cost_matrix(fam, m.positions, site_positions(sites)) - w


def nearest_sets(score: np.ndarray, tie_tol: float = TIE_TOL) -> np.ndarray:
    """Boolean mask of the sites within ``tie_tol`` of each row's minimum."""
    best = score.min(axis=1, keepdims=True)
    return score <= best + tie_tol


def split_equally(near: np.ndarray) -> np.ndarray:
    near = near.astype(float)
    return near / near.sum(axis=1, keepdims=True)


def assign(sites: Sequence[Site], w, fam: DistanceFamily, m: AtomicMeasure, tie_tol: float = TIE_TOL) -> Assignment:
    if len(sites) == 0:
        raise ValueError("empty site list")
    if tie_tol < 0:
        raise ValueError("tie_tol must be nonnegative")
    pos = site_positions(sites)
    if pos.shape[1] != m.dimension:
        raise ValueError(f"sites have dimension {pos.shape[1]}, measure has {m.dimension}")
    frac = split_equally(nearest_sets(scores(sites, w, fam, m), tie_tol))
    return Assignment.from_fractions(frac, m.masses)


def raster_labels(sites: Sequence[Site], w, fam: DistanceFamily, grid: GridInfo,
                  tie_tol: float = TIE_TOL) -> tuple[np.ndarray, np.ndarray]:
    """Winner and tie flag at every cell center of ``grid``, empty cells included.

    Both arrays have the grid's shape with row 0 at the lowest ``y``; a tie
    reports its lowest site index.
    """
    w = as_weights(w, len(sites))
    score = cost_matrix(fam, grid.centers(), site_positions(sites)) - w
    near = nearest_sets(score, tie_tol)
    labels = np.argmax(near, axis=1).reshape(grid.shape)
    ties = (near.sum(axis=1) > 1).reshape(grid.shape)
    return labels, ties


@dataclass(frozen=True)
class Excess:
    """Region mass minus demand per site.

    ``block`` holds the sites attaining the maximum ``tau``; ``tau_prime`` is
    the largest excess outside it, or ``None`` when every site ties.
    """

    phi: np.ndarray
    tau: float
    tau_prime: float | None
    block: frozenset[int]

    @property
    def objective(self) -> float:
        return float(np.dot(self.phi, self.phi))


def excess_from_masses(region_mass, demands, total_mass: float | None = None) -> Excess:
    region_mass = np.asarray(region_mass, dtype=float)
    demands = np.asarray(demands, dtype=float)
    total = float(region_mass.sum()) if total_mass is None else total_mass
    if abs(demands.sum() - total) > BALANCE_TOL * max(1.0, abs(total)):
        raise ValueError(f"demands sum to {demands.sum()!r} but the measure has mass {total!r}")
    phi = region_mass - demands
    tau = float(phi.max())
    top = phi >= tau - EXCESS_TIE_TOL
    rest = phi[~top]
    return Excess(phi, tau, float(rest.max()) if rest.size else None, frozenset(np.flatnonzero(top).tolist()))


def excess(a: Assignment, sites: Sequence[Site]) -> Excess:
    return excess_from_masses(a.region_mass, site_demands(sites))


def objective(a: Assignment, sites: Sequence[Site]) -> float:
    """Sum of squared excesses; zero exactly when every demand is met."""
    return excess(a, sites).objective


def transport_cost(a: Assignment, sites: Sequence[Site], fam: DistanceFamily, m: AtomicMeasure) -> float:
    c = cost_matrix(fam, m.positions, site_positions(sites))
    per_site = region_masses(a.fractions * c, m.masses)
    return float(per_site.sum())
