"""Distance families d_p(z), bisector differences and admissibility probes."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .measure import AtomicMeasure

EUCLIDEAN = "euclidean"
SQEUCLIDEAN = "sqeuclidean"
CONVEX_TRANSLATE = "convex-translate"
CONCAVE_OF_NORM = "concave-of-norm"


class DegeneratePairError(ValueError):
    """Raised when a bisector is requested between a site and itself."""


class DimensionMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class DistanceFamily:
    """A translate-invariant cost ``d_p(z)``.

    ``h`` (for ``convex-translate``) maps displacements ``z - p`` of shape
    ``(..., d)`` to costs of shape ``(...)``; ``l`` (for ``concave-of-norm``)
    maps Euclidean norms elementwise. Both callbacks must accept numpy arrays.
    """

    kind: str
    h: Callable[[np.ndarray], np.ndarray] | None = None
    l: Callable[[np.ndarray], np.ndarray] | None = None
    name: str = ""

    def __post_init__(self):
        if self.kind not in (EUCLIDEAN, SQEUCLIDEAN, CONVEX_TRANSLATE, CONCAVE_OF_NORM):
            raise ValueError(f"unknown distance kind {self.kind!r}")
        if self.kind == CONVEX_TRANSLATE and self.h is None:
            raise ValueError("convex-translate family needs a gauge h")
        if self.kind == CONCAVE_OF_NORM and self.l is None:
            raise ValueError("concave-of-norm family needs a profile l")
        if not self.name:
            object.__setattr__(self, "name", self.kind)

    def of_displacement(self, disp: np.ndarray) -> np.ndarray:
        disp = np.asarray(disp, dtype=float)
        if self.kind == CONVEX_TRANSLATE:
            out = np.asarray(self.h(disp), dtype=float)
        else:
            sq = (disp * disp).sum(axis=-1)
            if self.kind == SQEUCLIDEAN:
                out = sq
            elif self.kind == EUCLIDEAN:
                out = np.sqrt(sq)
            else:
                out = np.asarray(self.l(np.sqrt(sq)), dtype=float)
        if np.any(out < 0) or not np.all(np.isfinite(out)):
            raise ValueError(f"distance family {self.name!r} produced a negative or non-finite value")
        return out

    def __call__(self, p, z) -> float:
        return distance(self, p, z)


def euclidean() -> DistanceFamily:
    return DistanceFamily(EUCLIDEAN)


def sqeuclidean() -> DistanceFamily:
    return DistanceFamily(SQEUCLIDEAN)


def pnorm(p: float) -> DistanceFamily:
    """``d_p(z) = |z - p|_p`` for ``1 < p < inf``; its unit ball is strictly convex."""
    p = float(p)
    if not (1.0 < p < np.inf):
        raise ValueError("pnorm exponent must lie in (1, inf)")

    def h(disp):
        return (np.abs(disp) ** p).sum(axis=-1) ** (1.0 / p)

    return DistanceFamily(CONVEX_TRANSLATE, h=h, name=f"pnorm:{p:g}")


def concave_sqrt() -> DistanceFamily:
    return DistanceFamily(CONCAVE_OF_NORM, l=np.sqrt, name="concave-sqrt")


def convex_translate(h, name: str = "convex-translate") -> DistanceFamily:
    return DistanceFamily(CONVEX_TRANSLATE, h=h, name=name)


def concave_of_norm(l, name: str = "concave-of-norm") -> DistanceFamily:
    return DistanceFamily(CONCAVE_OF_NORM, l=l, name=name)


PRESETS = ("euclidean", "sqeuclidean", "pnorm:<p>", "concave-sqrt")


def parse_metric(selector: str) -> DistanceFamily:
    """Build a family from a CLI selector such as ``"pnorm:3"``."""
    sel = selector.strip().lower()
    if sel == "euclidean":
        return euclidean()
    if sel == "sqeuclidean":
        return sqeuclidean()
    if sel == "concave-sqrt":
        return concave_sqrt()
    if sel.startswith("pnorm:"):
        try:
            p = float(sel.split(":", 1)[1])
        except ValueError:
            raise ValueError(f"bad pnorm exponent in {selector!r}") from None
        return pnorm(p)
    raise ValueError(f"unknown metric {selector!r}; expected one of {', '.join(PRESETS)}")


def _as_point(x) -> np.ndarray:
    return np.atleast_1d(np.asarray(x, dtype=float))


def distance(fam: DistanceFamily, p, z) -> float:
    p, z = _as_point(p), _as_point(z)
    if p.shape != z.shape:
        raise DimensionMismatchError(f"site has dimension {p.shape[-1]}, point has {z.shape[-1]}")
    return float(fam.of_displacement(z - p))


def diff(fam: DistanceFamily, p, q, z) -> float:
    """``d_p(z) - d_q(z)``: negative inside ``R_0(p, q)``, zero on the unweighted bisector."""
    p, q = _as_point(p), _as_point(q)
    if np.array_equal(p, q):
        raise DegeneratePairError("degenerate pair: p and q coincide")
    return distance(fam, p, z) - distance(fam, q, z)


def cost_matrix(fam: DistanceFamily | Sequence[DistanceFamily], points, sites) -> np.ndarray:
    """Costs ``c[k, j] = d_{sites[j]}(points[k])``.

    ``fam`` may be a single family or one family per site.
    """
    points = np.asarray(points, dtype=float)
    sites = np.atleast_2d(np.asarray(sites, dtype=float))
    if points.shape[1] != sites.shape[1]:
        raise DimensionMismatchError(
            f"sites have dimension {sites.shape[1]}, points have {points.shape[1]}")
    fams = [fam] * len(sites) if isinstance(fam, DistanceFamily) else list(fam)
    if len(fams) != len(sites):
        raise ValueError("need exactly one distance family per site")
    out = np.empty((points.shape[0], sites.shape[0]))
    for j, (f, p) in enumerate(zip(fams, sites)):
        out[:, j] = f.of_displacement(points - p)
    return out


def _pair_diffs(fam, p, q, m: AtomicMeasure) -> np.ndarray:
    p, q = _as_point(p), _as_point(q)
    if np.array_equal(p, q):
        raise DegeneratePairError("degenerate pair: p and q coincide")
    c = cost_matrix(fam, m.positions, np.vstack([p, q]))
    return c[:, 0] - c[:, 1]


@dataclass(frozen=True)
class GammaRange:
    """Offsets bracketing every atom: ``R_gamma`` misses all atoms for
    ``gamma <= lo`` and contains all of them for ``gamma >= hi``."""

    lo: float
    hi: float


def _pad(lo: float, hi: float) -> float:
    return 4.0 * np.finfo(float).eps * max(1.0, abs(lo), abs(hi))


def gamma_range(fam: DistanceFamily, p, q, m: AtomicMeasure) -> GammaRange:
    d = _pair_diffs(fam, p, q, m)
    lo, hi = float(d.min()), float(d.max())
    pad = _pad(lo, hi)
    return GammaRange(lo - pad, hi + pad)


def max_offsets(costs: np.ndarray) -> np.ndarray:
    """``out[p, q]`` = padded upper bracket ``M_pq`` of ``c[:, p] - c[:, q]`` over atoms."""
    n = costs.shape[1]
    out = np.full((n, n), -np.inf)
    for p in range(n):
        d = costs[:, [p]] - costs
        hi = d.max(axis=0)
        lo = d.min(axis=0)
        for q in range(n):
            if q != p:
                out[p, q] = hi[q] + _pad(lo[q], hi[q])
    return out


@dataclass(frozen=True)
class AdmissibilityReport:
    monotone: bool
    max_jump: float
    gammas: np.ndarray
    masses: np.ndarray


def probe_admissibility(fam: DistanceFamily, p, q, m: AtomicMeasure, steps: int = 100) -> AdmissibilityReport:
    """Sweep ``gamma`` across the bracket and record ``mu(C n R_gamma(p, q))``.

    The largest single-step jump is the discrete stand-in for continuity; it
    cannot fall below the heaviest atom.
    """
    if steps < 2:
        raise ValueError("steps must be >= 2")
    d = _pair_diffs(fam, p, q, m)
    lo, hi = float(d.min()), float(d.max())
    pad = _pad(lo, hi)
    gammas = np.linspace(lo - pad, hi + pad, steps)
    order = np.argsort(d, kind="stable")
    cum = np.concatenate([[0.0], np.cumsum(m.masses[order])])
    # strict inequality d < gamma
    counts = np.searchsorted(d[order], gammas, side="left")
    masses = cum[counts]
    masses[-1] = m.total_mass if counts[-1] == len(d) else masses[-1]
    jumps = np.diff(masses)
    return AdmissibilityReport(
        monotone=bool(np.all(jumps >= 0)),
        max_jump=float(jumps.max()),
        gammas=gammas,
        masses=masses,
    )
