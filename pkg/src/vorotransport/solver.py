"""Fitting additive weights so every weighted Voronoi region captures its demand.

The descent lowers the weights of a block ``T`` of most-overfull sites by a
common ``delta``. ``Loss(delta)``, the mass those sites hand to the rest, is a
staircase on atoms; the atom sitting on the step is split fractionally so the
transferred mass hits the target exactly. With an exact transfer ``L`` strictly
between 0 and ``tau_T - tau'`` the squared-excess objective drops by at least
``2 L (tau_T - tau' - L)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linprog
from scipy.sparse.csgraph import connected_components

from .diagram import (
    BALANCE_TOL,
    TIE_TOL,
    Assignment,
    Site,
    as_weights,
    assign,
    check_sites,
    nearest_sets,
    region_masses,
    site_demands,
    site_positions,
    split_equally,
)
from .measure import AtomicMeasure
from .metrics import DistanceFamily, cost_matrix, max_offsets

MAX_GAP = "max-gap"
ARGMAX = "argmax"


class TargetOverflowError(ValueError):
    """The requested transfer exceeds what the block can give away."""


@dataclass(frozen=True)
class SolverConfig:
    """Knobs for :func:`fit_weights`.

    ``None`` fields resolve against the problem: ``phi_tol`` to
    ``(1e-6 * total_mass)**2``, ``max_outer_iters`` to
    ``10 n ceil(log2(total_mass / sqrt(phi_tol)))``, ``D_bound`` to the largest
    atomic bracket ``M_pq``. ``step_divisor=None`` uses ``2n``.
    """

    phi_tol: float | None = None
    max_outer_iters: int | None = None
    delta_root_tol: float = 1e-12
    D_bound: float | None = None
    tie_tol: float = TIE_TOL
    step_divisor: float | None = 2.0
    block_rule: str = MAX_GAP
    polish_iters: int | None = None

    def __post_init__(self):
        if self.phi_tol is not None and not self.phi_tol > 0:
            raise ValueError("phi_tol must be positive")
        if self.delta_root_tol <= 0:
            raise ValueError("delta_root_tol must be positive")
        if self.D_bound is not None and not self.D_bound > 0:
            raise ValueError("D_bound must be positive")
        if self.max_outer_iters is not None and self.max_outer_iters < 0:
            raise ValueError("max_outer_iters must be nonnegative")
        if self.step_divisor is not None and not self.step_divisor > 1:
            raise ValueError("step_divisor must exceed 1")
        if self.block_rule not in (MAX_GAP, ARGMAX):
            raise ValueError(f"unknown block rule {self.block_rule!r}")


def default_phi_tol(total_mass: float) -> float:
    return (1e-6 * total_mass) ** 2


def default_max_iters(n: int, total_mass: float, phi_tol: float) -> int:
    return 10 * n * max(1, math.ceil(math.log2(total_mass / math.sqrt(phi_tol))))


def step_target(tau_top: float, tau_prime: float, n: int, divisor: float | None = None) -> float:
    """Mass to move off the block: ``(tau_T - tau') / divisor`` (``2n`` if unset)."""
    return (tau_top - tau_prime) / (2 * n if divisor is None else divisor)


@dataclass
class SolveResult:
    weights: np.ndarray
    assignment: Assignment
    phi_final: float
    outer_iters: int
    converged: bool
    phi_trace: list[float]
    D_bound: float
    exact: bool = False
    deltas: list[float] = field(default_factory=list)
    block_sizes: list[int] = field(default_factory=list)

    def mass_error(self, sites: Sequence[Site]) -> np.ndarray:
        return self.assignment.region_mass - site_demands(sites)


class _Problem:
    """Cost matrix and demands shared by every iterate."""

    def __init__(self, sites, fam, m, tie_tol):
        check_sites(sites)
        pos = site_positions(sites)
        if pos.shape[1] != m.dimension:
            raise ValueError(f"sites have dimension {pos.shape[1]}, measure has {m.dimension}")
        self.n = len(sites)
        self.demands = site_demands(sites)
        self.masses = m.masses
        self.total = m.total_mass
        if abs(math.fsum(self.demands) - self.total) > BALANCE_TOL * max(1.0, self.total):
            raise ValueError(
                f"demands sum to {math.fsum(self.demands)!r} but the measure has mass {self.total!r}")
        self.costs = cost_matrix(fam, m.positions, pos)
        # site-major copy: reductions over sites become elementwise minima
        self.costs_t = np.ascontiguousarray(self.costs.T)
        self.tie_tol = tie_tol
        self._D = None

    @property
    def D(self) -> float:
        if self._D is None:
            self._D = d_bound_from_costs(self.costs)
        return self._D

    def fresh_state(self, w):
        frac = split_equally(nearest_sets(self.costs - w, self.tie_tol))
        return frac, region_masses(frac, self.masses)

    def phi(self, rm):
        return rm - self.demands


def d_bound_from_costs(costs: np.ndarray) -> float:
    if costs.shape[1] < 2:
        return 1.0
    return float(max(np.max(max_offsets(costs)), np.finfo(float).tiny))


def d_bound(sites: Sequence[Site], fam: DistanceFamily, m: AtomicMeasure) -> float:
    """``D = max M_pq`` over ordered site pairs, from atom-derived brackets."""
    return d_bound_from_costs(cost_matrix(fam, m.positions, site_positions(sites)))


def _choose_block(phi: np.ndarray, rule: str):
    """Return (block indices, smallest excess inside, largest excess outside)."""
    if rule == ARGMAX:
        tau = phi.max()
        top = phi >= tau - 1e-12
        return np.flatnonzero(top), float(tau), float(phi[~top].max())
    order = np.argsort(-phi, kind="stable")
    ps = phi[order]
    k = int(np.argmax(ps[:-1] - ps[1:])) + 1
    return np.sort(order[:k]), float(ps[k - 1]), float(ps[k])


def _smallest_until(gaps, weight, target):
    """Indices of the smallest gaps (sorted) whose cumulative weight reaches ``target``."""
    size = len(gaps)
    k = min(size, 64)
    while True:
        if k < size:
            part = np.argpartition(gaps, k - 1)[:k]
        else:
            part = np.arange(size)
        part = part[np.argsort(gaps[part], kind="stable")]
        cum = np.cumsum(weight[part])
        if cum[-1] >= target or k == size:
            return part, cum
        k = min(size, 4 * k)


class _State:
    """Dense tie shares plus bookkeeping that keeps each step proportional to the block's atoms."""

    def __init__(self, prob: _Problem, frac: np.ndarray, rm: np.ndarray | None = None):
        self.frac = frac
        self.rm = region_masses(frac, prob.masses) if rm is None else rm
        self.lead = np.argmax(frac, axis=1)
        self.split = (frac > 0).sum(axis=1) > 1

    def refresh(self, atoms):
        rows = self.frac[atoms]
        self.lead[atoms] = np.argmax(rows, axis=1)
        self.split[atoms] = (rows > 0).sum(axis=1) > 1


def _transfer(prob: _Problem, w, state: _State, block, target):
    """Lower ``w[block]`` so exactly ``target`` mass leaves the block; in place.

    Returns the weight decrease ``delta``.
    """
    frac, rm = state.frac, state.rm
    in_block = np.zeros(prob.n, dtype=bool)
    in_block[block] = True
    rest = np.flatnonzero(~in_block)
    cand = in_block[state.lead]
    shared = np.flatnonzero(state.split)
    if shared.size:
        cand[shared] |= frac[np.ix_(shared, block)].any(axis=1)
    rows = np.flatnonzero(cand)
    sub = np.take(prob.costs_t, rows, axis=1)
    sub -= w[:, None]
    gaps = sub[rest].min(axis=0) - sub[block].min(axis=0)
    owned = prob.masses[rows].copy()
    sp = state.split[rows]
    if sp.any():
        owned[sp] *= frac[np.ix_(rows[sp], block)].sum(axis=1)
    target = min(target, float(owned.sum()))
    part, cum = _smallest_until(gaps, owned, target)
    j = min(int(np.searchsorted(cum, target)), len(part) - 1)
    before = cum[j - 1] if j > 0 else 0.0
    move = np.ones(j + 1)
    move[j] = min(max((target - before) / owned[part[j]], 0.0), 1.0)
    delta = max(float(gaps[part[j]]), 0.0)

    picked = part[: j + 1]
    atoms = rows[picked]
    block_share = frac[np.ix_(atoms, block)] * move[:, None]
    dest = split_equally(nearest_sets(sub[np.ix_(rest, picked)].T, prob.tie_tol))
    gained = dest * block_share.sum(axis=1)[:, None]
    frac[np.ix_(atoms, block)] -= block_share
    frac[np.ix_(atoms, rest)] += gained
    state.refresh(atoms)
    mass = prob.masses[atoms][:, None]
    rm[block] -= (block_share * mass).sum(axis=0)
    rm[rest] += (gained * mass).sum(axis=0)
    w[block] -= delta
    return delta


def _resolve(cfg: SolverConfig, prob: _Problem) -> SolverConfig:
    phi_tol = cfg.phi_tol if cfg.phi_tol is not None else default_phi_tol(prob.total)
    iters = cfg.max_outer_iters
    if iters is None:
        iters = default_max_iters(prob.n, prob.total, phi_tol)
    polish = cfg.polish_iters if cfg.polish_iters is not None else 20 * prob.n
    D = cfg.D_bound if cfg.D_bound is not None else prob.D
    return replace(cfg, phi_tol=phi_tol, max_outer_iters=iters, polish_iters=polish, D_bound=D)


def _block_ids(T: Iterable[int], n: int) -> np.ndarray:
    block = np.unique(np.fromiter((int(t) for t in T), dtype=int))
    if block.size == 0 or block.size == n:
        raise ValueError("block T must be a nonempty proper subset of the sites")
    if block.min() < 0 or block.max() >= n:
        raise ValueError("block T refers to a missing site")
    return block


def loss(sites: Sequence[Site], w, T: Iterable[int], delta: float, fam: DistanceFamily,
         m: AtomicMeasure, tie_tol: float = TIE_TOL) -> float:
    """Mass the block ``T`` hands to the other sites when its weights drop by ``delta``."""
    n = len(sites)
    w = as_weights(w, n)
    block = _block_ids(T, n)
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    shifted = w.copy()
    shifted[block] -= delta
    before = assign(sites, w, fam, m, tie_tol).region_mass[block]
    after = assign(sites, shifted, fam, m, tie_tol).region_mass[block]
    return float(np.sum(before - after))


def solve_delta(sites: Sequence[Site], w, T: Iterable[int], target: float, fam: DistanceFamily,
                m: AtomicMeasure, tol: float = 1e-12, D_bound: float | None = None,
                tie_tol: float = TIE_TOL) -> float:
    """Smallest ``delta`` (to within ``tol``) with ``Loss(delta) >= target``, by bisection on ``[0, 2D]``."""
    if not target > 0:
        raise ValueError("target must be positive")
    D = d_bound(sites, fam, m) if D_bound is None else D_bound
    lo, hi = 0.0, 2.0 * D * (1 + 1e-12) + tie_tol
    top = loss(sites, w, T, hi, fam, m, tie_tol)
    if top < target:
        raise TargetOverflowError(f"target overflow: {target!r} exceeds the block's mass {top!r}")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if loss(sites, w, T, mid, fam, m, tie_tol) >= target:
            hi = mid
        else:
            lo = mid
    return hi


@dataclass
class Step:
    weights: np.ndarray
    assignment: Assignment
    delta: float
    target: float
    block: tuple[int, ...]
    phi_before: float
    phi_after: float


def descend_step(sites: Sequence[Site], w, fam: DistanceFamily, m: AtomicMeasure,
                 assignment: Assignment | None = None, config: SolverConfig | None = None) -> Step:
    """One block descent step from ``w`` (and its tie shares, if given)."""
    cfg = config or SolverConfig()
    prob = _Problem(sites, fam, m, cfg.tie_tol)
    w = as_weights(w, prob.n).copy()
    if assignment is None:
        state = _State(prob, *prob.fresh_state(w))
    else:
        state = _State(prob, assignment.fractions.copy(), assignment.region_mass.copy())
    phi = prob.phi(state.rm)
    before = float(phi @ phi)
    if before == 0 or prob.n < 2:
        raise ValueError("descend_step needs a positive objective (the partition already meets demand)")
    block, top, second = _choose_block(phi, cfg.block_rule)
    target = step_target(top, second, prob.n, cfg.step_divisor)
    delta = _transfer(prob, w, state, block, target)
    rm = region_masses(state.frac, prob.masses)
    phi = prob.phi(rm)
    return Step(w, Assignment(state.frac, rm), delta, target, tuple(block.tolist()), before, float(phi @ phi))


def _exact_fill(prob: _Problem, w, frac):
    """Re-split the tie atoms so region masses match demands; ``None`` if impossible."""
    near = nearest_sets(prob.costs - w, prob.tie_tol)
    tie = near.sum(axis=1) > 1
    if not tie.any():
        return None
    fixed = region_masses(np.where(tie[:, None], 0.0, near.astype(float)), prob.masses)
    resid = prob.demands - fixed
    atoms, sites_ = np.nonzero(near & tie[:, None])
    tie_atoms = np.flatnonzero(tie)
    row_of = {a: r for r, a in enumerate(tie_atoms)}
    nv, nt, n = len(atoms), len(tie_atoms), prob.n
    A = np.zeros((nt + n, nv + 2 * n))
    A[[row_of[a] for a in atoms], np.arange(nv)] = 1.0
    A[nt + sites_, np.arange(nv)] = 1.0
    A[nt + np.arange(n), nv + np.arange(n)] = 1.0
    A[nt + np.arange(n), nv + n + np.arange(n)] = -1.0
    b = np.concatenate([prob.masses[tie_atoms], resid])
    c = np.concatenate([np.zeros(nv), np.ones(2 * n)])
    res = linprog(c, A_eq=A, b_eq=b, bounds=(0, None), method="highs")
    if res.status != 0 or res.fun > 1e-12 * prob.total:
        return None
    out = np.where(tie[:, None], 0.0, near.astype(float))
    out[atoms, sites_] = np.maximum(res.x[:nv], 0.0) / prob.masses[atoms]
    out[tie_atoms] /= out[tie_atoms].sum(axis=1, keepdims=True)
    return out


def _slack_bounds(prob: _Problem, frac) -> np.ndarray:
    """``A[i, j]``: largest ``w_j - w_i`` keeping every atom with a share at ``i`` weighted-nearest to ``i``."""
    n = prob.n
    A = np.full((n, n), np.inf)
    for i in range(n):
        rows = np.flatnonzero(frac[:, i] > 0)
        if rows.size:
            sub = np.take(prob.costs_t, rows, axis=1)
            A[i] = (sub - sub[i]).min(axis=1)
    np.fill_diagonal(A, np.inf)
    return A


def _center_weights(prob: _Problem, w, frac, tie_tol: float, newton_iters: int = 60) -> np.ndarray:
    """Analytic center of the weights that leave the assignment ``frac`` optimal.

    On atoms a whole box of weight vectors can meet the demands without any
    tie. Sites linked by shared atoms move together; the blocks they form are
    shifted to the maximizer of the summed log slacks, which is unique up to a
    common constant.
    """
    n = prob.n
    A = _slack_bounds(prob, frac)
    link = (A + A.T) <= 2 * tie_tol
    np.fill_diagonal(link, False)
    ncomp, comp = connected_components(link, directed=False)
    if ncomp < 2 or not np.all(np.isfinite(A[~np.eye(n, dtype=bool)])):
        return w
    # b[i, j] = A[i, j] - (w_j - w_i); keep the tightest per block pair
    b = A - (w[None, :] - w[:, None])
    B = np.full((ncomp, ncomp), np.inf)
    for i in range(n):
        for j in range(n):
            if comp[i] != comp[j]:
                B[comp[i], comp[j]] = min(B[comp[i], comp[j]], b[i, j])
    ks, ls = np.nonzero(np.isfinite(B))
    bounds = B[ks, ls]
    # constraints u_l - u_k <= bound with u_0 = 0; rows act on u_1..u_{c-1}
    G = np.zeros((ks.size, ncomp))
    G[np.arange(ks.size), ls] += 1.0
    G[np.arange(ks.size), ks] -= 1.0
    G = G[:, 1:]
    # Chebyshev start: maximize the common slack t
    lp = linprog(np.r_[np.zeros(ncomp - 1), -1.0], A_ub=np.c_[G, np.ones(ks.size)], b_ub=bounds,
                 bounds=[(None, None)] * (ncomp - 1) + [(None, np.abs(bounds).max() + 1.0)], method="highs")
    if lp.status != 0 or not lp.x[-1] > 0:
        return w
    u = lp.x[:-1]
    for _ in range(newton_iters):
        slack = bounds - G @ u
        grad = G.T @ (1.0 / slack)
        hess = (G / slack[:, None] ** 2).T @ G
        step = -np.linalg.solve(hess, grad)
        if -(grad @ step) < 1e-28:
            break
        t = 1.0
        ds = G @ step
        while np.any(slack - t * ds <= 0):
            t *= 0.5
        fval = -np.log(slack).sum()
        while -np.log(bounds - G @ (u + t * step)).sum() > fval + 0.25 * t * (grad @ step) and t > 1e-12:
            t *= 0.5
        u = u + t * step
    return w + np.r_[0.0, u][comp]


def _renormalize(w, rm, D):
    """Shift so the largest weight is ``D``, lift empty sites below 0 to 0, then set the minimum to 0."""
    w = w + (D - w.max())
    w[(w < 0) & (rm <= 0)] = 0.0
    return w - w.min()


def rebalance_ties(sites: Sequence[Site], w, fam: DistanceFamily, m: AtomicMeasure,
                   tie_tol: float = TIE_TOL) -> Assignment:
    """Assignment under ``w`` with tie shares chosen to meet demands where ties allow."""
    prob = _Problem(sites, fam, m, tie_tol)
    w = as_weights(w, prob.n)
    frac, rm = prob.fresh_state(w)
    filled = _exact_fill(prob, w, frac)
    if filled is None:
        return Assignment(frac, rm)
    return Assignment.from_fractions(filled, prob.masses)


def fit_weights(sites: Sequence[Site], fam: DistanceFamily, m: AtomicMeasure,
                config: SolverConfig | None = None, w0=None) -> SolveResult:
    """Descend from ``w0`` (zeros by default) until the squared excess is at most ``phi_tol``.

    Tie shares are then re-split to meet demands exactly when possible. A
    converged result is moved to the analytic center of the weights that keep
    its assignment, so flat stretches of the atomic staircase do not make the
    answer depend on the start. Weights end in ``[0, D]`` with minimum 0.
    Running out of iterations returns ``converged=False``.
    """
    cfg = config or SolverConfig()
    prob = _Problem(sites, fam, m, cfg.tie_tol)
    cfg = _resolve(cfg, prob)
    n, D = prob.n, cfg.D_bound
    w = np.zeros(n) if w0 is None else as_weights(w0, n).astype(float).copy()
    state = _State(prob, *prob.fresh_state(w))
    phi = prob.phi(state.rm)
    trace = [float(phi @ phi)]
    deltas, blocks = [], []
    exact_tol = (1e-12 * prob.total) ** 2

    def run(budget, stop_at):
        nonlocal phi
        for _ in range(budget):
            if trace[-1] <= stop_at:
                return
            block, top, second = _choose_block(phi, cfg.block_rule)
            target = step_target(top, second, n, cfg.step_divisor)
            deltas.append(_transfer(prob, w, state, block, target))
            blocks.append(len(block))
            w[:] += D - w.max()
            phi = prob.phi(state.rm)
            value = float(phi @ phi)
            if value >= trace[-1]:
                # rounding floor: the step moved less than the summation error
                return
            trace.append(value)

    exact = False
    if n > 1:
        run(cfg.max_outer_iters, cfg.phi_tol)
        if trace[-1] <= cfg.phi_tol:
            for _ in range(max(1, cfg.polish_iters // n + 1)):
                filled = _exact_fill(prob, w, state.frac)
                if filled is not None:
                    rm = region_masses(filled, prob.masses)
                    if np.sum((rm - prob.demands) ** 2) < trace[-1]:
                        state = _State(prob, filled, rm)
                        exact = True
                        break
                before = len(trace)
                run(n, exact_tol)
                if len(trace) == before:
                    break
    rm = region_masses(state.frac, prob.masses)
    phi = prob.phi(rm)
    final = float(phi @ phi)
    if final < trace[-1]:
        trace.append(final)
    converged = final <= cfg.phi_tol
    if n > 1 and converged:
        w = _center_weights(prob, w, state.frac, cfg.tie_tol)
    w = _renormalize(w, rm, D) if n > 1 else np.zeros(1)
    return SolveResult(
        weights=w,
        assignment=Assignment(state.frac, rm),
        phi_final=final,
        outer_iters=len(deltas),
        converged=converged,
        phi_trace=trace,
        D_bound=D,
        exact=final <= exact_tol,
        deltas=deltas,
        block_sizes=blocks,
    )


@dataclass
class UniquenessReport:
    max_normalized_weight_spread: float
    results: list[SolveResult]
    failed: list[int]
    starts: np.ndarray


def check_uniqueness(sites: Sequence[Site], fam: DistanceFamily, m: AtomicMeasure,
                     config: SolverConfig | None = None, n_starts: int = 4, seed: int = 0,
                     require_connected: bool = True) -> UniquenessReport:
    """Fit from ``n_starts`` random weight vectors in ``[0, D]^n`` and compare the normalized results."""
    if n_starts < 2:
        raise ValueError("n_starts must be at least 2")
    if require_connected and not m.connected:
        raise ValueError("weight uniqueness needs a domain flagged as pathwise connected")
    cfg = config or SolverConfig()
    D = cfg.D_bound if cfg.D_bound is not None else d_bound(sites, fam, m)
    rng = np.random.default_rng(seed)
    starts = rng.uniform(0.0, D, size=(n_starts, len(sites)))
    results, failed = [], []
    for i, w0 in enumerate(starts):
        res = fit_weights(sites, fam, m, replace(cfg, D_bound=D), w0=w0)
        results.append(res)
        if not res.converged:
            failed.append(i)
    good = [r.weights - r.weights.min() for i, r in enumerate(results) if i not in failed]
    spread = 0.0
    for i in range(len(good)):
        for j in range(i + 1, len(good)):
            spread = max(spread, float(np.max(np.abs(good[i] - good[j]))))
    return UniquenessReport(spread, results, failed, starts)
