"""Exact atom-to-site transportation LP, used to certify fitted partitions.

The solver is a transportation (network) simplex on costs rounded to
integers after scaling by ``1e9``, so potentials and reduced costs are exact
and optimality is certified by ``c_ij - u_i - v_j >= 0`` on every arc. Flows
stay real-valued; the reported cost uses the unscaled costs.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .diagram import BALANCE_TOL, TIE_TOL, Assignment, Site, nearest_sets, site_demands, site_positions, transport_cost
from .measure import AtomicMeasure
from .metrics import DistanceFamily, cost_matrix

COST_SCALE = 1e9
MAX_ATOMS = 20_000
MAX_SITES = 64
SLACK_TOL = 1e-7


class InfeasibleBalanceError(ValueError):
    """Supplies and demands do not balance."""


@dataclass
class TransportPlan:
    """Optimal flows ``amount[k]`` from ``atom[k]`` to ``site[k]``.

    ``atom_potential`` and ``site_potential`` are the LP duals in cost units.
    """

    atom: np.ndarray
    site: np.ndarray
    amount: np.ndarray
    total_cost: float
    atom_potential: np.ndarray
    site_potential: np.ndarray
    pivots: int = 0

    @property
    def flows(self) -> list[tuple[int, int, float]]:
        return [(int(a), int(s), float(x)) for a, s, x in zip(self.atom, self.site, self.amount) if x > 0]

    def dense(self, n_atoms: int, n_sites: int) -> np.ndarray:
        out = np.zeros((n_atoms, n_sites))
        np.add.at(out, (self.atom, self.site), self.amount)
        return out


def _northwest_corner(supply, demand):
    """Initial basic feasible solution: ``N + n - 1`` cells forming a spanning tree."""
    N, n = len(supply), len(demand)
    cells = []
    z = i = 0
    ra, rb = supply[0], demand[0]
    while True:
        if z == N - 1 and i == n - 1:
            cells.append((z, i, max(ra, 0.0)))
            return cells
        if i == n - 1 or (z < N - 1 and ra <= rb):
            cells.append((z, i, max(ra, 0.0)))
            rb -= ra
            z += 1
            ra = supply[z]
        else:
            cells.append((z, i, max(rb, 0.0)))
            ra -= rb
            i += 1
            rb = demand[i]


class _Tree:
    """Spanning-tree basis over nodes ``0..N-1`` (atoms) and ``N..N+n-1`` (sites)."""

    def __init__(self, N, n, cells):
        self.N, self.n = N, n
        self.adj = [set() for _ in range(N + n)]
        self.flow = {}
        for z, i, x in cells:
            self.add(z, i, x)

    def add(self, z, i, x):
        self.adj[z].add(self.N + i)
        self.adj[self.N + i].add(z)
        self.flow[(z, i)] = x

    def remove(self, z, i):
        self.adj[z].discard(self.N + i)
        self.adj[self.N + i].discard(z)
        del self.flow[(z, i)]

    def potentials(self, cint):
        """Integer duals with ``u_z + v_i = c_zi`` on tree arcs, rooted at site 0."""
        N = self.N
        u = np.zeros(N, dtype=np.int64)
        v = np.zeros(self.n, dtype=np.int64)
        parent = np.full(N + self.n, -1)
        depth = np.zeros(N + self.n, dtype=np.int64)
        root = N
        seen = np.zeros(N + self.n, dtype=bool)
        seen[root] = True
        queue = deque([root])
        while queue:
            a = queue.popleft()
            for b in self.adj[a]:
                if seen[b]:
                    continue
                seen[b] = True
                parent[b] = a
                depth[b] = depth[a] + 1
                if b < N:
                    u[b] = cint[b, a - N] - v[a - N]
                else:
                    v[b - N] = cint[a, b - N] - u[a]
                queue.append(b)
        if not seen.all():
            raise RuntimeError("basis is not a spanning tree")
        return u, v, parent, depth

    def cycle(self, z, i, parent, depth):
        """Tree path from atom ``z`` to site node ``N + i`` as a list of arcs ``(atom, site)``."""
        a, b = z, self.N + i
        left, right = [a], [b]
        while depth[a] > depth[b]:
            a = parent[a]
            left.append(a)
        while depth[b] > depth[a]:
            b = parent[b]
            right.append(b)
        while a != b:
            a = parent[a]
            b = parent[b]
            left.append(a)
            right.append(b)
        path = left + right[-2::-1]
        arcs = []
        for x, y in zip(path, path[1:]):
            arcs.append((x, y - self.N) if x < self.N else (y, x - self.N))
        return arcs


def transportation_simplex(costs: np.ndarray, supply: np.ndarray, demand: np.ndarray,
                           scale: float = COST_SCALE, max_pivots: int | None = None) -> TransportPlan:
    """Min-cost plan for a balanced transportation problem."""
    costs = np.asarray(costs, dtype=float)
    supply = np.asarray(supply, dtype=float)
    demand = np.asarray(demand, dtype=float)
    N, n = costs.shape
    if math.fabs(math.fsum(supply) - math.fsum(demand)) > BALANCE_TOL * max(1.0, math.fsum(supply)):
        raise InfeasibleBalanceError("infeasible balance: supplies and demands differ")
    if np.any(supply < 0) or np.any(demand < 0):
        raise InfeasibleBalanceError("supplies and demands must be nonnegative")
    demand = demand * (math.fsum(supply) / math.fsum(demand))
    cint = np.rint(costs * scale).astype(np.int64)
    # northwest corner over atoms grouped by their cheapest site starts near the optimum
    ranked = np.sort(costs, axis=1)
    regret = ranked[:, 1] - ranked[:, 0] if n > 1 else np.zeros(N)
    order = np.lexsort((-regret, np.argmin(costs, axis=1)))
    cells = [(int(order[z]), i, x) for z, i, x in _northwest_corner(supply[order], demand)]
    tree = _Tree(N, n, cells)
    max_pivots = max_pivots or 50 * (N + n) * n + 1000
    degenerate_run = 0
    pivots = 0
    while True:
        u, v, parent, depth = tree.potentials(cint)
        reduced = cint - u[:, None] - v[None, :]
        if degenerate_run > N + n:
            # Bland's rule once degenerate pivots pile up: first improving arc
            neg = np.flatnonzero(reduced.ravel() < 0)
            if neg.size == 0:
                break
            z, i = divmod(int(neg[0]), n)
        else:
            k = int(np.argmin(reduced))
            z, i = divmod(k, n)
            if reduced[z, i] >= 0:
                break
        pivots += 1
        if pivots > max_pivots:
            raise RuntimeError("transportation simplex exceeded its pivot budget")
        arcs = tree.cycle(z, i, parent, depth)
        minus = arcs[0::2]
        plus = arcs[1::2]
        theta = min(tree.flow[a] for a in minus)
        leaving = min(a for a in minus if tree.flow[a] == theta)
        for a in minus:
            tree.flow[a] -= theta
        for a in plus:
            tree.flow[a] += theta
        tree.remove(*leaving)
        tree.add(z, i, theta)
        degenerate_run = degenerate_run + 1 if theta == 0 else 0

    keys = sorted(tree.flow)
    atom = np.array([k[0] for k in keys], dtype=int)
    site = np.array([k[1] for k in keys], dtype=int)
    amount = np.array([max(tree.flow[k], 0.0) for k in keys])
    total = math.fsum(amount * costs[atom, site])
    return TransportPlan(atom, site, amount, total, u / scale, v / scale, pivots)


def solve_lp(sites: Sequence[Site], fam: DistanceFamily, m: AtomicMeasure,
             max_atoms: int = MAX_ATOMS, max_sites: int = MAX_SITES) -> TransportPlan:
    """Exact min-cost transport of the atoms onto the sites' demands."""
    if len(m) > max_atoms or len(sites) > max_sites:
        raise ValueError(f"oracle capped at {max_atoms} atoms x {max_sites} sites")
    demands = site_demands(sites)
    if abs(math.fsum(demands) - m.total_mass) > BALANCE_TOL * max(1.0, m.total_mass):
        raise InfeasibleBalanceError(
            f"infeasible balance: demands sum to {math.fsum(demands)!r}, measure has {m.total_mass!r}")
    costs = cost_matrix(fam, m.positions, site_positions(sites))
    return transportation_simplex(costs, m.masses, demands)


@dataclass
class Certificate:
    voronoi_cost: float
    lp_cost: float
    relative_gap: float
    duals_match: bool
    mismatched_atoms: list[int] = field(default_factory=list)
    dual_violations: list[int] = field(default_factory=list)
    max_slack_violation: float = 0.0

    def to_dict(self) -> dict:
        return {
            "voronoi_cost": self.voronoi_cost,
            "lp_cost": self.lp_cost,
            "relative_gap": self.relative_gap,
            "duals_match": self.duals_match,
            "mismatched_atoms": list(self.mismatched_atoms),
            "dual_violations": list(self.dual_violations),
            "max_slack_violation": self.max_slack_violation,
        }


def partition_mismatches(plan: TransportPlan, sites: Sequence[Site], w, fam: DistanceFamily,
                         m: AtomicMeasure, tie_tol: float = TIE_TOL) -> list[int]:
    """Atoms off every weighted bisector whose LP flow leaves their Voronoi site."""
    costs = cost_matrix(fam, m.positions, site_positions(sites))
    near = nearest_sets(costs - np.asarray(w, dtype=float), tie_tol)
    clear = near.sum(axis=1) == 1
    owner = np.argmax(near, axis=1)
    flow = plan.dense(len(m), len(sites))
    stray = flow.copy()
    stray[np.arange(len(m)), owner] = 0.0
    bad = clear & (stray.sum(axis=1) > 0)
    return np.flatnonzero(bad).tolist()


def certify(sites: Sequence[Site], fam: DistanceFamily, m: AtomicMeasure, result,
            slack_tol: float = SLACK_TOL, tie_tol: float = TIE_TOL, plan: TransportPlan | None = None) -> Certificate:
    """Compare a fitted partition's cost with the LP optimum and check complementary slackness.

    ``result`` needs ``weights``, ``assignment`` and ``converged`` attributes
    (a :class:`~vorotransport.solver.SolveResult` qualifies).
    """
    if not result.converged:
        raise ValueError("certification needs a converged result")
    assignment: Assignment = result.assignment
    w = np.asarray(result.weights, dtype=float)
    plan = plan or solve_lp(sites, fam, m)
    v_cost = transport_cost(assignment, sites, fam, m)
    gap = (v_cost - plan.total_cost) / max(plan.total_cost, np.finfo(float).eps)
    costs = cost_matrix(fam, m.positions, site_positions(sites))
    score = costs - w
    best = score.min(axis=1)
    excess = score[plan.atom, plan.site] - best[plan.atom]
    used = plan.amount > 0
    viol = used & (excess > slack_tol)
    return Certificate(
        voronoi_cost=v_cost,
        lp_cost=plan.total_cost,
        relative_gap=float(gap),
        duals_match=not bool(viol.any()),
        mismatched_atoms=partition_mismatches(plan, sites, w, fam, m, tie_tol),
        dual_violations=sorted(set(plan.atom[viol].tolist())),
        max_slack_violation=float(excess[used].max(initial=0.0)),
    )
