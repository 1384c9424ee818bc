"""Exact bisimulation metrics on finite MDPs.

The Wasserstein-1 subproblems are solved exactly with a transportation simplex
(spanning-tree basis, MODI potentials). During the fixed-point iteration only
the ground metric changes between sweeps, so each (s, s', a) subproblem is
warm-started from its previous optimal basis, which stays primal feasible.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .mdp import FiniteMdp, value_iteration

_REDUCED_COST_TOL = 1e-13


@dataclass
class TransportPlan:
    plan: np.ndarray
    cost: float


@dataclass
class BisimMetric:
    dist: np.ndarray
    c: float
    iterations: int = 0
    deltas: list = field(default_factory=list)


class _Basis:
    """A basic feasible solution: flows plus the spanning-tree cell mask."""

    __slots__ = ("flow", "basic")

    def __init__(self, flow, basic):
        self.flow = flow
        self.basic = basic


def _northwest_corner(supply, demand):
    m, n = len(supply), len(demand)
    flow = np.zeros((m, n))
    basic = np.zeros((m, n), dtype=bool)
    s = supply.astype(np.float64).copy()
    d = demand.astype(np.float64).copy()
    i = j = 0
    while True:
        x = min(s[i], d[j])
        flow[i, j] = x
        basic[i, j] = True
        s[i] -= x
        d[j] -= x
        if i == m - 1 and j == n - 1:
            break
        if i == m - 1:
            j += 1
        elif j == n - 1 or s[i] <= d[j]:
            i += 1
        else:
            j += 1
    # float round-off leaves ~1e-17 in the last cell at most
    flow[flow < 0] = 0.0
    return _Basis(flow, basic)


def _tree_adjacency(basic):
    m, n = basic.shape
    adj = [[] for _ in range(m + n)]
    rows, cols = np.nonzero(basic)
    for i, j in zip(rows.tolist(), cols.tolist()):
        adj[i].append(m + j)
        adj[m + j].append(i)
    return adj


def _potentials(cost, adj, m, n):
    u = np.zeros(m)
    v = np.zeros(n)
    seen = [False] * (m + n)
    seen[0] = True
    queue = deque([0])
    while queue:
        node = queue.popleft()
        for other in adj[node]:
            if seen[other]:
                continue
            seen[other] = True
            if node < m:
                v[other - m] = cost[node, other - m] - u[node]
            else:
                u[other] = cost[other, node - m] - v[node - m]
            queue.append(other)
    return u, v


def _tree_path(adj, start, goal):
    parent = {start: None}
    queue = deque([start])
    while queue:
        node = queue.popleft()
        if node == goal:
            break
        for other in adj[node]:
            if other not in parent:
                parent[other] = node
                queue.append(other)
    path = [goal]
    while parent[path[-1]] is not None:
        path.append(parent[path[-1]])
    path.reverse()
    return path


def _transport_simplex(supply, demand, cost, basis=None, max_pivots=10_000):
    m, n = cost.shape
    if basis is None:
        basis = _northwest_corner(supply, demand)
    flow, basic = basis.flow, basis.basic
    bland = False
    for pivot in range(max_pivots):
        adj = _tree_adjacency(basic)
        u, v = _potentials(cost, adj, m, n)
        reduced = cost - u[:, None] - v[None, :]
        reduced[basic] = 0.0
        if bland:
            candidates = np.argwhere(reduced < -_REDUCED_COST_TOL)
            if len(candidates) == 0:
                break
            i0, j0 = candidates[0]
        else:
            flat = int(np.argmin(reduced))
            i0, j0 = divmod(flat, n)
            if reduced[i0, j0] >= -_REDUCED_COST_TOL:
                break
        # cycle: entering cell (+), then tree edges alternating -, +, -, ...
        path = _tree_path(adj, int(i0), m + int(j0))
        cells = []
        for a, b in zip(path[:-1], path[1:]):
            cells.append((a, b - m) if a < m else (b, a - m))
        minus = cells[0::2]
        plus = cells[1::2]
        theta, leave = min((flow[c], k) for k, c in enumerate(minus))
        if theta <= 0.0 and pivot > 50:
            # long runs of degenerate pivots: switch to Bland's rule to rule out cycling
            bland = True
        for c in minus:
            flow[c] -= theta
        for c in plus:
            flow[c] += theta
        flow[i0, j0] = theta
        leaving = minus[leave]
        flow[leaving] = 0.0
        basic[leaving] = False
        basic[i0, j0] = True
    else:
        raise RuntimeError("transportation simplex exceeded its pivot cap")
    return basis


def optimal_transport(a, b, cost, *, _basis=None) -> TransportPlan:
    """Exact minimum-cost coupling between nonnegative vectors of equal mass.

    Args:
        a: source masses, length m.
        b: target masses, length n.
        cost: (m, n) cost matrix.

    Raises:
        ValueError: on negative masses, shape mismatch, or total masses that
            differ by more than 1e-8.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    cost = np.asarray(cost, dtype=np.float64)
    if cost.shape != (len(a), len(b)):
        raise ValueError(f"cost shape {cost.shape} does not match ({len(a)}, {len(b)})")
    if np.any(a < 0) or np.any(b < 0):
        raise ValueError("masses must be nonnegative")
    if abs(a.sum() - b.sum()) > 1e-8:
        raise ValueError(f"infeasible marginals: masses {a.sum()} and {b.sum()} differ")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost must be finite")
    rows = np.flatnonzero(a > 0)
    cols = np.flatnonzero(b > 0)
    plan = np.zeros(cost.shape)
    if len(rows) == 0 or len(cols) == 0:
        return TransportPlan(plan, 0.0)
    sub_cost = cost[np.ix_(rows, cols)]
    basis = _transport_simplex(a[rows], b[cols], sub_cost, _basis)
    plan[np.ix_(rows, cols)] = basis.flow
    return TransportPlan(plan, float(np.sum(basis.flow * sub_cost)))


def wasserstein1(p, q, ground) -> TransportPlan:
    """Wasserstein-1 distance between distributions on a common finite space."""
    ground = np.asarray(ground, dtype=np.float64)
    if ground.ndim != 2 or ground.shape[0] != ground.shape[1]:
        raise ValueError("ground metric must be a square matrix")
    if np.any(ground < 0) or np.any(np.diag(ground) != 0):
        raise ValueError("ground metric must be nonnegative with zero diagonal")
    return optimal_transport(p, q, ground)


class _PairSolver:
    """W1 between two fixed distributions under a changing ground metric."""

    def __init__(self, p, q):
        self.rows = np.flatnonzero(p > 0)
        self.cols = np.flatnonzero(q > 0)
        self.p = p[self.rows]
        self.q = q[self.cols]
        self.identical = np.array_equal(p, q)
        self.basis = None

    def __call__(self, ground):
        if self.identical:
            return 0.0
        sub = ground[np.ix_(self.rows, self.cols)]
        self.basis = _transport_simplex(self.p, self.q, sub, self.basis)
        return float(np.sum(self.basis.flow * sub))


def bisim_fixed_point(mdp: FiniteMdp, c: float, tol: float = 1e-9,
                      max_iter: int = 100_000) -> BisimMetric:
    """Bisimulation metric as the fixed point of the reward/W1 operator.

    d(s, s') = max_a [(1 - c)|r(s,a) - r(s',a)| + c W1(P(.|s,a), P(.|s',a); d)],
    iterated from d = 0 until the sup-norm change is at most tol * (1 - c) / c.
    """
    if not 0.0 <= c < 1.0:
        raise ValueError(f"c must lie in [0, 1), got {c}")
    n, n_actions = mdp.n_states, mdp.n_actions
    reward_gap = np.abs(mdp.reward[:, None, :] - mdp.reward[None, :, :])  # (n, n, A)
    if c == 0.0:
        return BisimMetric(reward_gap.max(axis=2), 0.0, 1, [])
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    solvers = {
        (i, j, a): _PairSolver(mdp.transition[i, a], mdp.transition[j, a])
        for i, j in pairs for a in range(n_actions)
    }
    threshold = tol * (1.0 - c) / c
    dist = np.zeros((n, n))
    deltas = []
    for it in range(1, max_iter + 1):
        new = np.zeros((n, n))
        for i, j in pairs:
            best = 0.0
            for a in range(n_actions):
                val = (1.0 - c) * reward_gap[i, j, a] + c * solvers[i, j, a](dist)
                best = max(best, val)
            new[i, j] = new[j, i] = best
        delta = float(np.max(np.abs(new - dist))) if n > 1 else 0.0
        deltas.append(delta)
        dist = new
        if delta <= threshold:
            return BisimMetric(dist, c, it, deltas)
    raise RuntimeError(f"bisimulation iteration did not converge in {max_iter} sweeps")


@dataclass
class ValueBoundReport:
    """Outcome of checking value-difference bounds against a metric."""

    c: float
    gamma: float
    epsilon: float
    n_pairs: int
    n_triples: int
    pair_violations: list = field(default_factory=list)
    triple_violations: list = field(default_factory=list)
    max_pair_ratio: float = 0.0

    @property
    def n_violations(self) -> int:
        return len(self.pair_violations) + len(self.triple_violations)

    @property
    def ok(self) -> bool:
        return self.n_violations == 0


def verify_value_bounds(mdp: FiniteMdp, metric: BisimMetric, gamma: float, epsilon: float,
                        tol: float = 1e-8, values=None) -> ValueBoundReport:
    """Check (1-c)|V*(s)-V*(s')| <= d(s,s') and the prototype-neighbourhood bound.

    For every triple (s1, s2, sc) with d(s1, sc) < epsilon and d(s2, sc) < epsilon
    the optimal values must satisfy |V*(s1) - V*(s2)| < 2 epsilon / (1 - c).
    Both checks allow an additive ``tol`` for solver error.

    Raises:
        ValueError: if gamma > c, where neither bound is guaranteed.
    """
    c = metric.c
    if gamma > c:
        raise ValueError(f"bounds require gamma <= c (gamma={gamma}, c={c})")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if values is None:
        values = value_iteration(mdp.with_discount(gamma), tol=1e-12).values
    d = metric.dist
    n = mdp.n_states
    gap = np.abs(values[:, None] - values[None, :])
    report = ValueBoundReport(c, gamma, epsilon, n * (n - 1) // 2, 0)

    lhs = (1.0 - c) * gap
    for i in range(n):
        for j in range(i + 1, n):
            if lhs[i, j] > d[i, j] + tol:
                report.pair_violations.append((i, j, float(lhs[i, j]), float(d[i, j])))
            if d[i, j] > 0:
                report.max_pair_ratio = max(report.max_pair_ratio, lhs[i, j] / d[i, j])

    bound = 2.0 * epsilon / (1.0 - c)
    for sc in range(n):
        close = np.flatnonzero(d[:, sc] < epsilon)
        for a_idx, s1 in enumerate(close):
            for s2 in close[a_idx + 1:]:
                report.n_triples += 1
                if not gap[s1, s2] < bound + tol:
                    report.triple_violations.append(
                        (int(s1), int(s2), sc, float(gap[s1, s2]), bound))
    return report


def pseudometric_violations(dist, tol: float = 1e-8) -> dict:
    """Count entries failing symmetry, zero diagonal, nonnegativity or the triangle inequality.

    The triangle count is over ordered pairs (i, j) with d(i, j) > d(i, k) + d(k, j) + tol
    for some k.
    """
    d = np.asarray(dist, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ValueError("distance matrix must be square")
    # triangle: d[i, j] <= d[i, k] + d[k, j] for every k
    via = np.min(d[:, :, None] + d[None, :, :], axis=1) if len(d) else d
    return {
        "symmetry": int(np.sum(np.abs(d - d.T) > tol)),
        "diagonal": int(np.sum(np.abs(np.diag(d)) > tol)),
        "negative": int(np.sum(d < -tol)),
        "triangle": int(np.sum(d > via + tol)),
    }
