"""Steady-state admissibility, QP matching flows, and CRP decomposition."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .core import FlowMatrix, MCMSInstance, MatchingTopology

MAX_ENUM_RESOURCES = 12

_MARGIN_REL_TOL = 1e-12
_FLOW_EPS_REL = 1e-9


class FlowSolveError(RuntimeError):
    """The flow system has no balanced solution on the given support."""


@dataclass(frozen=True)
class CRPDecomposition:
    """Partition of queues and resources into resource-pooling components."""

    components: tuple  # of (queue-index tuple, resource-index tuple)

    @property
    def count(self) -> int:
        return len(self.components)


def check_admissible(instance: MCMSInstance, topology: MatchingTopology) -> bool:
    """Steady-state test: every resource subset must out-pace the queues it traps.

    For each nonempty subset R' of resources, the queues eligible only within
    R' must have strictly less cumulative arrival rate than R'. Enumerates all
    subsets, so the resource count is capped.
    """
    topology.check_shape(instance)
    m = topology.m
    n_r = instance.n_resources
    if n_r > MAX_ENUM_RESOURCES:
        raise ValueError(f"subset enumeration limited to {MAX_ENUM_RESOURCES} resources")
    if np.any(m.sum(axis=1) == 0):
        return False
    lam = instance.lam_f
    mu = instance.mu_f
    margin_tol = _MARGIN_REL_TOL * mu.sum()
    all_r = range(n_r)
    for size in range(1, n_r + 1):
        for subset in combinations(all_r, size):
            outside = [r for r in all_r if r not in subset]
            trapped = m[:, outside].sum(axis=1) == 0 if outside else np.ones(len(lam), bool)
            margin = mu[list(subset)].sum() - lam[trapped].sum()
            if margin <= margin_tol:
                return False
    return True


def _support_components(n_q, n_r, edges):
    """Connected components of the bipartite graph on the given edge set."""
    adj_q = [[] for _ in range(n_q)]
    adj_r = [[] for _ in range(n_r)]
    for q, r in edges:
        adj_q[q].append(r)
        adj_r[r].append(q)
    comp_q = [-1] * n_q
    comp_r = [-1] * n_r
    n_comp = 0
    for q0 in range(n_q):
        if comp_q[q0] >= 0:
            continue
        stack = [("q", q0)]
        comp_q[q0] = n_comp
        while stack:
            side, i = stack.pop()
            if side == "q":
                for r in adj_q[i]:
                    if comp_r[r] < 0:
                        comp_r[r] = n_comp
                        stack.append(("r", r))
            else:
                for q in adj_r[i]:
                    if comp_q[q] < 0:
                        comp_q[q] = n_comp
                        stack.append(("q", q))
        n_comp += 1
    for r0 in range(n_r):
        if comp_r[r0] < 0:
            comp_r[r0] = n_comp
            n_comp += 1
    return comp_q, comp_r, n_comp


def _solve_support(lam, mu, support):
    """Solve the stationarity system f_qr = lam_q mu_r (theta_q + gamma_r) on a support.

    Returns (f, theta, gamma, residual). The system is solved by least squares
    because each connected component contributes one redundant balance equation.
    """
    n_q, n_r = support.shape
    rows = []
    rhs = []
    for q in range(n_q):
        row = np.zeros(n_q + n_r)
        sel = support[q]
        if not sel.any():
            raise FlowSolveError(f"queue {q} has empty support")
        row[q] = mu[sel].sum()
        row[n_q:][sel] = mu[sel]
        rows.append(row)
        rhs.append(1.0)
    for r in range(n_r):
        row = np.zeros(n_q + n_r)
        sel = support[:, r]
        if not sel.any():
            raise FlowSolveError(f"resource {r} has empty support")
        row[n_q + r] = lam[sel].sum()
        row[:n_q][sel] = lam[sel]
        rows.append(row)
        rhs.append(1.0)
    a = np.array(rows)
    b = np.array(rhs)
    sol = np.linalg.lstsq(a, b, rcond=None)[0]
    theta, gamma = sol[:n_q], sol[n_q:]
    f = np.where(support, lam[:, None] * mu[None, :] * (theta[:, None] + gamma[None, :]), 0.0)
    residual = max(np.max(np.abs(f.sum(axis=1) - lam)), np.max(np.abs(f.sum(axis=0) - mu)))
    return f, theta, gamma, residual


def _dual_shifts(n_comp, cross):
    """Feasibility of per-component potential shifts for difference constraints.

    ``cross`` holds (comp_i, comp_j, bound) meaning c_i - c_j <= bound.
    Bellman-Ford from a virtual source; returns shifts or None if infeasible.
    """
    dist = [0.0] * n_comp
    for _ in range(n_comp):
        changed = False
        for i, j, bound in cross:
            if dist[j] + bound < dist[i] - 1e-15:
                dist[i] = dist[j] + bound
                changed = True
        if not changed:
            return dist
    for i, j, bound in cross:
        if dist[j] + bound < dist[i] - 1e-12:
            return None
    return dist


def steady_state_flows(instance: MCMSInstance, topology: MatchingTopology,
                       max_iter: int = 500) -> FlowMatrix:
    """Minimum of sum f^2/(lam mu) over balanced flows supported on the topology.

    Active-set refinement: solve the equality-constrained stationarity system
    on the current support, drop negative-flow edges, re-add edges whose
    reduced cost goes positive, until primal and dual feasibility hold.
    Resource rates are rebalanced to the total individual arrival rate.
    """
    topology.check_shape(instance)
    if not check_admissible(instance, topology):
        raise FlowSolveError("topology is not admissible")
    lam = instance.lam_f
    mu = instance.balanced_mu_f()
    m = topology.m.astype(bool)
    n_q, n_r = m.shape
    tol = 1e-10 * max(1.0, mu.sum())
    support = m.copy()
    seen = set()
    for _ in range(max_iter):
        key = support.tobytes()
        f, theta, gamma, residual = _solve_support(lam, mu, support)
        if residual > 1e-6 * max(1.0, mu.sum()):
            raise FlowSolveError("balance equations unsolvable on support "
                                 "(disconnected or infeasible topology)")
        if f.min() < -tol:
            # drop the most negative edge; revisit a support at most once
            order = np.argsort(f, axis=None)
            dropped = False
            for idx in order:
                q, r = divmod(int(idx), n_r)
                if support[q, r] and f[q, r] < -tol:
                    trial = support.copy()
                    trial[q, r] = False
                    if trial.tobytes() not in seen:
                        support = trial
                        dropped = True
                        break
            if not dropped:
                raise FlowSolveError("active-set cycling while pruning support")
            seen.add(key)
            continue
        # primal feasible; check reduced costs of excluded topology edges
        excluded = [(q, r) for q in range(n_q) for r in range(n_r)
                    if m[q, r] and not support[q, r]]
        if not excluded:
            return FlowMatrix(np.clip(f, 0.0, None))
        edges = [(q, r) for q in range(n_q) for r in range(n_r) if support[q, r]]
        comp_q, comp_r, n_comp = _support_components(n_q, n_r, edges)
        cross = []
        violated = None
        worst = tol
        for q, r in excluded:
            red = theta[q] + gamma[r]
            ci, cj = comp_q[q], comp_r[r]
            if ci == cj:
                if red > worst:
                    worst = red
                    violated = (q, r)
            else:
                # shifted potentials must satisfy c_i - c_j <= -red
                cross.append((ci, cj, -red, q, r))
        if violated is None and cross:
            if _dual_shifts(n_comp, [(i, j, b) for i, j, b, _, _ in cross]) is None:
                violated = max(cross, key=lambda t: -t[2])[3:]
        if violated is None:
            return FlowMatrix(np.clip(f, 0.0, None))
        trial = support.copy()
        trial[violated] = True
        if trial.tobytes() in seen:
            raise FlowSolveError("active-set cycling while restoring support")
        seen.add(key)
        support = trial
    raise FlowSolveError("active-set iteration limit reached")


def crp_components(instance: MCMSInstance, topology: MatchingTopology) -> CRPDecomposition:
    """Components of the bipartite graph spanned by the positive QP flows."""
    flows = steady_state_flows(instance, topology)
    eps = _FLOW_EPS_REL * float(instance.mu_total)
    n_q, n_r = flows.f.shape
    edges = [(q, r) for q in range(n_q) for r in range(n_r) if flows.f[q, r] > eps]
    comp_q, comp_r, n_comp = _support_components(n_q, n_r, edges)
    components = []
    for c in range(n_comp):
        qs = tuple(q for q in range(n_q) if comp_q[q] == c)
        rs = tuple(r for r in range(n_r) if comp_r[r] == c)
        components.append((qs, rs))
    return CRPDecomposition(tuple(components))
