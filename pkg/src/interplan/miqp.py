"""Branch-and-bound for mixed-integer convex QPs.

The continuous relaxation data lives in a QuadraticProgram; `integers` lists
the indices that must take integral values (binaries are just integers with
[0, 1] bounds). Branching relaxations differ from their parent only in the
bounds of the branched variable, so nodes are cheap to represent: a pair of
bound vectors over the integer variables.

Search order is best-bound with depth-first dives: after branching, the child
nearer the fractional value is processed immediately (the dive); its sibling
is pushed on a heap keyed by the parent relaxation objective once the child
proves solvable, and continues the dive itself when the child is infeasible.
When a dive ends the globally best-bound node is popped next. Branching picks
the open variable with the lowest priority value (most fractional within a
class): indicator binaries sit near 0.5 in the relaxation whether or not they
matter, so fractionality is a tie-break, not a signal. A warm-start integer
assignment, when provided, is probed before the root relaxation so an
incumbent exists from the first node on; that is what makes the time-limited
anytime contract useful in closed loop, where the previous plan's assignment
shifted by one step is almost always still feasible.

Determinism: node sequence numbers break all heap ties, the QP solver is
deterministic, and when `time_limit` is None the search depends on nothing
but the problem data (use `node_limit` for reproducible budget runs).
"""

import heapq
import time
from dataclasses import dataclass, field

import numpy as np

from .qp import QpConfig, QuadraticProgram, solve_qp


@dataclass
class MixedIntegerQP:
    qp: QuadraticProgram
    integers: np.ndarray                  # indices of integer-constrained variables
    priority: np.ndarray = None           # branching tie-break, lower first

    def normalized(self):
        qp = self.qp.normalized()
        ints = np.asarray(self.integers, int).reshape(-1)
        pr = (np.zeros(ints.size) if self.priority is None
              else np.asarray(self.priority, float).reshape(-1))
        return MixedIntegerQP(qp, ints, pr)


@dataclass
class MiqpConfig:
    gap_tol: float = 1e-4        # relative optimality gap at which to stop
    int_tol: float = 1e-6        # integrality tolerance
    time_limit: float = None     # wall-clock seconds, None = no limit
    node_limit: int = None       # processed-node budget, None = no limit
    qp: QpConfig = field(default_factory=QpConfig)


@dataclass
class MiqpSolution:
    status: str                  # optimal | feasible_incumbent | infeasible | timeout_no_incumbent
    x: np.ndarray = None
    objective: float = np.nan
    best_bound: float = -np.inf
    gap: float = np.inf
    nodes: int = 0
    solve_time: float = 0.0
    assignment: np.ndarray = None    # values of the integer variables
    warm_start_used: bool = False

    def rel_gap(self):
        if self.x is None or not np.isfinite(self.best_bound):
            return np.inf
        return (self.objective - self.best_bound) / max(1.0, abs(self.objective))


def fix_and_relax(miqp, assignment=None):
    """Continuous relaxation with integer variables optionally pinned.

    `assignment` maps integer positions (indices into miqp.integers) to
    values; unmentioned integers keep their relaxed interval bounds. Passing a
    full vector pins every integer variable, a dict pins a subset.
    """
    m = miqp.normalized()
    qp = m.qp
    lb, ub = qp.lb.copy(), qp.ub.copy()
    if isinstance(assignment, dict):
        for k, v in assignment.items():
            idx = m.integers[k]
            v = np.clip(np.round(v), lb[idx], ub[idx])
            lb[idx] = ub[idx] = v
    elif assignment is not None:
        assignment = np.asarray(assignment, float).reshape(-1)
        for k, idx in enumerate(m.integers):
            v = np.clip(np.round(assignment[k]), lb[idx], ub[idx])
            lb[idx] = ub[idx] = v
    return QuadraticProgram(qp.Q, qp.q, qp.A_eq, qp.b_eq, qp.A_in, qp.b_in,
                            lb, ub, qp.offset)


def _solve_node(qp, lo, hi, integers, cfg):
    lb, ub = qp.lb.copy(), qp.ub.copy()
    lb[integers] = lo
    ub[integers] = hi
    node_qp = QuadraticProgram(qp.Q, qp.q, qp.A_eq, qp.b_eq, qp.A_in, qp.b_in,
                               lb, ub, qp.offset)
    return solve_qp(node_qp, cfg)


def solve_miqp(problem, config=None, warm_start=None):
    """Branch-and-bound solve. Returns the incumbent and the proven bound.

    warm_start: optional integer assignment (one value per entry of
    problem.integers), or a stack of assignments, probed in order before
    the search starts. Each probe costs one node.
    """
    cfg = config or MiqpConfig()
    m = problem.normalized()
    qp = m.qp
    ints = m.integers
    t0 = time.perf_counter()
    nodes_done = 0

    def out_of_budget():
        if cfg.node_limit is not None and nodes_done >= cfg.node_limit:
            return True
        if cfg.time_limit is not None and time.perf_counter() - t0 >= cfg.time_limit:
            return True
        return False

    if ints.size == 0:
        sol = solve_qp(qp, cfg.qp)
        status = "optimal" if sol.status == "optimal" else ("infeasible" if sol.status == "infeasible" else "timeout_no_incumbent")
        return MiqpSolution(status=status, x=sol.x, objective=sol.objective,
                            best_bound=sol.objective if sol.status == "optimal" else -np.inf,
                            gap=0.0 if sol.status == "optimal" else np.inf,
                            nodes=1, solve_time=time.perf_counter() - t0,
                            assignment=np.zeros(0))

    lo0 = np.ceil(qp.lb[ints] - cfg.int_tol)
    hi0 = np.floor(qp.ub[ints] + cfg.int_tol)
    if np.any(lo0 > hi0):
        return MiqpSolution(status="infeasible", nodes=0,
                            solve_time=time.perf_counter() - t0)

    incumbent = None  # (objective, x)
    warm_used = False

    def try_incumbent(x_cand, obj_cand):
        nonlocal incumbent
        if incumbent is None or obj_cand < incumbent[0] - 1e-12:
            incumbent = (obj_cand, x_cand.copy())

    def accept_integral(sol, lo, hi):
        """Snap a within-tolerance-integral relaxation to an exact incumbent."""
        vals = np.round(sol.x[ints])
        vals = np.clip(vals, lo, hi)
        fixed = _solve_node(qp, vals, vals, ints, cfg.qp)
        if fixed.status == "optimal":
            try_incumbent(fixed.x, fixed.objective)
        else:
            # Snapping crossed a big-M edge; keep the relaxed point, it is
            # integral to tolerance and feasible.
            try_incumbent(sol.x, sol.objective)

    if warm_start is not None:
        for ws in np.atleast_2d(np.asarray(warm_start, float)):
            if out_of_budget():
                break
            ws = np.clip(np.round(ws), lo0, hi0)
            probe = _solve_node(qp, ws, ws, ints, cfg.qp)
            nodes_done += 1
            if probe.status == "optimal":
                try_incumbent(probe.x, probe.objective)
                warm_used = True

    # Heap entries: (parent bound, seq, lo, hi). The dive walks children
    # directly without going through the heap; the sibling of the child being
    # dived into is held back until the child's relaxation settles, so a dead
    # child continues the dive on its sibling instead of surfacing.
    heap = []
    seq = 0
    heapq.heappush(heap, (-np.inf, seq, lo0, hi0))
    pruned_bound = np.inf  # tightest bound among pruned/leaf nodes
    snapped_root = False

    def finish(status):
        bound = min([b for b, *_ in heap], default=np.inf)
        bound = min(bound, pruned_bound)
        if incumbent is not None:
            bound = min(bound, incumbent[0])
        obj = incumbent[0] if incumbent else np.nan
        x = incumbent[1] if incumbent else None
        gap = ((obj - bound) / max(1.0, abs(obj))) if incumbent else np.inf
        return MiqpSolution(status=status, x=x, objective=obj,
                            best_bound=bound, gap=max(gap, 0.0),
                            nodes=nodes_done, solve_time=time.perf_counter() - t0,
                            assignment=np.round(x[ints]) if x is not None else None,
                            warm_start_used=warm_used)

    while heap:
        bound, _, lo, hi = heapq.heappop(heap)
        if incumbent is not None and bound >= incumbent[0] - 1e-12:
            pruned_bound = min(pruned_bound, bound)
            continue
        # Dive from this node.
        node_bound = bound
        sibling = None  # (lo, hi, parent objective) not yet pushed
        while True:
            if out_of_budget():
                if sibling is not None:
                    seq += 1
                    heapq.heappush(heap, (sibling[2], seq, sibling[0], sibling[1]))
                return finish("feasible_incumbent" if incumbent else "timeout_no_incumbent")
            sol = _solve_node(qp, lo, hi, ints, cfg.qp)
            nodes_done += 1
            if sol.status == "infeasible":
                if sibling is not None:
                    lo, hi, node_bound = sibling
                    sibling = None
                    continue
                break
            # The preferred child survived; its sibling goes to the heap.
            if sibling is not None:
                seq += 1
                heapq.heappush(heap, (sibling[2], seq, sibling[0], sibling[1]))
                sibling = None
            if sol.status != "optimal":
                # Relaxation did not converge (degenerate stall, usually with
                # the iterate essentially at an optimum). Dropping the node
                # would lose whatever lives in its box, so probe the rounded
                # iterate for an incumbent and split the box under the
                # inherited bound.
                open_ = np.where(hi > lo)[0]
                if sol.x is None or open_.size == 0:
                    pruned_bound = min(pruned_bound, node_bound)
                    break
                vals = sol.x[ints]
                vs = np.clip(np.round(vals), lo, hi)
                probe = _solve_node(qp, vs, vs, ints, cfg.qp)
                nodes_done += 1
                if probe.status == "optimal":
                    try_incumbent(probe.x, probe.objective)
                dist = np.abs(vals[open_] - np.round(vals[open_]))
                order = np.lexsort((open_, -dist, m.priority[open_]))
                j = open_[order[0]]
                # Disjoint split that works for integral iterate values too.
                p = min(max(int(np.round(vals[j])), int(lo[j])), int(hi[j]) - 1)
                lo_a, hi_a = lo.copy(), hi.copy()
                lo_b, hi_b = lo.copy(), hi.copy()
                lo_a[j] = p + 1
                hi_b[j] = p
                seq += 1
                heapq.heappush(heap, (node_bound, seq, lo_a, hi_a))
                seq += 1
                heapq.heappush(heap, (node_bound, seq, lo_b, hi_b))
                break
            node_bound = max(node_bound, sol.objective)
            if incumbent is not None and sol.objective >= incumbent[0] - 1e-12:
                pruned_bound = min(pruned_bound, sol.objective)
                break
            vals = sol.x[ints]
            frac = np.abs(vals - np.round(vals))
            if np.all(frac <= cfg.int_tol):
                accept_integral(sol, lo, hi)
                break
            cand = np.where((hi > lo) & (frac > cfg.int_tol))[0]
            if cand.size == 0:
                accept_integral(sol, lo, hi)
                break
            if not snapped_root:
                # One rounding probe off the root relaxation; often feasible
                # and an incumbent changes the search from blind to pruned.
                snapped_root = True
                vs = np.clip(np.round(vals), lo0, hi0)
                probe = _solve_node(qp, vs, vs, ints, cfg.qp)
                nodes_done += 1
                if probe.status == "optimal":
                    try_incumbent(probe.x, probe.objective)
                    if sol.objective >= incumbent[0] - 1e-12:
                        pruned_bound = min(pruned_bound, sol.objective)
                        break
            # Lowest priority value first; cost-free indicator binaries sit
            # near 0.5 in the relaxation, so fractionality alone says nothing
            # and only breaks ties within a priority class.
            dist = np.abs(vals[cand] - np.round(vals[cand]))
            order = np.lexsort((cand, -dist, m.priority[cand]))
            j = cand[order[0]]
            v = vals[j]
            lo_up, hi_dn = np.ceil(v), np.floor(v)
            if lo_up > hi[j]:
                lo_up = hi[j]
            if hi_dn < lo[j]:
                hi_dn = lo[j]
            up_first = (v - hi_dn) >= 0.5
            lo_a, hi_a = lo.copy(), hi.copy()
            lo_b, hi_b = lo.copy(), hi.copy()
            lo_a[j] = lo_up            # up child
            hi_b[j] = hi_dn            # down child
            if up_first:
                sibling = (lo_b, hi_b, sol.objective)
                lo, hi = lo_a, hi_a
            else:
                sibling = (lo_a, hi_a, sol.objective)
                lo, hi = lo_b, hi_b
        if incumbent is not None:
            rem = min([b for b, *_ in heap], default=np.inf)
            gap = (incumbent[0] - min(rem, incumbent[0])) / max(1.0, abs(incumbent[0]))
            if gap <= cfg.gap_tol:
                while heap:
                    pruned_bound = min(pruned_bound, heapq.heappop(heap)[0])
                return finish("optimal")

    return finish("optimal" if incumbent else "infeasible")
