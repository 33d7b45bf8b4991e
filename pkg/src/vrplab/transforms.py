"""Hand-crafted conversions between solutions of related problem kinds.

Each transform takes a feasible solution of the source kind and returns a
structurally valid solution of the target kind over the same nodes.  Tie
situations are broken by fixed lexicographic rules so every transform is
deterministic.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (
    DomainError,
    InfeasibleError,
    Instance,
    ProblemKind,
    Solution,
    StructureError,
    distance_matrix,
    route_cost,
    solution_from_routes,
    sub_tours,
)


def _as_kind(inst: Instance, kind: ProblemKind) -> Instance:
    """The same nodes under another kind's visiting rules."""
    if inst.kind is kind:
        return inst
    return Instance(kind=kind, nodes=inst.nodes, capacity=inst.capacity, alpha=inst.alpha)


@dataclass
class PathSegment:
    """An open path fragment; a singleton degenerates to head == tail."""

    nodes: list[int]

    @property
    def head(self) -> int:
        return self.nodes[0]

    @property
    def tail(self) -> int:
        return self.nodes[-1]


def cvrp_to_tsp(inst: Instance, sol: Solution) -> Solution:
    """Merge closed sub-tours into one ring.

    The sub-tours are cut at the depot, leaving the depot as a degenerate
    segment plus one open segment per vehicle.  Starting from the segment
    holding the lowest node index (the depot), the growing path repeatedly
    absorbs whichever remaining segment offers the shortest endpoint
    connection, trying head-head, head-tail, tail-head and tail-tail joins;
    ties fall back to (segment order, join order).  The final path closes
    into the TSP ring.
    """
    dm = distance_matrix(inst)
    tours = sub_tours(_as_kind(inst, ProblemKind.CVRP), sol)
    segments = [PathSegment([0])] + [PathSegment(list(t)) for t in tours]

    start_i = min(range(len(segments)), key=lambda i: min(segments[i].nodes))
    path = segments.pop(start_i).nodes
    while segments:
        best = None  # (dist, seg_pos, join_pos)
        for s_pos, seg in enumerate(segments):
            joins = (
                dm[path[0], seg.head],   # head-head
                dm[path[0], seg.tail],   # head-tail
                dm[path[-1], seg.head],  # tail-head
                dm[path[-1], seg.tail],  # tail-tail
            )
            for j_pos, d in enumerate(joins):
                if best is None or d < best[0]:
                    best = (d, s_pos, j_pos)
        _, s_pos, j_pos = best
        seg = segments.pop(s_pos).nodes
        if j_pos == 0:
            path = path[::-1] + seg
        elif j_pos == 1:
            path = seg + path
        elif j_pos == 2:
            path = path + seg
        else:
            path = path + seg[::-1]

    pivot = path.index(0)
    return Solution(visits=tuple(path[pivot:] + path[:pivot]))


def tsp_to_cvrp(inst: Instance, sol: Solution) -> Solution:
    """Split a ring into capacity-feasible closed sub-tours.

    Traversal starts at the depot's position in the ring and inserts a
    depot return whenever the next customer would overflow the load.
    """
    if inst.capacity <= 0:
        raise DomainError("target instance needs a positive capacity")
    sub_tours(_as_kind(inst, ProblemKind.TSP), sol)  # permutation check
    if 0 not in sol.visits:
        raise StructureError("the ring must contain the depot node 0")
    if any(nd.demand > inst.capacity for nd in inst.nodes[1:]):
        raise DomainError("a customer demand exceeds the capacity")

    ring = list(sol.visits)
    pivot = ring.index(0)
    order = ring[pivot + 1 :] + ring[:pivot]

    routes: list[list[int]] = []
    current: list[int] = []
    load = 0
    for v in order:
        d = inst.nodes[v].demand
        if current and load + d > inst.capacity:
            routes.append(current)
            current, load = [], 0
        current.append(v)
        load += d
    routes.append(current)
    return solution_from_routes(ProblemKind.CVRP, routes)


def cvrp_to_ovrp(inst: Instance, sol: Solution) -> Solution:
    """Drop the longer depot edge of every closed sub-tour.

    When the departure edge is the longer one the sub-tour is reversed so
    the open route still starts at the depot.  Equal edges drop the edge
    next to the last-visited customer, keeping the original orientation.
    The cost never increases.
    """
    dm = distance_matrix(inst)
    tours = sub_tours(_as_kind(inst, ProblemKind.CVRP), sol)
    opened = []
    for t in tours:
        if dm[0, t[0]] > dm[t[-1], 0]:
            opened.append(t[::-1])
        else:
            opened.append(t)
    return solution_from_routes(ProblemKind.OVRP, opened)


def ovrp_to_cvrp(inst: Instance, sol: Solution) -> Solution:
    """Close every open route with a return edge to the depot."""
    tours = sub_tours(_as_kind(inst, ProblemKind.OVRP), sol)  # raises if already closed
    return solution_from_routes(ProblemKind.CVRP, tours)


def _window_split(
    dm: np.ndarray, inst: Instance, route: list[int]
) -> tuple[list[list[int]], float]:
    """Split one route at the first window violation, repeatedly.

    A node joins the current sub-tour only if its physical arrival meets
    the window close and an immediate depot return would still meet the
    depot deadline; otherwise a depot visit is inserted before it and the
    check restarts from a fresh vehicle.  A node that fails even from a
    fresh vehicle has no feasible singleton route: InfeasibleError.
    """
    depot = inst.nodes[0]
    out: list[list[int]] = []
    current: list[int] = []
    t = depot.tw_early
    prev = 0
    for v in route:
        nd = inst.nodes[v]
        arr = t + dm[prev, v]
        ok = arr <= nd.tw_late and max(nd.tw_early, arr) + nd.service + dm[v, 0] <= depot.tw_late
        if not ok:
            if not current:
                raise InfeasibleError(f"customer {v} has no feasible single-customer route")
            out.append(current)
            current = []
            t, prev = depot.tw_early, 0
            arr = t + dm[prev, v]
            if arr > nd.tw_late or max(nd.tw_early, arr) + nd.service + dm[v, 0] > depot.tw_late:
                raise InfeasibleError(f"customer {v} has no feasible single-customer route")
        current.append(v)
        t = max(nd.tw_early, arr) + nd.service
        prev = v
    out.append(current)
    total = sum(route_cost(dm, r, ProblemKind.CVRPTW) for r in out)
    return out, total


def cvrp_to_cvrptw(inst: Instance, sol: Solution) -> Solution:
    """Split capacity-feasible sub-tours until their schedules fit.

    Every sub-tour is split in both travel directions and the cheaper split
    set wins (forward on ties).  Splitting never breaks capacity, so the
    output is fully feasible.  Raises InfeasibleError when some customer
    misses its window even on a dedicated round trip.
    """
    if inst.kind is not ProblemKind.CVRPTW:
        raise DomainError("target instance must carry time windows")
    dm = distance_matrix(inst)
    tours = sub_tours(_as_kind(inst, ProblemKind.CVRP), sol)
    final: list[list[int]] = []
    for t in tours:
        fwd, fwd_cost = _window_split(dm, inst, t)
        rev, rev_cost = _window_split(dm, inst, t[::-1])
        final.extend(fwd if fwd_cost <= rev_cost else rev)
    return solution_from_routes(ProblemKind.CVRPTW, final)


def cvrptw_to_cvrp(inst: Instance, sol: Solution) -> Solution:
    """Re-merge window-induced sub-tours under the capacity bound alone.

    Repeatedly joins the pair of routes with the largest positive saving.
    A join concatenates one route after the other, trying both traversal
    orientations of each; it must respect capacity and strictly shorten the
    summed route length.  Savings are recomputed from scratch after every
    merge.  The output cost never exceeds the input cost.
    """
    dm = distance_matrix(inst)
    routes = sub_tours(_as_kind(inst, ProblemKind.CVRPTW), sol)
    loads = [sum(inst.nodes[v].demand for v in r) for r in routes]
    costs = [route_cost(dm, r, ProblemKind.CVRP) for r in routes]

    while True:
        best = None  # (saving, a, b, combo)
        for a in range(len(routes)):
            for b in range(a + 1, len(routes)):
                if loads[a] + loads[b] > inst.capacity:
                    continue
                ra, rb = routes[a], routes[b]
                for combo, merged_ends in enumerate(
                    ((ra[-1], rb[0]), (ra[-1], rb[-1]), (ra[0], rb[0]), (ra[0], rb[-1]))
                ):
                    # closed-route merge: swap two depot edges for one link
                    left, right = merged_ends
                    merged_cost = costs[a] + costs[b] - dm[left, 0] - dm[0, right] + dm[left, right]
                    saving = costs[a] + costs[b] - merged_cost
                    if saving <= 1e-10:
                        continue
                    if best is None or saving > best[0]:
                        best = (saving, a, b, combo)
        if best is None:
            break
        _, a, b, combo = best
        ra, rb = routes[a], routes[b]
        merged = (
            ra + rb if combo == 0 else
            ra + rb[::-1] if combo == 1 else
            ra[::-1] + rb if combo == 2 else
            ra[::-1] + rb[::-1]
        )
        routes[a] = merged
        loads[a] += loads[b]
        costs[a] = route_cost(dm, merged, ProblemKind.CVRP)
        del routes[b], loads[b], costs[b]

    return solution_from_routes(ProblemKind.CVRP, routes)


TRANSFORMS = {
    (ProblemKind.CVRP, ProblemKind.TSP): cvrp_to_tsp,
    (ProblemKind.TSP, ProblemKind.CVRP): tsp_to_cvrp,
    (ProblemKind.CVRP, ProblemKind.OVRP): cvrp_to_ovrp,
    (ProblemKind.OVRP, ProblemKind.CVRP): ovrp_to_cvrp,
    (ProblemKind.CVRP, ProblemKind.CVRPTW): cvrp_to_cvrptw,
    (ProblemKind.CVRPTW, ProblemKind.CVRP): cvrptw_to_cvrp,
}
