"""Classical construction heuristics and local search.

The reference pipeline is: build a tour with nearest-neighbor (all kinds)
and Clarke-Wright savings (capacity kinds without windows), polish each
with 2-opt plus Or-opt, and keep the cheaper result.  Everything here is a
pure function of its inputs; scan orders are fixed, so repeated calls give
identical output.
"""
from __future__ import annotations

import numpy as np

from .core import (
    DomainError,
    InfeasibleError,
    Instance,
    ProblemKind,
    Solution,
    distance_matrix,
    route_cost,
    solution_cost,
    solution_from_routes,
    sub_tours,
)

_EPS = 1e-10  # strict-improvement guard against float cycling


class _TwData:
    """Precomputed window arrays for schedule simulation."""

    def __init__(self, inst: Instance):
        self.early = np.array([nd.tw_early for nd in inst.nodes])
        self.late = np.array([nd.tw_late for nd in inst.nodes])
        self.service = np.array([nd.service for nd in inst.nodes])
        self.deadline = inst.nodes[0].tw_late


def _tw_route_feasible(dm: np.ndarray, tw: _TwData, route: list[int]) -> bool:
    t = tw.early[0]
    prev = 0
    for node in route:
        arr = t + dm[prev, node]
        if arr > tw.late[node]:
            return False
        t = max(tw.early[node], arr) + tw.service[node]
        prev = node
    return t + dm[prev, 0] <= tw.deadline


def nearest_neighbor(inst: Instance) -> Solution:
    """Greedy construction: always visit the closest feasible customer.

    Depot-based kinds start a fresh vehicle whenever no remaining customer
    fits the current load (and windows, for CVRPTW).  Raises
    InfeasibleError when some customer cannot be served even by a dedicated
    vehicle.
    """
    dm = distance_matrix(inst)
    if inst.kind is ProblemKind.TSP:
        unvisited = set(range(1, len(inst.nodes)))
        tour = [0]
        while unvisited:
            cur = tour[-1]
            nxt = min(unvisited, key=lambda j: (dm[cur, j], j))
            tour.append(nxt)
            unvisited.remove(nxt)
        return Solution(visits=tuple(tour))

    tw = _TwData(inst) if inst.kind.has_time_windows else None
    unvisited = set(range(1, len(inst.nodes)))
    routes: list[list[int]] = []
    current: list[int] = []
    load = 0
    t = tw.early[0] if tw is not None else 0.0
    pos = 0
    while unvisited:
        best = None
        for j in sorted(unvisited):
            if inst.nodes[j].demand + load > inst.capacity:
                continue
            if tw is not None:
                arr = t + dm[pos, j]
                if arr > tw.late[j]:
                    continue
                if max(tw.early[j], arr) + tw.service[j] + dm[j, 0] > tw.deadline:
                    continue
            if best is None or dm[pos, j] < dm[pos, best]:
                best = j
        if best is None:
            if not current:
                raise InfeasibleError("a customer cannot be served by a dedicated vehicle")
            routes.append(current)
            current, load, pos = [], 0, 0
            t = tw.early[0] if tw is not None else 0.0
            continue
        current.append(best)
        unvisited.remove(best)
        load += inst.nodes[best].demand
        if tw is not None:
            arr = t + dm[pos, best]
            t = max(tw.early[best], arr) + tw.service[best]
        pos = best
    routes.append(current)
    return solution_from_routes(inst.kind, routes)


def clarke_wright(inst: Instance) -> Solution:
    """Parallel savings construction for capacity-constrained closed routes.

    Savings s_ij = d(0,i) + d(0,j) - d(i,j), processed in descending order;
    two routes merge when i and j both sit at depot-adjacent route ends and
    the merged load fits the capacity.
    """
    if inst.kind is not ProblemKind.CVRP:
        raise DomainError("savings construction is defined for CVRP instances")
    dm = distance_matrix(inst)
    n = len(inst.nodes) - 1
    if any(inst.nodes[i].demand > inst.capacity for i in range(1, n + 1)):
        raise InfeasibleError("a customer demand exceeds the vehicle capacity")

    routes: dict[int, list[int]] = {i: [i] for i in range(1, n + 1)}
    loads: dict[int, int] = {i: inst.nodes[i].demand for i in range(1, n + 1)}
    owner: dict[int, int] = {i: i for i in range(1, n + 1)}

    savings = [
        (dm[0, i] + dm[0, j] - dm[i, j], i, j)
        for i in range(1, n + 1)
        for j in range(i + 1, n + 1)
    ]
    savings.sort(key=lambda t: (-t[0], t[1], t[2]))

    for s, i, j in savings:
        if s <= 0:
            break
        ri, rj = owner[i], owner[j]
        if ri == rj or loads[ri] + loads[rj] > inst.capacity:
            continue
        a, b = routes[ri], routes[rj]
        if i == a[-1] and j == b[0]:
            merged = a + b
        elif i == a[-1] and j == b[-1]:
            merged = a + b[::-1]
        elif i == a[0] and j == b[0]:
            merged = a[::-1] + b
        elif i == a[0] and j == b[-1]:
            merged = b + a
        else:
            continue  # i or j is interior now
        routes[ri] = merged
        loads[ri] += loads[rj]
        del routes[rj], loads[rj]
        for v in merged:
            owner[v] = ri

    ordered = sorted(routes.values(), key=lambda r: min(r))
    return solution_from_routes(inst.kind, ordered)


def _route_load(inst: Instance, route: list[int]) -> int:
    return sum(inst.nodes[v].demand for v in route)


def _two_opt_route(
    dm: np.ndarray, route: list[int], depot: int, closed: bool, tw_check
) -> bool:
    """One first-improvement 2-opt sweep over a single route (in place)."""
    improved = False
    i = 0
    while i < len(route) - 1:
        j = i + 1
        applied = False
        while j < len(route):
            if closed and i == 0 and j == len(route) - 1:
                j += 1
                continue  # whole-route reversal, zero delta
            prev = depot if i == 0 else route[i - 1]
            nxt = depot if j == len(route) - 1 else route[j + 1]
            if closed or j < len(route) - 1:
                delta = dm[prev, route[j]] + dm[route[i], nxt] - dm[prev, route[i]] - dm[route[j], nxt]
            else:  # open tail: only the leading edge changes
                delta = dm[prev, route[j]] - dm[prev, route[i]]
            if delta < -_EPS:
                candidate = route[:i] + route[i : j + 1][::-1] + route[j + 1 :]
                if tw_check is None or tw_check(candidate):
                    route[:] = candidate
                    improved = True
                    applied = True
                    break
            j += 1
        i = 0 if applied else i + 1
    return improved


def _or_opt_pass(
    dm: np.ndarray,
    routes: list[list[int]],
    inst: Instance,
    depot: int,
    closed: bool,
    intra_only: bool,
    tw: _TwData | None,
) -> bool:
    """One first-improvement sweep of segment relocations (lengths 1-3)."""

    def seg_load(seg: list[int]) -> int:
        return sum(inst.nodes[v].demand for v in seg)

    for a_idx in range(len(routes)):
        ra = routes[a_idx]
        for seg_len in (1, 2, 3):
            for p in range(0, len(ra) - seg_len + 1):
                seg = ra[p : p + seg_len]
                u, v = seg[0], seg[-1]
                before = depot if p == 0 else ra[p - 1]
                after_pos = p + seg_len
                if after_pos < len(ra):
                    after = ra[after_pos]
                    gain = dm[before, u] + dm[v, after] - dm[before, after]
                elif closed:
                    gain = dm[before, u] + dm[v, depot] - dm[before, depot]
                else:
                    gain = dm[before, u]  # open tail removal
                rest_a = ra[:p] + ra[after_pos:]
                target_range = [a_idx] if intra_only else range(len(routes))
                for b_idx in target_range:
                    rb = rest_a if b_idx == a_idx else routes[b_idx]
                    if b_idx != a_idx:
                        if not rb:
                            continue
                        if inst.kind.has_capacity and _route_load(inst, rb) + seg_load(seg) > inst.capacity:
                            continue
                    for q in range(0, len(rb) + 1):
                        if b_idx == a_idx and q == p:
                            continue  # same position, no move
                        x = depot if q == 0 else rb[q - 1]
                        if q < len(rb):
                            y = rb[q]
                            cost = dm[x, u] + dm[v, y] - dm[x, y]
                        elif closed:
                            cost = dm[x, u] + dm[v, depot] - dm[x, depot]
                        else:
                            cost = dm[x, u]  # append at open tail
                        if cost - gain >= -_EPS:
                            continue
                        new_b = rb[:q] + seg + rb[q:]
                        if tw is not None:
                            if not _tw_route_feasible(dm, tw, new_b):
                                continue
                            if b_idx != a_idx and rest_a and not _tw_route_feasible(dm, tw, rest_a):
                                continue
                        if b_idx == a_idx:
                            routes[a_idx] = new_b
                        else:
                            routes[a_idx] = rest_a
                            routes[b_idx] = new_b
                        if not routes[a_idx]:
                            del routes[a_idx]
                        return True
    return False


def _swap_pass(
    dm: np.ndarray,
    routes: list[list[int]],
    inst: Instance,
    closed: bool,
    tw: _TwData | None,
) -> bool:
    """One first-improvement sweep of inter-route segment exchanges.

    Swapping fixes capacity-blocked partitions that pure relocation cannot
    reach (both routes near the load limit).  Segments of length 1 and 2
    are exchanged between route pairs.
    """

    def cost(route: list[int]) -> float:
        c = dm[0, route[0]] + sum(dm[a, b] for a, b in zip(route, route[1:]))
        return c + (dm[route[-1], 0] if closed else 0.0)

    check_cap = inst.kind.has_capacity
    for a_idx in range(len(routes)):
        for b_idx in range(a_idx + 1, len(routes)):
            ra, rb = routes[a_idx], routes[b_idx]
            base = cost(ra) + cost(rb)
            load_a, load_b = _route_load(inst, ra), _route_load(inst, rb)
            for la in (1, 2):
                for lb in (1, 2):
                    for p in range(len(ra) - la + 1):
                        seg_a = ra[p : p + la]
                        da = sum(inst.nodes[v].demand for v in seg_a)
                        for q in range(len(rb) - lb + 1):
                            seg_b = rb[q : q + lb]
                            db = sum(inst.nodes[v].demand for v in seg_b)
                            if check_cap and (load_a - da + db > inst.capacity
                                              or load_b - db + da > inst.capacity):
                                continue
                            na = ra[:p] + seg_b + ra[p + la :]
                            nb = rb[:q] + seg_a + rb[q + lb :]
                            if cost(na) + cost(nb) - base >= -_EPS:
                                continue
                            if tw is not None and not (
                                _tw_route_feasible(dm, tw, na)
                                and _tw_route_feasible(dm, tw, nb)
                            ):
                                continue
                            routes[a_idx], routes[b_idx] = na, nb
                            return True
    return False


def two_opt_or_opt(inst: Instance, sol: Solution, max_passes: int = 40) -> Solution:
    """Polish a solution with 2-opt, inter/intra-route Or-opt, and swaps.

    Only strictly improving feasible moves are accepted (first improvement,
    fixed scan order), so the output never costs more than the input and
    the polish is deterministic.  Stops at a local optimum or after
    ``max_passes`` full sweeps.
    """
    dm = distance_matrix(inst)
    kind = inst.kind
    tw = _TwData(inst) if kind.has_time_windows else None

    if kind is ProblemKind.TSP:
        ring = list(sol.visits)
        anchor, rest = ring[0], ring[1:]
        for _ in range(max_passes):
            moved = _two_opt_route(dm, rest, anchor, True, None)
            routes = [rest]
            moved |= _or_opt_pass(dm, routes, inst, anchor, True, True, None)
            rest = routes[0]
            if not moved:
                break
        return Solution(visits=tuple([anchor] + rest))

    routes = sub_tours(inst, sol)
    closed = kind is not ProblemKind.OVRP
    tw_checker = (lambda r: _tw_route_feasible(dm, tw, r)) if tw is not None else None
    for _ in range(max_passes):
        moved = False
        for r in routes:
            moved |= _two_opt_route(dm, r, 0, closed, tw_checker)
        moved |= _or_opt_pass(dm, routes, inst, 0, closed, False, tw)
        moved |= _swap_pass(dm, routes, inst, closed, tw)
        if not moved:
            break
    routes = [r for r in routes if r]
    routes.sort(key=lambda r: min(r))
    return solution_from_routes(kind, routes)


def _reinsert(
    dm: np.ndarray,
    routes: list[list[int]],
    inst: Instance,
    closed: bool,
    tw: _TwData | None,
    v: int,
) -> None:
    """Put customer v back at its cheapest feasible position (in place).

    A fresh singleton route is always a fallback, so insertion never fails.
    """
    demand = inst.nodes[v].demand
    best_delta = 2.0 * dm[0, v] if closed else dm[0, v]
    best = None  # None means open a new route
    for r_idx, route in enumerate(routes):
        if inst.kind.has_capacity and _route_load(inst, route) + demand > inst.capacity:
            continue
        for q in range(len(route) + 1):
            x = 0 if q == 0 else route[q - 1]
            if q < len(route):
                delta = dm[x, v] + dm[v, route[q]] - dm[x, route[q]]
            elif closed:
                delta = dm[x, v] + dm[v, 0] - dm[x, 0]
            else:
                delta = dm[x, v]
            if delta >= best_delta - _EPS:
                continue
            if tw is not None and not _tw_route_feasible(
                dm, tw, route[:q] + [v] + route[q:]
            ):
                continue
            best_delta = delta
            best = (r_idx, q)
    if best is None:
        routes.append([v])
    else:
        r_idx, q = best
        routes[r_idx] = routes[r_idx][:q] + [v] + routes[r_idx][q:]


def _perturbed(
    inst: Instance,
    routes: list[list[int]],
    rng: np.random.Generator,
) -> Solution:
    """Remove a few random customers, reinsert greedily, re-polish.

    Escapes partition local optima that single relocations and swaps cannot
    leave (every one-move path is strictly worsening).
    """
    dm = distance_matrix(inst)
    closed = inst.kind is not ProblemKind.OVRP
    tw = _TwData(inst) if inst.kind.has_time_windows else None
    flat = [v for r in routes for v in r]
    k = min(len(flat), int(rng.integers(2, 5)))
    removed = rng.choice(np.array(flat), size=k, replace=False)
    kept = [[v for v in r if v not in removed] for r in routes]
    kept = [r for r in kept if r]
    for v in rng.permutation(removed):
        _reinsert(dm, kept, inst, closed, tw, int(v))
    return two_opt_or_opt(inst, solution_from_routes(inst.kind, kept))


def oracle(inst: Instance, restarts: int = 5) -> Solution:
    """Best polished construction; the lab's reference solver.

    Nearest-neighbor always competes; Clarke-Wright joins for CVRP.  Each
    candidate is polished with 2-opt + Or-opt + swaps, then a few seeded
    ruin-and-recreate restarts try to leave the remaining local optimum.
    Deterministic for a given instance (the restart RNG seed is fixed).
    """
    dm = distance_matrix(inst)
    candidates = [two_opt_or_opt(inst, nearest_neighbor(inst))]
    if inst.kind is ProblemKind.CVRP:
        candidates.append(two_opt_or_opt(inst, clarke_wright(inst)))
    costs = [solution_cost(inst, s, dm) for s in candidates]
    best = candidates[int(np.argmin(costs))]
    if inst.kind is ProblemKind.TSP:
        return best
    best_cost = min(costs)
    rng = np.random.default_rng(1405)
    for _ in range(restarts):
        cand = _perturbed(inst, sub_tours(inst, best), rng)
        cost = solution_cost(inst, cand, dm)
        if cost < best_cost - _EPS:
            best, best_cost = cand, cost
    return best


def gap(cost: float, reference: float) -> float:
    """Percentage excess of ``cost`` over ``reference``."""
    if reference <= 0:
        raise DomainError("reference cost must be positive")
    return 100.0 * (cost - reference) / reference
