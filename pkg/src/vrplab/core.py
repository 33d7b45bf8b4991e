"""Shared routing definitions: nodes, instances, solutions, schedules.

All geometry lives in the unit square and distances are exact
double-precision Euclidean values; travel time and distance share one unit
scale.  A solution is a flat visit sequence in which index 0 delimits
sub-tours for depot-based problems.  Feasibility violations are reported as
data, never raised, so callers can inspect partially broken solutions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np


class ProblemKind(str, Enum):
    """Routing problem families supported by the lab."""

    TSP = "tsp"
    CVRP = "cvrp"
    OVRP = "ovrp"
    CVRPTW = "cvrptw"

    @property
    def has_depot(self) -> bool:
        return self is not ProblemKind.TSP

    @property
    def has_capacity(self) -> bool:
        return self is not ProblemKind.TSP

    @property
    def has_time_windows(self) -> bool:
        return self is ProblemKind.CVRPTW


class DomainError(ValueError):
    """An argument lies outside its documented domain."""


class StructureError(ValueError):
    """A visit sequence breaks the depot-delimiter or permutation rules."""


class InfeasibleError(ValueError):
    """No feasible result exists for the requested computation."""


@dataclass(frozen=True)
class Node:
    """One stop: position, demand and (optionally) a service time window.

    Window fields are zero when the problem kind does not use them.  For
    depot-based kinds node 0 is the depot and must carry zero demand.
    """

    index: int
    x: float
    y: float
    demand: int = 0
    tw_early: float = 0.0
    tw_late: float = 0.0
    service: float = 0.0


@dataclass(frozen=True)
class Instance:
    """A problem instance: kind tag, node list, and tightness parameters.

    ``alpha`` records the window-scaling factor the node windows currently
    reflect (1.0 for freshly generated base windows).  ``capacity`` is 0 for
    TSP, where it has no meaning.
    """

    kind: ProblemKind
    nodes: tuple[Node, ...]
    capacity: int = 0
    alpha: float = 1.0

    @property
    def n(self) -> int:
        """Customer count (nodes beyond index 0)."""
        return len(self.nodes) - 1

    def customer_indices(self) -> range:
        # For TSP node 0 is an ordinary stop, not a depot.
        return range(0, len(self.nodes)) if self.kind is ProblemKind.TSP else range(1, len(self.nodes))


@dataclass(frozen=True)
class Solution:
    """Flat visit sequence; 0 delimits sub-tours for depot-based kinds."""

    visits: tuple[int, ...]


@dataclass(frozen=True)
class Violation:
    code: str
    node: int | None
    message: str


@dataclass(frozen=True)
class FeasibilityReport:
    feasible: bool
    violations: tuple[Violation, ...]

    def __bool__(self) -> bool:
        return self.feasible


@dataclass(frozen=True)
class Schedule:
    """Per-position times along a visit sequence.

    ``arrival`` is the physical arrival time, before any waiting;
    ``service_start`` is max(window open, arrival); ``departure`` adds the
    service duration.  Positions that open a sub-tour sit at the depot's
    window-open time.  ``violation`` records the first (node, reason) pair
    where the sequence misses a deadline.
    """

    arrival: tuple[float, ...]
    service_start: tuple[float, ...]
    departure: tuple[float, ...]
    feasible: bool
    violation: tuple[int, str] | None


def distance(a: Node, b: Node) -> float:
    return math.hypot(a.x - b.x, a.y - b.y)


def distance_matrix(inst: Instance) -> np.ndarray:
    """Full symmetric Euclidean distance matrix, exact doubles."""
    xy = np.array([[nd.x, nd.y] for nd in inst.nodes])
    diff = xy[:, None, :] - xy[None, :, :]
    return np.sqrt((diff * diff).sum(axis=2))


def sub_tours(inst: Instance, sol: Solution) -> list[list[int]]:
    """Split a visit sequence into per-vehicle customer lists.

    Raises StructureError when the depot-delimiter rules for the instance
    kind are broken or the customer set is not visited exactly once.  For
    TSP the single returned tour is the whole ring.
    """
    visits = sol.visits
    n_nodes = len(inst.nodes)
    if inst.kind is ProblemKind.TSP:
        if sorted(visits) != list(range(n_nodes)):
            raise StructureError("TSP solution must visit every node exactly once")
        return [list(visits)]

    if not visits or visits[0] != 0:
        raise StructureError("solution must start at the depot")
    if inst.kind in (ProblemKind.CVRP, ProblemKind.CVRPTW):
        if visits[-1] != 0:
            raise StructureError("closed-route solution must end at the depot")
    else:  # OVRP: last sub-tour ends at a customer
        if visits[-1] == 0:
            raise StructureError("open-route solution must end at a customer")

    tours: list[list[int]] = []
    current: list[int] = []
    for pos, v in enumerate(visits[1:], start=1):
        if v == 0:
            if not current:
                raise StructureError(f"empty sub-tour at position {pos}")
            tours.append(current)
            current = []
        else:
            current.append(v)
    if current:
        tours.append(current)

    seen = [v for t in tours for v in t]
    if sorted(seen) != list(range(1, n_nodes)):
        raise StructureError("customers must each be visited exactly once")
    return tours


def solution_from_routes(kind: ProblemKind, routes: list[list[int]]) -> Solution:
    """Assemble a flat visit sequence from per-vehicle customer lists."""
    if kind is ProblemKind.TSP:
        (ring,) = routes
        return Solution(visits=tuple(ring))
    visits: list[int] = []
    for r in routes:
        if not r:
            raise StructureError("empty sub-tour")
        visits.append(0)
        visits.extend(r)
    if kind in (ProblemKind.CVRP, ProblemKind.CVRPTW):
        visits.append(0)
    return Solution(visits=tuple(visits))


def route_cost(dm: np.ndarray, route: list[int], kind: ProblemKind) -> float:
    """Cost of one sub-tour given the kind's depot-edge convention."""
    if kind is ProblemKind.TSP:
        total = 0.0
        for a, b in zip(route, route[1:]):
            total += dm[a, b]
        return total + dm[route[-1], route[0]]
    total = dm[0, route[0]]
    for a, b in zip(route, route[1:]):
        total += dm[a, b]
    if kind is not ProblemKind.OVRP:
        total += dm[route[-1], 0]
    return total


def solution_cost(inst: Instance, sol: Solution, dm: np.ndarray | None = None) -> float:
    """Total Euclidean tour length under the instance kind's conventions.

    TSP closes the ring; OVRP omits every return-to-depot edge.  Raises
    StructureError on malformed visit sequences.
    """
    if dm is None:
        dm = distance_matrix(inst)
    return sum(route_cost(dm, r, inst.kind) for r in sub_tours(inst, sol))


def schedule(inst: Instance, sol: Solution, dm: np.ndarray | None = None) -> Schedule:
    """Simulate time windows along the visit sequence.

    Each sub-tour is served by a fresh vehicle that leaves the depot at its
    window-open time.  The first node whose physical arrival exceeds its
    window close, or whose depot return misses the depot deadline, marks the
    schedule infeasible; times keep accumulating past the violation so the
    whole trace stays inspectable.
    """
    if inst.kind is not ProblemKind.CVRPTW:
        raise DomainError("schedules are defined for CVRPTW instances only")
    if dm is None:
        dm = distance_matrix(inst)
    tours = sub_tours(inst, sol)  # validates structure

    depot = inst.nodes[0]
    arrival: list[float] = []
    service_start: list[float] = []
    departure: list[float] = []
    violation: tuple[int, str] | None = None

    # position 0 is the leading depot
    arrival.append(depot.tw_early)
    service_start.append(depot.tw_early)
    departure.append(depot.tw_early)
    for tour in tours:
        t = depot.tw_early
        prev = 0
        for node_idx in tour:
            nd = inst.nodes[node_idx]
            arr = t + dm[prev, node_idx]
            start = max(nd.tw_early, arr)
            dep = start + nd.service
            arrival.append(arr)
            service_start.append(start)
            departure.append(dep)
            if violation is None and arr > nd.tw_late:
                violation = (node_idx, f"arrival {arr:.6f} after window close {nd.tw_late:.6f}")
            t = dep
            prev = node_idx
        back = t + dm[prev, 0]
        arrival.append(back)
        service_start.append(max(depot.tw_early, back))
        departure.append(service_start[-1])
        if violation is None and back > depot.tw_late:
            violation = (0, f"depot return {back:.6f} after deadline {depot.tw_late:.6f}")

    # OVRP-style open tails never occur here (kind is CVRPTW), so the trace
    # length always matches the visit sequence length.
    return Schedule(
        arrival=tuple(arrival),
        service_start=tuple(service_start),
        departure=tuple(departure),
        feasible=violation is None,
        violation=violation,
    )


def validate(inst: Instance, sol: Solution, dm: np.ndarray | None = None) -> FeasibilityReport:
    """Check structure, capacity and time windows; violations are data."""
    violations: list[Violation] = []
    try:
        tours = sub_tours(inst, sol)
    except StructureError as exc:
        return FeasibilityReport(False, (Violation("structure", None, str(exc)),))

    if inst.kind.has_capacity:
        for tour in tours:
            load = sum(inst.nodes[v].demand for v in tour)
            if load > inst.capacity:
                violations.append(
                    Violation("capacity", tour[0], f"sub-tour load {load} exceeds capacity {inst.capacity}")
                )

    if inst.kind.has_time_windows:
        sched = schedule(inst, sol, dm=dm)
        if not sched.feasible:
            node, reason = sched.violation
            violations.append(Violation("time_window", node, reason))

    return FeasibilityReport(not violations, tuple(violations))


def apply_tightness(inst: Instance, alpha: float) -> Instance:
    """Scale customer time windows around their centers by ``alpha``.

    alpha < 1 narrows windows toward their midpoints and stretches service
    (service becomes max(service/alpha, service)); alpha > 1 widens windows
    and leaves service unchanged.  The depot window never moves and window
    opens are clipped at 0.  The input must carry unscaled base windows.
    """
    if inst.kind is not ProblemKind.CVRPTW:
        raise DomainError("window tightening applies to CVRPTW instances only")
    if alpha <= 0:
        raise DomainError(f"tightness must be positive, got {alpha}")
    if inst.alpha != 1.0:
        raise DomainError("instance windows are already scaled; start from the base instance")

    new_nodes = [inst.nodes[0]]
    for nd in inst.nodes[1:]:
        delta = (nd.tw_late - nd.tw_early) / 2.0 * (1.0 - alpha)
        new_nodes.append(
            replace(
                nd,
                tw_early=max(nd.tw_early + delta, 0.0),
                tw_late=nd.tw_late - delta,
                service=max(nd.service / alpha, nd.service),
            )
        )
    return replace(inst, nodes=tuple(new_nodes), alpha=alpha)


def tightness(inst: Instance) -> float:
    """The constraint-tightness coordinate an adaptive solver conditions on.

    Capacity for capacity-constrained kinds, the window scale for CVRPTW.
    TSP has no binding constraint and is treated as infinitely loose, so
    callers should map it to the top of their tightness range.
    """
    if inst.kind is ProblemKind.CVRPTW:
        return inst.alpha
    if inst.kind is ProblemKind.TSP:
        return math.inf
    return float(inst.capacity)
