"""A transfer-based similarity score between problem kinds.

How close two routing problems are is measured by exchanging solutions:
solve each kind on the same nodes, adapt each solution to the other kind's
rules, and compare the adapted costs against the natively solved ones.
Two kinds whose solutions survive the exchange almost unchanged score near
1; kinds that force heavy rework score near 0 (or below, when an adapted
solution costs more than double the native one).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

from .baselines import oracle
from .core import DomainError, Instance, ProblemKind, Solution, solution_cost
from .transforms import TRANSFORMS, _as_kind


@dataclass(frozen=True)
class TransferCosts:
    """Mean native and exchanged objective values for a kind pair."""

    obj_a: float
    obj_b: float
    obj_b_of_a: float  # A's solution adapted to B, costed under B
    obj_a_of_b: float  # B's solution adapted to A, costed under A


def similarity(tc: TransferCosts) -> float:
    """Symmetric transfer score; 1.0 means solutions swap losslessly."""
    for name in ("obj_a", "obj_b", "obj_b_of_a", "obj_a_of_b"):
        if getattr(tc, name) <= 0:
            raise DomainError(f"{name} must be positive")
    return (1.0 - abs(tc.obj_b_of_a - tc.obj_b) / tc.obj_b) * (
        1.0 - abs(tc.obj_a_of_b - tc.obj_a) / tc.obj_a
    )


def transfer_solution(inst: Instance, sol: Solution, src: ProblemKind, dst: ProblemKind) -> Solution:
    """Adapt a solution across kinds on the same nodes."""
    if src is dst:
        return sol
    fn = TRANSFORMS.get((src, dst))
    if fn is None:
        raise DomainError(f"no transform from {src.value} to {dst.value}")
    # Each transform reads the constraint data of the side it needs; the
    # time-window conversions want the window-carrying view.
    view = ProblemKind.CVRPTW if ProblemKind.CVRPTW in (src, dst) else dst
    return fn(_as_kind(inst, view), sol)


def transfer_table(
    instances: Sequence[Instance],
    kind_a: ProblemKind,
    kind_b: ProblemKind,
    solver: Callable[[Instance], Solution] = oracle,
) -> TransferCosts:
    """Average native and exchanged costs of a kind pair over a dataset.

    Every instance is solved under both kinds' rules, each solution is
    adapted to the other kind, and all four objective values are averaged.
    Instances must carry whatever data the two kinds need (windows for
    CVRPTW, capacity for capacity kinds).
    """
    if not instances:
        raise DomainError("need at least one instance")
    sums = [0.0, 0.0, 0.0, 0.0]
    for inst in instances:
        ia, ib = _as_kind(inst, kind_a), _as_kind(inst, kind_b)
        sol_a, sol_b = solver(ia), solver(ib)
        sums[0] += solution_cost(ia, sol_a)
        sums[1] += solution_cost(ib, sol_b)
        sums[2] += solution_cost(ib, transfer_solution(inst, sol_a, kind_a, kind_b))
        sums[3] += solution_cost(ia, transfer_solution(inst, sol_b, kind_b, kind_a))
    k = len(instances)
    return TransferCosts(sums[0] / k, sums[1] / k, sums[2] / k, sums[3] / k)
