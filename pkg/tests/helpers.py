"""Small builders shared across the test modules."""
from __future__ import annotations

from vrplab.core import Instance, Node, ProblemKind, Solution


def make_instance(kind, points, demands=None, capacity=0, windows=None, alpha=1.0):
    """Build an instance from raw tuples.

    ``points`` is [(x, y), ...] with the depot first; ``windows`` is
    [(early, late, service), ...] aligned with points (depot included).
    """
    n = len(points)
    demands = demands or [0] * n
    nodes = []
    for i, (x, y) in enumerate(points):
        if windows is not None:
            e, l, s = windows[i]
            nodes.append(Node(i, x, y, demands[i], e, l, s))
        else:
            nodes.append(Node(i, x, y, demands[i]))
    return Instance(kind=kind, nodes=tuple(nodes), capacity=capacity, alpha=alpha)


def sol(*visits) -> Solution:
    return Solution(visits=tuple(visits))


def as_kind(inst: Instance, kind: ProblemKind) -> Instance:
    """The same nodes viewed under another kind's rules."""
    if inst.kind is kind:
        return inst
    return Instance(kind=kind, nodes=inst.nodes, capacity=inst.capacity, alpha=inst.alpha)
