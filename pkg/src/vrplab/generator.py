"""Seeded instance generation across constraint-tightness regimes.

Every random draw comes from a Philox counter-based generator keyed by
(seed, stream tag, draw index), so any instance is addressable directly:
the same (spec, draw_index) pair always produces a bit-identical instance,
with no sequential generator state to carry around.

Draw order inside one instance is fixed: coordinates, demands, window
centers (CVRPTW), then the tightness parameters (capacity and/or alpha)
when they are range-sampled.  Batch-level assignment replaces the
per-instance tightness draw with a single draw shared by the whole batch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import DomainError, Instance, Node, ProblemKind, apply_tightness

# Fixed time geometry for generated CVRPTW instances.
DEPOT_DEADLINE = 3.0
SERVICE_TIME = 0.2
WINDOW_HALF_WIDTH = 0.25

# Stream tags keep independent draw families from colliding.
_STREAM_INSTANCE = 0
_STREAM_BATCH = 1

_DEMAND_LOW, _DEMAND_HIGH = 1, 9


def stream_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    """Generator addressed by (seed, stream, index); stateless across calls."""
    return np.random.Generator(np.random.Philox(key=[seed, (stream << 56) + index]))


def _quant(value: float) -> float:
    # Coordinates and times are materialized at 9 significant digits so the
    # text serialization round-trips bit-exactly.
    return float(f"{value:.9g}")


@dataclass(frozen=True)
class GenSpec:
    """Declarative description of a generated dataset.

    Exactly one of ``capacity``/``capacity_range`` must be set for
    capacity-constrained kinds, and one of ``alpha``/``alpha_range`` for
    CVRPTW.  ``assignment`` chooses whether range-mode tightness is drawn
    per instance or once per batch.  ``alpha_floor`` is the smallest window
    scale the generator will actually apply: below it, far-from-depot
    customers stop being individually serviceable within the depot
    deadline, which would make instances unsolvable.  Draws under the floor
    are clamped to it (set the floor to 0 to disable).
    """

    kind: ProblemKind
    n: int
    seed: int = 0
    count: int = 1
    capacity: int | None = None
    capacity_range: tuple[int, int] | None = None
    alpha: float | None = None
    alpha_range: tuple[float, float] | None = None
    assignment: str = "instance"
    alpha_floor: float = 0.2

    def __post_init__(self) -> None:
        if self.n < 1:
            raise DomainError("need at least one customer")
        if self.assignment not in ("instance", "batch"):
            raise DomainError(f"unknown assignment mode {self.assignment!r}")
        if self.kind.has_capacity:
            if (self.capacity is None) == (self.capacity_range is None):
                raise DomainError("set exactly one of capacity / capacity_range")
            if self.capacity is not None and self.capacity < _DEMAND_HIGH:
                raise DomainError(f"capacity must cover the largest demand ({_DEMAND_HIGH})")
            if self.capacity_range is not None:
                lo, hi = self.capacity_range
                if lo < _DEMAND_HIGH or hi < lo:
                    raise DomainError(f"bad capacity range ({lo}, {hi})")
        elif self.capacity is not None or self.capacity_range is not None:
            raise DomainError("TSP takes no capacity")
        if self.kind.has_time_windows:
            if (self.alpha is None) == (self.alpha_range is None):
                raise DomainError("set exactly one of alpha / alpha_range")
            if self.alpha is not None and self.alpha <= 0:
                raise DomainError("alpha must be positive")
            if self.alpha_range is not None:
                lo, hi = self.alpha_range
                # lo = 0 is allowed: the floor clamp keeps applied scales serviceable
                if lo < 0 or hi <= 0 or hi < lo:
                    raise DomainError(f"bad alpha range ({lo}, {hi})")
        elif self.alpha is not None or self.alpha_range is not None:
            raise DomainError("time-window scale applies to CVRPTW only")


def _base_windows(
    rng: np.random.Generator, xy: np.ndarray, alpha_floor: float
) -> list[tuple[float, float, float]]:
    """Base (alpha = 1) windows guaranteeing each customer a feasible
    single-customer round trip for every window scale >= alpha_floor.

    The window center is drawn between the earliest possible arrival and
    the latest start that still allows the worst-case (floor-scaled)
    service plus the trip home before the depot deadline.
    """
    worst_service = SERVICE_TIME / alpha_floor if 0 < alpha_floor < 1 else SERVICE_TIME
    out = []
    n = xy.shape[0] - 1
    centers = rng.uniform(size=n)
    for i in range(1, n + 1):
        trip = math.hypot(xy[i, 0] - xy[0, 0], xy[i, 1] - xy[0, 1])
        lo = trip
        hi = max(lo, DEPOT_DEADLINE - worst_service - trip - 1e-6)
        u = lo + (hi - lo) * centers[i - 1]
        early = max(u - WINDOW_HALF_WIDTH, 0.0)
        late = min(u + WINDOW_HALF_WIDTH, DEPOT_DEADLINE)
        out.append((_quant(early), _quant(late), SERVICE_TIME))
    return out


def _build(
    spec: GenSpec,
    draw_index: int,
    capacity_override: int | None,
    alpha_override: float | None,
) -> Instance:
    rng = stream_rng(spec.seed, _STREAM_INSTANCE, draw_index)
    n = spec.n
    xy = rng.uniform(size=(n + 1, 2))
    if spec.kind.has_time_windows:
        # A centered depot keeps every customer within round-trip reach of
        # the deadline even at the tightest supported window scale.
        xy[0] = (0.5, 0.5)
    xy = np.array([[_quant(v) for v in row] for row in xy])

    if spec.kind.has_capacity:
        demands = rng.integers(_DEMAND_LOW, _DEMAND_HIGH + 1, size=n)
    else:
        demands = np.zeros(n, dtype=int)

    windows = _base_windows(rng, xy, spec.alpha_floor) if spec.kind.has_time_windows else None

    capacity = 0
    if spec.kind.has_capacity:
        if capacity_override is not None:
            capacity = capacity_override
        elif spec.capacity is not None:
            capacity = spec.capacity
        else:
            lo, hi = spec.capacity_range
            capacity = int(rng.integers(lo, hi + 1))

    alpha = 1.0
    if spec.kind.has_time_windows:
        if alpha_override is not None:
            alpha = alpha_override
        elif spec.alpha is not None:
            alpha = spec.alpha
        else:
            lo, hi = spec.alpha_range
            alpha = _quant(rng.uniform(lo, hi))

    nodes = [Node(0, float(xy[0, 0]), float(xy[0, 1]))]
    if windows is not None:
        nodes[0] = Node(0, float(xy[0, 0]), float(xy[0, 1]), 0, 0.0, DEPOT_DEADLINE, 0.0)
    for i in range(1, n + 1):
        if windows is None:
            nodes.append(Node(i, float(xy[i, 0]), float(xy[i, 1]), int(demands[i - 1])))
        else:
            e, l, s = windows[i - 1]
            nodes.append(Node(i, float(xy[i, 0]), float(xy[i, 1]), int(demands[i - 1]), e, l, s))

    inst = Instance(kind=spec.kind, nodes=tuple(nodes), capacity=capacity, alpha=1.0)
    if spec.kind.has_time_windows:
        applied = max(alpha, spec.alpha_floor) if spec.alpha_floor > 0 else alpha
        inst = _quant_windows(apply_tightness(inst, applied))
    return inst


def _quant_windows(inst: Instance) -> Instance:
    """Snap window fields onto the 9-significant-digit serialization grid."""
    nodes = tuple(
        Node(nd.index, nd.x, nd.y, nd.demand, _quant(nd.tw_early),
             _quant(nd.tw_late), _quant(nd.service))
        for nd in inst.nodes
    )
    return Instance(kind=inst.kind, nodes=nodes, capacity=inst.capacity,
                    alpha=inst.alpha)


def gen_instance(spec: GenSpec, draw_index: int = 0) -> Instance:
    """The draw_index-th instance of the spec; bit-identical across calls."""
    return _build(spec, draw_index, None, None)


def gen_batch(spec: GenSpec, batch_size: int, batch_index: int = 0) -> list[Instance]:
    """A batch of instances; draw indices are ``batch_index * batch_size + i``.

    Under batch-level assignment, one tightness draw (capacity and/or
    alpha, whichever is range-mode) is shared by every instance in the
    batch.
    """
    capacity_override = None
    alpha_override = None
    if spec.assignment == "batch":
        brng = stream_rng(spec.seed, _STREAM_BATCH, batch_index)
        if spec.kind.has_capacity and spec.capacity_range is not None:
            lo, hi = spec.capacity_range
            capacity_override = int(brng.integers(lo, hi + 1))
        if spec.kind.has_time_windows and spec.alpha_range is not None:
            lo, hi = spec.alpha_range
            alpha_override = _quant(brng.uniform(lo, hi))
    base = batch_index * batch_size
    return [_build(spec, base + i, capacity_override, alpha_override) for i in range(batch_size)]


def gen_dataset(spec: GenSpec, offset: int = 0) -> list[Instance]:
    """All ``spec.count`` instances, draw indices offset..offset+count-1."""
    return [gen_instance(spec, offset + i) for i in range(spec.count)]


def gen_cvrptw_base(n: int, seed: int, draw_index: int = 0, capacity: int = 50) -> Instance:
    """A base (alpha = 1) time-window instance, before any tightening."""
    spec = GenSpec(kind=ProblemKind.CVRPTW, n=n, seed=seed, capacity=capacity, alpha=1.0)
    return _build(spec, draw_index, None, None)
