"""Text formats: instance blocks, solution lines, results CSV.

Instances serialize as one block per instance: a header line
``VRPT 1 <kind> <n> <capacity> <alpha>`` followed by n+1 node lines
``<index> <x> <y> <demand> <e> <l> <s>`` (zeros where a field does not
apply).  Floats print at 9 significant digits, which is also the
generator's quantization, so write -> parse round-trips exactly.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path

from .core import Instance, Node, ProblemKind, Solution, StructureError

_HEADER = "VRPT"
_VERSION = 1


class FormatError(ValueError):
    """Malformed instance, solution, or results text."""


def _fmt(value: float) -> str:
    return f"{value:.9g}"


def format_instance(inst: Instance) -> str:
    lines = [
        f"{_HEADER} {_VERSION} {inst.kind.value} {len(inst.nodes) - 1} "
        f"{_fmt(inst.capacity)} {_fmt(inst.alpha)}"
    ]
    for i, nd in enumerate(inst.nodes):
        lines.append(
            f"{i} {_fmt(nd.x)} {_fmt(nd.y)} {_fmt(nd.demand)} "
            f"{_fmt(nd.tw_early)} {_fmt(nd.tw_late)} {_fmt(nd.service)}"
        )
    return "\n".join(lines) + "\n"


def write_instances(path: str | Path, instances: list[Instance]) -> None:
    Path(path).write_text("".join(format_instance(i) for i in instances))


def _parse_node(parts: list[str], want_index: int, line_no: int) -> Node:
    if len(parts) != 7:
        raise FormatError(f"line {line_no}: expected 7 node fields, got {len(parts)}")
    try:
        index = int(parts[0])
        values = [float(p) for p in parts[1:]]
    except ValueError as exc:
        raise FormatError(f"line {line_no}: {exc}") from None
    if index != want_index:
        raise FormatError(f"line {line_no}: node index {index}, expected {want_index}")
    x, y, demand, early, late, service = values
    if demand != int(demand):
        raise FormatError(f"line {line_no}: fractional demand {demand}")
    return Node(index=index, x=x, y=y, demand=int(demand), tw_early=early,
                tw_late=late, service=service)


def parse_instances(text: str) -> list[Instance]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    out = []
    at = 0
    while at < len(lines):
        parts = lines[at].split()
        if len(parts) != 6 or parts[0] != _HEADER:
            raise FormatError(f"line {at + 1}: bad header {lines[at]!r}")
        if parts[1] != str(_VERSION):
            raise FormatError(f"line {at + 1}: unsupported version {parts[1]}")
        try:
            kind = ProblemKind(parts[2])
        except ValueError:
            raise FormatError(f"line {at + 1}: unknown kind {parts[2]!r}") from None
        try:
            n = int(parts[3])
            capacity = float(parts[4])
            alpha = float(parts[5])
        except ValueError as exc:
            raise FormatError(f"line {at + 1}: {exc}") from None
        if n < 1:
            raise FormatError(f"line {at + 1}: instance needs customers")
        if at + 1 + n + 1 > len(lines):
            raise FormatError(f"line {at + 1}: truncated instance block")
        nodes = tuple(
            _parse_node(lines[at + 1 + i].split(), i, at + 2 + i)
            for i in range(n + 1)
        )
        if capacity != int(capacity):
            raise FormatError(f"line {at + 1}: fractional capacity {capacity}")
        out.append(Instance(kind=kind, nodes=nodes, capacity=int(capacity),
                            alpha=alpha))
        at += n + 2
    return out


def read_instances(path: str | Path) -> list[Instance]:
    return parse_instances(Path(path).read_text())


# ----------------------------------------------------------------- solutions

def write_solutions(path: str | Path, solutions: list[Solution]) -> None:
    lines = [" ".join(str(v) for v in sol.visits) for sol in solutions]
    Path(path).write_text("\n".join(lines) + "\n" if lines else "")


def read_solutions(path: str | Path) -> list[Solution]:
    out = []
    for line_no, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            visits = tuple(int(v) for v in line.split())
        except ValueError as exc:
            raise FormatError(f"line {line_no}: {exc}") from None
        out.append(Solution(visits=visits))
    return out


# --------------------------------------------------------------- results CSV

RESULT_FIELDS = ["dataset", "bucket", "method", "mean_cost", "mean_gap_pct",
                 "instances", "wall_ms"]


def write_results(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def read_results(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != RESULT_FIELDS:
            raise FormatError(f"bad results header {reader.fieldnames}")
        rows = []
        for row in reader:
            try:
                row["mean_cost"] = float(row["mean_cost"])
                row["mean_gap_pct"] = float(row["mean_gap_pct"])
                row["instances"] = int(row["instances"])
                row["wall_ms"] = float(row["wall_ms"])
            except (TypeError, ValueError) as exc:
                raise FormatError(f"bad results row {row}: {exc}") from None
            rows.append(row)
        return rows


def results_to_text(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=RESULT_FIELDS)
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()


def check_solutions_cover(instances: list[Instance], solutions: list[Solution]) -> None:
    if len(instances) != len(solutions):
        raise StructureError(
            f"{len(solutions)} solutions for {len(instances)} instances"
        )
