"""Command-line front door.

Subcommands: gen, solve, transform, similarity, train, eval, gapstats.
Exit codes: 0 success, 2 bad usage or parameters, 3 malformed files,
4 infeasible input.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import sys
import time
from collections import defaultdict
from pathlib import Path

from .baselines import clarke_wright, gap, nearest_neighbor, oracle
from .core import (
    DomainError,
    Instance,
    InfeasibleError,
    ProblemKind,
    StructureError,
    solution_cost,
    validate,
)
from .fileio import (
    FormatError,
    check_solutions_cover,
    read_instances,
    read_results,
    read_solutions,
    write_instances,
    write_results,
    write_solutions,
)
from .generator import GenSpec, gen_dataset
from .policy import DeadEndError, Model, rollout_greedy
from .similarity import similarity, transfer_solution, transfer_table
from .training import (
    TrainingDiverged,
    desk_train_spec,
    eval_buckets,
    paper_train_spec,
    train,
)
from .transforms import TRANSFORMS, _as_kind

_KINDS = {k.value: k for k in ProblemKind}
_TRANSFORM_NAMES = {f"{src.value}_to_{dst.value}": (src, dst)
                    for src, dst in TRANSFORMS}


def _kind(value: str) -> ProblemKind:
    return ProblemKind(value)


def _solver(method: str, checkpoint: str | None):
    if method == "nn":
        return nearest_neighbor
    if method == "cw":
        return clarke_wright
    if method == "oracle":
        return oracle
    if method == "neural":
        if not checkpoint:
            raise DomainError("--method neural requires --checkpoint")
        model = Model.load(checkpoint)
        return lambda inst: rollout_greedy(inst, model)
    raise DomainError(f"unknown method {method!r}")


def _bucket_label(inst: Instance) -> str:
    if inst.kind.has_time_windows:
        return f"alpha={inst.alpha:g}"
    if inst.kind.has_capacity:
        return f"C={inst.capacity}"
    return "all"


# ------------------------------------------------------------------ commands

def _cmd_gen(args) -> int:
    fields = dict(kind=_kind(args.kind), n=args.n, seed=args.seed,
                  count=args.count, assignment=args.assignment)
    if args.capacity is not None:
        fields["capacity"] = args.capacity
    if args.capacity_range is not None:
        fields["capacity_range"] = tuple(args.capacity_range)
    if args.alpha is not None:
        fields["alpha"] = args.alpha
    if args.alpha_range is not None:
        fields["alpha_range"] = tuple(args.alpha_range)
    write_instances(args.out, gen_dataset(GenSpec(**fields)))
    return 0


def _cmd_solve(args) -> int:
    instances = read_instances(args.data)
    solve = _solver(args.method, args.checkpoint)
    solutions = []
    for inst in instances:
        sol = solve(inst)
        if not validate(inst, sol):
            raise InfeasibleError(f"{args.method} produced an infeasible solution")
        solutions.append(sol)
    write_solutions(args.out, solutions)
    return 0


def _cmd_transform(args) -> int:
    src, dst = _TRANSFORM_NAMES[args.name]
    instances = read_instances(args.data)
    solutions = read_solutions(args.solutions)
    check_solutions_cover(instances, solutions)
    out = []
    for inst, sol in zip(instances, solutions):
        moved = transfer_solution(inst, sol, src, dst)
        if not validate(_as_kind(inst, dst), moved):
            raise InfeasibleError("transformed solution failed validation")
        out.append(moved)
    write_solutions(args.out, out)
    return 0


def _cmd_similarity(args) -> int:
    instances = read_instances(args.data)
    kind_a, kind_b = _kind(args.kind_a), _kind(args.kind_b)
    tc = transfer_table(instances, kind_a, kind_b)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind_a", "kind_b", "obj_a", "obj_b",
                         "obj_b_of_a", "obj_a_of_b", "similarity_pct"])
        writer.writerow([kind_a.value, kind_b.value, f"{tc.obj_a:.6f}",
                         f"{tc.obj_b:.6f}", f"{tc.obj_b_of_a:.6f}",
                         f"{tc.obj_a_of_b:.6f}", f"{100.0 * similarity(tc):.2f}"])
    return 0


def _cmd_train(args) -> int:
    preset = desk_train_spec if args.preset == "desk" else paper_train_spec
    overrides = {}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.batch_size is not None:
        overrides["batch_size"] = args.batch_size
    if args.train_size is not None:
        overrides["train_size"] = args.train_size
    if args.lr is not None:
        overrides["learning_rate"] = args.lr
    if args.n is not None:
        gen = preset(_kind(args.kind), seed=args.seed).gen
        overrides["gen"] = dataclasses.replace(gen, n=args.n)
    spec = preset(_kind(args.kind), regime=args.regime, seed=args.seed,
                  arm=args.arm, **overrides)
    out = Path(args.out)
    sets = eval_buckets(spec.gen.kind, spec.gen.n, seed=args.seed + 10_000,
                        per_bucket=args.eval_per_bucket)
    result = train(spec, eval_sets=sets, out_dir=out)
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "step", "loss",
                                                "bucket", "gap_pct"])
        writer.writeheader()
        for row in result.metrics:
            writer.writerow(row)
    print(f"trained {spec.epochs} epochs; checkpoints in {out}")
    return 0


def _cmd_eval(args) -> int:
    instances = read_instances(args.data)
    solve = _solver(args.method, args.checkpoint)
    dataset = args.dataset or Path(args.data).stem
    by_bucket: dict[str, list[Instance]] = defaultdict(list)
    for inst in instances:
        by_bucket[_bucket_label(inst)].append(inst)
    rows = []
    for bucket in sorted(by_bucket):
        insts = by_bucket[bucket]
        refs = [solution_cost(i, oracle(i)) for i in insts]
        start = time.perf_counter()
        costs = []
        for inst in insts:
            sol = solve(inst)
            if not validate(inst, sol):
                raise InfeasibleError(f"{args.method} infeasible on {bucket}")
            costs.append(solution_cost(inst, sol))
        wall_ms = (time.perf_counter() - start) * 1000.0
        gaps = [gap(c, r) for c, r in zip(costs, refs)]
        rows.append({
            "dataset": dataset, "bucket": bucket, "method": args.method,
            "mean_cost": f"{sum(costs) / len(costs):.6f}",
            "mean_gap_pct": f"{sum(gaps) / len(gaps):.4f}",
            "instances": len(insts), "wall_ms": f"{wall_ms:.1f}",
        })
    write_results(args.out, rows)
    return 0


def _cmd_gapstats(args) -> int:
    rows = []
    for path in args.results:
        rows.extend(read_results(path))
    cells: dict[tuple[str, str], list[float]] = defaultdict(list)
    buckets: list[str] = []
    methods: list[str] = []
    for row in rows:
        key = (row["method"], row["bucket"])
        cells[key].append(row["mean_gap_pct"])
        if row["bucket"] not in buckets:
            buckets.append(row["bucket"])
        if row["method"] not in methods:
            methods.append(row["method"])

    header = ["method", *buckets, "avg_gap"]
    if args.in_domain:
        if args.in_domain not in buckets:
            raise DomainError(f"in-domain bucket {args.in_domain!r} not present")
        header.append("expansion")
    table = [header]
    for method in methods:
        gaps = []
        for bucket in buckets:
            vals = cells.get((method, bucket))
            if vals is None:
                raise DomainError(f"method {method!r} missing bucket {bucket!r}")
            gaps.append(sum(vals) / len(vals))
        row = [method, *(f"{g:.4f}" for g in gaps),
               f"{sum(gaps) / len(gaps):.4f}"]
        if args.in_domain:
            inside = gaps[buckets.index(args.in_domain)]
            outside = [g for b, g in zip(buckets, gaps) if b != args.in_domain]
            ratio = (sum(outside) / len(outside)) / inside if inside > 0 else float("inf")
            row.append(f"{ratio:.3f}")
        table.append(row)

    text = "\n".join(",".join(str(c) for c in line) for line in table) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vrplab",
                                     description="Routing-lab command line")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate an instance dataset")
    gen.add_argument("--kind", required=True, choices=sorted(_KINDS))
    gen.add_argument("--n", type=int, required=True)
    gen.add_argument("--count", type=int, default=1)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--capacity", type=int)
    gen.add_argument("--capacity-range", type=int, nargs=2, metavar=("LO", "HI"))
    gen.add_argument("--alpha", type=float)
    gen.add_argument("--alpha-range", type=float, nargs=2, metavar=("LO", "HI"))
    gen.add_argument("--assignment", choices=["instance", "batch"],
                     default="instance")
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=_cmd_gen)

    solve = sub.add_parser("solve", help="solve a dataset with one method")
    solve.add_argument("--data", required=True)
    solve.add_argument("--method", required=True,
                       choices=["nn", "cw", "oracle", "neural"])
    solve.add_argument("--checkpoint")
    solve.add_argument("--out", required=True)
    solve.set_defaults(func=_cmd_solve)

    tr = sub.add_parser("transform", help="adapt solutions to another kind")
    tr.add_argument("--name", required=True, choices=sorted(_TRANSFORM_NAMES))
    tr.add_argument("--data", required=True)
    tr.add_argument("--solutions", required=True)
    tr.add_argument("--out", required=True)
    tr.set_defaults(func=_cmd_transform)

    sim = sub.add_parser("similarity", help="cross-kind transfer costs CSV")
    sim.add_argument("--data", required=True)
    sim.add_argument("--kind-a", required=True, choices=sorted(_KINDS))
    sim.add_argument("--kind-b", required=True, choices=sorted(_KINDS))
    sim.add_argument("--out", required=True)
    sim.set_defaults(func=_cmd_similarity)

    trn = sub.add_parser("train", help="train a policy")
    trn.add_argument("--kind", default="cvrp", choices=sorted(_KINDS))
    trn.add_argument("--regime", default="supervised",
                     choices=["supervised", "policy_gradient"])
    trn.add_argument("--arm", choices=["fixed", "vct", "vct_mem"])
    trn.add_argument("--preset", default="desk", choices=["desk", "paper"])
    trn.add_argument("--seed", type=int, default=0)
    trn.add_argument("--n", type=int)
    trn.add_argument("--epochs", type=int)
    trn.add_argument("--batch-size", type=int)
    trn.add_argument("--train-size", type=int)
    trn.add_argument("--lr", type=float)
    trn.add_argument("--eval-per-bucket", type=int, default=8)
    trn.add_argument("--out", required=True)
    trn.set_defaults(func=_cmd_train)

    ev = sub.add_parser("eval", help="per-bucket gaps against the oracle")
    ev.add_argument("--data", required=True)
    ev.add_argument("--method", required=True,
                    choices=["nn", "cw", "oracle", "neural"])
    ev.add_argument("--checkpoint")
    ev.add_argument("--dataset")
    ev.add_argument("--out", required=True)
    ev.set_defaults(func=_cmd_eval)

    gs = sub.add_parser("gapstats", help="aggregate result CSVs into a table")
    gs.add_argument("--results", nargs="+", required=True)
    gs.add_argument("--in-domain", metavar="BUCKET",
                    help="also emit out-of-domain/in-domain gap ratios")
    gs.add_argument("--out")
    gs.set_defaults(func=_cmd_gapstats)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return 3
    except (InfeasibleError, StructureError, DeadEndError) as exc:
        print(f"infeasible input: {exc}", file=sys.stderr)
        return 4
    except (DomainError, TrainingDiverged, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
