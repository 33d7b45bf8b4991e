"""Training loops for the constructive policy.

Two regimes share one step/loop skeleton: supervised cross-entropy against
oracle labels, and policy gradient with a shared multistart baseline.  Batch
work (labelling, rollouts, replays) is order-independent per instance; the
optimizer update at the end of each step is the only write to the model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import Tensor, backward, load_tensors, save_tensors, zero_grad
from .baselines import gap, oracle
from .core import DomainError, Instance, ProblemKind, Solution, solution_cost
from .generator import GenSpec, gen_batch, gen_dataset, stream_rng
from .policy import (
    Model,
    ModelConfig,
    batch_nll,
    desk_config,
    rollout_greedy,
    rollout_multistart,
)

_STREAM_SAMPLING = 3  # rollout sampling; keyed by global step for resume

CAPACITY_BUCKETS = (10, 50, 100, 200, 500)
ALPHA_BUCKETS = (0.2, 1.0, 3.0)


class TrainingDiverged(RuntimeError):
    """Loss left the reals; training state at the failing step is reported."""


# ------------------------------------------------------------------ optimizer

class Adam:
    """Adaptive-moment descent with bias correction.

    Parameters whose gradient is None are skipped entirely: no moment decay,
    no step, and an untouched per-parameter step count.  That keeps experts
    that never saw an instance byte-identical, optimizer state included.
    """

    def __init__(self, params: dict[str, Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise DomainError("learning rate must be positive")
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.counts = {k: 0 for k in params}

    def step(self) -> None:
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            t = self.counts[name] = self.counts[name] + 1
            m = self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1 ** t)
            v_hat = v / (1 - self.beta2 ** t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name in self.params:
            out["m." + name] = self.m[name]
            out["v." + name] = self.v[name]
            out["t." + name] = np.array([[float(self.counts[name])]])
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        want = {p + name for name in self.params for p in ("m.", "v.", "t.")}
        if set(arrays) != want:
            raise DomainError("optimizer state does not match the model")
        for name in self.params:
            self.m[name] = np.asarray(arrays["m." + name], dtype=np.float64)
            self.v[name] = np.asarray(arrays["v." + name], dtype=np.float64)
            self.counts[name] = int(arrays["t." + name][0, 0])


# ----------------------------------------------------------------- train spec

@dataclass(frozen=True)
class TrainSpec:
    """One training run: regime, data recipe, model shape, schedule."""

    gen: GenSpec
    model: ModelConfig = field(default_factory=desk_config)
    regime: str = "supervised"
    arm: str | None = None  # fixed | vct | vct_mem shortcut, see apply_arm
    epochs: int = 5
    batch_size: int = 32
    train_size: int = 512
    learning_rate: float = 1e-3
    decay: float = 0.9
    k_starts: int = 8
    seed: int = 0

    def __post_init__(self) -> None:
        if self.regime not in ("supervised", "policy_gradient"):
            raise DomainError(f"unknown regime {self.regime!r}")
        if self.arm not in (None, "fixed", "vct", "vct_mem"):
            raise DomainError(f"unknown arm {self.arm!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.train_size < 1:
            raise DomainError("epochs, batch_size and train_size must be >= 1")
        if self.learning_rate <= 0:
            raise DomainError("learning rate must be positive")
        if not 0 < self.decay <= 1:
            raise DomainError("decay must lie in (0, 1]")
        if self.regime == "policy_gradient" and self.k_starts < 2:
            raise DomainError("multistart baseline needs k >= 2")


def apply_arm(spec: TrainSpec) -> TrainSpec:
    """Expand the one-field ablation shortcut into data + model settings.

    fixed trains on a single mid-range tightness with one expert; vct samples
    tightness per instance, still one expert; vct_mem adds the gated experts.
    """
    if spec.arm is None:
        return spec
    gen, cfg = spec.gen, spec.model
    windows = gen.kind.has_time_windows
    if spec.arm == "fixed":
        if windows:
            gen = replace(gen, alpha=1.0, alpha_range=None)
        else:
            gen = replace(gen, capacity=50, capacity_range=None)
        cfg = replace(cfg, experts=1)
    else:
        if windows:
            gen = replace(gen, alpha=None, alpha_range=(0.0, 3.0))
        else:
            gen = replace(gen, capacity=None, capacity_range=(10, 500))
        cfg = replace(cfg, experts=1 if spec.arm == "vct" else 3)
    if windows:
        cfg = replace(cfg, tightness_range=(0.2, 3.0))
    return replace(spec, gen=gen, model=cfg)


def vct_sample(gen: GenSpec, batch_size: int, batch_index: int = 0) -> list[Instance]:
    """Draw one training batch; tightness assignment follows gen.assignment."""
    return gen_batch(gen, batch_size, batch_index)


def training_batches(spec: TrainSpec) -> list[list[Instance]]:
    out = []
    made = 0
    index = 0
    while made < spec.train_size:
        size = min(spec.batch_size, spec.train_size - made)
        out.append(vct_sample(spec.gen, size, index))
        made += size
        index += 1
    return out


# -------------------------------------------------------------------- labels

def oracle_labels(
    instances: list[Instance],
    cache: dict[Instance, tuple[int, ...]] | None = None,
) -> list[tuple[int, ...]]:
    """Polished-heuristic visit sequences, memoized across runs via cache."""
    out = []
    for inst in instances:
        if cache is not None and inst in cache:
            out.append(cache[inst])
            continue
        visits = oracle(inst).visits
        if cache is not None:
            cache[inst] = visits
        out.append(visits)
    return out


# --------------------------------------------------------------------- steps

# Fused tapes hold every intermediate until backward; chunking the batch
# caps that at a few hundred megabytes without changing the gradient.
_CHUNK_EPISODES = 32


def supervised_step(
    model: Model,
    optimizer: Adam,
    batch: list[Instance],
    labels: list[tuple[int, ...]],
) -> float:
    """Teacher-forced cross-entropy step; returns the batch loss.

    Loss is the per-step mean cross-entropy within each episode, averaged
    over the batch.  The whole chunk is scored on one fused tape.
    """
    zero_grad(model.parameters())
    total = 0.0
    b = len(batch)
    for at in range(0, b, _CHUNK_EPISODES):
        chunk = slice(at, at + _CHUNK_EPISODES)
        loss, _ = batch_nll(model, batch[chunk], labels[chunk],
                            [1.0 / b] * len(batch[chunk]), per_step_mean=True)
        total += float(loss.data[0, 0])
        backward(loss)
    optimizer.step()
    return total


def advantages(costs: np.ndarray) -> np.ndarray:
    """Costs centered by the shared multistart mean; always sums to 0."""
    return costs - costs.mean()


def policy_gradient_step(
    model: Model,
    optimizer: Adam,
    batch: list[Instance],
    k: int,
    rng: np.random.Generator,
) -> float:
    """Multistart policy-gradient step; returns the minimized surrogate.

    Each instance gets k sampled rollouts with distinct forced first moves;
    the advantage is the rollout cost minus the k-rollout mean.  Rollouts
    are replayed teacher-forced and weighted so that descent raises the
    likelihood of below-average-cost solutions: the surrogate is the mean
    of advantage times log-likelihood, whose gradient is the classic
    score-function estimate of the expected-cost gradient.
    """
    if k < 2:
        raise DomainError("multistart baseline needs k >= 2")
    zero_grad(model.parameters())
    b = len(batch)
    insts: list[Instance] = []
    visits: list[tuple[int, ...]] = []
    firsts: list[int | None] = []
    weights: list[float] = []
    for inst in batch:
        outs = rollout_multistart(inst, model, k, rng=rng)
        costs = np.array([solution_cost(inst, sol) for sol, _ in outs])
        for (sol, _), adv in zip(outs, advantages(costs)):
            if adv == 0.0:
                continue
            insts.append(inst)
            visits.append(sol.visits)
            firsts.append(sol.visits[1])
            weights.append(-adv / (k * b))
    total = 0.0
    for at in range(0, len(insts), _CHUNK_EPISODES):
        chunk = slice(at, at + _CHUNK_EPISODES)
        loss, _ = batch_nll(model, insts[chunk], visits[chunk], weights[chunk],
                            forced_firsts=firsts[chunk])
        total += float(loss.data[0, 0])
        backward(loss)
    optimizer.step()
    return total


# ----------------------------------------------------------------- evaluation

def eval_buckets(
    kind: ProblemKind, n: int, seed: int, per_bucket: int, capacity: int = 50
) -> dict[str, list[Instance]]:
    """Held-out sets, one per tightness bucket, sharing geometry across
    buckets so gap differences isolate the tightness effect."""
    if kind.has_time_windows:
        specs = [(f"alpha={a}", GenSpec(kind=kind, n=n, seed=seed, count=per_bucket,
                                        capacity=capacity, alpha=a))
                 for a in ALPHA_BUCKETS]
    elif kind.has_capacity:
        specs = [(f"C={c}", GenSpec(kind=kind, n=n, seed=seed, count=per_bucket,
                                    capacity=c))
                 for c in CAPACITY_BUCKETS]
    else:
        specs = [("all", GenSpec(kind=kind, n=n, seed=seed, count=per_bucket))]
    return {label: gen_dataset(spec) for label, spec in specs}


def reference_costs(
    eval_sets: dict[str, list[Instance]],
    cache: dict[Instance, float] | None = None,
) -> dict[str, list[float]]:
    out: dict[str, list[float]] = {}
    for bucket, insts in eval_sets.items():
        costs = []
        for inst in insts:
            if cache is not None and inst in cache:
                costs.append(cache[inst])
                continue
            c = solution_cost(inst, oracle(inst))
            if cache is not None:
                cache[inst] = c
            costs.append(c)
        out[bucket] = costs
    return out


def bucket_gaps(
    solve,
    eval_sets: dict[str, list[Instance]],
    ref_costs: dict[str, list[float]],
) -> dict[str, float]:
    """Mean percentage gap of solve(inst) against reference costs, per bucket."""
    out = {}
    for bucket, insts in eval_sets.items():
        gaps = [gap(solution_cost(inst, solve(inst)), ref)
                for inst, ref in zip(insts, ref_costs[bucket])]
        out[bucket] = float(np.mean(gaps))
    return out


def greedy_solver(model: Model):
    return lambda inst: rollout_greedy(inst, model)


# ----------------------------------------------------------------- train loop

@dataclass
class TrainResult:
    model: Model
    metrics: list[dict]
    checkpoints: list[Path]


def _checkpoint(out_dir: Path, epoch: int, model: Model, opt: Adam) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"model_e{epoch:03d}.bin"
    model.save(path)
    save_tensors(out_dir / f"adam_e{epoch:03d}.bin", opt.state_arrays())
    return path


def train(
    spec: TrainSpec,
    model: Model | None = None,
    *,
    batches: list[list[Instance]] | None = None,
    labels: dict[Instance, tuple[int, ...]] | None = None,
    eval_sets: dict[str, list[Instance]] | None = None,
    ref_costs: dict[str, list[float]] | None = None,
    out_dir: str | Path | None = None,
    start_epoch: int = 0,
    adam_state: dict[str, np.ndarray] | None = None,
) -> TrainResult:
    """Run (or resume) one training spec.

    Batches and sampling streams are keyed by counters, and checkpoints
    carry optimizer state, so resuming from epoch E reproduces a straight
    run bit for bit.  Any non-finite loss aborts with the failing position.
    """
    spec = apply_arm(spec)
    if model is None:
        model = Model(spec.model, seed=spec.seed)
    opt = Adam(model.params, lr=spec.learning_rate)
    if adam_state is not None:
        opt.load_state_arrays(adam_state)
    if eval_sets is not None and ref_costs is None:
        ref_costs = reference_costs(eval_sets)

    if batches is None:
        batches = training_batches(spec)
    if spec.regime == "supervised" and labels is None:
        labels = {}

    metrics: list[dict] = []
    checkpoints: list[Path] = []
    global_step = start_epoch * len(batches)
    for epoch in range(start_epoch, spec.epochs):
        opt.lr = spec.learning_rate * spec.decay ** epoch
        for batch in batches:
            if spec.regime == "supervised":
                loss = supervised_step(model, opt, batch, oracle_labels(batch, labels))
            else:
                rng = stream_rng(spec.seed, _STREAM_SAMPLING, global_step)
                loss = policy_gradient_step(model, opt, batch, spec.k_starts, rng)
            if not math.isfinite(loss):
                raise TrainingDiverged(
                    f"loss {loss} at epoch {epoch}, step {global_step}"
                )
            metrics.append({"epoch": epoch, "step": global_step,
                            "loss": loss, "bucket": "", "gap_pct": ""})
            global_step += 1
        if eval_sets is not None:
            assert ref_costs is not None
            for bucket, g in bucket_gaps(greedy_solver(model), eval_sets, ref_costs).items():
                metrics.append({"epoch": epoch, "step": global_step,
                                "loss": "", "bucket": bucket, "gap_pct": g})
        if out_dir is not None:
            checkpoints.append(_checkpoint(Path(out_dir), epoch, model, opt))
    return TrainResult(model=model, metrics=metrics, checkpoints=checkpoints)


def desk_train_spec(
    kind: ProblemKind = ProblemKind.CVRP,
    regime: str = "supervised",
    seed: int = 0,
    arm: str | None = None,
    **overrides,
) -> TrainSpec:
    """Preset sized for a single desktop CPU (minutes, not days)."""
    gen = _base_gen(kind, n=20, seed=seed)
    base = dict(gen=gen, model=desk_config(), regime=regime, arm=arm,
                epochs=5, batch_size=32, train_size=1024,
                learning_rate=1e-3, decay=0.9, k_starts=8, seed=seed)
    base.update(overrides)
    return TrainSpec(**base)


def paper_train_spec(
    kind: ProblemKind = ProblemKind.CVRP,
    regime: str = "supervised",
    seed: int = 0,
    arm: str | None = None,
    **overrides,
) -> TrainSpec:
    """Published protocol: 40 epochs at batch 512 on n=100 instances."""
    from .policy import paper_config

    gen = _base_gen(kind, n=100, seed=seed)
    base = dict(gen=gen, model=paper_config(), regime=regime, arm=arm,
                epochs=40, batch_size=512, train_size=102_400,
                learning_rate=1e-4, decay=0.9, k_starts=8, seed=seed)
    base.update(overrides)
    return TrainSpec(**base)


def _base_gen(kind: ProblemKind, n: int, seed: int) -> GenSpec:
    if kind.has_time_windows:
        return GenSpec(kind=kind, n=n, seed=seed, capacity=50, alpha=1.0)
    if kind.has_capacity:
        return GenSpec(kind=kind, n=n, seed=seed, capacity=50)
    return GenSpec(kind=kind, n=n, seed=seed)


def resume(
    spec: TrainSpec,
    out_dir: str | Path,
    *,
    labels: dict[Instance, tuple[int, ...]] | None = None,
    eval_sets: dict[str, list[Instance]] | None = None,
    ref_costs: dict[str, list[float]] | None = None,
) -> TrainResult:
    """Continue a checkpointed run from its latest epoch."""
    out = Path(out_dir)
    saved = sorted(out.glob("model_e*.bin"))
    if not saved:
        raise DomainError(f"no checkpoints under {out}")
    last = saved[-1]
    epoch = int(last.stem.split("_e")[1])
    model = Model.load(last)
    state = load_tensors(out / f"adam_e{epoch:03d}.bin")
    return train(apply_arm(spec), model, labels=labels, eval_sets=eval_sets,
                 ref_costs=ref_costs, out_dir=out, start_epoch=epoch + 1,
                 adam_state=state)
