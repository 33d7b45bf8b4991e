"""Constructive routing policy: light encoder, heavy decoder, gated experts.

The network builds solutions one node at a time.  A shared encoder embeds
the nodes once; each decoding step embeds the partial-route context,
attends over the still-unvisited nodes, and produces a probability row
over the feasible next moves.  The final probability head is a bank of
expert layers with a hard gate keyed by the instance's constraint
tightness, so instances of different tightness train different heads.

Two decoder styles are provided: ``expert_stack`` (a deep trunk of
self-attention layers feeding gated expert stacks with a linear scoring
head) and ``pointer`` (a single context query against the node embeddings
with tanh-clipped logits, gated the same way).

Feasibility is enforced by masking, never by rejection: visited customers,
over-demand customers, and window-unreachable customers get probability
exactly zero, and the depot is blocked only while the vehicle sits on it.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .autodiff import (
    Tensor,
    add,
    attention,
    backward,
    block_attention,
    concat_cols,
    concat_rows,
    cross_entropy,
    cross_entropy_rows,
    load_tensors,
    masked_row_softmax,
    matmul,
    mul,
    no_grad,
    relu,
    reshape,
    save_tensors,
    scale,
    standardize_rows,
    take_rows,
    tanh,
    transpose,
    tsum,
)
from .core import DomainError, Instance, ProblemKind, Solution, distance_matrix, tightness
from .generator import stream_rng

_STREAM_PARAMS = 2
_FEATURES = 6  # x, y, demand/capacity, window open, window close, service


class DeadEndError(RuntimeError):
    """Every action is masked; generated instances never reach this."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and gating description; see ``desk_config``/``paper_config``."""

    embed_dim: int = 64
    ff_dim: int = 128
    heads: int = 4
    encoder_layers: int = 1
    decoder_layers: int = 3
    experts: int = 3
    expert_depth: int = 2
    tightness_range: tuple[float, float] = (10.0, 500.0)
    logit_clip: float = 10.0
    decoder_style: str = "expert_stack"

    def __post_init__(self) -> None:
        if self.embed_dim % self.heads != 0:
            raise DomainError("embed_dim must divide evenly into heads")
        if self.experts < 1 or self.expert_depth < 1:
            raise DomainError("need at least one expert of depth one")
        lo, hi = self.tightness_range
        if not lo < hi:
            raise DomainError("tightness_range must be increasing")
        if self.decoder_style not in ("expert_stack", "pointer"):
            raise DomainError(f"unknown decoder style {self.decoder_style!r}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads


def desk_config(**overrides) -> ModelConfig:
    """Small model sized for laptop-scale experiments."""
    return ModelConfig(**overrides)


def paper_config(**overrides) -> ModelConfig:
    """Full-scale model matching the published experiment sizes."""
    base = dict(
        embed_dim=192,
        ff_dim=512,
        heads=8,
        encoder_layers=1,
        decoder_layers=6,
        experts=3,
        expert_depth=3,
    )
    base.update(overrides)
    return ModelConfig(**base)


# ------------------------------------------------------------------ parameters

class Model:
    """A parameter dictionary plus the config that shapes it.

    Parameters are flat-named (``trunk1.h2.wq``) so checkpoints are plain
    name→matrix maps.  Creation order is fixed, which makes initialization
    a pure function of the seed.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self._rng = stream_rng(seed, _STREAM_PARAMS, 0)
        d, ff = config.embed_dim, config.ff_dim

        self._linear("depot_in", _FEATURES, d)
        self._linear("cust_in", _FEATURES, d)
        for i in range(config.encoder_layers):
            self._attention_layer(f"enc{i}", d, d, ff, config)

        if config.decoder_style == "expert_stack":
            self._weight("ctx.w", 2 * d + 3, d)
            self._bias("ctx.b", d)
            for i in range(config.decoder_layers):
                self._attention_layer(f"trunk{i}", d, d, ff, config)
            for e in range(config.experts):
                for i in range(config.expert_depth):
                    self._attention_layer(f"expert{e}.l{i}", d, d, ff, config)
                self._linear(f"expert{e}.head", d, 1)
        else:
            for e in range(config.experts):
                p = f"expert{e}."
                for h in range(config.heads):
                    self._weight(f"{p}h{h}.wq", 2 * d, config.head_dim)
                    self._weight(f"{p}h{h}.wk", d, config.head_dim)
                    self._weight(f"{p}h{h}.wv", d, config.head_dim)
                self._weight(f"{p}wo", d, d)
                self._linear(f"{p}ff1", d, ff)
                self._linear(f"{p}ff2", ff, d)
        del self._rng

    def _weight(self, name: str, rows: int, cols: int) -> None:
        bound = 1.0 / math.sqrt(rows)
        self.params[name] = Tensor(
            self._rng.uniform(-bound, bound, size=(rows, cols)),
            requires_grad=True,
            name=name,
        )

    def _bias(self, name: str, cols: int) -> None:
        self.params[name] = Tensor(np.zeros((1, cols)), requires_grad=True, name=name)

    def _linear(self, prefix: str, rows: int, cols: int) -> None:
        self._weight(f"{prefix}.w", rows, cols)
        self._bias(f"{prefix}.b", cols)

    def _attention_layer(self, prefix: str, dq: int, d: int, ff: int, cfg: ModelConfig) -> None:
        for h in range(cfg.heads):
            self._weight(f"{prefix}.h{h}.wq", dq, cfg.head_dim)
            self._weight(f"{prefix}.h{h}.wk", d, cfg.head_dim)
            self._weight(f"{prefix}.h{h}.wv", d, cfg.head_dim)
        self._weight(f"{prefix}.wo", d, d)
        self._linear(f"{prefix}.ff1", d, ff)
        self._linear(f"{prefix}.ff2", ff, d)
        for norm in (f"{prefix}.n1", f"{prefix}.n2"):
            self.params[f"{norm}.g"] = Tensor(np.ones((1, d)), requires_grad=True, name=f"{norm}.g")
            self._bias(f"{norm}.b", d)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def expert_parameters(self, index: int) -> list[Tensor]:
        prefix = f"expert{index}."
        return [t for name, t in self.params.items() if name.startswith(prefix)]

    def save(self, path) -> None:
        named: dict[str, np.ndarray] = {
            "__config__": _encode_config(self.config),
        }
        named.update({name: t.data for name, t in self.params.items()})
        save_tensors(path, named)

    @classmethod
    def load(cls, path) -> "Model":
        named = load_tensors(path)
        config = _decode_config(named.pop("__config__"))
        model = cls(config, seed=0)
        if set(named) != set(model.params):
            raise DomainError("checkpoint parameter names do not match the config")
        for name, value in named.items():
            if model.params[name].data.shape != value.shape:
                raise DomainError(f"checkpoint shape mismatch for {name}")
            model.params[name].data = value
        return model


def _encode_config(config: ModelConfig) -> np.ndarray:
    raw = json.dumps(asdict(config), sort_keys=True).encode("utf-8")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.float64).reshape(1, -1)


def _decode_config(arr: np.ndarray) -> ModelConfig:
    raw = bytes(arr.astype(np.uint8).ravel().tolist()).decode("utf-8")
    blob = json.loads(raw)
    blob["tightness_range"] = tuple(blob["tightness_range"])
    return ModelConfig(**blob)


# -------------------------------------------------------------------- layers

def _linear_apply(model: Model, prefix: str, x: Tensor) -> Tensor:
    return add(matmul(x, model.params[f"{prefix}.w"]), model.params[f"{prefix}.b"])


def _mha(model: Model, prefix: str, x: Tensor, y: Tensor, cfg: ModelConfig,
         keep: np.ndarray | None = None) -> Tensor:
    heads = []
    for h in range(cfg.heads):
        q = matmul(x, model.params[f"{prefix}.h{h}.wq"])
        k = matmul(y, model.params[f"{prefix}.h{h}.wk"])
        v = matmul(y, model.params[f"{prefix}.h{h}.wv"])
        heads.append(attention(q, k, v, cfg.embed_dim, keep))
    return matmul(concat_cols(heads), model.params[f"{prefix}.wo"])


def _norm(model: Model, prefix: str, x: Tensor) -> Tensor:
    return add(mul(standardize_rows(x), model.params[f"{prefix}.g"]), model.params[f"{prefix}.b"])


def _block_mha(model: Model, prefix: str, x: Tensor, cfg: ModelConfig,
               block: int, keep: np.ndarray) -> Tensor:
    heads = []
    for h in range(cfg.heads):
        q = matmul(x, model.params[f"{prefix}.h{h}.wq"])
        k = matmul(x, model.params[f"{prefix}.h{h}.wk"])
        v = matmul(x, model.params[f"{prefix}.h{h}.wv"])
        heads.append(block_attention(q, k, v, cfg.embed_dim, block, keep))
    return matmul(concat_cols(heads), model.params[f"{prefix}.wo"])


def block_attention_layer(model: Model, prefix: str, x: Tensor,
                          block: int, keep: np.ndarray) -> Tensor:
    """attention_layer over many independent equal-width row blocks at once."""
    cfg = model.config
    mixed = _norm(model, f"{prefix}.n1",
                  add(_block_mha(model, prefix, x, cfg, block, keep), x))
    ff = _linear_apply(model, f"{prefix}.ff2", relu(_linear_apply(model, f"{prefix}.ff1", mixed)))
    return _norm(model, f"{prefix}.n2", add(ff, mixed))


def attention_layer(model: Model, prefix: str, x: Tensor, y: Tensor,
                    keep: np.ndarray | None = None) -> Tensor:
    """Attention + residual + row norm, then feed-forward + residual + norm."""
    cfg = model.config
    mixed = _norm(model, f"{prefix}.n1", add(_mha(model, prefix, x, y, cfg, keep), x))
    ff = _linear_apply(model, f"{prefix}.ff2", relu(_linear_apply(model, f"{prefix}.ff1", mixed)))
    return _norm(model, f"{prefix}.n2", add(ff, mixed))


# ------------------------------------------------------------------- encoding

def instance_features(inst: Instance) -> np.ndarray:
    """Per-node feature rows: position, scaled demand, window data."""
    cap = float(inst.capacity) if inst.capacity > 0 else 1.0
    rows = []
    for nd in inst.nodes:
        rows.append([nd.x, nd.y, nd.demand / cap, nd.tw_early, nd.tw_late, nd.service])
    return np.asarray(rows, dtype=np.float64)


def encode(inst: Instance, model: Model) -> Tensor:
    """Embed all nodes; the depot gets its own input projection."""
    feats = instance_features(inst)
    depot = _linear_apply(model, "depot_in", Tensor(feats[:1]))
    customers = _linear_apply(model, "cust_in", Tensor(feats[1:]))
    x = concat_rows([depot, customers])
    for i in range(model.config.encoder_layers):
        x = attention_layer(model, f"enc{i}", x, x)
    return x


def encode_all(instances: list[Instance], model: Model) -> Tensor:
    """One encoder pass over equally sized instances, one block each.

    Returns (b * width, d); instance i owns rows [i * width, (i + 1) * width).
    """
    width = len(instances[0].nodes)
    if any(len(inst.nodes) != width for inst in instances):
        raise DomainError("fused encoding needs equally sized instances")
    feats = [instance_features(inst) for inst in instances]
    depot = _linear_apply(model, "depot_in", Tensor(np.vstack([f[:1] for f in feats])))
    cust = _linear_apply(model, "cust_in", Tensor(np.vstack([f[1:] for f in feats])))
    b = len(instances)
    order = np.empty(b * width, dtype=np.intp)
    for i in range(b):
        order[i * width] = i
        order[i * width + 1 : (i + 1) * width] = b + i * (width - 1) + np.arange(width - 1)
    x = take_rows(concat_rows([depot, cust]), order)
    keep = np.ones((b * width, width), dtype=bool)
    for i in range(model.config.encoder_layers):
        x = block_attention_layer(model, f"enc{i}", x, width, keep)
    return x


# ----------------------------------------------------------------------- gate

def gate_coordinate(inst: Instance, config: ModelConfig) -> float:
    """The tightness value the gate routes on; loosest for unconstrained."""
    t = tightness(inst)
    if math.isinf(t):
        return config.tightness_range[1]
    return t


def gate(coordinate: float, config: ModelConfig) -> int:
    """Hard routing: which expert owns this tightness value (0-based).

    The range splits into ``experts`` half-open intervals of width beta;
    the top endpoint belongs to the last expert.
    """
    lo, hi = config.tightness_range
    if not lo <= coordinate <= hi:
        raise DomainError(f"tightness {coordinate} outside [{lo}, {hi}]")
    beta = (hi - lo) / config.experts
    idx = int((coordinate - lo) // beta)
    return min(idx, config.experts - 1)


def gate_one_hot(coordinate: float, config: ModelConfig) -> np.ndarray:
    out = np.zeros(config.experts)
    out[gate(coordinate, config)] = 1.0
    return out


# ------------------------------------------------------------------- decoding

@dataclass
class DecoderState:
    """Everything the decoder needs about the partial solution."""

    inst: Instance
    visited: np.ndarray  # bool over node indices; [0] is the depot flag
    position: int
    first: int  # first customer of the current route (0 while at depot)
    load: int  # demand already on the vehicle
    time: float
    visits: list[int] = field(default_factory=list)

    @classmethod
    def fresh(cls, inst: Instance) -> "DecoderState":
        visited = np.zeros(len(inst.nodes), dtype=bool)
        visited[0] = True
        start = inst.nodes[0].tw_early if inst.kind.has_time_windows else 0.0
        return cls(inst=inst, visited=visited, position=0, first=0, load=0,
                   time=start, visits=[0])

    def unvisited(self) -> list[int]:
        return [i for i in range(1, len(self.visited)) if not self.visited[i]]

    def done(self) -> bool:
        return bool(self.visited[1:].all())


def _candidates(state: DecoderState) -> list[int]:
    if state.inst.kind is ProblemKind.TSP:
        return state.unvisited()
    return [0] + state.unvisited()


def _feasible_mask(state: DecoderState, cand: list[int], dm: np.ndarray) -> np.ndarray:
    inst = state.inst
    mask = np.zeros((1, len(cand)), dtype=bool)
    tw = inst.kind.has_time_windows
    depot = inst.nodes[0]
    for col, j in enumerate(cand):
        if j == 0:
            mask[0, col] = state.position != 0
            continue
        nd = inst.nodes[j]
        if inst.kind.has_capacity and state.load + nd.demand > inst.capacity:
            continue
        if tw:
            arrival = state.time + dm[state.position, j]
            if arrival > nd.tw_late:
                continue
            if max(nd.tw_early, arrival) + nd.service + dm[j, 0] > depot.tw_late:
                continue
        mask[0, col] = True
    return mask


def _advance(state: DecoderState, j: int, dm: np.ndarray) -> None:
    inst = state.inst
    state.visits.append(j)
    if j == 0:
        state.position = 0
        state.first = 0
        state.load = 0
        state.time = inst.nodes[0].tw_early if inst.kind.has_time_windows else 0.0
        return
    if state.first == 0:
        state.first = j
    if inst.kind.has_time_windows:
        nd = inst.nodes[j]
        arrival = state.time + dm[state.position, j]
        state.time = max(nd.tw_early, arrival) + nd.service
    state.load += inst.nodes[j].demand
    state.position = j
    state.visited[j] = True


def _context_scalars(state: DecoderState) -> np.ndarray:
    inst = state.inst
    cfg_load = 1.0
    if inst.kind.has_capacity:
        cfg_load = (inst.capacity - state.load) / inst.capacity
    time_frac = 1.0
    if inst.kind.has_time_windows:
        deadline = inst.nodes[0].tw_late
        time_frac = (deadline - state.time) / deadline if deadline > 0 else 0.0
    return np.array([[cfg_load, time_frac, 0.0]])  # tightness filled by caller


def _expert_stack_probs(
    model: Model, emb: Tensor, state: DecoderState, cand: list[int],
    mask: np.ndarray, expert: int, tight_norm: float,
) -> Tensor:
    scalars = _context_scalars(state)
    scalars[0, 2] = tight_norm
    first_emb = take_rows(emb, [state.first])
    last_emb = take_rows(emb, [state.position])
    ctx = add(matmul(concat_cols([first_emb, last_emb, Tensor(scalars)]),
                     model.params["ctx.w"]), model.params["ctx.b"])
    x = concat_rows([ctx, take_rows(emb, cand)])
    for i in range(model.config.decoder_layers):
        x = attention_layer(model, f"trunk{i}", x, x)
    h = take_rows(x, list(range(1, len(cand) + 1)))
    for i in range(model.config.expert_depth):
        h = attention_layer(model, f"expert{expert}.l{i}", h, h)
    logits = transpose(_linear_apply(model, f"expert{expert}.head", h))
    return masked_row_softmax(logits, mask)


def pointer_expert_forward(
    model: Model, expert: int, context: Tensor, nodes: Tensor, mask: np.ndarray,
) -> Tensor:
    """One-query pointer scoring with tanh-clipped logits.

    ``context`` is the (1, 2d) first‖last row; ``nodes`` are the candidate
    embeddings.  The context is mixed once against the candidates, refined
    by a residual feed-forward, then scored against each candidate.
    """
    cfg = model.config
    p = f"expert{expert}."
    heads = []
    for h in range(cfg.heads):
        q = matmul(context, model.params[f"{p}h{h}.wq"])
        k = matmul(nodes, model.params[f"{p}h{h}.wk"])
        v = matmul(nodes, model.params[f"{p}h{h}.wv"])
        heads.append(attention(q, k, v, cfg.embed_dim))
    mixed = matmul(concat_cols(heads), model.params[f"{p}wo"])
    refined = add(_linear_apply(model, f"{p}ff2",
                                relu(_linear_apply(model, f"{p}ff1", mixed))), mixed)
    raw = scale(matmul(refined, transpose(nodes)), 1.0 / math.sqrt(cfg.embed_dim))
    logits = scale(tanh(raw), cfg.logit_clip)
    return masked_row_softmax(logits, mask)


def _pointer_probs(
    model: Model, emb: Tensor, state: DecoderState, cand: list[int],
    mask: np.ndarray, expert: int,
) -> Tensor:
    first_emb = take_rows(emb, [state.first])
    last_emb = take_rows(emb, [state.position])
    context = concat_cols([first_emb, last_emb])
    return pointer_expert_forward(model, expert, context, take_rows(emb, cand), mask)


def decode_step(
    model: Model, emb: Tensor, state: DecoderState, dm: np.ndarray,
    expert: int, tight_norm: float,
) -> tuple[Tensor, list[int]]:
    """Probability row over current candidates (and the candidate list)."""
    cand = _candidates(state)
    mask = _feasible_mask(state, cand, dm)
    if not mask.any():
        raise DeadEndError(f"no feasible action at {state.visits}")
    if model.config.decoder_style == "expert_stack":
        probs = _expert_stack_probs(model, emb, state, cand, mask, expert, tight_norm)
    else:
        probs = _pointer_probs(model, emb, state, cand, mask, expert)
    return probs, cand


# ------------------------------------------------------------------- rollouts

def _tight_norm(inst: Instance, config: ModelConfig) -> float:
    lo, hi = config.tightness_range
    return min(max((gate_coordinate(inst, config) - lo) / (hi - lo), 0.0), 1.0)


def _episode(inst: Instance, model: Model, choose, forced_first: int | None = None):
    """Drive decode_step to completion; ``choose`` picks each move.

    ``choose(probs_data, cand)`` returns the selected node index.  The
    optional forced first move bypasses the policy entirely (its step has
    no probability row).  Returns the finished state.
    """
    dm = distance_matrix(inst)
    emb = encode(inst, model)
    expert = gate(gate_coordinate(inst, model.config), model.config)
    tight = _tight_norm(inst, model.config)
    state = DecoderState.fresh(inst)

    if forced_first is not None:
        if forced_first not in _candidates(state):
            raise DomainError(f"cannot force first visit to {forced_first}")
        _advance(state, forced_first, dm)

    while not state.done():
        probs, cand = decode_step(model, emb, state, dm, expert, tight)
        j = choose(probs, cand)
        _advance(state, j, dm)

    if inst.kind.has_depot and inst.kind is not ProblemKind.OVRP:
        state.visits.append(0)  # close the last route; not a decision
    return state


def _finish(inst: Instance, state: DecoderState) -> Solution:
    visits = state.visits
    if inst.kind is ProblemKind.TSP:
        pivot = visits.index(0)
        visits = visits[pivot:] + visits[:pivot]
    return Solution(visits=tuple(visits))


def rollout_greedy(inst: Instance, model: Model) -> Solution:
    with no_grad():
        state = _episode(inst, model, lambda p, c: c[int(np.argmax(p.data[0]))])
    return _finish(inst, state)


def rollout_sample(
    inst: Instance, model: Model, rng: np.random.Generator,
    forced_first: int | None = None,
) -> tuple[Solution, float]:
    """Sample a full solution; returns it with its log-probability."""
    log_prob = 0.0

    def choose(probs: Tensor, cand: list[int]) -> int:
        nonlocal log_prob
        p = probs.data[0]
        col = int(rng.choice(len(cand), p=p / p.sum()))
        log_prob += math.log(p[col])
        return cand[col]

    with no_grad():
        state = _episode(inst, model, choose, forced_first)
    return _finish(inst, state), log_prob


def rollout_multistart(
    inst: Instance, model: Model, k: int, rng: np.random.Generator | None = None,
) -> list[tuple[Solution, float]]:
    """k sampled rollouts forced to start at the k lowest-index customers.

    With ``rng`` None the per-start continuation is greedy (deterministic).
    """
    n = len(inst.nodes) - 1
    if not 1 <= k <= n:
        raise DomainError(f"need 1 <= k <= {n} starts, got {k}")
    out = []
    for first in range(1, k + 1):
        if rng is None:
            with no_grad():
                state = _episode(
                    inst, model, lambda p, c: c[int(np.argmax(p.data[0]))], first
                )
            out.append((_finish(inst, state), 0.0))
        else:
            out.append(rollout_sample(inst, model, rng, forced_first=first))
    return out


def _teacher_target(
    inst: Instance, visits: tuple[int, ...] | list[int], forced_first: int | None,
) -> list[int]:
    """Normalize a visit sequence into the decision list replays expect."""
    target = list(visits)
    if inst.kind is not ProblemKind.TSP and target and target[-1] == 0:
        target = target[:-1]  # the closing return is not a decision
    if not target or target[0] != 0:
        if inst.kind is ProblemKind.TSP and 0 in target:
            pivot = target.index(0)
            target = target[pivot:] + target[:pivot]
        else:
            raise DomainError("visit sequences start at the depot")
    if forced_first is not None and (len(target) < 2 or target[1] != forced_first):
        raise DomainError("sequence does not begin with the forced first visit")
    return target


def _check_coverage(inst: Instance, state: DecoderState, target: list[int]) -> None:
    expected = target
    if inst.kind is not ProblemKind.TSP and inst.kind is not ProblemKind.OVRP:
        expected = target + [0]
    if list(state.visits) != expected:
        raise DomainError("visit sequence does not cover the instance")


@dataclass
class _TraceStep:
    """One teacher-forced decision: who could be chosen, who was."""

    cand: list[int]
    mask: np.ndarray  # (1, len(cand)) feasibility
    first: int
    position: int
    scalars: np.ndarray  # (1, 3) context features, tightness included
    label_col: int
    label_node: int


def _trace_steps(
    inst: Instance, model: Model, target: list[int], forced_first: int | None,
    dm: np.ndarray,
) -> list[_TraceStep]:
    """Walk the label with the live feasibility rules, recording each step."""
    tight = _tight_norm(inst, model.config)
    state = DecoderState.fresh(inst)
    cursor = 1
    if forced_first is not None:
        if forced_first not in _candidates(state):
            raise DomainError(f"cannot force first visit to {forced_first}")
        _advance(state, forced_first, dm)
        cursor = 2
    out = []
    while not state.done():
        cand = _candidates(state)
        mask = _feasible_mask(state, cand, dm)
        if not mask.any():
            raise DeadEndError(f"no feasible action at {state.visits}")
        j = target[cursor] if cursor < len(target) else -1
        if j not in cand:
            raise DomainError(f"visit sequence selects unavailable node {j}")
        cursor += 1
        scalars = _context_scalars(state)
        scalars[0, 2] = tight
        out.append(_TraceStep(cand, mask, state.first, state.position,
                              scalars, cand.index(j), j))
        _advance(state, j, dm)
    if inst.kind.has_depot and inst.kind is not ProblemKind.OVRP:
        state.visits.append(0)
    _check_coverage(inst, state, target)
    return out


def _stacked_context(model: Model, emb: Tensor, steps: list[_TraceStep],
                     width: int) -> Tensor:
    firsts = take_rows(emb, [s.first for s in steps])
    lasts = take_rows(emb, [s.position for s in steps])
    cols = [firsts, lasts]
    if width == 3:
        cols.append(Tensor(np.vstack([s.scalars for s in steps])))
    return concat_cols(cols)


def _expert_stack_nll(model: Model, emb: Tensor, steps: list[_TraceStep],
                      expert: int) -> Tensor:
    """All decisions of one episode as a block-diagonal attention pass.

    Row set: the per-step context rows first, then each step's candidate
    embeddings.  The keep mask confines attention to each step's own block,
    so every row sees exactly what the stepwise decoder would show it.
    """
    n_steps = len(steps)
    ctx = add(matmul(_stacked_context(model, emb, steps, 3),
                     model.params["ctx.w"]), model.params["ctx.b"])
    x = concat_rows([ctx, take_rows(emb, [j for s in steps for j in s.cand])])
    rows = x.data.shape[0]
    keep = np.zeros((rows, rows), dtype=bool)
    blocks = []
    offset = n_steps
    for t, s in enumerate(steps):
        width = len(s.cand)
        members = [t] + list(range(offset, offset + width))
        keep[np.ix_(members, members)] = True
        blocks.append((offset - n_steps, width))
        offset += width
    for i in range(model.config.decoder_layers):
        x = attention_layer(model, f"trunk{i}", x, x, keep)
    h = take_rows(x, list(range(n_steps, rows)))
    keep_cand = np.zeros((rows - n_steps, rows - n_steps), dtype=bool)
    for start, width in blocks:
        keep_cand[start:start + width, start:start + width] = True
    for i in range(model.config.expert_depth):
        h = attention_layer(model, f"expert{expert}.l{i}", h, h, keep_cand)
    scores = _linear_apply(model, f"expert{expert}.head", h)
    total = None
    for (start, width), s in zip(blocks, steps):
        logits = transpose(take_rows(scores, list(range(start, start + width))))
        ce = cross_entropy(masked_row_softmax(logits, s.mask), s.label_col)
        total = ce if total is None else add(total, ce)
    return total


def _pointer_nll(model: Model, emb: Tensor, steps: list[_TraceStep],
                 expert: int) -> Tensor:
    """All decisions of one episode as one multi-query pointer pass."""
    cfg = model.config
    n_nodes = emb.data.shape[0]
    cand_keep = np.zeros((len(steps), n_nodes), dtype=bool)
    feas_keep = np.zeros((len(steps), n_nodes), dtype=bool)
    for t, s in enumerate(steps):
        cand_keep[t, s.cand] = True
        feas_keep[t, [j for c, j in enumerate(s.cand) if s.mask[0, c]]] = True
    context = _stacked_context(model, emb, steps, 2)
    p = f"expert{expert}."
    heads = []
    for h in range(cfg.heads):
        q = matmul(context, model.params[f"{p}h{h}.wq"])
        k = matmul(emb, model.params[f"{p}h{h}.wk"])
        v = matmul(emb, model.params[f"{p}h{h}.wv"])
        heads.append(attention(q, k, v, cfg.embed_dim, cand_keep))
    mixed = matmul(concat_cols(heads), model.params[f"{p}wo"])
    refined = add(_linear_apply(model, f"{p}ff2",
                                relu(_linear_apply(model, f"{p}ff1", mixed))), mixed)
    raw = scale(matmul(refined, transpose(emb)), 1.0 / math.sqrt(cfg.embed_dim))
    probs = masked_row_softmax(scale(tanh(raw), cfg.logit_clip), feas_keep)
    total = None
    for t, s in enumerate(steps):
        ce = cross_entropy(take_rows(probs, [t]), s.label_node)
        total = ce if total is None else add(total, ce)
    return total


def episode_nll(
    inst: Instance, model: Model, visits: tuple[int, ...] | list[int],
    forced_first: int | None = None,
) -> tuple[Tensor, int]:
    """Total negative log-likelihood of reproducing a visit sequence.

    Teacher forcing: the label is walked with the live feasibility rules,
    then all decisions are scored in one batched pass (mathematically the
    per-step composition, reassociated).  The step count comes back for
    averaging.  Raises MaskError if the sequence takes a masked action,
    which signals a label inconsistent with the feasibility rules.
    """
    target = _teacher_target(inst, visits, forced_first)
    dm = distance_matrix(inst)
    steps = _trace_steps(inst, model, target, forced_first, dm)
    if not steps:
        raise DomainError("the sequence leaves no decision to score")
    emb = encode(inst, model)
    expert = gate(gate_coordinate(inst, model.config), model.config)
    if model.config.decoder_style == "expert_stack":
        total = _expert_stack_nll(model, emb, steps, expert)
    else:
        total = _pointer_nll(model, emb, steps, expert)
    return total, len(steps)


# Block widths are padded up to the next rung, so fused attention runs over
# a handful of uniform-width groups instead of one op per decision.
_WIDTH_LADDER = (2, 3, 4, 6, 8, 12, 16, 24, 32, 48, 64, 96, 128, 192, 256,
                 384, 512, 768, 1024)


def _bucket_cap(width: int) -> int:
    for cap in _WIDTH_LADDER:
        if width <= cap:
            return cap
    return width


@dataclass
class _Episode:
    index: int  # instance slot within the fused embedding
    steps: list[_TraceStep]
    expert: int
    weight: float


def batch_nll(
    model: Model,
    instances: list[Instance],
    visits_list: list[tuple[int, ...] | list[int]],
    weights: list[float],
    forced_firsts: list[int | None] | None = None,
    per_step_mean: bool = False,
) -> tuple[Tensor, list[int]]:
    """Weighted sum of episode NLLs on one fused tape.

    Encoder and decoder work for the whole batch runs in a few wide tape
    ops: per-decision attention blocks are padded to a small set of uniform
    widths and scored together.  ``weights[i]`` multiplies episode i's total
    NLL (divided by its step count when ``per_step_mean`` is set).  Step
    counts come back for logging.  Equal to summing scaled episode_nll
    results, up to float reassociation.
    """
    if not instances:
        raise DomainError("batch_nll of an empty batch")
    if len(visits_list) != len(instances) or len(weights) != len(instances):
        raise DomainError("one visit sequence and weight per instance")
    cfg = model.config
    episodes = []
    counts = []
    for i, (inst, visits) in enumerate(zip(instances, visits_list)):
        ff = forced_firsts[i] if forced_firsts is not None else None
        target = _teacher_target(inst, visits, ff)
        steps = _trace_steps(inst, model, target, ff, distance_matrix(inst))
        if not steps:
            raise DomainError("a sequence leaves no decision to score")
        counts.append(len(steps))
        w = weights[i] / len(steps) if per_step_mean else weights[i]
        episodes.append((inst, steps, gate(gate_coordinate(inst, cfg), cfg), w))

    total = None
    by_width: dict[int, list[tuple[Instance, list[_TraceStep], int, float]]] = {}
    for ep in episodes:
        by_width.setdefault(len(ep[0].nodes), []).append(ep)
    for width in sorted(by_width):
        group = by_width[width]
        emb = encode_all([inst for inst, _, _, _ in group], model)
        if cfg.decoder_style == "expert_stack":
            part = _expert_stack_batch(model, emb, group, width)
        else:
            part = None
            for j, (_, steps, expert, w) in enumerate(group):
                sliced = take_rows(emb, list(range(j * width, (j + 1) * width)))
                one = scale(_pointer_nll(model, sliced, steps, expert), w)
                part = one if part is None else add(part, one)
        total = part if total is None else add(total, part)
    return total, counts


def _expert_stack_batch(
    model: Model,
    emb: Tensor,
    group: list[tuple[Instance, list[_TraceStep], int, float]],
    width: int,
) -> Tensor:
    """Fused decode-and-score over every decision of every episode.

    Each decision is one attention block [context row; candidate rows],
    padded to a bucketed width.  Trunk layers run per bucket; expert layers
    and heads run per (bucket, expert); the cross-entropies collapse into
    one weighted scalar per group.  Padding rows repeat the context row and
    are masked out of every softmax, so they contribute exactly nothing.
    """
    cfg = model.config
    flat: list[tuple[int, _TraceStep, int, float]] = []
    for j, (_, steps, expert, w) in enumerate(group):
        for s in steps:
            flat.append((j, s, expert, w))
    n_steps = len(flat)

    firsts = [j * width + s.first for j, s, _, _ in flat]
    lasts = [j * width + s.position for j, s, _, _ in flat]
    scalars = np.vstack([s.scalars for _, s, _, _ in flat])
    ctx_in = concat_cols([take_rows(emb, firsts), take_rows(emb, lasts),
                          Tensor(scalars)])
    ctx = add(matmul(ctx_in, model.params["ctx.w"]), model.params["ctx.b"])
    base = concat_rows([ctx, emb])  # decision rows first, then node rows

    buckets: dict[int, list[int]] = {}
    for t, (_, s, _, _) in enumerate(flat):
        buckets.setdefault(_bucket_cap(1 + len(s.cand)), []).append(t)

    total = None
    for cap, members in sorted(buckets.items()):
        rows = len(members) * cap
        order = np.empty(rows, dtype=np.intp)
        keep = np.zeros((rows, cap), dtype=bool)
        for at, t in enumerate(members):
            j, s, _, _ = flat[t]
            r0 = at * cap
            w = len(s.cand)
            order[r0] = t
            order[r0 + 1 : r0 + 1 + w] = n_steps + j * width + np.asarray(s.cand)
            order[r0 + 1 + w : r0 + cap] = t  # padding repeats the context row
            keep[r0 : r0 + 1 + w, : 1 + w] = True
            keep[r0 + 1 + w : r0 + cap, 0] = True  # padding looks at context only
        x = take_rows(base, order)
        for layer in range(cfg.decoder_layers):
            x = block_attention_layer(model, f"trunk{layer}", x, cap, keep)

        # candidate rows only: blocks shrink by the context row
        cand_rows = np.asarray([at * cap + 1 + c
                                for at in range(len(members))
                                for c in range(cap - 1)], dtype=np.intp)
        h = take_rows(x, cand_rows)
        keep_cand = keep[cand_rows, 1:]  # fancy indexing yields a copy
        pad = ~keep_cand.any(axis=1)
        keep_cand[pad, 0] = True  # padding rows attend the first candidate

        by_expert: dict[int, list[int]] = {}
        for at, t in enumerate(members):
            by_expert.setdefault(flat[t][2], []).append(at)
        for expert in sorted(by_expert):
            ats = by_expert[expert]
            sel = np.asarray([at * (cap - 1) + c for at in ats
                              for c in range(cap - 1)], dtype=np.intp)
            he = take_rows(h, sel) if len(ats) < len(members) else h
            ke = keep_cand[sel] if len(ats) < len(members) else keep_cand
            for layer in range(cfg.expert_depth):
                he = block_attention_layer(model, f"expert{expert}.l{layer}",
                                           he, cap - 1, ke)
            scores = _linear_apply(model, f"expert{expert}.head", he)
            logits = reshape(scores, len(ats), cap - 1)
            feas = np.zeros((len(ats), cap - 1), dtype=bool)
            labels = np.empty(len(ats), dtype=np.intp)
            step_w = np.empty(len(ats))
            for row, at in enumerate(ats):
                _, s, _, w = flat[members[at]]
                feas[row, : len(s.cand)] = s.mask[0]
                labels[row] = s.label_col
                step_w[row] = w
            probs = masked_row_softmax(logits, feas)
            ce = cross_entropy_rows(probs, labels, step_w)
            total = ce if total is None else add(total, ce)
    return total


def _episode_nll_stepwise(
    inst: Instance, model: Model, visits: tuple[int, ...] | list[int],
    forced_first: int | None = None,
) -> tuple[Tensor, int]:
    """Reference replay, one decode_step call per decision (slow path)."""
    target = _teacher_target(inst, visits, forced_first)
    steps: list[Tensor] = []
    cursor = 1 + (1 if forced_first is not None else 0)

    def choose(probs: Tensor, cand: list[int]) -> int:
        nonlocal cursor
        j = target[cursor]
        cursor += 1
        steps.append(cross_entropy(probs, cand.index(j)))
        return j

    state = _episode(inst, model, choose, forced_first)
    _check_coverage(inst, state, target)
    total = steps[0]
    for s in steps[1:]:
        total = add(total, s)
    return total, len(steps)
