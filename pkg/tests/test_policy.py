import math

import numpy as np
import pytest

from vrplab.autodiff import Tensor, grad_check, no_grad
from vrplab.core import DomainError, ProblemKind, validate
from vrplab.generator import GenSpec, gen_instance, stream_rng
from vrplab.policy import (
    DecoderState,
    Model,
    ModelConfig,
    attention_layer,
    batch_nll,
    decode_step,
    desk_config,
    encode,
    encode_all,
    episode_nll,
    gate,
    gate_coordinate,
    gate_one_hot,
    paper_config,
    pointer_expert_forward,
    rollout_greedy,
    rollout_multistart,
    rollout_sample,
)
from vrplab.core import distance_matrix

from helpers import make_instance

CVRP = ProblemKind.CVRP
OVRP = ProblemKind.OVRP
TSP = ProblemKind.TSP
CVRPTW = ProblemKind.CVRPTW

TINY = ModelConfig(
    embed_dim=8, ff_dim=16, heads=2, encoder_layers=1, decoder_layers=1,
    experts=2, expert_depth=1,
)


def tiny_model(style: str = "expert_stack", seed: int = 0) -> Model:
    cfg = TINY if style == "expert_stack" else ModelConfig(
        embed_dim=8, ff_dim=16, heads=2, encoder_layers=1, decoder_layers=1,
        experts=2, expert_depth=1, decoder_style="pointer",
    )
    return Model(cfg, seed=seed)


# -------------------------------------------------------------------- config

def test_config_validation():
    with pytest.raises(DomainError):
        ModelConfig(embed_dim=10, heads=4)
    with pytest.raises(DomainError):
        ModelConfig(experts=0)
    with pytest.raises(DomainError):
        ModelConfig(tightness_range=(5.0, 5.0))
    with pytest.raises(DomainError):
        ModelConfig(decoder_style="beam")
    assert paper_config().embed_dim == 192
    assert desk_config().embed_dim == 64


# ---------------------------------------------------------------------- gate

def test_gate_hand_intervals():
    cfg = ModelConfig(experts=3, tightness_range=(10.0, 500.0))
    beta = (500.0 - 10.0) / 3
    assert gate(50.0, cfg) == 0  # 40 < 163.33
    assert gate(10.0, cfg) == 0
    assert gate(10.0 + beta, cfg) == 1  # boundary joins the higher interval
    assert gate(400.0, cfg) == 2
    assert gate(500.0, cfg) == 2  # top endpoint clamps into the last expert
    assert gate_one_hot(50.0, cfg).tolist() == [1.0, 0.0, 0.0]
    with pytest.raises(DomainError):
        gate(9.9, cfg)
    with pytest.raises(DomainError):
        gate(500.1, cfg)


def test_gate_coordinate_by_kind():
    cfg = ModelConfig(tightness_range=(0.2, 3.0))
    tw = gen_instance(GenSpec(kind=CVRPTW, n=3, seed=0, capacity=50, alpha=1.5))
    assert gate_coordinate(tw, cfg) == pytest.approx(1.5)
    cv = gen_instance(GenSpec(kind=CVRP, n=3, seed=0, capacity=77))
    assert gate_coordinate(cv, ModelConfig()) == 77.0
    ts = gen_instance(GenSpec(kind=TSP, n=3, seed=0))
    assert gate_coordinate(ts, ModelConfig()) == 500.0  # loosest end


# ----------------------------------------------------------- attention layer

def test_single_row_attention_ignores_query_key_weights():
    # with one key the softmax weight is exactly 1 whatever q and k are
    model = tiny_model()
    x = Tensor(np.linspace(-1.0, 1.0, 8).reshape(1, 8))
    base = attention_layer(model, "enc0", x, x).data.copy()
    for h in range(model.config.heads):
        model.params[f"enc0.h{h}.wq"].data += 3.0
        model.params[f"enc0.h{h}.wk"].data -= 2.0
    again = attention_layer(model, "enc0", x, x).data
    assert np.array_equal(base, again)
    model.params["enc0.h0.wv"].data += 1.0
    assert not np.array_equal(base, attention_layer(model, "enc0", x, x).data)


def test_attention_layer_output_shape():
    model = tiny_model()
    x = Tensor(np.ones((5, 8)))
    assert attention_layer(model, "enc0", x, x).shape == (5, 8)


# -------------------------------------------------------------------- encode

def test_encode_shape_and_permutation_equivariance():
    model = tiny_model()
    pts = [(0.5, 0.5), (0.1, 0.2), (0.9, 0.4), (0.3, 0.8)]
    inst = make_instance(CVRP, pts, [0, 2, 3, 4], capacity=50)
    emb = encode(inst, model)
    assert emb.shape == (4, 8)

    # customers rotated: old 1, 2, 3 appear as new 3, 1, 2
    rotated = make_instance(
        CVRP, [pts[0], pts[2], pts[3], pts[1]], [0, 3, 4, 2], capacity=50
    )
    emb_rot = encode(rotated, model)
    assert np.allclose(emb.data[1], emb_rot.data[3], atol=1e-12)
    assert np.allclose(emb.data[2], emb_rot.data[1], atol=1e-12)
    assert np.allclose(emb.data[0], emb_rot.data[0], atol=1e-12)


def test_depot_projection_differs_from_customer():
    inst = make_instance(CVRP, [(0.5, 0.5), (0.5, 0.5)], [0, 0], capacity=50)
    emb = encode(inst, tiny_model())
    assert not np.allclose(emb.data[0], emb.data[1])


# --------------------------------------------------------------- decode_step

def probe_step(model, inst):
    dm = distance_matrix(inst)
    with no_grad():
        emb = encode(inst, model)
    state = DecoderState.fresh(inst)
    expert = gate(gate_coordinate(inst, model.config), model.config)
    with no_grad():
        probs, cand = decode_step(model, emb, state, dm, expert, 0.5)
    return probs.data[0], cand


@pytest.mark.parametrize("style", ["expert_stack", "pointer"])
def test_probability_row_contract(style):
    model = tiny_model(style)
    inst = gen_instance(GenSpec(kind=CVRP, n=6, seed=1, capacity=12))
    p, cand = probe_step(model, inst)
    assert cand[0] == 0
    assert p[0] == 0.0  # depot blocked while standing on it
    assert (p >= 0.0).all()
    assert p.sum() == pytest.approx(1.0, abs=1e-12)


def test_over_demand_customers_masked():
    inst = make_instance(
        CVRP, [(0, 0), (1, 0), (0, 1), (1, 1)], [0, 3, 20, 4], capacity=12
    )
    model = tiny_model()
    p, cand = probe_step(model, inst)
    assert cand == [0, 1, 2, 3]
    assert p[2] == 0.0  # demand 20 over capacity 12
    assert p[1] > 0.0 and p[3] > 0.0


def test_window_unreachable_customer_masked():
    inst = make_instance(
        CVRPTW,
        [(0, 0), (1, 0), (0, 1.5)],
        demands=[0, 1, 1],
        capacity=9,
        windows=[(0.0, 10.0, 0.0), (0.0, 10.0, 0.0), (0.0, 1.0, 0.0)],
    )
    cfg = ModelConfig(
        embed_dim=8, ff_dim=16, heads=2, encoder_layers=1, decoder_layers=1,
        experts=2, expert_depth=1, tightness_range=(0.2, 3.0),
    )
    p, cand = probe_step(Model(cfg, seed=0), inst)
    assert p[cand.index(2)] == 0.0  # 1.5 away, window closes at 1.0


@pytest.mark.parametrize("style", ["expert_stack", "pointer"])
def test_expert_routing_isolation(style):
    model = tiny_model(style)
    inst = gen_instance(GenSpec(kind=CVRP, n=6, seed=2, capacity=50))
    assert gate(50.0, model.config) == 0
    base, _ = probe_step(model, inst)
    for t in model.expert_parameters(1):
        t.data = t.data + 123.0
    again, _ = probe_step(model, inst)
    assert np.array_equal(base, again)  # bit-identical despite the edit
    for t in model.expert_parameters(0):
        t.data = t.data + 1.0
    changed, _ = probe_step(model, inst)
    assert not np.array_equal(base, changed)


def test_single_expert_model_works():
    cfg = ModelConfig(
        embed_dim=8, ff_dim=16, heads=2, encoder_layers=1, decoder_layers=1,
        experts=1, expert_depth=1,
    )
    inst = gen_instance(GenSpec(kind=CVRP, n=4, seed=0, capacity=50))
    p, _ = probe_step(Model(cfg, seed=0), inst)
    assert p.sum() == pytest.approx(1.0, abs=1e-12)


def test_pointer_logits_are_clipped():
    model = tiny_model("pointer")
    clip = model.config.logit_clip
    rng = np.random.default_rng(0)
    # gigantic embeddings saturate tanh; the probability ratio stays bounded
    nodes = Tensor(rng.normal(size=(6, 8)) * 1e4)
    context = Tensor(rng.normal(size=(1, 16)) * 1e4)
    mask = np.ones((1, 6), dtype=bool)
    with no_grad():
        p = pointer_expert_forward(model, 0, context, nodes, mask).data[0]
    assert p.max() / p.min() <= math.exp(2.0 * clip) * (1.0 + 1e-9)
    assert np.isfinite(p).all()


# ------------------------------------------------------------------- rollouts

def test_greedy_rollout_single_customer():
    inst = make_instance(CVRP, [(0, 0), (1, 0)], [0, 3], capacity=15)
    out = rollout_greedy(inst, tiny_model())
    assert out.visits == (0, 1, 0)


@pytest.mark.parametrize("style", ["expert_stack", "pointer"])
def test_rollouts_feasible_across_kinds(style):
    model = tiny_model(style)
    cases = [
        GenSpec(kind=TSP, n=8, seed=3),
        GenSpec(kind=CVRP, n=8, seed=3, capacity=12),
        GenSpec(kind=OVRP, n=8, seed=3, capacity=12),
        GenSpec(kind=CVRPTW, n=8, seed=3, capacity=12, alpha=1.0),
    ]
    tw_cfg = ModelConfig(
        embed_dim=8, ff_dim=16, heads=2, encoder_layers=1, decoder_layers=1,
        experts=2, expert_depth=1, tightness_range=(0.2, 3.0),
        decoder_style=style,
    )
    for spec in cases:
        m = Model(tw_cfg, seed=0) if spec.kind is CVRPTW else model
        for i in range(3):
            inst = gen_instance(spec, i)
            greedy = rollout_greedy(inst, m)
            assert validate(inst, greedy), (spec.kind, i)
            sampled, lp = rollout_sample(inst, m, stream_rng(9, 7, i))
            assert validate(inst, sampled), (spec.kind, i)
            assert lp <= 0.0


def test_greedy_rollout_is_deterministic():
    inst = gen_instance(GenSpec(kind=CVRP, n=10, seed=5, capacity=20))
    model = tiny_model()
    assert rollout_greedy(inst, model) == rollout_greedy(inst, model)


def test_sample_log_prob_matches_teacher_forced_replay():
    inst = gen_instance(GenSpec(kind=CVRP, n=7, seed=6, capacity=15))
    model = tiny_model()
    sol, lp = rollout_sample(inst, model, stream_rng(11, 7, 0))
    # batched scoring reassociates float sums, so equality is near-exact
    nll, steps = episode_nll(inst, model, sol.visits)
    assert nll.data[0, 0] == pytest.approx(-lp, rel=1e-9, abs=1e-9)
    assert steps == len(sol.visits) - 2  # first and closing depot are free


@pytest.mark.parametrize("style", ["expert_stack", "pointer"])
def test_batched_replay_matches_stepwise_reference(style):
    from vrplab.policy import _episode_nll_stepwise

    tw_cfg = ModelConfig(
        embed_dim=8, ff_dim=16, heads=2, encoder_layers=1, decoder_layers=2,
        experts=2, expert_depth=1, tightness_range=(0.2, 3.0),
        decoder_style=style,
    )
    specs = [
        GenSpec(kind=TSP, n=7, seed=21),
        GenSpec(kind=CVRP, n=7, seed=21, capacity=14),
        GenSpec(kind=OVRP, n=7, seed=21, capacity=14),
        GenSpec(kind=CVRPTW, n=7, seed=21, capacity=14, alpha=0.8),
    ]
    for spec in specs:
        inst = gen_instance(spec)
        model = Model(tw_cfg, seed=1) if spec.kind is CVRPTW else tiny_model(style, seed=1)
        label = rollout_greedy(inst, model).visits
        fast, fast_steps = episode_nll(inst, model, label)
        slow, slow_steps = _episode_nll_stepwise(inst, model, label)
        assert fast_steps == slow_steps
        assert fast.data[0, 0] == pytest.approx(slow.data[0, 0], rel=1e-9), spec.kind


def test_encode_all_matches_per_instance_encode():
    model = tiny_model()
    insts = [gen_instance(GenSpec(kind=CVRP, n=6, seed=s, capacity=14))
             for s in (1, 2, 3)]
    fused = encode_all(insts, model)
    width = len(insts[0].nodes)
    for i, inst in enumerate(insts):
        single = encode(inst, model)
        block = fused.data[i * width:(i + 1) * width]
        np.testing.assert_allclose(block, single.data, rtol=1e-9)
    small = gen_instance(GenSpec(kind=CVRP, n=4, seed=1, capacity=14))
    with pytest.raises(DomainError):
        encode_all([insts[0], small], model)


@pytest.mark.parametrize("style", ["expert_stack", "pointer"])
def test_batch_nll_matches_weighted_episode_sum(style):
    from vrplab.autodiff import backward, zero_grad

    tw_cfg = ModelConfig(
        embed_dim=8, ff_dim=16, heads=2, encoder_layers=1, decoder_layers=2,
        experts=2, expert_depth=1, tightness_range=(0.2, 3.0),
        decoder_style=style,
    )
    cases = [
        (TSP, dict()),
        (CVRP, dict(capacity=14)),
        (OVRP, dict(capacity=14)),
        (CVRPTW, dict(capacity=14, alpha=0.8)),
    ]
    for kind, extra in cases:
        model = (Model(tw_cfg, seed=1) if kind is CVRPTW
                 else tiny_model(style, seed=1))
        insts = [gen_instance(GenSpec(kind=kind, n=6, seed=s, **extra))
                 for s in (31, 32, 33)]
        labels = [rollout_greedy(inst, model).visits for inst in insts]
        weights = [0.7, -0.4, 1.3]

        zero_grad(model.parameters())
        total, counts = batch_nll(model, insts, labels, weights)
        backward(total)
        fused_val = total.data[0, 0]
        fused_grads = {k: p.grad.copy() for k, p in model.params.items()
                       if p.grad is not None}

        zero_grad(model.parameters())
        ref = 0.0
        for inst, label, w in zip(insts, labels, weights):
            nll, steps = episode_nll(inst, model, label)
            assert counts[insts.index(inst)] == steps
            ref += w * nll.data[0, 0]
            backward(nll, seed=w)
        assert fused_val == pytest.approx(ref, rel=1e-9), kind
        for k, g in fused_grads.items():
            np.testing.assert_allclose(
                model.params[k].grad, g, rtol=1e-7, atol=1e-10,
                err_msg=f"{kind} {k}")


def test_batch_nll_per_step_mean_and_forced_first():
    model = tiny_model()
    insts = [gen_instance(GenSpec(kind=CVRP, n=6, seed=s, capacity=14))
             for s in (41, 42)]
    outs = [rollout_multistart(inst, model, k=1, rng=stream_rng(2, 7, i))[0]
            for i, inst in enumerate(insts)]
    visits = [sol.visits for sol, _ in outs]
    total, counts = batch_nll(model, insts, visits, [0.5, 0.5],
                              forced_firsts=[1, 1], per_step_mean=True)
    ref = 0.0
    for inst, v, n in zip(insts, visits, counts):
        nll, steps = episode_nll(inst, model, v, forced_first=1)
        assert steps == n
        ref += 0.5 * nll.data[0, 0] / steps
    assert total.data[0, 0] == pytest.approx(ref, rel=1e-9)


def test_multistart_forces_distinct_first_customers():
    inst = gen_instance(GenSpec(kind=CVRP, n=6, seed=7, capacity=50))
    model = tiny_model()
    outs = rollout_multistart(inst, model, k=4)
    firsts = [s.visits[1] for s, _ in outs]
    assert firsts == [1, 2, 3, 4]
    for s, _ in outs:
        assert validate(inst, s)
    with pytest.raises(DomainError):
        rollout_multistart(inst, model, k=7)


def test_multistart_replay_excludes_forced_step():
    inst = gen_instance(GenSpec(kind=CVRP, n=5, seed=8, capacity=50))
    model = tiny_model()
    (sol, lp), = rollout_multistart(inst, model, k=1, rng=stream_rng(1, 7, 0))
    assert sol.visits[1] == 1
    nll, steps = episode_nll(inst, model, sol.visits, forced_first=1)
    assert nll.data[0, 0] == pytest.approx(-lp, rel=1e-9, abs=1e-9)
    assert steps == len(sol.visits) - 3


# ----------------------------------------------------------------- grad check

def test_episode_grad_check_touches_all_stages():
    inst = gen_instance(GenSpec(kind=CVRP, n=4, seed=9, capacity=50))
    model = tiny_model()
    label = rollout_greedy(inst, model).visits

    def build():
        nll, _ = episode_nll(inst, model, label)
        return nll

    probes = [
        model.params["cust_in.w"],
        model.params["ctx.w"],
        model.params["trunk0.h0.wq"],
        model.params["expert0.head.w"],
        model.params["expert0.l0.n2.g"],
    ]
    assert grad_check(build, probes) < 1e-4


def test_pointer_expert_grad_check():
    model = tiny_model("pointer")
    rng = np.random.default_rng(1)
    context = Tensor(rng.normal(size=(1, 16)), requires_grad=True)
    nodes = Tensor(rng.normal(size=(5, 8)), requires_grad=True)
    mask = np.array([[True, True, False, True, True]])

    from vrplab.autodiff import cross_entropy

    def build():
        return cross_entropy(pointer_expert_forward(model, 0, context, nodes, mask), 3)

    probes = [context, nodes, model.params["expert0.h0.wq"], model.params["expert0.ff1.b"]]
    assert grad_check(build, probes) < 1e-4


# ----------------------------------------------------------------- checkpoint

def test_model_save_load_round_trip(tmp_path):
    model = tiny_model(seed=3)
    inst = gen_instance(GenSpec(kind=CVRP, n=6, seed=10, capacity=30))
    want = rollout_greedy(inst, model)
    path = tmp_path / "model.bin"
    model.save(path)
    loaded = Model.load(path)
    assert loaded.config == model.config
    assert rollout_greedy(inst, loaded) == want
    for name, t in model.params.items():
        assert np.array_equal(t.data, loaded.params[name].data)
