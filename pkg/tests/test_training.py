import dataclasses

import numpy as np
import pytest

from vrplab.autodiff import MaskError, Tensor
from vrplab.baselines import oracle
from vrplab.core import DomainError, ProblemKind
from vrplab.generator import GenSpec, gen_batch, gen_dataset
from vrplab.policy import Model, ModelConfig, gate
from vrplab.training import (
    Adam,
    TrainSpec,
    TrainingDiverged,
    advantages,
    apply_arm,
    bucket_gaps,
    eval_buckets,
    greedy_solver,
    oracle_labels,
    policy_gradient_step,
    reference_costs,
    resume,
    supervised_step,
    train,
    training_batches,
    vct_sample,
)
from vrplab.generator import stream_rng

CVRP = ProblemKind.CVRP
CVRPTW = ProblemKind.CVRPTW
TSP = ProblemKind.TSP

TINY = ModelConfig(embed_dim=8, ff_dim=16, heads=2, encoder_layers=1,
                   decoder_layers=1, experts=1, expert_depth=1)


# ---------------------------------------------------------------------- adam

def test_adam_single_step_hand_computed():
    p = Tensor(np.array([[1.0]]), requires_grad=True)
    opt = Adam({"w": p}, lr=0.1)
    p.grad = np.array([[0.5]])
    opt.step()
    m_hat = 0.1 * 0.5 / (1 - 0.9)  # == 0.5 after bias correction
    v_hat = 0.001 * 0.25 / (1 - 0.999)
    want = 1.0 - 0.1 * m_hat / (np.sqrt(v_hat) + 1e-8)
    assert p.data[0, 0] == pytest.approx(want, abs=1e-15)
    assert opt.counts["w"] == 1


def test_adam_skips_parameters_without_gradients():
    a = Tensor(np.ones((1, 2)), requires_grad=True)
    b = Tensor(np.ones((1, 2)), requires_grad=True)
    opt = Adam({"a": a, "b": b}, lr=0.1)
    a.grad = np.full((1, 2), 0.3)
    opt.step()
    assert not np.array_equal(a.data, np.ones((1, 2)))
    assert np.array_equal(b.data, np.ones((1, 2)))
    assert opt.counts["b"] == 0
    assert np.all(opt.m["b"] == 0.0) and np.all(opt.v["b"] == 0.0)


def test_adam_state_round_trip():
    rng = np.random.default_rng(0)

    def fresh():
        return {"w": Tensor(np.ones((2, 2)), requires_grad=True)}

    def run(opt, params, steps):
        for i in range(steps):
            params["w"].grad = rng_grads[i]
            opt.step()

    rng_grads = [rng.normal(size=(2, 2)) for _ in range(4)]
    p1 = fresh()
    opt1 = Adam(p1, lr=0.05)
    run(opt1, p1, 4)

    p2 = fresh()
    opt2 = Adam(p2, lr=0.05)
    run(opt2, p2, 2)
    saved = {k: v.copy() for k, v in opt2.state_arrays().items()}
    p3 = {"w": Tensor(p2["w"].data.copy(), requires_grad=True)}
    opt3 = Adam(p3, lr=0.05)
    opt3.load_state_arrays(saved)
    for i in (2, 3):
        p3["w"].grad = rng_grads[i]
        opt3.step()
    assert np.array_equal(p1["w"].data, p3["w"].data)

    with pytest.raises(DomainError):
        opt3.load_state_arrays({"m.w": np.zeros((2, 2))})


# ---------------------------------------------------------------------- spec

def test_train_spec_validation():
    gen = GenSpec(kind=CVRP, n=5, seed=0, capacity=50)
    with pytest.raises(DomainError):
        TrainSpec(gen=gen, regime="evolution")
    with pytest.raises(DomainError):
        TrainSpec(gen=gen, arm="mem_only")
    with pytest.raises(DomainError):
        TrainSpec(gen=gen, learning_rate=0.0)
    with pytest.raises(DomainError):
        TrainSpec(gen=gen, decay=1.5)
    with pytest.raises(DomainError):
        TrainSpec(gen=gen, regime="policy_gradient", k_starts=1)


def test_apply_arm_expansion():
    base = TrainSpec(gen=GenSpec(kind=CVRP, n=5, seed=0, capacity=99), model=TINY)
    assert apply_arm(base) is base

    fixed = apply_arm(dataclasses.replace(base, arm="fixed"))
    assert fixed.gen.capacity == 50 and fixed.gen.capacity_range is None
    assert fixed.model.experts == 1

    vct = apply_arm(dataclasses.replace(base, arm="vct"))
    assert vct.gen.capacity_range == (10, 500)
    assert vct.model.experts == 1

    mem = apply_arm(dataclasses.replace(base, arm="vct_mem"))
    assert mem.gen.capacity_range == (10, 500)
    assert mem.model.experts == 3

    tw = TrainSpec(gen=GenSpec(kind=CVRPTW, n=5, seed=0, capacity=50, alpha=2.0),
                   model=TINY, arm="vct_mem")
    expanded = apply_arm(tw)
    assert expanded.gen.alpha_range == (0.0, 3.0)
    assert expanded.model.tightness_range == (0.2, 3.0)
    assert expanded.model.experts == 3


def test_vct_sample_assignment_modes():
    ranged = GenSpec(kind=CVRP, n=4, seed=5, capacity_range=(10, 500))
    caps = {i.capacity for i in vct_sample(ranged, 64, 0)}
    assert len(caps) > 20  # per-instance draws spread over the range

    per_batch = dataclasses.replace(ranged, assignment="batch")
    b0 = {i.capacity for i in vct_sample(per_batch, 16, 0)}
    b1 = {i.capacity for i in vct_sample(per_batch, 16, 1)}
    assert len(b0) == 1 and len(b1) == 1 and b0 != b1

    fixed = GenSpec(kind=CVRP, n=4, seed=5, capacity=50)
    assert {i.capacity for i in vct_sample(fixed, 16, 0)} == {50}


def test_training_batches_cover_train_size_deterministically():
    spec = TrainSpec(gen=GenSpec(kind=CVRP, n=4, seed=7, capacity=50),
                     model=TINY, batch_size=32, train_size=70)
    batches = training_batches(spec)
    assert [len(b) for b in batches] == [32, 32, 6]
    again = training_batches(spec)
    assert batches == again


# --------------------------------------------------------------------- steps

def test_supervised_overfit_smoke():
    batch = gen_batch(GenSpec(kind=CVRP, n=6, seed=0, capacity=50), 8, 0)
    labels = oracle_labels(batch)
    model = Model(TINY, seed=0)
    opt = Adam(model.params, lr=3e-3)
    losses = [supervised_step(model, opt, batch, labels) for _ in range(50)]
    assert all(np.isfinite(losses))
    assert losses[-1] < 0.8 * losses[0]


def test_supervised_step_rejects_masked_label():
    batch = gen_batch(GenSpec(kind=CVRP, n=5, seed=1, capacity=50), 1, 0)
    model = Model(TINY, seed=0)
    opt = Adam(model.params, lr=1e-3)
    bad = (0, 0, 1, 2, 3, 4, 5, 0)  # picks the depot while standing on it
    with pytest.raises(MaskError):
        supervised_step(model, opt, batch, [bad])


def test_optimizer_and_parameter_isolation_on_single_bucket():
    cfg = dataclasses.replace(TINY, experts=3)
    model = Model(cfg, seed=0)
    batch = gen_batch(GenSpec(kind=CVRP, n=6, seed=2, capacity=50), 4, 0)
    assert all(gate(i.capacity, cfg) == 0 for i in batch)
    frozen = {name: t.data.copy() for name, t in model.params.items()
              if name.startswith(("expert1.", "expert2."))}
    opt = Adam(model.params, lr=1e-3)
    for _ in range(2):
        supervised_step(model, opt, batch, oracle_labels(batch))
    for name, before in frozen.items():
        assert np.array_equal(model.params[name].data, before), name
        assert opt.counts[name] == 0
        assert np.all(opt.m[name] == 0.0)
    assert not np.array_equal(model.params["expert0.head.w"].data.copy(),
                              Model(cfg, seed=0).params["expert0.head.w"].data)


def test_advantages_center_to_zero():
    adv = advantages(np.array([3.0, 5.0, 4.0, 8.0]))
    assert adv.sum() == pytest.approx(0.0, abs=1e-12)
    assert np.array_equal(advantages(np.array([2.0, 2.0, 2.0])), np.zeros(3))


def test_identical_rollout_costs_leave_parameters_unchanged():
    # all-equal costs mean zero advantage everywhere, hence no update
    model = Model(TINY, seed=0)
    before = {k: t.data.copy() for k, t in model.params.items()}
    batch = gen_batch(GenSpec(kind=CVRP, n=4, seed=3, capacity=500), 2, 0)
    opt = Adam(model.params, lr=1e-2)

    import vrplab.training as tr
    real = tr.rollout_multistart

    def equalized(inst, m, k, rng=None):
        outs = real(inst, m, k, rng)
        return [(outs[0][0], lp) for _, lp in outs]

    tr.rollout_multistart = equalized
    try:
        loss = policy_gradient_step(model, opt, batch, 2, stream_rng(0, 3, 0))
    finally:
        tr.rollout_multistart = real
    assert loss == 0.0
    for k, t in model.params.items():
        assert np.array_equal(t.data, before[k])


def test_policy_gradient_toy_run_improves_held_out_cost():
    pg = TrainSpec(gen=GenSpec(kind=CVRP, n=10, seed=3, capacity=50), model=TINY,
                   regime="policy_gradient", epochs=5, batch_size=8,
                   train_size=32, learning_rate=3e-3, k_starts=4, seed=3)
    sets = {"C=50": gen_dataset(GenSpec(kind=CVRP, n=10, seed=99, count=12,
                                        capacity=50))}
    refs = reference_costs(sets)
    before = bucket_gaps(greedy_solver(Model(TINY, seed=3)), sets, refs)
    result = train(pg)
    after = bucket_gaps(greedy_solver(result.model), sets, refs)
    assert after["C=50"] < before["C=50"]


# ---------------------------------------------------------------- evaluation

def test_eval_buckets_share_geometry():
    sets = eval_buckets(CVRP, n=5, seed=11, per_bucket=3)
    assert sorted(sets) == ["C=10", "C=100", "C=200", "C=50", "C=500"]
    xs10 = [nd.x for nd in sets["C=10"][0].nodes]
    xs500 = [nd.x for nd in sets["C=500"][0].nodes]
    assert xs10 == xs500
    assert sets["C=10"][0].capacity == 10 and sets["C=500"][0].capacity == 500

    tw = eval_buckets(CVRPTW, n=5, seed=11, per_bucket=2)
    assert sorted(tw) == ["alpha=0.2", "alpha=1.0", "alpha=3.0"]
    assert eval_buckets(TSP, n=5, seed=11, per_bucket=2).keys() == {"all"}


def test_oracle_scores_zero_gap_against_itself():
    sets = eval_buckets(CVRP, n=6, seed=12, per_bucket=3)
    refs = reference_costs(sets)
    gaps = bucket_gaps(oracle, sets, refs)
    assert all(g == pytest.approx(0.0, abs=1e-9) for g in gaps.values())


def test_reference_costs_use_cache():
    sets = eval_buckets(CVRP, n=5, seed=13, per_bucket=2)
    cache = {}
    first = reference_costs(sets, cache)
    assert len(cache) == sum(len(v) for v in sets.values())
    poisoned = {k: v + 1.0 for k, v in cache.items()}
    second = reference_costs(sets, poisoned)
    assert second["C=10"][0] == first["C=10"][0] + 1.0  # served from cache


def test_gate_usage_spreads_across_experts_under_instance_vct():
    cfg = dataclasses.replace(TINY, experts=3)
    insts = gen_batch(GenSpec(kind=CVRP, n=4, seed=17, capacity_range=(10, 500)),
                      600, 0)
    counts = np.bincount([gate(i.capacity, cfg) for i in insts], minlength=3)
    assert counts.sum() == 600
    assert all(140 <= c <= 260 for c in counts), counts


# ---------------------------------------------------------------- train loop

def _tiny_spec(**over):
    base = dict(gen=GenSpec(kind=CVRP, n=5, seed=4, capacity=50), model=TINY,
                regime="supervised", epochs=2, batch_size=8, train_size=16,
                learning_rate=1e-3, seed=4)
    base.update(over)
    return TrainSpec(**base)


def test_train_writes_metrics_and_checkpoints(tmp_path):
    sets = eval_buckets(CVRP, n=5, seed=21, per_bucket=2)
    refs = reference_costs(sets)
    result = train(_tiny_spec(), eval_sets=sets, ref_costs=refs, out_dir=tmp_path)
    step_rows = [r for r in result.metrics if r["bucket"] == ""]
    eval_rows = [r for r in result.metrics if r["bucket"] != ""]
    assert len(step_rows) == 4  # 2 batches x 2 epochs
    assert len(eval_rows) == 10  # 5 buckets x 2 epochs
    assert all(np.isfinite(r["loss"]) for r in step_rows)
    assert {r["bucket"] for r in eval_rows} == set(sets)
    assert sorted(p.name for p in result.checkpoints) == [
        "model_e000.bin", "model_e001.bin"]
    assert (tmp_path / "adam_e001.bin").exists()


@pytest.mark.parametrize("regime", ["supervised", "policy_gradient"])
def test_resume_reproduces_straight_run(tmp_path, regime):
    spec = _tiny_spec(regime=regime, k_starts=3,
                      gen=GenSpec(kind=CVRP, n=5, seed=4, capacity_range=(10, 500)))
    a_dir = tmp_path / "straight"
    b_dir = tmp_path / "resumed"
    straight = train(spec, out_dir=a_dir)
    train(dataclasses.replace(spec, epochs=1), out_dir=b_dir)
    resumed = resume(spec, b_dir)

    final_a = Model.load(a_dir / "model_e001.bin")
    final_b = Model.load(b_dir / "model_e001.bin")
    for name, t in final_a.params.items():
        assert np.array_equal(t.data, final_b.params[name].data), name

    tail_a = [r["loss"] for r in straight.metrics if r["epoch"] == 1]
    tail_b = [r["loss"] for r in resumed.metrics if r["epoch"] == 1]
    assert tail_a == tail_b


def test_non_finite_loss_aborts():
    spec = _tiny_spec(epochs=1)
    model = Model(TINY, seed=0)
    model.params["ctx.w"].data[0, 0] = np.nan
    with pytest.raises(TrainingDiverged):
        train(spec, model)
