import numpy as np
import pytest

from vrplab.baselines import clarke_wright, nearest_neighbor
from vrplab.core import DomainError, ProblemKind, solution_cost, validate
from vrplab.estimators import (
    ClassicalRoutingSolver,
    NeuralRoutingSolver,
    SolutionConverter,
    check_instances,
)
from vrplab.generator import GenSpec, gen_dataset, gen_instance
from vrplab.policy import ModelConfig
from vrplab.transforms import cvrp_to_ovrp

CVRP = ProblemKind.CVRP
OVRP = ProblemKind.OVRP
TSP = ProblemKind.TSP

TINY = ModelConfig(embed_dim=8, ff_dim=16, heads=2, encoder_layers=1,
                   decoder_layers=1, experts=1, expert_depth=1)


def cvrp_batch(count: int = 3, seed: int = 5) -> list:
    return gen_dataset(GenSpec(kind=CVRP, n=6, seed=seed, count=count,
                               capacity=14))


# --------------------------------------------------------------- validation

def test_check_instances_returns_common_kind():
    insts = cvrp_batch()
    assert check_instances(insts) is CVRP
    assert check_instances(insts, CVRP) is CVRP


def test_check_instances_rejects_bad_batches():
    insts = cvrp_batch()
    with pytest.raises(DomainError):
        check_instances([])
    with pytest.raises(DomainError):
        check_instances(insts + ["not an instance"])
    tsp = gen_instance(GenSpec(kind=TSP, n=5, seed=1))
    with pytest.raises(DomainError):
        check_instances(insts + [tsp])
    with pytest.raises(DomainError):
        check_instances(insts, TSP)


# -------------------------------------------------------------------- params

def test_get_params_round_trips_through_set_params():
    est = NeuralRoutingSolver(epochs=3, seed=9)
    params = est.get_params()
    assert params["epochs"] == 3 and params["seed"] == 9
    clone = NeuralRoutingSolver(**params)
    assert clone.get_params() == params
    clone.set_params(epochs=1, arm="vct")
    assert clone.epochs == 1 and clone.arm == "vct"
    with pytest.raises(DomainError):
        clone.set_params(bogus=1)


def test_repr_lists_parameters():
    text = repr(ClassicalRoutingSolver(method="cw"))
    assert text == "ClassicalRoutingSolver(method='cw')"


# ----------------------------------------------------------------- classical

def test_classical_solver_matches_underlying_functions():
    insts = cvrp_batch()
    for method, fn in (("nn", nearest_neighbor), ("cw", clarke_wright)):
        preds = ClassicalRoutingSolver(method=method).fit(insts).predict(insts)
        for inst, sol in zip(insts, preds):
            assert validate(inst, sol)
            assert sol.visits == fn(inst).visits


def test_classical_solver_rejects_unknown_method():
    with pytest.raises(DomainError):
        ClassicalRoutingSolver(method="simplex").fit()
    with pytest.raises(DomainError):
        ClassicalRoutingSolver(method="simplex").predict(cvrp_batch())


# ----------------------------------------------------------------- converter

def test_solution_converter_applies_conversion():
    insts = cvrp_batch()
    sols = ClassicalRoutingSolver("cw").predict(insts)
    pairs = list(zip(insts, sols))
    outs = SolutionConverter("cvrp_to_ovrp").fit().transform(pairs)
    for (inst, sol), out in zip(pairs, outs):
        assert out.visits == cvrp_to_ovrp(inst, sol).visits
    with pytest.raises(DomainError):
        SolutionConverter("cvrp_to_teleport").fit()
    with pytest.raises(DomainError):
        SolutionConverter().transform([(insts[0], "not a solution")])


# -------------------------------------------------------------------- neural

def test_neural_solver_fit_predict_and_determinism():
    est = NeuralRoutingSolver(n=6, epochs=1, batch_size=4, train_size=8,
                              seed=3, model_config=TINY)
    insts = cvrp_batch(count=4, seed=21)
    preds = est.fit().predict(insts)
    for inst, sol in zip(insts, preds):
        assert validate(inst, sol)
    twin = NeuralRoutingSolver(**est.get_params()).fit()
    for a, b in zip(preds, twin.predict(insts)):
        assert a.visits == b.visits
    for name, p in est.model_.params.items():
        np.testing.assert_array_equal(p.data, twin.model_.params[name].data)


def test_neural_solver_fit_on_explicit_instances():
    X = cvrp_batch(count=8, seed=31)
    est = NeuralRoutingSolver(n=6, epochs=1, batch_size=4, train_size=8,
                              seed=3, model_config=TINY)
    est.fit(X)
    preds = est.predict(X[:2])
    assert all(validate(inst, sol) for inst, sol in zip(X[:2], preds))
    with pytest.raises(DomainError):
        est.fit(y=[(0, 1, 0)])
    with pytest.raises(DomainError):
        est.fit(X, y=[(0, 1, 0)])  # misaligned labels


def test_neural_solver_requires_fit_before_predict():
    with pytest.raises(DomainError):
        NeuralRoutingSolver().predict(cvrp_batch())


def test_neural_solver_checkpoint_round_trip(tmp_path):
    est = NeuralRoutingSolver(n=6, epochs=1, batch_size=4, train_size=8,
                              seed=3, model_config=TINY)
    insts = cvrp_batch(count=2, seed=40)
    preds = est.fit().predict(insts)
    path = tmp_path / "model.bin"
    est.model_.save(path)
    loaded = NeuralRoutingSolver().load_checkpoint(path)
    for a, b in zip(preds, loaded.predict(insts)):
        assert a.visits == b.visits
