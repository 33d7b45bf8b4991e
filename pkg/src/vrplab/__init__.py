"""Desk-scale laboratory for constraint tightness in vehicle routing.

Modules cover the full loop: instance generation, classical baselines,
solution transforms and similarity scoring, a minimal autodiff engine, an
attention routing policy with optional gated experts, training/evaluation
harnesses, and a CLI (``vrplab``).
"""

from .core import (
    DomainError,
    InfeasibleError,
    Instance,
    Node,
    ProblemKind,
    Solution,
    StructureError,
    apply_tightness,
    distance_matrix,
    schedule,
    solution_cost,
    solution_from_routes,
    sub_tours,
    tightness,
    validate,
)
from .generator import GenSpec, gen_batch, gen_dataset, gen_instance, stream_rng
from .similarity import TransferCosts, similarity, transfer_table
from .baselines import clarke_wright, gap, nearest_neighbor, oracle, two_opt_or_opt
from .policy import Model, ModelConfig, rollout_greedy, rollout_multistart
from .training import TrainSpec, desk_train_spec, eval_buckets, train
from .estimators import (
    ClassicalRoutingSolver,
    NeuralRoutingSolver,
    SolutionConverter,
    check_instances,
)

__version__ = "0.1.0"

__all__ = [
    "ClassicalRoutingSolver",
    "DomainError",
    "GenSpec",
    "InfeasibleError",
    "Instance",
    "Model",
    "ModelConfig",
    "NeuralRoutingSolver",
    "Node",
    "ProblemKind",
    "Solution",
    "SolutionConverter",
    "StructureError",
    "TrainSpec",
    "TransferCosts",
    "apply_tightness",
    "check_instances",
    "clarke_wright",
    "desk_train_spec",
    "distance_matrix",
    "eval_buckets",
    "gap",
    "gen_batch",
    "gen_dataset",
    "gen_instance",
    "nearest_neighbor",
    "oracle",
    "rollout_greedy",
    "rollout_multistart",
    "schedule",
    "similarity",
    "solution_cost",
    "solution_from_routes",
    "stream_rng",
    "sub_tours",
    "tightness",
    "train",
    "transfer_table",
    "two_opt_or_opt",
    "validate",
    "__version__",
]
