"""Estimator-object wrappers around the functional solver API.

Nothing here adds algorithmic behaviour.  The classes package the existing
solvers and solution converters behind the familiar ``fit`` / ``predict`` /
``transform`` protocol with ``get_params`` / ``set_params``, so they slot
into pipeline-style tooling by duck typing alone; scikit-learn itself is
never imported.
"""

from __future__ import annotations

import inspect

from .baselines import clarke_wright, nearest_neighbor, oracle
from .core import DomainError, Instance, ProblemKind, Solution
from .policy import Model, ModelConfig, rollout_greedy
from .training import TrainResult, desk_train_spec, train
from .transforms import (
    cvrp_to_cvrptw,
    cvrp_to_ovrp,
    cvrp_to_tsp,
    cvrptw_to_cvrp,
    ovrp_to_cvrp,
    tsp_to_cvrp,
)

__all__ = [
    "ClassicalRoutingSolver",
    "NeuralRoutingSolver",
    "SolutionConverter",
    "check_instances",
]


def check_instances(X, kind: ProblemKind | None = None) -> ProblemKind:
    """Validate a batch of instances and return their common kind.

    Rejects empty input, non-Instance entries, and mixed kinds; ``kind``
    additionally pins which kind the batch must hold.
    """
    items = list(X)
    if not items:
        raise DomainError("expected at least one instance")
    for item in items:
        if not isinstance(item, Instance):
            raise DomainError(f"expected Instance, got {type(item).__name__}")
    kinds = {inst.kind for inst in items}
    if len(kinds) > 1:
        names = sorted(k.value for k in kinds)
        raise DomainError(f"mixed instance kinds: {names}")
    found = items[0].kind
    if kind is not None and found is not kind:
        raise DomainError(f"expected {kind.value} instances, got {found.value}")
    return found


class _ParamsMixin:
    """get_params/set_params over the constructor signature, sklearn-style."""

    @classmethod
    def _param_names(cls) -> list[str]:
        sig = inspect.signature(cls.__init__)
        return [p for p in sig.parameters if p != "self"]

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params):
        valid = self._param_names()
        for name, value in params.items():
            if name not in valid:
                raise DomainError(
                    f"unknown parameter {name!r} for {type(self).__name__}"
                )
            setattr(self, name, value)
        return self

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}={v!r}" for k, v in self.get_params().items())
        return f"{type(self).__name__}({inner})"


_CLASSICAL_METHODS = {
    "nn": nearest_neighbor,
    "cw": clarke_wright,
    "oracle": oracle,
}


class ClassicalRoutingSolver(_ParamsMixin):
    """Stateless heuristic solver behind the estimator protocol.

    ``method`` is one of ``nn`` (nearest neighbour), ``cw`` (savings merge),
    or ``oracle`` (savings plus local-search polish), matching the CLI names.
    """

    def __init__(self, method: str = "oracle"):
        self.method = method

    def _resolve(self):
        try:
            return _CLASSICAL_METHODS[self.method]
        except KeyError:
            raise DomainError(f"unknown method {self.method!r}") from None

    def fit(self, X=None, y=None) -> "ClassicalRoutingSolver":
        self._resolve()
        if X is not None:
            check_instances(X)
        return self

    def predict(self, X) -> list[Solution]:
        solver = self._resolve()
        check_instances(X)
        return [solver(inst) for inst in X]


_CONVERSIONS = {
    "cvrp_to_tsp": cvrp_to_tsp,
    "tsp_to_cvrp": tsp_to_cvrp,
    "cvrp_to_ovrp": cvrp_to_ovrp,
    "ovrp_to_cvrp": ovrp_to_cvrp,
    "cvrp_to_cvrptw": cvrp_to_cvrptw,
    "cvrptw_to_cvrp": cvrptw_to_cvrp,
}


class SolutionConverter(_ParamsMixin):
    """Solution-space converter as a transformer over (instance, solution)
    pairs; ``transform`` returns the converted solutions."""

    def __init__(self, conversion: str = "cvrp_to_ovrp"):
        self.conversion = conversion

    def _resolve(self):
        try:
            return _CONVERSIONS[self.conversion]
        except KeyError:
            raise DomainError(f"unknown conversion {self.conversion!r}") from None

    def fit(self, X=None, y=None) -> "SolutionConverter":
        self._resolve()
        return self

    def transform(self, X) -> list[Solution]:
        convert = self._resolve()
        out = []
        for pair in X:
            inst, sol = pair
            if not isinstance(inst, Instance) or not isinstance(sol, Solution):
                raise DomainError("expected (Instance, Solution) pairs")
            out.append(convert(inst, sol))
        return out


class NeuralRoutingSolver(_ParamsMixin):
    """Attention policy behind fit/predict.

    ``fit()`` with no arguments trains on freshly generated instances per
    the stored schedule; passing ``X`` (and optionally ``y`` as visit
    sequences) trains on the given instances instead.  ``predict`` decodes
    greedily.  All randomness flows from ``seed``.
    """

    def __init__(
        self,
        kind: str = "cvrp",
        arm: str | None = None,
        regime: str = "supervised",
        n: int = 20,
        epochs: int = 5,
        batch_size: int = 32,
        train_size: int = 1024,
        learning_rate: float = 1e-3,
        decay: float = 0.9,
        k_starts: int = 8,
        seed: int = 0,
        model_config: ModelConfig | None = None,
    ):
        self.kind = kind
        self.arm = arm
        self.regime = regime
        self.n = n
        self.epochs = epochs
        self.batch_size = batch_size
        self.train_size = train_size
        self.learning_rate = learning_rate
        self.decay = decay
        self.k_starts = k_starts
        self.seed = seed
        self.model_config = model_config

    def _spec(self):
        overrides = dict(
            epochs=self.epochs, batch_size=self.batch_size,
            train_size=self.train_size, learning_rate=self.learning_rate,
            decay=self.decay, k_starts=self.k_starts,
        )
        if self.model_config is not None:
            overrides["model"] = self.model_config
        spec = desk_train_spec(
            ProblemKind(self.kind), regime=self.regime, seed=self.seed,
            arm=self.arm, **overrides,
        )
        if self.n != 20:
            from dataclasses import replace

            spec = replace(spec, gen=replace(spec.gen, n=self.n))
        return spec

    def fit(self, X=None, y=None) -> "NeuralRoutingSolver":
        spec = self._spec()
        batches = None
        labels: dict[Instance, tuple[int, ...]] | None = None
        if X is not None:
            X = list(X)
            check_instances(X, ProblemKind(self.kind))
            batches = [X[i:i + self.batch_size]
                       for i in range(0, len(X), self.batch_size)]
            if y is not None:
                if len(y) != len(X):
                    raise DomainError("y must align with X")
                labels = {inst: tuple(v) for inst, v in zip(X, y)}
        elif y is not None:
            raise DomainError("y given without X")
        result: TrainResult = train(spec, batches=batches, labels=labels)
        self.model_ = result.model
        self.metrics_ = result.metrics
        return self

    def load_checkpoint(self, path) -> "NeuralRoutingSolver":
        """Skip training and predict with saved parameters."""
        self.model_ = Model.load(path)
        self.metrics_ = []
        return self

    def predict(self, X) -> list[Solution]:
        model = getattr(self, "model_", None)
        if model is None:
            raise DomainError("fit or load_checkpoint before predict")
        check_instances(X)
        return [rollout_greedy(inst, model) for inst in X]
