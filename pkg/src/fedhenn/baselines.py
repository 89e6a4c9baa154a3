"""Reference algorithms: FedAvg, FedProx and isolated local training.

They reuse the FedHeNN round loops with the alignment term switched off,
so each one is exactly its FedHeNN counterpart at ``eta0 = 0``.
"""

from __future__ import annotations

from fedhenn import nn
from fedhenn.config import ExperimentConfig
from fedhenn.federation import (
    Population,
    RunResult,
    prepare_population,
    run_heterogeneous_rounds,
    run_homogeneous_rounds,
)
from fedhenn.nn import ModelParams


def proximal_term(params: ModelParams, center: ModelParams, mu: float) -> tuple[float, ModelParams]:
    """``(mu / 2) * ||params - center||^2`` over all weights and biases, with its gradient."""
    diff = nn.add(params, center, scale=-1.0)
    value = 0.5 * mu * sum(float((a * a).sum()) for a in diff.arrays())
    grads = ModelParams(diff.arch, [(mu * w, mu * b) for w, b in diff.layers])
    return value, grads


def run_fedavg(config: ExperimentConfig, pop: Population | None = None, record_history: bool = False) -> RunResult:
    pop = prepare_population(config) if pop is None else pop
    return run_homogeneous_rounds(config, pop, align=False, record_history=record_history)


def run_fedprox(
    config: ExperimentConfig, pop: Population | None = None, mu: float | None = None, record_history: bool = False
) -> RunResult:
    mu = config.fedprox_mu if mu is None else mu
    if mu < 0:
        raise ValueError(f"fedprox mu must be >= 0, got {mu}")
    pop = prepare_population(config) if pop is None else pop
    if mu == 0:
        # degenerate config: the term vanishes, leaving FedAvg
        return run_homogeneous_rounds(config, pop, align=False, record_history=record_history)

    def pull_toward(global_params: ModelParams):
        center = global_params.copy()
        return lambda params: proximal_term(params, center, mu)

    return run_homogeneous_rounds(config, pop, align=False, extra_term=pull_toward, record_history=record_history)


def run_local_only(config: ExperimentConfig, pop: Population | None = None, record_history: bool = False) -> RunResult:
    """Each client trains on its own shard with the same round/sampling schedule, never communicating."""
    pop = prepare_population(config) if pop is None else pop
    return run_heterogeneous_rounds(config, pop, align=False, record_history=record_history)
