"""FedHeNN server/client protocol for homogeneous and heterogeneous populations.

Every random draw comes from a generator seeded by ``(seed, stream, ...)``
so that draws in one stream (say RAD sampling) never shift another (say
client sampling or minibatch order). This is what makes an ``eta0 = 0``
FedHeNN run reproduce its baseline bit for bit.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from fedhenn import cka, nn
from fedhenn.config import ExperimentConfig
from fedhenn.data import (
    ClientShard,
    LabeledDataset,
    load_csv_dataset,
    partition_noniid,
    shrink_clients,
    split_public_pool,
    split_train_test,
    synth_gaussian_mixture,
)
from fedhenn.nn import Architecture, ModelParams

# seed streams
INIT, RAD, SAMPLE, BATCH, DATA, PARTITION, SPLIT, SHRINK, POOL, ARCH = range(1, 11)


def derive_seed(seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence([seed, *tags]).generate_state(1)[0])


def _rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng([seed, *tags])


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int | None = None  # None = full batch


@dataclass(frozen=True)
class RoundPlan:
    t: int
    eta: float
    rad: np.ndarray | None
    selected: tuple[int, ...]

    def __post_init__(self):
        sel = self.selected
        if not sel or any(b <= a for a, b in zip(sel, sel[1:])):
            raise ValueError(f"selected clients must be nonempty and strictly ascending, got {sel}")
        if self.eta < 0:
            raise ValueError(f"eta must be >= 0, got {self.eta}")


@dataclass
class FederationState:
    mode: str
    client_weights: np.ndarray
    round: int = 0
    global_params: ModelParams | None = None
    client_params: list[ModelParams] | None = None

    def __post_init__(self):
        w = np.asarray(self.client_weights, dtype=np.float64)
        if abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"client weights must sum to 1, got {w.sum()}")
        if self.mode == "homogeneous" and self.global_params is None:
            raise ValueError("homogeneous state needs global params")
        if self.mode == "heterogeneous" and self.client_params is None:
            raise ValueError("heterogeneous state needs per-client params")


@dataclass(frozen=True)
class MetricsRow:
    round: int
    scope: str
    split: str
    accuracy: float
    task_loss: float
    alignment_term: float | None
    eta: float


@dataclass
class Population:
    shards: list[ClientShard]
    rad_pool: np.ndarray | None
    n_classes: int
    d_in: int

    @property
    def counts(self) -> list[int]:
        return [s.n_i for s in self.shards]


@dataclass
class RunResult:
    params: ModelParams | list[ModelParams]
    metrics: list[MetricsRow]
    # per round: client id -> CKA of its trained representation against the round target
    alignment: list[dict[int, float]] = field(default_factory=list)
    history: list = field(default_factory=list)

    def __iter__(self):
        return iter((self.params, self.metrics))

    def final_macro(self, split: str = "test") -> float:
        last = max(r.round for r in self.metrics)
        (row,) = [r for r in self.metrics if r.round == last and r.scope == "macro_avg" and r.split == split]
        return row.accuracy


# ---------------------------------------------------------------- server steps


def eta_schedule(eta0: float, t: int, T: int, kind: str = "linear_ramp") -> float:
    """``eta0 * f(t)`` with ``f(t) = t / T`` (linear ramp) or ``f = 1`` (constant)."""
    if not 1 <= t <= T:
        raise ValueError(f"round {t} outside [1, {T}]")
    if eta0 < 0:
        raise ValueError(f"eta0 must be >= 0, got {eta0}")
    if kind == "linear_ramp":
        return eta0 * (t / T)
    if kind == "constant":
        return eta0
    raise ValueError(f"unknown eta schedule {kind!r}")


def generate_rad(pool: np.ndarray, L: int, seed: int) -> np.ndarray:
    """``L`` distinct pool rows drawn without replacement. No labels ever attach to the result."""
    pool = np.asarray(pool, dtype=np.float64)
    if L > pool.shape[0]:
        raise ValueError(f"RAD size {L} exceeds pool size {pool.shape[0]}")
    if L < 1:
        raise ValueError(f"RAD size must be >= 1, got {L}")
    rows = np.random.default_rng(seed).choice(pool.shape[0], size=L, replace=False)
    return pool[rows].copy()


def sample_clients(n_clients: int, fraction: float, seed: int, t: int) -> list[int]:
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"client fraction must be in (0, 1], got {fraction}")
    k = max(1, int(round(fraction * n_clients)))
    chosen = _rng(seed, SAMPLE, t).choice(n_clients, size=k, replace=False)
    return sorted(int(i) for i in chosen)


def fedavg_aggregate(params: list[ModelParams], counts) -> ModelParams:
    """Layer-wise mean weighted by ``n_i / sum(n)``; inputs are consumed in list order."""
    if not params:
        raise ValueError("nothing to aggregate")
    counts = np.asarray(counts, dtype=np.float64)
    if counts.size != len(params) or np.any(counts <= 0):
        raise ValueError("need one positive count per client")
    ref = params[0]
    for p in params[1:]:
        if not p.same_shape(ref):
            raise nn.ShapeError(
                f"cannot average heterogeneous models: {ref.arch.layer_dims} vs {p.arch.layer_dims}"
            )
    total = counts.sum()
    if len(params) == 1:
        return ref.copy()
    layers = []
    for l in range(len(ref.layers)):
        w = sum((n / total) * p.layers[l][0] for n, p in zip(counts, params))
        b = sum((n / total) * p.layers[l][1] for n, p in zip(counts, params))
        layers.append((w, b))
    return ModelParams(ref.arch, layers)


# ---------------------------------------------------------------- client steps


ExtraTerm = Callable[[ModelParams], tuple[float, ModelParams]]


def local_sgd(
    params: ModelParams,
    train: LabeledDataset,
    epochs: int,
    opt: OptimizerConfig,
    rng: np.random.Generator | None = None,
    rad_X: np.ndarray | None = None,
    K_target: np.ndarray | None = None,
    eta: float = 0.0,
    kernel: cka.KernelSpec = cka.LINEAR,
    extra: ExtraTerm | None = None,
) -> ModelParams:
    """``epochs`` passes of momentum SGD on the composite objective; velocity starts at zero."""
    if len(train) == 0:
        raise ValueError("client train set is empty")
    X, y = train.features, train.labels
    n = len(train)
    velocity = params.zeros_like()
    for _ in range(epochs):
        if opt.batch_size is None or opt.batch_size >= n:
            batches = [slice(None)]
        else:
            if rng is None:
                raise ValueError("minibatch training needs an rng")
            perm = rng.permutation(n)
            batches = [perm[i : i + opt.batch_size] for i in range(0, n, opt.batch_size)]
        for b in batches:
            loss, grads = nn.loss_and_grad(params, X[b], y[b], rad_X, K_target, eta, kernel)
            if extra is not None:
                extra_loss, extra_grads = extra(params)
                loss += extra_loss
                grads = nn.add(grads, extra_grads)
            if not math.isfinite(loss):
                raise FloatingPointError("local training diverged (non-finite loss)")
            params, velocity = nn.sgd_momentum_step(params, grads, velocity, opt.lr, opt.momentum)
    return params


def local_training_homo(
    global_params: ModelParams,
    rad_X: np.ndarray | None,
    eta: float,
    shard: ClientShard,
    epochs: int,
    opt: OptimizerConfig,
    kernel: cka.KernelSpec = cka.LINEAR,
    rng: np.random.Generator | None = None,
) -> ModelParams:
    """Start from the global model and align to its RAD kernel, frozen for all epochs."""
    params = global_params.copy()
    if epochs == 0:
        return params
    K_global = None
    if eta > 0:
        K_global = cka.activation_kernel(nn.represent(global_params, rad_X), kernel)
    return local_sgd(params, shard.train, epochs, opt, rng, rad_X, K_global, eta, kernel)


def local_training_hetero(
    own_params: ModelParams,
    K_bar: np.ndarray | None,
    rad_X: np.ndarray | None,
    eta: float,
    shard: ClientShard,
    epochs: int,
    opt: OptimizerConfig,
    kernel: cka.KernelSpec = cka.LINEAR,
    rng: np.random.Generator | None = None,
) -> ModelParams:
    """Continue the client's own model, aligned to the aggregated kernel ``K_bar``."""
    params = own_params.copy()
    if epochs == 0:
        return params
    return local_sgd(params, shard.train, epochs, opt, rng, rad_X, K_bar if eta > 0 else None, eta, kernel)


# ---------------------------------------------------------------- evaluation


@dataclass
class Evaluation:
    accuracy: list[float]
    loss: list[float]

    @property
    def macro_accuracy(self) -> float:
        return float(np.mean(self.accuracy))

    @property
    def macro_loss(self) -> float:
        return float(np.mean(self.loss))


def _score(params: ModelParams, ds: LabeledDataset) -> tuple[float, float]:
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    logits = nn.forward(params, ds.features).logits
    acc = float(np.mean(np.argmax(logits, axis=1) == ds.labels))
    return acc, nn.task_loss(logits, ds.labels)


def evaluate(models, shards: list[ClientShard], split: str = "test") -> Evaluation:
    """Accuracy per client: one global model on every shard, or model i on shard i."""
    if isinstance(models, ModelParams):
        models = [models] * len(shards)
    if len(models) != len(shards):
        raise ValueError(f"{len(models)} models for {len(shards)} shards")
    scores = [_score(m, getattr(s, split)) for m, s in zip(models, shards)]
    return Evaluation([a for a, _ in scores], [l for _, l in scores])


def _pooled(shards: list[ClientShard], split: str) -> LabeledDataset:
    parts = [getattr(s, split) for s in shards]
    return LabeledDataset(
        np.concatenate([p.features for p in parts]),
        np.concatenate([p.labels for p in parts]),
        parts[0].n_classes,
    )


def _metric_rows(t, models, shards, eta, alignment, global_model=None) -> list[MetricsRow]:
    rows = []
    for split in ("train", "test"):
        ev = evaluate(models, shards, split)
        for i, (acc, loss) in enumerate(zip(ev.accuracy, ev.loss)):
            rows.append(MetricsRow(t, str(i), split, acc, loss, alignment.get(i), eta))
        mean_align = float(np.mean(list(alignment.values()))) if alignment else None
        rows.append(MetricsRow(t, "macro_avg", split, ev.macro_accuracy, ev.macro_loss, mean_align, eta))
        if global_model is not None:
            acc, loss = _score(global_model, _pooled(shards, split))
            rows.append(MetricsRow(t, "global", split, acc, loss, None, eta))
    return rows


# ---------------------------------------------------------------- setup


def build_dataset(config: ExperimentConfig) -> LabeledDataset:
    if config.dataset == "csv":
        return load_csv_dataset(config.csv_path)
    return synth_gaussian_mixture(
        config.n_classes, config.dim, config.n_per_class, config.class_sep, derive_seed(config.seed, DATA)
    )


def prepare_population(config: ExperimentConfig, dataset: LabeledDataset | None = None) -> Population:
    """Partition the data into client shards and attach architectures.

    The public RAD pool is carved out whenever ``rad_source`` is
    ``heldout_pool``, in every mode, so that baselines and FedHeNN runs see
    identical client shards.
    """
    ds = build_dataset(config) if dataset is None else dataset
    seed = config.seed
    pool = None
    rows = np.arange(len(ds))
    if config.rad_source == "heldout_pool":
        pool, rows = split_public_pool(ds, config.rad_pool_size, derive_seed(seed, POOL))
    parts = partition_noniid(
        ds, config.n_clients, config.classes_per_client, derive_seed(seed, PARTITION), rows, config.strict_coverage
    )
    family = config.hidden_family
    if len(family) == 1 or config.arch_assign == "cycle":
        choice = [i % len(family) for i in range(config.n_clients)]
    else:
        choice = list(_rng(seed, ARCH).integers(len(family), size=config.n_clients))
    shards = []
    for i, idx in enumerate(parts):
        train_idx, test_idx = split_train_test(idx, ds, config.test_frac, derive_seed(seed, SPLIT, i))
        arch = Architecture((ds.dim, *family[choice[i]], ds.n_classes), config.activation)
        shards.append(ClientShard(i, ds.subset(train_idx), ds.subset(test_idx), arch))
    if config.shrink_fraction > 0:
        shards = shrink_clients(shards, config.shrink_fraction, config.shrink_ratio, derive_seed(seed, SHRINK))
    return Population(shards, pool, ds.n_classes, ds.dim)


def _optimizer(config: ExperimentConfig) -> OptimizerConfig:
    return OptimizerConfig(config.lr, config.momentum, None if config.batch == "full" else config.batch)


def client_weights(config: ExperimentConfig) -> np.ndarray:
    if config.client_weights == "uniform":
        return np.full(config.n_clients, 1.0 / config.n_clients)
    w = np.asarray(config.client_weights, dtype=np.float64)
    return w / w.sum()


def _round_rad(config: ExperimentConfig, pop: Population, t: int) -> np.ndarray:
    if config.rad_source == "heldout_pool":
        return generate_rad(pop.rad_pool, config.rad_size, derive_seed(config.seed, RAD, t))
    return _rng(config.seed, RAD, t).standard_normal((config.rad_size, pop.d_in))


def _map_clients(fn, ids, workers: int) -> list:
    # results come back in submission (ascending id) order regardless of completion order
    if workers <= 1 or len(ids) <= 1:
        return [fn(i) for i in ids]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, ids))


def _plan(config: ExperimentConfig, pop: Population, t: int, align: bool) -> RoundPlan:
    eta = eta_schedule(config.eta0, t, config.rounds, config.eta_schedule) if align else 0.0
    rad = _round_rad(config, pop, t) if eta > 0 else None
    selected = sample_clients(config.n_clients, config.client_fraction, config.seed, t)
    return RoundPlan(t, eta, rad, tuple(selected))


# ---------------------------------------------------------------- round loops


def run_homogeneous_rounds(
    config: ExperimentConfig,
    pop: Population,
    align: bool,
    extra_term: Callable[[ModelParams], ExtraTerm] | None = None,
    record_history: bool = False,
) -> RunResult:
    """Shared server loop for FedHeNN-homogeneous, FedAvg and FedProx.

    ``extra_term`` maps the incoming global model to an additional local
    objective term (used by FedProx).
    """
    arch = pop.shards[0].arch
    if any(s.arch != arch for s in pop.shards):
        raise ValueError("homogeneous training needs one shared architecture")
    opt, kernel = _optimizer(config), config.kernel_spec
    state = FederationState("homogeneous", client_weights(config),
                            global_params=nn.init_params(arch, derive_seed(config.seed, INIT, 0)))
    metrics = _metric_rows(0, state.global_params, pop.shards, 0.0, {}, state.global_params)
    alignment_log, history = [], []
    if record_history:
        history.append(state.global_params.copy())

    for t in range(1, config.rounds + 1):
        plan = _plan(config, pop, t, align)
        current = state.global_params
        extra = extra_term(current) if extra_term is not None else None

        def train(i, current=current, plan=plan, extra=extra):
            rng = _rng(config.seed, BATCH, t, i)
            shard = pop.shards[i]
            if extra is not None:
                return local_sgd(current.copy(), shard.train, config.local_epochs, opt, rng, extra=extra)
            return local_training_homo(current, plan.rad, plan.eta, shard, config.local_epochs, opt, kernel, rng)

        local = _map_clients(train, plan.selected, config.workers)
        aligned = {}
        if plan.eta > 0:
            K_global = cka.activation_kernel(nn.represent(current, plan.rad), kernel)
            for i, p in zip(plan.selected, local):
                aligned[i] = cka.cka(cka.activation_kernel(nn.represent(p, plan.rad), kernel), K_global)
        state.global_params = fedavg_aggregate(local, [pop.shards[i].n_i for i in plan.selected])
        state.round = t
        alignment_log.append(aligned)
        if record_history:
            history.append(state.global_params.copy())
        metrics += _metric_rows(t, state.global_params, pop.shards, plan.eta, aligned, state.global_params)
    return RunResult(state.global_params, metrics, alignment_log, history)


def run_heterogeneous_rounds(
    config: ExperimentConfig, pop: Population, align: bool, record_history: bool = False
) -> RunResult:
    """Shared loop for FedHeNN-heterogeneous and isolated local training.

    Unselected clients are frozen for the round (no training, no optimizer state).
    """
    opt, kernel = _optimizer(config), config.kernel_spec
    weights = client_weights(config)
    state = FederationState(
        "heterogeneous",
        weights,
        client_params=[nn.init_params(s.arch, derive_seed(config.seed, INIT, i)) for i, s in enumerate(pop.shards)],
    )
    params = state.client_params
    metrics = _metric_rows(0, params, pop.shards, 0.0, {})
    alignment_log, history = [], []
    if record_history:
        history.append([p.copy() for p in params])

    for t in range(1, config.rounds + 1):
        plan = _plan(config, pop, t, align)
        K_bar = None
        if plan.eta > 0:
            kernels = [cka.activation_kernel(nn.represent(p, plan.rad), kernel) for p in params]
            K_bar = cka.aggregate_kernels(kernels, weights)

        def train(i, plan=plan, K_bar=K_bar):
            rng = _rng(config.seed, BATCH, t, i)
            return local_training_hetero(
                params[i], K_bar, plan.rad, plan.eta, pop.shards[i], config.local_epochs, opt, kernel, rng
            )

        local = _map_clients(train, plan.selected, config.workers)
        aligned = {}
        for i, p in zip(plan.selected, local):
            params[i] = p
            if K_bar is not None:
                aligned[i] = cka.cka(cka.activation_kernel(nn.represent(p, plan.rad), kernel), K_bar)
        state.round = t
        alignment_log.append(aligned)
        if record_history:
            history.append([p.copy() for p in params])
        metrics += _metric_rows(t, params, pop.shards, plan.eta, aligned)
    return RunResult(list(params), metrics, alignment_log, history)


def run_homogeneous(config: ExperimentConfig, pop: Population | None = None, record_history: bool = False) -> RunResult:
    """FedHeNN for clients sharing one architecture."""
    pop = prepare_population(config) if pop is None else pop
    return run_homogeneous_rounds(config, pop, align=True, record_history=record_history)


def run_heterogeneous(config: ExperimentConfig, pop: Population | None = None, record_history: bool = False) -> RunResult:
    """FedHeNN for clients with their own architectures; returns all personalised models."""
    pop = prepare_population(config) if pop is None else pop
    return run_heterogeneous_rounds(config, pop, align=True, record_history=record_history)
