"""Federated training engine.

One round: sample clients, broadcast a model, run local SGD on each client,
aggregate. The aggregate of a round is always the weighted model average (or
a server-optimizer variant of it); once the moving-average phase starts at
round ``t_s``, the server additionally keeps the unweighted mean of the last
``P`` aggregated models and broadcasts *that* to clients, pairing it with a
more aggressive ("mild exploration") learning-rate decay.

Determinism: every client's round RNG is derived from (seed, round, client
id), so trajectories are independent of client execution order; aggregation
reduces in ascending client id. Aggregator formulas are arranged so that the
documented coincidences (e.g. step-normalized averaging with equal step
counts) hold bitwise, not just numerically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .datasets import Dataset, Partition
from .nn import (
    LrSchedule,
    ModelSpec,
    OptimizerState,
    ParamVector,
    effective_epochs,
    evaluate,
    init_params,
    loss_and_grad,
    schedule_lr,
    sgd_step,
)

AGGREGATORS = ("fedavg", "fednova", "fedadam", "fedyogi", "fedgma")

# rng stream tags so client, sampling and replica streams never collide
_RNG_CLIENT = 0x1
_RNG_SAMPLE = 0x2


@dataclass(frozen=True)
class AdaptiveParams:
    """Server Adam/Yogi hyperparameters (defaults per the usual setup)."""

    eta: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.99
    tau: float = 0.001


@dataclass(frozen=True)
class GmaParams:
    """Sign-agreement masking: threshold and server step size."""

    epsilon: float = 0.8
    server_lr: float = 1.0


@dataclass(frozen=True)
class ImaConfig:
    start_round: int          # t_s: first round whose broadcast is the moving average
    window: int               # P: number of aggregated models averaged
    mild_schedule: LrSchedule

    def __post_init__(self) -> None:
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.start_round < self.window:
            raise ValueError("start_round must be >= window")


@dataclass(frozen=True)
class FederationConfig:
    n_clients: int
    participation: float
    rounds: int
    local_epochs: int
    batch_size: int
    lr_schedule: LrSchedule
    momentum: float = 0.9
    aggregator: str = "fedavg"
    adaptive: AdaptiveParams = field(default_factory=AdaptiveParams)
    gma: GmaParams = field(default_factory=GmaParams)
    prox_mu: float = 0.0
    ima: ImaConfig | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if not (0.0 < self.participation <= 1.0):
            raise ValueError("participation must be in (0, 1]")
        if self.rounds < 1 or self.local_epochs < 1 or self.batch_size < 1:
            raise ValueError("rounds, epochs and batch size must be >= 1")
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"unknown aggregator {self.aggregator!r}")
        if self.prox_mu < 0:
            raise ValueError("prox_mu must be >= 0")
        count = self.clients_per_round
        if not (1 <= count <= self.n_clients):
            raise ValueError("participation yields no valid client count")

    @property
    def clients_per_round(self) -> int:
        return math.ceil(self.participation * self.n_clients)


@dataclass
class ClientUpdate:
    client_id: int
    delta: np.ndarray          # final - init, flat
    n_samples: int
    n_steps: int               # local SGD steps taken (tau)
    final_params: ParamVector


@dataclass
class GlobalState:
    round: int
    global_model: ParamVector
    history: list[ParamVector]          # aggregated models, newest first
    history_cap: int
    ima_model: ParamVector | None = None
    server_m: np.ndarray | None = None
    server_v: np.ndarray | None = None

    def push_history(self, model: ParamVector) -> None:
        self.history.insert(0, model.copy())
        del self.history[self.history_cap:]


@dataclass
class RoundRecord:
    round: int
    lr: float
    test_loss: float
    test_acc: float
    locality_l2: float
    broadcast_kind: str        # "fma" or "ima"
    client_ids: list[int]


@dataclass
class RoundContext:
    """Extra per-round state handed to the observer hook."""

    round: int
    broadcast: ParamVector
    broadcast_kind: str
    updates: list[ClientUpdate]
    global_model: ParamVector
    ima_model: ParamVector | None
    lr: float
    epochs: int


@dataclass
class FederationResult:
    records: list[RoundRecord]
    state: GlobalState
    checkpoints: dict[str, ParamVector]


def client_rng(seed: int, round_idx: int, client_id: int,
               extra: int = 0) -> np.random.Generator:
    """RNG stream for one client's local training in one round."""
    return np.random.default_rng([seed, round_idx, client_id, _RNG_CLIENT, extra])


def sample_clients(rng: np.random.Generator, n_clients: int, count: int) -> list[int]:
    """Uniform sample without replacement via seeded shuffle."""
    if not (1 <= count <= n_clients):
        raise ValueError(f"count must be in [1, {n_clients}], got {count}")
    return [int(c) for c in rng.permutation(n_clients)[:count]]


def local_train(spec: ModelSpec, init: ParamVector,
                client_data: tuple[np.ndarray, np.ndarray],
                epochs: int, batch_size: int, lr: float, momentum: float,
                prox_mu: float, rng: np.random.Generator,
                client_id: int = 0) -> ClientUpdate:
    """Mini-batch SGD for ``epochs`` passes over the client's data.

    Each epoch reshuffles with the provided rng; the last batch of an epoch
    may be short. A positive ``prox_mu`` adds mu*(w - w_init) to every batch
    gradient, the gradient of the proximal anchor (mu/2)*||w - w_init||^2.
    ``init`` is never mutated.
    """
    features, targets = client_data
    n = features.shape[0]
    if n == 0:
        raise ValueError("client has no data")
    params = init.copy()
    opt = OptimizerState.zeros(params.values.size, momentum)
    steps = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            batch_idx = order[start:start + batch_size]
            _, grad = loss_and_grad(params, spec,
                                    (features[batch_idx], targets[batch_idx]))
            if prox_mu > 0.0:
                grad = grad + prox_mu * (params.values - init.values)
            sgd_step(params, grad, lr, opt)
            steps += 1
    return ClientUpdate(
        client_id=client_id,
        delta=params.values - init.values,
        n_samples=n,
        n_steps=steps,
        final_params=params,
    )


def _check_updates(updates: list[ClientUpdate], init: ParamVector) -> None:
    if not updates:
        raise ValueError("no client updates to aggregate")
    for u in updates:
        if u.final_params.spec_fingerprint != init.spec_fingerprint:
            raise ValueError("fingerprint mismatch across client updates")
        if u.delta.size != init.values.size:
            raise ValueError("update length mismatch")


def _weights(updates: list[ClientUpdate]) -> np.ndarray:
    n_total = sum(u.n_samples for u in updates)
    return np.array([u.n_samples / n_total for u in updates])


def weighted_delta(updates: list[ClientUpdate]) -> np.ndarray:
    """Sample-weighted mean of client deltas (the server pseudo-gradient)."""
    p = _weights(updates)
    acc = np.zeros_like(updates[0].delta)
    for w, u in zip(p, updates):
        acc += w * u.delta
    return acc


def fma_aggregate(updates: list[ClientUpdate], init: ParamVector) -> ParamVector:
    """Weighted model average: init + sum_k p_k * delta_k."""
    _check_updates(updates, init)
    return ParamVector(init.values + weighted_delta(updates), init.spec_fingerprint)


def fednova_aggregate(updates: list[ClientUpdate], init: ParamVector) -> ParamVector:
    """Step-normalized averaging: init + tau_eff * sum_k p_k * delta_k/tau_k.

    tau_eff = sum_k n_k*tau_k / sum_k n_k is computed in integer arithmetic,
    so with identical step counts the per-client coefficients reduce to
    exactly p_k and the result is bitwise equal to fma_aggregate.
    """
    _check_updates(updates, init)
    if any(u.n_steps < 1 for u in updates):
        raise ValueError("every update needs at least one local step")
    n_total = sum(u.n_samples for u in updates)
    tau_eff = sum(u.n_samples * u.n_steps for u in updates) / n_total
    acc = np.zeros_like(updates[0].delta)
    for u in updates:
        coeff = (u.n_samples / n_total) * (tau_eff / u.n_steps)
        acc += coeff * u.delta
    return ParamVector(init.values + acc, init.spec_fingerprint)


def fedadam_step(state: GlobalState, pseudo_grad: np.ndarray,
                 params: AdaptiveParams) -> None:
    """Server Adam on the pseudo-gradient; updates state in place."""
    _adaptive_step(state, pseudo_grad, params, yogi=False)


def fedyogi_step(state: GlobalState, pseudo_grad: np.ndarray,
                 params: AdaptiveParams) -> None:
    """Server Yogi: v moves additively by (1-b2)*d^2 toward d^2."""
    _adaptive_step(state, pseudo_grad, params, yogi=True)


def _adaptive_step(state: GlobalState, pseudo_grad: np.ndarray,
                   params: AdaptiveParams, yogi: bool) -> None:
    d = np.asarray(pseudo_grad, dtype=np.float64)
    if d.size != state.global_model.values.size:
        raise ValueError("pseudo-gradient length mismatch")
    if state.server_m is None:
        state.server_m = np.zeros(d.size)
        state.server_v = np.zeros(d.size)
    m, v = state.server_m, state.server_v
    m *= params.beta1
    m += (1.0 - params.beta1) * d
    d2 = d * d
    if yogi:
        v -= (1.0 - params.beta2) * d2 * np.sign(v - d2)
    else:
        v *= params.beta2
        v += (1.0 - params.beta2) * d2
    state.global_model = ParamVector(
        state.global_model.values + params.eta * m / (np.sqrt(v) + params.tau),
        state.global_model.spec_fingerprint)


def fedgma_mask(updates: list[ClientUpdate], epsilon: float) -> np.ndarray:
    """AND-mask the weighted mean delta by per-coordinate sign agreement.

    A client agrees on coordinate j when sign(delta_k[j]) equals the sign of
    the weighted mean and neither is zero. Coordinates whose agreement
    fraction falls below epsilon are zeroed.
    """
    if not updates:
        raise ValueError("no client updates to mask")
    mean = weighted_delta(updates)
    mean_sign = np.sign(mean)
    agree = np.zeros(mean.size)
    for u in updates:
        agree += (np.sign(u.delta) == mean_sign) & (mean_sign != 0.0)
    fraction = agree / len(updates)
    return np.where(fraction >= epsilon, mean, 0.0)


def ima_average(history: list[ParamVector], window: int) -> ParamVector:
    """Unweighted mean of the newest ``window`` aggregated models."""
    if len(history) < window:
        raise ValueError(f"need {window} models in history, have {len(history)}")
    acc = np.zeros_like(history[0].values)
    for model in history[:window]:
        acc += model.values
    return ParamVector(acc / window, history[0].spec_fingerprint)


def _aggregate(config: FederationConfig, state: GlobalState,
               reference: ParamVector, updates: list[ClientUpdate]) -> ParamVector:
    """One server aggregation relative to the round's broadcast model."""
    if config.aggregator == "fedavg":
        return fma_aggregate(updates, reference)
    if config.aggregator == "fednova":
        return fednova_aggregate(updates, reference)
    if config.aggregator == "fedgma":
        _check_updates(updates, reference)
        masked = fedgma_mask(updates, config.gma.epsilon)
        return ParamVector(reference.values + config.gma.server_lr * masked,
                           reference.spec_fingerprint)
    # fedadam / fedyogi step from the broadcast model
    _check_updates(updates, reference)
    state.global_model = reference.copy()
    pseudo = weighted_delta(updates)
    if config.aggregator == "fedadam":
        fedadam_step(state, pseudo, config.adaptive)
    else:
        fedyogi_step(state, pseudo, config.adaptive)
    return state.global_model


def client_batch(dataset: Dataset, indices: np.ndarray,
                 spec: ModelSpec) -> tuple[np.ndarray, np.ndarray]:
    """(features, targets) for one client, targets shaped per loss kind."""
    feats, labels, onehot = dataset.subset_arrays(indices)
    targets = onehot if spec.loss_kind == "mse" else labels
    return feats, targets


def run_federation(spec: ModelSpec, config: FederationConfig, dataset: Dataset,
                   partition: Partition, eval_dataset: Dataset | None = None,
                   checkpoint_rounds: int = 0,
                   on_round: Callable[[RoundRecord, RoundContext], None] | None = None,
                   ) -> FederationResult:
    """Run the full federated loop.

    Rounds are numbered 1..R. Before the moving-average phase clients start
    from the previous aggregate and use the base schedule; from round ``t_s``
    on they start from the moving average of the last ``P`` aggregates and
    use the mild schedule. Evaluation follows the broadcast model: the moving
    average once it exists, the plain aggregate before that.
    """
    if partition.n_clients != config.n_clients:
        raise ValueError(f"partition has {partition.n_clients} clients, "
                         f"config says {config.n_clients}")
    eval_ds = eval_dataset if eval_dataset is not None else dataset
    ima = config.ima
    window = ima.window if ima else 1

    global_model = init_params(spec, config.seed)
    state = GlobalState(round=0, global_model=global_model,
                        history=[], history_cap=max(window, 1))
    state.push_history(global_model)

    client_data = [client_batch(dataset, idx, spec) for idx in partition.client_indices]
    records: list[RoundRecord] = []
    checkpoints: dict[str, ParamVector] = {}

    for t in range(1, config.rounds + 1):
        ima_active = ima is not None and t >= ima.start_round
        if ima_active:
            # broadcast the moving average; materialize it at phase entry
            if state.ima_model is None:
                state.ima_model = ima_average(state.history, ima.window)
            broadcast = state.ima_model
            broadcast_kind = "ima"
            sched = ima.mild_schedule
        else:
            broadcast = state.global_model
            broadcast_kind = "fma"
            sched = config.lr_schedule

        lr = schedule_lr(sched, t)
        epochs = effective_epochs(sched, t, config.local_epochs)

        sample_rng = np.random.default_rng([config.seed, t, _RNG_SAMPLE])
        chosen = sample_clients(sample_rng, config.n_clients, config.clients_per_round)

        updates: list[ClientUpdate] = []
        for cid in sorted(chosen):
            rng = client_rng(config.seed, t, cid)
            updates.append(local_train(
                spec, broadcast, client_data[cid], epochs, config.batch_size,
                lr, config.momentum, config.prox_mu, rng, client_id=cid))

        new_global = _aggregate(config, state, broadcast, updates)
        state.global_model = new_global
        state.push_history(new_global)
        state.round = t
        if ima_active:
            state.ima_model = ima_average(state.history, ima.window)

        eval_model = state.ima_model if ima_active else state.global_model
        loss, acc = evaluate(eval_model, spec, eval_ds.features, eval_ds.labels)
        locality = max(float(np.linalg.norm(u.final_params.values - new_global.values))
                       for u in updates)
        record = RoundRecord(round=t, lr=lr, test_loss=loss, test_acc=acc,
                             locality_l2=locality, broadcast_kind=broadcast_kind,
                             client_ids=sorted(chosen))
        records.append(record)

        if checkpoint_rounds and t % checkpoint_rounds == 0:
            checkpoints[f"round_{t:05d}"] = state.global_model.copy()
        if on_round is not None:
            on_round(record, RoundContext(
                round=t, broadcast=broadcast, broadcast_kind=broadcast_kind,
                updates=updates, global_model=state.global_model,
                ima_model=state.ima_model, lr=lr, epochs=epochs))

    checkpoints["final_fma"] = state.global_model.copy()
    if state.ima_model is not None:
        checkpoints["final_ima"] = state.ima_model.copy()
    return FederationResult(records=records, state=state, checkpoints=checkpoints)


def mild_exponential(base: LrSchedule, start_round: int,
                     gamma: float = 0.03) -> LrSchedule:
    """Exponential decay restarted from the lr the base schedule reaches at
    ``start_round``, expressed against the absolute round index so both
    schedules are evaluated the same way."""
    lr_at_start = schedule_lr(base, start_round)
    lr0 = lr_at_start / (1.0 - gamma) ** start_round
    return LrSchedule.exponential(lr0, gamma)
