"""Round-based federated learning: sampling, local SGD, weighted-average aggregation.

The orchestrator is deliberately small: each round it samples participants,
trains their local models from the broadcast global model, lets an optional
adversary hook replace updates from malicious participants, aggregates in
ascending participant-id order (floating-point reproducibility), and invokes
metric hooks on the new global model. Local training of the selected
participants may run on a thread pool; every participant's RNG is derived from
(seed, round, id) so results do not depend on scheduling.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import nn
from .data import Dataset, Partition
from .errors import InputError
from .seeding import derive_rng


@dataclass(frozen=True)
class RoundConfig:
    n: int = 100
    m: int = 10
    rounds: int = 100
    local_epochs: int = 2
    local_lr: float = 0.1
    batch_size: int = 32
    seed: int = 0
    malicious_ids: frozenset = frozenset()

    def __post_init__(self):
        if not 1 <= self.m <= self.n:
            raise InputError(f"need 1 <= m <= n, got m={self.m}, n={self.n}")
        if any(not 0 <= p < self.n for p in self.malicious_ids):
            raise InputError("malicious ids must lie in [0, n)")


@dataclass(frozen=True)
class UpdateMessage:
    """A participant's transmitted update: local-minus-global delta plus its data count."""

    participant_id: int
    delta: nn.ParamVector
    data_count: int

    def __post_init__(self):
        if self.data_count <= 0:
            raise InputError("data_count must be positive")


@dataclass
class GlobalState:
    model: nn.Model
    round: int = 0


@dataclass
class AdversaryContext:
    """Everything a malicious participant sees when selected."""

    round: int
    participant_id: int
    global_model: nn.Model
    shard: Dataset
    benign_update: UpdateMessage
    round_data_count: int
    config: RoundConfig


AdversaryHook = Callable[[AdversaryContext], UpdateMessage]
MetricHook = Callable[[int, nn.Model, bool], dict]
Aggregator = Callable[[nn.Model, list[UpdateMessage], int], nn.Model]


class RoundFailure(RuntimeError):
    """A hook or aggregator raised; carries the failing round."""

    def __init__(self, round_no: int, cause: BaseException):
        super().__init__(f"round {round_no}: {cause}")
        self.round = round_no


def select_participants(config: RoundConfig, round_no: int) -> np.ndarray:
    """m distinct ids, uniform without replacement, fixed by (seed, round)."""
    rng = derive_rng(config.seed, "select", round_no)
    return np.sort(rng.choice(config.n, size=config.m, replace=False))


def local_train(global_model: nn.Model, shard: Dataset, config: RoundConfig,
                participant_id: int = 0, rng: Optional[np.random.Generator] = None) -> UpdateMessage:
    """Minibatch SGD from the broadcast model; returns the delta and shard size."""
    if len(shard) == 0:
        raise InputError("shard is empty")
    if rng is None:
        rng = derive_rng(config.seed, "local", participant_id)
    model = global_model
    for _ in range(config.local_epochs):
        order = rng.permutation(len(shard))
        for start in range(0, len(shard), config.batch_size):
            idx = order[start:start + config.batch_size]
            grad = nn.grad_loss_params(model, shard.images[idx], shard.labels[idx])
            model = nn.sgd_step(model, grad, config.local_lr)
    return UpdateMessage(participant_id, model.params - global_model.params, len(shard))


def fedavg_aggregate(global_model: nn.Model, updates: Sequence[UpdateMessage]) -> nn.Model:
    """Data-count-weighted average of deltas applied to the global model.

    Summation runs in ascending participant-id order regardless of the order
    updates arrive in, so repeated runs are bitwise identical.
    """
    if not updates:
        raise InputError("no updates to aggregate")
    for u in updates:
        global_model.params.require_same_layout(u.delta)
    total = sum(u.data_count for u in updates)
    acc = np.zeros_like(global_model.params.values)
    for u in sorted(updates, key=lambda u: u.participant_id):
        acc += np.asarray(u.data_count / total, dtype=acc.dtype) * u.delta.values
    return global_model.with_params(
        nn.ParamVector(global_model.params.values + acc, global_model.params.layout))


def _default_aggregator(global_model, updates, round_no):
    return fedavg_aggregate(global_model, updates)


def run_rounds(state: GlobalState, config: RoundConfig, dataset: Dataset, partition: Partition,
               aggregator: Optional[Aggregator] = None,
               adversary: Optional[AdversaryHook] = None,
               metric_hooks: Sequence[MetricHook] = (),
               threads: int = 1) -> list[dict]:
    """Run config.rounds rounds; returns one record per round."""
    if len(partition) != config.n:
        raise InputError(f"partition has {len(partition)} shards for n={config.n}")
    aggregator = aggregator or _default_aggregator
    log = []
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for _ in range(config.rounds):
            round_no = state.round
            selected = select_participants(config, round_no)
            shards = {p: dataset.subset(partition[p]) for p in selected}

            def train_one(p):
                rng = derive_rng(config.seed, "local", round_no, int(p))
                return local_train(state.model, shards[p], config, int(p), rng)

            try:
                if pool is not None:
                    results = list(pool.map(train_one, selected))
                else:
                    results = [train_one(p) for p in selected]
                updates = {u.participant_id: u for u in results}
                round_total = sum(u.data_count for u in results)

                adversary_active = False
                if adversary is not None:
                    for p in selected:
                        if int(p) not in config.malicious_ids:
                            continue
                        ctx = AdversaryContext(round_no, int(p), state.model, shards[p],
                                               updates[int(p)], round_total, config)
                        replacement = adversary(ctx)
                        if replacement is not updates[int(p)]:
                            adversary_active = True
                        updates[int(p)] = replacement

                state.model = aggregator(state.model, list(updates.values()), round_no)
                state.round += 1
                record = {"round": round_no, "adversary_active": adversary_active}
                for hook in metric_hooks:
                    record.update(hook(round_no, state.model, adversary_active))
            except Exception as e:  # noqa: BLE001 - re-raised with round context
                raise RoundFailure(round_no, e) from e
            log.append(record)
    finally:
        if pool is not None:
            pool.shutdown()
    return log
