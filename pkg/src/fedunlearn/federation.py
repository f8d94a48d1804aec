"""In-process federated simulation with sample-weighted FedAvg.

Clients keep their samples private: the server-side loop only hands them a
callable through :meth:`Client.run` and receives parameter sets back.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from fedunlearn.data import Dataset, Partition
from fedunlearn.nn import BlockMap, NetworkSpec, ParamSet, sgd_train

logger = logging.getLogger(__name__)

ALL = "all"
RETAIN_ONLY = "retain-only"
FORGET_ONLY = "forget-only"

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def derive_seed(*parts: int) -> int:
    """Fold integers through splitmix64 into a single 64-bit seed."""
    h = 0
    for p in parts:
        h = _splitmix64(h ^ (int(p) & _MASK64))
    return h


@dataclass(frozen=True)
class FedConfig:
    rounds: int = 6
    local_epochs: int = 1
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    seed: int = 0
    client_subset: tuple | None = None
    retrain_epochs: int = 1

    def __post_init__(self):
        if self.rounds < 1 or self.local_epochs < 1 or self.retrain_epochs < 1:
            raise ValueError("rounds, local_epochs and retrain_epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.client_subset is not None:
            object.__setattr__(self, "client_subset", tuple(int(c) for c in self.client_subset))


@dataclass
class Timing:
    """Wall-clock seconds per phase."""

    train_seconds: float = 0.0
    retrain_seconds: float = 0.0
    unlearn_seconds: float = 0.0
    single_epoch_seconds: float = 0.0


class Client:
    """One federation member holding a private view of its samples."""

    def __init__(self, client_id: int, dataset: Dataset, indices: np.ndarray, forget_flags: np.ndarray):
        self.client_id = client_id
        self._dataset = dataset
        self._indices = np.asarray(indices, dtype=np.int64)
        self._forget = np.asarray(forget_flags, dtype=bool)[self._indices]

    def _select(self, sample_filter: str) -> np.ndarray:
        if sample_filter == ALL:
            return self._indices
        if sample_filter == RETAIN_ONLY:
            return self._indices[~self._forget]
        if sample_filter == FORGET_ONLY:
            return self._indices[self._forget]
        raise ValueError(f"unknown sample filter {sample_filter!r}")

    def count(self, sample_filter: str = ALL) -> int:
        return len(self._select(sample_filter))

    def run(self, fn: Callable[[Dataset], object], sample_filter: str = ALL):
        """Evaluate ``fn`` on this client's (filtered) samples and return only its result."""
        return fn(self._dataset.take(self._select(sample_filter)))


def make_clients(dataset: Dataset, partition: Partition) -> list[Client]:
    return [
        Client(cid, dataset, idx, partition.forget_flags)
        for cid, idx in enumerate(partition.client_indices)
    ]


def fedavg(updates: Sequence[tuple[int, BlockMap]]) -> dict:
    """Sample-count weighted mean of parameter blocks, reduced in list order.

    Computed as the first update plus weighted offsets from it, so clients that
    all return the same values aggregate to exactly those values.
    """
    total = sum(n for n, _ in updates)
    if total <= 0:
        raise ValueError("no samples behind the updates")
    ref = updates[0][1].blocks
    acc = {k: v.copy() for k, v in ref.items()}
    for n, params in updates[1:]:
        w = n / total
        for k, v in params.blocks.items():
            acc[k] += w * (v - ref[k])
    return acc


def participants(cfg: FedConfig, n_clients: int) -> tuple:
    ids = cfg.client_subset if cfg.client_subset is not None else tuple(range(n_clients))
    bad = [c for c in ids if not 0 <= c < n_clients]
    if bad or not ids:
        raise ValueError(f"client_subset {ids} does not name clients of a {n_clients}-client partition")
    return ids


def fed_train(
    spec: NetworkSpec,
    init: ParamSet,
    dataset: Dataset,
    partition: Partition,
    cfg: FedConfig,
    sample_filter: str = ALL,
) -> tuple[ParamSet, Timing]:
    """FedAvg for ``cfg.rounds`` rounds, each client running ``cfg.local_epochs`` of local SGD.

    Client ``c`` in round ``r`` shuffles with ``derive_seed(cfg.seed, r, c)``.
    Clients left without samples after filtering are skipped; one log line lists them.
    """
    clients = make_clients(dataset, partition)
    ids = participants(cfg, len(clients))
    start = time.perf_counter()
    current = init.copy()
    skipped = [cid for cid in ids if clients[cid].count(sample_filter) == 0]
    if skipped:
        logger.info("clients %s have no %s samples and sit out every round", skipped, sample_filter)
    for rnd in range(cfg.rounds):
        updates = []
        for cid in ids:
            client = clients[cid]
            n = client.count(sample_filter)
            if n == 0:
                continue
            seed = derive_seed(cfg.seed, rnd, cid)
            local = client.run(
                lambda data: sgd_train(
                    spec, current, data, cfg.local_epochs, cfg.lr, cfg.momentum, cfg.batch_size, seed
                ),
                sample_filter,
            )
            updates.append((n, local))
        if not updates:
            raise ValueError("no participating client has samples to train on")
        current = ParamSet(fedavg(updates), init.rng_seed)
    return current, Timing(train_seconds=time.perf_counter() - start)


def measure_single_epoch(
    spec: NetworkSpec, params: ParamSet, dataset: Dataset, partition: Partition, cfg: FedConfig
) -> float:
    """Wall-clock seconds of one federated round (one local epoch) over retain samples."""
    one = replace(cfg, rounds=1, local_epochs=1)
    start = time.perf_counter()
    fed_train(spec, params, dataset, partition, one, RETAIN_ONLY)
    return time.perf_counter() - start
