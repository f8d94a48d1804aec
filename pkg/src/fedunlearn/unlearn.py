"""Hessian-based targeted reset and masked retraining.

Each client reports the curvature of its loss on the samples to forget and on
the samples to keep.  The server turns the aggregates into a per-parameter
Target Information Score ``(h'/h)**2``, resets the highest scoring fraction of
every parameter block to its initial value, and retrains only those elements
for a short federated pass over the retained data.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fedunlearn.data import Dataset, Partition
from fedunlearn.errors import NothingToForgetError, ShapeError
from fedunlearn.federation import (
    FORGET_ONLY,
    RETAIN_ONLY,
    Client,
    FedConfig,
    Timing,
    derive_seed,
    fedavg,
    make_clients,
)
from fedunlearn.nn import (
    GGN,
    SGD,
    BlockMap,
    HessianDiag,
    NetworkSpec,
    ParamSet,
    forward,
    hessian_diag,
    iter_batches,
    loss_and_grad,
)

logger = logging.getLogger(__name__)

DEFAULT_EPS_H = 1e-12
_TRIM_STREAM = 0x7219


@dataclass
class ClientStats:
    h_f: HessianDiag
    h_r: HessianDiag
    n_f: int
    n_r: int


@dataclass
class InfoScores(BlockMap):
    pass


@dataclass
class ResetMask(BlockMap):
    alpha_removal: float = 0.0

    def popcounts(self) -> dict[str, int]:
        return {k: int(v.sum()) for k, v in self.blocks.items()}


def _client_stats(spec: NetworkSpec, params: ParamSet, client: Client, mode: str = GGN) -> ClientStats:
    n_f, n_r = client.count(FORGET_ONLY), client.count(RETAIN_ONLY)
    if n_f + n_r == 0:
        raise ValueError(f"client {client.client_id} holds no samples")

    def curvature(sample_filter, n):
        if n == 0:
            return HessianDiag.zeros(params, mode)
        return client.run(lambda d: hessian_diag(spec, params, d, mode), sample_filter)

    return ClientStats(curvature(FORGET_ONLY, n_f), curvature(RETAIN_ONLY, n_r), n_f, n_r)


def client_stats(
    spec: NetworkSpec, params: ParamSet, dataset: Dataset, partition: Partition, client_id: int,
    mode: str = GGN,
) -> ClientStats:
    """Curvature of the trained model on one client's forget and retain samples."""
    return _client_stats(spec, params, make_clients(dataset, partition)[client_id], mode)


def aggregate_hessians(stats: list[ClientStats]) -> tuple[HessianDiag, HessianDiag]:
    """Server-side combination into the full-data curvature ``h`` and its target part ``h'``.

    ``h = sum(n_f*h_f + n_r*h_r) / N`` and ``h' = sum(n_f*h_f) / N_T``.
    """
    if not stats:
        raise ValueError("need statistics from at least one client")
    n_total = sum(s.n_f + s.n_r for s in stats)
    n_target = sum(s.n_f for s in stats)
    if n_target == 0:
        raise NothingToForgetError("no client reports samples to forget")
    names = stats[0].h_f.names
    h = {k: np.zeros_like(stats[0].h_f.blocks[k]) for k in names}
    hp = {k: np.zeros_like(stats[0].h_f.blocks[k]) for k in names}
    for s in stats:
        for k in names:
            h[k] += s.n_f * s.h_f.blocks[k] + s.n_r * s.h_r.blocks[k]
            hp[k] += s.n_f * s.h_f.blocks[k]
    mode = stats[0].h_f.mode
    return (
        HessianDiag({k: v / n_total for k, v in h.items()}, mode),
        HessianDiag({k: v / n_target for k, v in hp.items()}, mode),
    )


def target_information_score(h: BlockMap, h_prime: BlockMap, eps_h: float = DEFAULT_EPS_H) -> InfoScores:
    """``(h'_i / h_i)**2`` per element, zero wherever ``h_i <= eps_h``."""
    if not h.same_layout(h_prime):
        raise ShapeError("h and h_prime are not congruent")
    out = {}
    for k, hk in h.blocks.items():
        live = hk > eps_h
        ratio = np.divide(h_prime.blocks[k], hk, out=np.zeros_like(hk), where=live)
        out[k] = np.where(live, ratio * ratio, 0.0)
    return InfoScores(out)


def fisher_total(h: BlockMap, h_prime: BlockMap, eps_h: float = DEFAULT_EPS_H) -> float:
    """Sum of Target Information Scores over all parameters."""
    return float(sum(v.sum() for v in target_information_score(h, h_prime, eps_h).blocks.values()))


def _round_half_away(x: float) -> int:
    return int(math.floor(x + 0.5)) if x >= 0 else -int(math.floor(-x + 0.5))


def select_reset_mask(scores: InfoScores, alpha_removal: float) -> ResetMask:
    """Mark the top ``round(alpha * size)`` scores of every block; ties go to lower flat index."""
    if not 0.0 <= alpha_removal <= 1.0:
        raise ValueError("alpha_removal must lie in [0, 1]")
    blocks = {}
    for k, s in scores.blocks.items():
        flat = s.ravel()
        count = _round_half_away(alpha_removal * flat.size)
        mask = np.zeros(flat.size, dtype=bool)
        if count:
            mask[np.argsort(-flat, kind="stable")[:count]] = True
        blocks[k] = mask.reshape(s.shape)
    return ResetMask(blocks, float(alpha_removal))


def reset_params(trained: ParamSet, init_snapshot: ParamSet, mask: ResetMask) -> ParamSet:
    if not (trained.same_layout(init_snapshot) and trained.same_layout(mask)):
        raise ShapeError("trained, init_snapshot and mask must be congruent")
    blocks = {
        k: np.where(mask.blocks[k], init_snapshot.blocks[k], trained.blocks[k])
        for k in trained.blocks
    }
    return ParamSet(blocks, trained.rng_seed)


@dataclass
class TrimState:
    """Frozen buffers plus a trainable vector for the masked elements of each block."""

    buffers: dict
    trainable: dict = field(default_factory=dict)
    indices: dict = field(default_factory=dict)
    rng_seed: int | None = None

    def live_params(self, trainable: dict | None = None) -> ParamSet:
        trainable = self.trainable if trainable is None else trainable
        blocks = {}
        for k, buf in self.buffers.items():
            p = buf.copy()
            if k in trainable:
                flat = p.reshape(-1)
                flat[self.indices[k]] += trainable[k]
            blocks[k] = p
        return ParamSet(blocks, self.rng_seed)


def trim_initialize(base: ParamSet, mask: ResetMask, init_values: ParamSet | None = None) -> TrimState:
    """Split ``base`` into frozen buffers and trainable vectors at the masked positions.

    Masked buffer entries are zeroed.  Trainable vectors start from
    ``init_values`` at those positions (``base`` itself when omitted), so with
    the initial snapshot the live parameters equal the reset model.
    """
    if not base.same_layout(mask):
        raise ShapeError("mask is not congruent with base parameters")
    source = base if init_values is None else init_values
    state = TrimState({}, rng_seed=base.rng_seed)
    for k, theta in base.blocks.items():
        fixed = theta.copy()
        idx = np.flatnonzero(mask.blocks[k])
        if idx.size:
            state.trainable[k] = source.blocks[k].reshape(-1)[idx].copy()
            state.indices[k] = idx
            fixed.reshape(-1)[idx] = 0.0
        state.buffers[k] = fixed
    return state


def trim_forward(trim: TrimState, spec: NetworkSpec, batch) -> np.ndarray:
    return forward(spec, trim.live_params(), batch)


def _trim_local_sgd(spec, trim: TrimState, start: dict, data: Dataset, cfg: FedConfig, seed: int) -> BlockMap:
    vectors = {k: v.copy() for k, v in start.items()}
    opt = SGD(cfg.lr, cfg.momentum)
    rng = np.random.default_rng(seed)
    for idx in iter_batches(len(data), cfg.batch_size, rng):
        live = trim.live_params(vectors)
        _, grad = loss_and_grad(spec, live, data.features[idx], data.labels[idx])
        opt.step(vectors, {k: grad.blocks[k].reshape(-1)[trim.indices[k]] for k in vectors})
    return BlockMap(vectors)


def _trim_rounds(spec, trim: TrimState, clients: list[Client], cfg: FedConfig) -> ParamSet:
    if not trim.trainable:
        return trim.live_params()
    vectors = trim.trainable
    ids = cfg.client_subset if cfg.client_subset is not None else range(len(clients))
    skipped = [cid for cid in ids if clients[cid].count(RETAIN_ONLY) == 0]
    if skipped:
        logger.info("clients %s have no retain samples and sit out the masked retrain", skipped)
    for rnd in range(cfg.retrain_epochs):
        updates = []
        for cid in ids:
            client = clients[cid]
            n = client.count(RETAIN_ONLY)
            if n == 0:
                continue
            seed = derive_seed(cfg.seed, _TRIM_STREAM, rnd, cid)
            local = client.run(lambda d: _trim_local_sgd(spec, trim, vectors, d, cfg, seed), RETAIN_ONLY)
            updates.append((n, local))
        if not updates:
            raise ValueError("no retain samples to retrain on")
        vectors = fedavg(updates)
    return trim.live_params(vectors)


def trim_retrain(
    trim: TrimState, spec: NetworkSpec, dataset: Dataset, partition: Partition, cfg: FedConfig
) -> ParamSet:
    """Federated retraining of the trainable vectors only, one local epoch per round.

    Runs ``cfg.retrain_epochs`` rounds (default 1) over retain samples.  Every
    unmasked element of the result equals its frozen buffer value exactly.
    """
    return _trim_rounds(spec, trim, make_clients(dataset, partition), cfg)


@dataclass
class UnlearnResult:
    theta_reset: ParamSet
    theta_retrained: ParamSet
    scores: InfoScores
    mask: ResetMask
    h: HessianDiag
    h_prime: HessianDiag
    timing: Timing


def unlearn_pipeline(
    spec: NetworkSpec,
    trained: ParamSet,
    init_snapshot: ParamSet,
    dataset: Dataset,
    partition: Partition,
    alpha: float,
    cfg: FedConfig,
    eps_h: float = DEFAULT_EPS_H,
    mode: str = GGN,
) -> UnlearnResult:
    """Client statistics, aggregation, scoring, reset and masked retraining, timed end to end."""
    start = time.perf_counter()
    clients = make_clients(dataset, partition)
    stats = [_client_stats(spec, trained, c, mode) for c in clients if c.count() > 0]
    h, h_prime = aggregate_hessians(stats)
    scores = target_information_score(h, h_prime, eps_h)
    mask = select_reset_mask(scores, alpha)
    theta_reset = reset_params(trained, init_snapshot, mask)
    trim = trim_initialize(trained, mask, init_snapshot)
    theta_u = _trim_rounds(spec, trim, clients, cfg)
    timing = Timing(unlearn_seconds=time.perf_counter() - start)
    return UnlearnResult(theta_reset, theta_u, scores, mask, h, h_prime, timing)


@dataclass
class GaussianFamily:
    """Diagonal Gaussian parameter law indexed by the target-weight ``t``.

    ``h_i(t) = (n_nt*a_i + t*n_t*b_i) / N`` and ``sigma_i(t) = c_eps / sqrt(h_i(t))``.
    """

    a: np.ndarray
    b: np.ndarray
    n_nt: int
    n_t: int
    c_eps: float = 1.0

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if np.any(self.a <= 0):
            raise ValueError("a must be positive")
        if self.c_eps <= 0:
            raise ValueError("c_eps must be positive")

    @property
    def n(self) -> int:
        return self.n_nt + self.n_t

    def h(self, t: float) -> np.ndarray:
        return (self.n_nt * self.a + t * self.n_t * self.b) / self.n

    def h_prime(self) -> np.ndarray:
        return self.n_t * self.b / self.n

    def sigma(self, t: float) -> np.ndarray:
        return self.c_eps / np.sqrt(self.h(t))

    def log_density(self, theta: np.ndarray, t: float, center=0.0) -> np.ndarray:
        """Log of the product density; ``theta`` has the coordinate on its last axis."""
        s = self.sigma(t)
        z = (np.asarray(theta) - center) / s
        return np.sum(-0.5 * z * z - np.log(s) - 0.5 * math.log(2 * math.pi), axis=-1)

    def tis_sum(self) -> float:
        """``sum((h'_i / h_i)**2)`` at ``t = 1``."""
        return float(np.sum((self.h_prime() / self.h(1.0)) ** 2))

    def fisher_information(self) -> float:
        """Fisher information about ``t`` at ``t = 1``: ``0.5 * sum((h'/h)**2)``, free of ``c_eps``."""
        return 0.5 * self.tis_sum()


SCORE_COLUMNS = ("block", "flat_index", "tis", "selected")


def export_scores_csv(scores: InfoScores, mask: ResetMask, path) -> Path:
    """Write one row per parameter element: block, flat_index, tis, selected."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SCORE_COLUMNS)
        for k, s in scores.blocks.items():
            sel = mask.blocks[k].ravel()
            for i, v in enumerate(s.ravel()):
                w.writerow((k, i, repr(float(v)), int(sel[i])))
    return path


def read_scores_csv(path) -> tuple[InfoScores, ResetMask]:
    """Inverse of :func:`export_scores_csv`; blocks come back as flat arrays."""
    tis: dict[str, list] = {}
    sel: dict[str, list] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != SCORE_COLUMNS:
            raise ValueError(f"{path}: expected columns {SCORE_COLUMNS}")
        for row in reader:
            k = row["block"]
            tis.setdefault(k, []).append(float(row["tis"]))
            sel.setdefault(k, []).append(row["selected"] == "1")
    return (
        InfoScores({k: np.array(v) for k, v in tis.items()}),
        ResetMask({k: np.array(v, dtype=bool) for k, v in sel.items()}),
    )
