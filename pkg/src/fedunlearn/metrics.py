"""Forgetting, performance and efficiency metrics."""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from fedunlearn.data import BackdoorSpec, Dataset, apply_trigger
from fedunlearn.errors import InsufficientDataError, UndefinedMetricError
from fedunlearn.federation import Timing
from fedunlearn.nn import BlockMap, NetworkSpec, forward, log_softmax, predict

NFS_TARGET_MIN_GAP = 1e-9
NFS_MIA_MIN_GAP = 0.02
MIA_MIN_SAMPLES = 10


class NormalizedScore(NamedTuple):
    value: float
    significant: bool


class TrialStat(NamedTuple):
    mean: float
    std: float
    n: int


def accuracy(spec: NetworkSpec, params: BlockMap, dataset: Dataset) -> float:
    if len(dataset) == 0:
        raise InsufficientDataError("accuracy of an empty dataset")
    return float(np.mean(predict(spec, params, dataset.features) == dataset.labels))


def nta(acc_u: float, acc_r: float) -> float:
    """Test accuracy of the unlearned model relative to the retrained benchmark."""
    if acc_r == 0:
        raise UndefinedMetricError("benchmark accuracy is zero")
    return acc_u / acc_r


def _normalized_forgetting(u: float, r: float, i: float, min_gap: float) -> NormalizedScore:
    gap = abs(i - r)
    if gap == 0 or gap < NFS_TARGET_MIN_GAP:
        return NormalizedScore(math.nan, False)
    return NormalizedScore(1.0 - abs(u - r) / gap, gap >= min_gap)


def nfs_target(acc_u_t: float, acc_r_t: float, acc_i_t: float) -> NormalizedScore:
    """``1 - |u - r| / |i - r|`` on target-set accuracy; NaN and not significant if ``i == r``."""
    return _normalized_forgetting(acc_u_t, acc_r_t, acc_i_t, NFS_TARGET_MIN_GAP)


def nfs_mia(mia_u: float, mia_r: float, mia_i: float) -> NormalizedScore:
    """Same normalisation on MIA accuracy; flagged not significant when ``|i - r| < 0.02``."""
    return _normalized_forgetting(mia_u, mia_r, mia_i, NFS_MIA_MIN_GAP)


def mia_features(spec: NetworkSpec, params: BlockMap, dataset: Dataset) -> np.ndarray:
    """Per-sample cross-entropy loss and maximum softmax confidence, shape ``[n, 2]``."""
    logp = log_softmax(forward(spec, params, dataset.features))
    loss = -logp[np.arange(len(dataset)), dataset.labels]
    return np.column_stack([loss, np.exp(logp.max(axis=1))])


def _fit_logistic(x: np.ndarray, y: np.ndarray, iters: int, lr: float) -> tuple[np.ndarray, float]:
    w = np.zeros(x.shape[1])
    b = 0.0
    for _ in range(iters):
        p = 1.0 / (1.0 + np.exp(-(x @ w + b)))
        err = p - y
        w -= lr * (x.T @ err) / len(y)
        b -= lr * err.mean()
    return w, b


def mia_attack(
    members: np.ndarray, nonmembers: np.ndarray, seed: int,
    train_frac: float = 0.7, iters: int = 200, lr: float = 0.1,
) -> float:
    """Accuracy of a logistic attacker separating member from non-member feature rows.

    Both sides are subsampled to equal size; matched member/non-member pairs are
    split 70/30 into fit and held-out sets.  Features are standardised with the
    fit-set statistics.
    """
    members = np.atleast_2d(np.asarray(members, dtype=np.float64))
    nonmembers = np.atleast_2d(np.asarray(nonmembers, dtype=np.float64))
    m = min(len(members), len(nonmembers))
    if m < MIA_MIN_SAMPLES:
        raise InsufficientDataError(f"need >= {MIA_MIN_SAMPLES} samples per side, have {m}")
    rng = np.random.default_rng(seed)
    mem = members[rng.permutation(len(members))[:m]]
    non = nonmembers[rng.permutation(len(nonmembers))[:m]]
    pairs = rng.permutation(m)
    k = int(round(train_frac * m))
    fit, held = pairs[:k], pairs[k:]
    x_fit = np.vstack([mem[fit], non[fit]])
    y_fit = np.concatenate([np.ones(len(fit)), np.zeros(len(fit))])
    x_eval = np.vstack([mem[held], non[held]])
    y_eval = np.concatenate([np.ones(len(held)), np.zeros(len(held))])
    mu = x_fit.mean(axis=0)
    sd = x_fit.std(axis=0)
    sd[sd == 0] = 1.0
    w, b = _fit_logistic((x_fit - mu) / sd, y_fit, iters, lr)
    guess = ((x_eval - mu) / sd) @ w + b > 0
    return float(np.mean(guess == (y_eval == 1)))


def mia_accuracy(
    spec: NetworkSpec, params: BlockMap, target_samples: Dataset, test_samples: Dataset, seed: int
) -> float:
    """Membership-inference accuracy of target (member) versus test (non-member) samples."""
    return mia_attack(
        mia_features(spec, params, target_samples), mia_features(spec, params, test_samples), seed
    )


def _non_target(test_set: Dataset, backdoor: BackdoorSpec) -> np.ndarray:
    keep = test_set.labels != backdoor.target_label
    if not keep.any():
        raise InsufficientDataError("no test sample outside the target class")
    return keep


def asr(
    spec: NetworkSpec, params: BlockMap, test_set: Dataset, backdoor: BackdoorSpec,
    include_target_class: bool = False,
) -> float:
    """Fraction of triggered test images classified as the attacker's target label.

    By default images already belonging to the target class are left out, so a
    model that ignores the trigger scores near zero rather than the target-class
    base rate.  ``include_target_class=True`` scores every test image.
    """
    if include_target_class:
        if len(test_set) == 0:
            raise InsufficientDataError("empty test set")
        keep = np.ones(len(test_set), dtype=bool)
    else:
        keep = _non_target(test_set, backdoor)
    pred = predict(spec, params, apply_trigger(test_set.features[keep], backdoor))
    return float(np.mean(pred == backdoor.target_label))


def backdoor_accuracy(spec: NetworkSpec, params: BlockMap, test_set: Dataset, backdoor: BackdoorSpec) -> float:
    """Accuracy on triggered test images whose true label is not the target label."""
    keep = _non_target(test_set, backdoor)
    pred = predict(spec, params, apply_trigger(test_set.features[keep], backdoor))
    return float(np.mean(pred == test_set.labels[keep]))


def rtr(timing: Timing) -> float:
    """Retraining time over unlearning time."""
    if timing.unlearn_seconds <= 0:
        raise UndefinedMetricError("unlearning time is zero")
    return timing.retrain_seconds / timing.unlearn_seconds


def bee(timing: Timing) -> float:
    """Unlearning time expressed in single-epoch retraining units."""
    if timing.single_epoch_seconds <= 0:
        raise UndefinedMetricError("single-epoch time is zero")
    return timing.unlearn_seconds / timing.single_epoch_seconds


def trial_stats(values) -> TrialStat:
    """Sample mean and (n-1) standard deviation over finite values; std is 0 when n == 1."""
    v = np.asarray(list(values), dtype=np.float64)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return TrialStat(math.nan, math.nan, 0)
    if v.size == 1:
        return TrialStat(float(v[0]), 0.0, 1)
    return TrialStat(float(v.mean()), float(v.std(ddof=1)), int(v.size))
