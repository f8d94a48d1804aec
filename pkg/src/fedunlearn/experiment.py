"""Config schema, the train / benchmark / unlearn / evaluate / report loop, sweeps and audits.

Per-trial seeds come from ``derive_seed(master_seed, trial)`` folded with a
fixed stream number per consumer (see :data:`SEED_STREAMS`), so every trial is
independent and every number is reproducible from the config alone.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import platform
from dataclasses import dataclass, field, replace
from importlib import metadata
from pathlib import Path
from typing import Annotated, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from fedunlearn import __version__
from fedunlearn.data import (
    CORNERS,
    BackdoorSpec,
    Dataset,
    Selector,
    digits_datasets,
    load_idx,
    mark_forget,
    partition_preferential,
    partition_random,
    poison,
    synth_blobs,
    train_test_split,
)
from fedunlearn.errors import ConfigError
from fedunlearn.federation import RETAIN_ONLY, FedConfig, Timing, derive_seed, fed_train, measure_single_epoch
from fedunlearn.metrics import (
    accuracy,
    asr,
    backdoor_accuracy,
    bee,
    mia_accuracy,
    nfs_mia,
    nfs_target,
    nta,
    rtr,
    trial_stats,
)
from fedunlearn.nn import GGN, NetworkSpec, init_params
from fedunlearn.unlearn import DEFAULT_EPS_H, export_scores_csv, read_scores_csv, unlearn_pipeline

logger = logging.getLogger(__name__)

OUTPUT_DIR_ENV = "FEDUNLEARN_OUTPUT_DIR"

SEED_STREAMS = {
    "split": 1,
    "partition": 2,
    "init": 3,
    "benchmark_init": 4,
    "federation": 5,
    "benchmark_federation": 6,
    "unlearn": 7,
    "mia": 8,
}

MODELS = ("original", "benchmark", "reset", "unlearned")


# ---------------------------------------------------------------- config


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SynthData(_Strict):
    kind: Literal["synth"]
    classes: int = Field(10, ge=2)
    per_class: int = Field(700, ge=1)
    dim: int = Field(784, ge=1)
    spread: float = Field(2.0, gt=0)
    seed: int = 0


class IdxData(_Strict):
    kind: Literal["idx"]
    train_images: str
    train_labels: str
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    class_count: int = Field(10, ge=2)

    @model_validator(mode="after")
    def _paired_test_files(self):
        if (self.test_images is None) != (self.test_labels is None):
            raise ValueError("test_images and test_labels must be given together")
        return self


class DigitsData(_Strict):
    kind: Literal["digits"]
    copies: int = Field(16, ge=1)
    seed: int = 0


DataConfig = Annotated[Union[SynthData, IdxData, DigitsData], Field(discriminator="kind")]


class RandomPartition(_Strict):
    kind: Literal["random"]


class PreferentialPartition(_Strict):
    kind: Literal["preferential"]
    shared: tuple[int, ...] = (0, 1, 2, 3, 4)
    exclusive: tuple[int, ...] = (5, 6, 7, 8, 9)


PartitionConfig = Annotated[Union[RandomPartition, PreferentialPartition], Field(discriminator="kind")]


class ForgetConfig(_Strict):
    kind: Literal["client", "class", "samples"] = "client"
    value: Union[int, tuple[int, ...]] = 0

    @model_validator(mode="after")
    def _value_matches_kind(self):
        if (self.kind == "samples") != isinstance(self.value, tuple):
            raise ValueError(f"{self.kind!r} selector needs {'a list' if self.kind == 'samples' else 'an integer'}")
        return self

    def selector(self) -> Selector:
        if self.kind == "client":
            return Selector.client(self.value)
        if self.kind == "class":
            return Selector.label(self.value)
        return Selector.samples(self.value)


class BackdoorConfig(_Strict):
    trigger_size: int = Field(3, ge=1)
    trigger_value: float = Field(1.0, ge=0.0, le=1.0)
    corner: str = "top-right"
    target_label: int = Field(9, ge=0)
    poisoned_client: int = Field(0, ge=0)

    @field_validator("corner")
    @classmethod
    def _known_corner(cls, v):
        if v not in CORNERS:
            raise ValueError(f"corner must be one of {list(CORNERS)}")
        return v

    def spec(self) -> BackdoorSpec:
        return BackdoorSpec(**self.model_dump())


class ModelConfig(_Strict):
    hidden: tuple[int, ...] = (64, 32)

    @field_validator("hidden")
    @classmethod
    def _positive(cls, v):
        if any(h < 1 for h in v):
            raise ValueError("hidden sizes must be positive")
        return v


class FederationConfig(_Strict):
    rounds: int = Field(6, ge=1)
    local_epochs: int = Field(1, ge=1)
    lr: float = Field(0.01, ge=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    batch_size: int = Field(32, ge=1)
    client_subset: Optional[tuple[int, ...]] = None
    retrain_epochs: int = Field(1, ge=1)

    def fed_config(self, seed: int) -> FedConfig:
        return FedConfig(seed=seed, **self.model_dump())


class ExperimentConfig(_Strict):
    """Schema of the JSON run file.  Every omitted field takes the default shown here."""

    dataset: DataConfig = Field(default_factory=lambda: SynthData(kind="synth"))
    split_ratio: float = Field(0.7, gt=0.0, lt=1.0)
    n_clients: int = Field(5, ge=1)
    partition: PartitionConfig = Field(default_factory=lambda: RandomPartition(kind="random"))
    forget: ForgetConfig = Field(default_factory=ForgetConfig)
    backdoor: Optional[BackdoorConfig] = None
    alpha_removal: float = Field(0.4, ge=0.0, le=1.0)
    model: ModelConfig = Field(default_factory=ModelConfig)
    federation: FederationConfig = Field(default_factory=FederationConfig)
    eps_h: float = Field(DEFAULT_EPS_H, ge=0.0)
    hessian_mode: Literal["ggn", "fd-exact"] = GGN
    trials: int = Field(20, ge=1)
    master_seed: int = Field(0, ge=0)
    output_dir: str = "fedunlearn-out"

    @model_validator(mode="after")
    def _cross_checks(self):
        if self.forget.kind == "client" and not self.forget.value < self.n_clients:
            raise ValueError(f"forget client {self.forget.value} is not among {self.n_clients} clients")
        if self.backdoor is not None and not self.backdoor.poisoned_client < self.n_clients:
            raise ValueError(f"poisoned_client {self.backdoor.poisoned_client} is not among {self.n_clients} clients")
        subset = self.federation.client_subset
        if subset is not None and any(not 0 <= c < self.n_clients for c in subset):
            raise ValueError(f"client_subset {subset} names clients outside 0..{self.n_clients - 1}")
        return self

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def _format_validation(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{loc}: {e['msg']}")
    return "; ".join(lines)


def parse_config(raw: dict) -> ExperimentConfig:
    """Validate a decoded JSON document; failures become :class:`ConfigError` naming each field."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as err:
        raise ConfigError(_format_validation(err)) from None


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err.strerror}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON ({err.msg} at line {err.lineno})") from None
    return parse_config(raw)


def output_dir(config: ExperimentConfig) -> Path:
    """``$FEDUNLEARN_OUTPUT_DIR`` when set, else ``config.output_dir``."""
    return Path(os.environ.get(OUTPUT_DIR_ENV) or config.output_dir)


# ---------------------------------------------------------------- trials


def trial_seeds(master_seed: int, trial: int) -> dict[str, int]:
    base = derive_seed(master_seed, trial)
    return {"trial": base, **{name: derive_seed(base, k) for name, k in SEED_STREAMS.items()}}


def load_data(config: ExperimentConfig) -> tuple[Dataset, Optional[Dataset]]:
    """Train/test pair, or ``(full, None)`` when the test set is split off per trial."""
    d = config.dataset
    if d.kind == "synth":
        return synth_blobs(d.classes, d.per_class, d.dim, d.spread, d.seed), None
    if d.kind == "digits":
        return digits_datasets(d.copies, config.split_ratio, d.seed)
    full = load_idx(d.train_images, d.train_labels, d.class_count)
    if d.test_images is None:
        return full, None
    return full, load_idx(d.test_images, d.test_labels, d.class_count)


@dataclass
class TrialResult:
    """Metric values for one trial, keyed by alpha, then ``(metric, model)``."""

    seeds: dict
    values: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)
    scores: dict = field(default_factory=dict)


def _evaluate(spec, params, test, target, backdoor, mia_seed) -> dict:
    out = {
        "test_acc": accuracy(spec, params, test),
        "target_acc": accuracy(spec, params, target),
        "mia_acc": mia_accuracy(spec, params, target, test, mia_seed),
    }
    if backdoor is not None:
        out["asr"] = asr(spec, params, test, backdoor)
        out["backdoor_acc"] = backdoor_accuracy(spec, params, test, backdoor)
    return out


def run_trial(config: ExperimentConfig, trial: int, alphas, data=None) -> TrialResult:
    """One trial: train, benchmark-retrain, then unlearn and evaluate once per alpha.

    The trained and benchmark models do not depend on alpha, so a sweep shares
    them; each alpha still gets its own full unlearning run.
    """
    seeds = trial_seeds(config.master_seed, trial)
    full, test = data if data is not None else load_data(config)
    if test is None:
        train, test = train_test_split(full, config.split_ratio, seeds["split"])
    else:
        train = full

    if config.partition.kind == "random":
        part = partition_random(train, config.n_clients, seeds["partition"])
    else:
        p = config.partition
        part = partition_preferential(train, config.n_clients, p.shared, p.exclusive, seeds["partition"])
    backdoor = config.backdoor.spec() if config.backdoor is not None else None
    if backdoor is not None:
        train = poison(train, part, backdoor)
    part = mark_forget(part, config.forget.selector(), train.labels)
    target = train.take(part.target_indices())

    spec = NetworkSpec.mlp([train.dim, *config.model.hidden, train.class_count])
    init = init_params(spec, seeds["init"])
    fed = config.federation.fed_config(seeds["federation"])
    theta_i, t_train = fed_train(spec, init, train, part, fed)
    bench_init = init_params(spec, seeds["benchmark_init"])
    bench_fed = replace(fed, seed=seeds["benchmark_federation"])
    theta_r, t_bench = fed_train(spec, bench_init, train, part, bench_fed, RETAIN_ONLY)
    single_epoch = measure_single_epoch(spec, bench_init, train, part, bench_fed)

    ev = {
        "original": _evaluate(spec, theta_i, test, target, backdoor, seeds["mia"]),
        "benchmark": _evaluate(spec, theta_r, test, target, backdoor, seeds["mia"]),
    }
    result = TrialResult(seeds)
    for alpha in alphas:
        res = unlearn_pipeline(
            spec, theta_i, init, train, part, alpha, replace(fed, seed=seeds["unlearn"]),
            config.eps_h, config.hessian_mode,
        )
        ev_a = dict(ev)
        ev_a["reset"] = _evaluate(spec, res.theta_reset, test, target, backdoor, seeds["mia"])
        ev_a["unlearned"] = _evaluate(spec, res.theta_retrained, test, target, backdoor, seeds["mia"])
        values = {(m, model): v for model, d in ev_a.items() for m, v in d.items()}
        for model in ("reset", "unlearned"):
            acc = ev_a[model]
            values[("nta", model)] = nta(acc["test_acc"], ev["benchmark"]["test_acc"])
            values[("delta_test_acc", model)] = acc["test_acc"] - ev["benchmark"]["test_acc"]
            for name, fn in (("nfs_target", nfs_target), ("nfs_mia", nfs_mia)):
                key = name.split("_")[1] + "_acc"
                score = fn(acc[key], ev["benchmark"][key], ev["original"][key])
                values[(name, model)] = score.value if score.significant else math.nan
                values[(name + "_significant", model)] = float(score.significant)
        timing = Timing(t_train.train_seconds, t_bench.train_seconds, res.timing.unlearn_seconds, single_epoch)
        result.values[alpha] = values
        result.timing[alpha] = {
            "train_seconds": timing.train_seconds,
            "retrain_seconds": timing.retrain_seconds,
            "unlearn_seconds": timing.unlearn_seconds,
            "single_epoch_seconds": timing.single_epoch_seconds,
            "rtr": rtr(timing),
            "bee": bee(timing),
        }
        result.scores[alpha] = (res.scores, res.mask)
        logger.info(
            "trial %d alpha %g: test acc u=%.4f r=%.4f, mia u=%.4f",
            trial, alpha, ev_a["unlearned"]["test_acc"], ev["benchmark"]["test_acc"], ev_a["unlearned"]["mia_acc"],
        )
    return result


# ---------------------------------------------------------------- reports


@dataclass
class MetricsReport:
    """Mean/std/n over trials for every ``(metric, model)`` pair and every timing."""

    alpha: float
    metrics: dict
    efficiency: dict
    per_trial: list

    @classmethod
    def from_trials(cls, trials: list[TrialResult], alpha: float) -> "MetricsReport":
        keys = list(trials[0].values[alpha])
        metrics = {k: trial_stats(t.values[alpha][k] for t in trials) for k in keys}
        eff_keys = list(trials[0].timing[alpha])
        efficiency = {k: trial_stats(t.timing[alpha][k] for t in trials) for k in eff_keys}
        per_trial = [
            {f"{m}/{model}": v for (m, model), v in t.values[alpha].items()} for t in trials
        ]
        return cls(alpha, metrics, efficiency, per_trial)

    def mean(self, metric: str, model: str) -> float:
        return self.metrics[(metric, model)].mean

    def metric_rows(self) -> list[tuple]:
        return [(m, model, s.mean, s.std, s.n) for (m, model), s in self.metrics.items()]

    def efficiency_rows(self) -> list[tuple]:
        return [(k, s.mean, s.std, s.n) for k, s in self.efficiency.items()]


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def _write_csv(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def _json_safe(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def _versions() -> dict:
    out = {"python": platform.python_version(), "fedunlearn": __version__}
    for pkg in ("numpy", "scipy", "pydantic"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def _write_manifest(out: Path, config: ExperimentConfig, trials, artifacts, command: str) -> Path:
    manifest = {
        "command": command,
        "config_hash": config.config_hash(),
        "config": config.model_dump(mode="json"),
        "seeds": [t.seeds for t in trials],
        "artifacts": sorted(p.name for p in artifacts),
        "versions": _versions(),
    }
    path = out / ("manifest.json" if command == "run" else f"{command}_manifest.json")
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _run_trials(config: ExperimentConfig, alphas) -> list[TrialResult]:
    data = load_data(config)
    trials = []
    for t in range(config.trials):
        logger.info("trial %d/%d", t + 1, config.trials)
        trials.append(run_trial(config, t, alphas, data))
    return trials


def cmd_run(config: ExperimentConfig) -> MetricsReport:
    """Run every trial at ``config.alpha_removal`` and write the report files.

    Writes ``metrics.json``, ``metrics.csv`` (deterministic: no timings),
    ``efficiency.csv`` (wall-clock phases, RTR, BEE), ``scores_trial0.csv`` and
    ``manifest.json`` into the output directory.
    """
    out = output_dir(config)
    out.mkdir(parents=True, exist_ok=True)
    alpha = config.alpha_removal
    trials = _run_trials(config, [alpha])
    report = MetricsReport.from_trials(trials, alpha)
    artifacts = [
        _write_csv(out / "metrics.csv", ("metric", "model", "mean", "std", "n"), report.metric_rows()),
        _write_csv(out / "efficiency.csv", ("metric", "mean", "std", "n"), report.efficiency_rows()),
        export_scores_csv(*trials[0].scores[alpha], out / "scores_trial0.csv"),
    ]
    body = {
        "alpha_removal": alpha,
        "trials": config.trials,
        "metrics": {
            f"{m}/{model}": {"mean": _json_safe(s.mean), "std": _json_safe(s.std), "n": s.n}
            for (m, model), s in report.metrics.items()
        },
        "efficiency": {
            k: {"mean": _json_safe(s.mean), "std": _json_safe(s.std), "n": s.n} for k, s in report.efficiency.items()
        },
        "per_trial": [{k: _json_safe(v) for k, v in row.items()} for row in report.per_trial],
    }
    metrics_json = out / "metrics.json"
    metrics_json.write_text(json.dumps(body, indent=2) + "\n")
    artifacts.append(metrics_json)
    _write_manifest(out, config, trials, artifacts, "run")
    return report


SWEEP_COLUMNS = ("alpha", "delta_test_acc_vs_benchmark", "delta_std", "mia_acc", "mia_std", "n")


@dataclass
class SweepRow:
    alpha: float
    delta_test_acc_vs_benchmark: float
    delta_std: float
    mia_acc: float
    mia_std: float
    n: int


def cmd_sweep(config: ExperimentConfig, alphas) -> list[SweepRow]:
    """Unlearned-model accuracy gap to the benchmark and MIA accuracy for each alpha.

    Writes ``sweep.csv`` plus ``sweep_efficiency.csv`` with the per-alpha timings.
    """
    alphas = [float(a) for a in alphas]
    if not alphas:
        raise ConfigError("alphas: at least one value is required")
    bad = [a for a in alphas if not 0.0 <= a <= 1.0]
    if bad:
        raise ConfigError(f"alphas: values {bad} are outside [0, 1]")
    out = output_dir(config)
    out.mkdir(parents=True, exist_ok=True)
    trials = _run_trials(config, alphas)
    rows, eff_rows = [], []
    for a in alphas:
        rep = MetricsReport.from_trials(trials, a)
        d = rep.metrics[("delta_test_acc", "unlearned")]
        m = rep.metrics[("mia_acc", "unlearned")]
        rows.append(SweepRow(a, d.mean, d.std, m.mean, m.std, d.n))
        eff_rows += [(a, *row) for row in rep.efficiency_rows()]
    paths = [
        _write_csv(out / "sweep.csv", SWEEP_COLUMNS, [tuple(vars(r).values()) for r in rows]),
        _write_csv(out / "sweep_efficiency.csv", ("alpha", "metric", "mean", "std", "n"), eff_rows),
    ]
    _write_manifest(out, config, trials, paths, "sweep")
    return rows


def read_sweep_csv(path) -> list[SweepRow]:
    with open(path, newline="") as fh:
        return [
            SweepRow(*(float(r[c]) for c in SWEEP_COLUMNS[:-1]), int(r["n"]))
            for r in csv.DictReader(fh)
        ]


def read_metrics_csv(path) -> dict:
    """``{(metric, model): (mean, std, n)}`` from a ``metrics.csv``."""
    with open(path, newline="") as fh:
        return {
            (r["metric"], r["model"]): (float(r["mean"]), float(r["std"]), int(r["n"]))
            for r in csv.DictReader(fh)
        }


# ---------------------------------------------------------------- audit

AUDIT_QUANTILES = (0.0, 0.25, 0.5, 0.75, 1.0)


@dataclass
class BlockAudit:
    block: str
    size: int
    selected: int
    quantiles: tuple


def cmd_audit(scores_path) -> list[BlockAudit]:
    """Per-block TIS quantiles (min, q25, median, q75, max) and selected counts of a scores CSV."""
    scores, mask = read_scores_csv(scores_path)
    rows = []
    for k, s in scores.blocks.items():
        q = tuple(float(v) for v in np.quantile(s, AUDIT_QUANTILES)) if s.size else (math.nan,) * 5
        rows.append(BlockAudit(k, int(s.size), int(mask.blocks[k].sum()), q))
    return rows


def format_audit(rows: list[BlockAudit]) -> str:
    head = f"{'block':<12}{'size':>8}{'selected':>10}" + "".join(f"{f'q{int(q * 100)}':>13}" for q in AUDIT_QUANTILES)
    lines = [head]
    for r in rows:
        lines.append(f"{r.block:<12}{r.size:>8}{r.selected:>10}" + "".join(f"{v:>13.4e}" for v in r.quantiles))
    total = sum(r.size for r in rows)
    chosen = sum(r.selected for r in rows)
    lines.append(f"{'total':<12}{total:>8}{chosen:>10}")
    return "\n".join(lines)
