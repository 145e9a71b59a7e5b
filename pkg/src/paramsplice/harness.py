"""Experiment orchestration: train N base models, train the assessment
networks, splice, evaluate against baselines, sweep the model count, and
run the ablations. Reports go to CSV (plot-ready) plus a JSON mirror that
embeds the full config for provenance.

Reproducibility: one master seed per replication fans out through named
SeedSequence streams (data, shared init, per-model shuffling, assessment,
fine-tuning, evaluation negatives), so identical configs produce identical
metric values; only timing fields vary between runs.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .baselines import magnitude_prune, output_ensemble, parameter_average
from .checkpoint import ParameterSet, validate_compatible
from .compatibility import ASSESSMENT_VARIANTS, HistogramSpec, assess
from .data import (
    TASK_CLASSIFICATION,
    TASK_RANKING,
    TASKS,
    Dataset,
    gen_classification,
    gen_interactions,
    ranking_candidates,
)
from .metrics import classification_metrics, measure_cost_ratio, rank_by_score, ranking_metrics
from .models import (
    ModelConfig,
    default_config,
    finetune,
    fit_assessment,
    initial_params,
    predict,
    train_base,
)
from .splicing import hard_splice, soft_splice

RANKING_KS = (5, 10)
EVAL_NEGATIVES = 100
COST_REPETITIONS = 9


class ConfigError(ValueError):
    """The experiment configuration is invalid."""


# Builders for externally provided merge methods; the harness ships none
# but exposes the slot: register_method("name", builder) where builder is
# (models, data, config, master_seed) -> ParameterSet.
EXTRA_METHOD_BUILDERS: dict[str, Callable] = {}


def register_method(name: str, builder: Callable) -> None:
    EXTRA_METHOD_BUILDERS[name] = builder


_STREAMS = {"data": 0, "init": 1, "model": 2, "assess": 3, "finetune": 4,
            "eval": 5, "timing": 6}


def derive_seed(master: int, stream: str, index: int = 0) -> int:
    """Counter-based fan-out of one master seed into independent streams."""
    seq = np.random.SeedSequence(master, spawn_key=(_STREAMS[stream], index))
    return int(seq.generate_state(1, np.uint64)[0])


def _strict_kwargs(payload: dict, allowed: dict[str, type], where: str) -> dict:
    unknown = set(payload) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")
    return payload


@dataclass(frozen=True)
class ClassificationDataParams:
    n_samples: int = 7000
    n_features: int = 16
    n_classes: int = 2
    separation: float = 4.0


@dataclass(frozen=True)
class RankingDataParams:
    n_users: int = 150
    n_items: int = 300
    latent_dim: int = 8
    interactions_per_user: int = 30
    concentration: float = 4.0


@dataclass(frozen=True)
class ModelSettings:
    """Optional overrides applied on top of the per-task model defaults."""

    epochs: int | None = None
    learning_rate: float | None = None
    batch_size: int | None = None
    hidden: tuple[int, ...] | None = None
    factor_dim: int | None = None
    assess_batch_size: int | None = None

    def apply(self, config: ModelConfig) -> ModelConfig:
        values = dataclasses.asdict(config)
        for key in ("epochs", "learning_rate", "batch_size", "factor_dim"):
            override = getattr(self, key)
            if override is not None:
                values[key] = override
        if self.hidden is not None:
            values["hidden"] = tuple(self.hidden)
        return ModelConfig(**values)


@dataclass(frozen=True)
class ExperimentConfig:
    task: str
    seeds: tuple[int, ...]
    n_models: int = 2
    mode: str = "soft"
    bins: int = 64
    assess_epochs: int = 3
    finetune_epochs: int = 1
    dataset: ClassificationDataParams | RankingDataParams | None = None
    model: ModelSettings = field(default_factory=ModelSettings)
    ensemble_weights: tuple[float, ...] | None = None
    prune_sparsities: tuple[float, ...] = (0.1, 0.3, 0.5)
    out_dir: str = "runs"
    extra_methods: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}")
        if self.n_models < 2:
            raise ConfigError(f"n_models must be >= 2, got {self.n_models}")
        if not self.seeds:
            raise ConfigError("at least one master seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("master seeds must be distinct")
        if self.mode not in ("soft", "hard"):
            raise ConfigError(f"mode must be 'soft' or 'hard', got {self.mode!r}")
        if self.bins < 1:
            raise ConfigError("bins must be >= 1")
        if self.assess_epochs < 0 or self.finetune_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")
        if not all(0.0 <= s < 1.0 for s in self.prune_sparsities):
            raise ConfigError("prune sparsities must lie in [0, 1)")
        if self.dataset is None:
            default = (ClassificationDataParams() if self.task == TASK_CLASSIFICATION
                       else RankingDataParams())
            object.__setattr__(self, "dataset", default)
        for name in self.extra_methods:
            if name not in EXTRA_METHOD_BUILDERS:
                raise ConfigError(f"extra method {name!r} has no registered builder")

    @classmethod
    def from_dict(cls, payload: dict) -> "ExperimentConfig":
        allowed = {f.name: f.type for f in dataclasses.fields(cls)}
        payload = dict(_strict_kwargs(payload, allowed, "config"))
        task = payload.get("task")
        if "dataset" in payload and payload["dataset"] is not None:
            params_cls = (ClassificationDataParams if task == TASK_CLASSIFICATION
                          else RankingDataParams)
            fields = {f.name: f.type for f in dataclasses.fields(params_cls)}
            payload["dataset"] = params_cls(
                **_strict_kwargs(payload["dataset"], fields, "config.dataset"))
        if "model" in payload and payload["model"] is not None:
            fields = {f.name: f.type for f in dataclasses.fields(ModelSettings)}
            payload["model"] = ModelSettings(
                **_strict_kwargs(payload["model"], fields, "config.model"))
        for key in ("seeds", "prune_sparsities", "extra_methods", "ensemble_weights"):
            if key in payload and payload[key] is not None:
                payload[key] = tuple(payload[key])
        try:
            return cls(**payload)
        except TypeError as err:
            raise ConfigError(str(err)) from err

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path, "r", encoding="utf-8") as handle:
            try:
                payload = json.load(handle)
            except json.JSONDecodeError as err:
                raise ConfigError(f"{path}: not valid JSON: {err}") from err
        if not isinstance(payload, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(payload)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class ReportRow:
    seed: int
    method: str
    metric: str
    value: float
    n_models: int
    cost_ratio: float | None = None
    wall_time_s: float | None = None

    def __post_init__(self) -> None:
        if not np.isfinite(self.value):
            raise ValueError(f"non-finite metric value for {self.method}/{self.metric}")


@dataclass
class Report:
    kind: str
    config: ExperimentConfig
    rows: list[ReportRow]
    notes: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)  # in-memory only

    def methods(self) -> tuple[str, ...]:
        seen: list[str] = []
        for row in self.rows:
            if row.method not in seen:
                seen.append(row.method)
        return tuple(seen)

    def value(self, seed: int, method: str, metric: str) -> float:
        for row in self.rows:
            if row.seed == seed and row.method == method and row.metric == metric:
                return row.value
        raise KeyError((seed, method, metric))

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / f"{self.kind}.csv"
        json_path = out / f"{self.kind}.json"
        with open(csv_path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(["seed", "n_models", "method", "metric", "value",
                             "cost_ratio", "wall_time_s"])
            for row in self.rows:
                writer.writerow([
                    row.seed, row.n_models, row.method, row.metric, repr(row.value),
                    "" if row.cost_ratio is None else repr(row.cost_ratio),
                    "" if row.wall_time_s is None else f"{row.wall_time_s:.6f}",
                ])
        with open(json_path, "w", encoding="utf-8") as handle:
            json.dump({
                "kind": self.kind,
                "config": self.config.to_dict(),
                "notes": self.notes,
                "rows": [dataclasses.asdict(row) for row in self.rows],
            }, handle, indent=2, sort_keys=True)
        return csv_path, json_path


def primary_metric(task: str) -> str:
    return "accuracy" if task == TASK_CLASSIFICATION else f"ndcg@{RANKING_KS[0]}"


def generate_dataset(config: ExperimentConfig, master_seed: int) -> Dataset:
    seed = derive_seed(master_seed, "data")
    params = dataclasses.asdict(config.dataset)
    if config.task == TASK_CLASSIFICATION:
        return gen_classification(seed, **params)
    return gen_interactions(seed, **params)


def _model_config(config: ExperimentConfig, seed: int) -> ModelConfig:
    return config.model.apply(default_config(config.task, seed=seed))


def train_base_models(config: ExperimentConfig, master_seed: int, data: Dataset,
                      n_models: int) -> list[ParameterSet]:
    """Train the bases to splice: shared initialization (parameter positions
    stay in correspondence across models), per-model seeds driving only the
    batch order and negative sampling."""
    init_cfg = _model_config(config, derive_seed(master_seed, "init"))
    shared_init = initial_params(init_cfg, data)
    models = [train_base(_model_config(config, derive_seed(master_seed, "model", k)),
                         data, init=shared_init)
              for k in range(n_models)]
    validate_compatible(models)
    return models


class _Evaluator:
    """Evaluates scorers on the test split with a fixed candidate set."""

    def __init__(self, config: ExperimentConfig, master_seed: int, data: Dataset) -> None:
        self.task = config.task
        self.data = data
        if self.task == TASK_CLASSIFICATION:
            self.inputs, self.labels = data.split("test")
        else:
            self.users, self.candidates = ranking_candidates(
                data, derive_seed(master_seed, "eval"), EVAL_NEGATIVES)
            self.inputs = self.users

    def metrics_for(self, scorer: Callable[[np.ndarray], np.ndarray]) -> dict[str, float]:
        scores = scorer(self.inputs)
        if self.task == TASK_CLASSIFICATION:
            return classification_metrics(scores, self.labels)
        per_user = np.take_along_axis(scores, self.candidates, axis=1)
        ranked = np.take_along_axis(self.candidates, rank_by_score(per_user), axis=1)
        out: dict[str, float] = {}
        for k in RANKING_KS:
            out.update(ranking_metrics(ranked, self.candidates[:, 0], k))
        return out


def _stage(name: str, fn: Callable, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (ConfigError, KeyboardInterrupt):
        raise
    except Exception as err:
        raise RuntimeError(f"stage {name!r} failed: {err}") from err


def _method_rows(seed: int, n_models: int, method: str, metrics: dict[str, float],
                 cost_ratio: float | None, wall_time: float) -> list[ReportRow]:
    return [ReportRow(seed, method, metric, value, n_models, cost_ratio, wall_time)
            for metric, value in metrics.items()]


def _seed_compare(config: ExperimentConfig, master_seed: int, data: Dataset,
                  models: list[ParameterSet], n_models: int,
                  rows: list[ReportRow], notes: dict, artifacts: dict) -> None:
    evaluator = _Evaluator(config, master_seed, data)
    spec = HistogramSpec(config.bins)
    base_scorer = lambda x: predict(models[0], x)  # noqa: E731
    if config.task == TASK_CLASSIFICATION:
        timing_inputs = evaluator.inputs
    else:
        timing_inputs = evaluator.users

    def add_model_method(method: str, model: ParameterSet, wall_start: float) -> None:
        validate_compatible([*models, model])
        cost = measure_cost_ratio(lambda: predict(model, timing_inputs),
                                  lambda: predict(models[0], timing_inputs),
                                  repetitions=COST_REPETITIONS)
        metrics = evaluator.metrics_for(lambda x: predict(model, x))
        rows.extend(_method_rows(master_seed, n_models, method, metrics,
                                 cost.ratio, time.perf_counter() - wall_start))
        artifacts[(master_seed, method)] = model

    for k, model in enumerate(models):
        start = time.perf_counter()
        _stage(f"evaluate model-{k}", add_model_method, f"model-{k}", model, start)

    start = time.perf_counter()

    def run_pruning() -> None:
        best = None
        sweep_note = {}
        for sparsity in config.prune_sparsities:
            candidate = magnitude_prune(models[0], sparsity)
            metrics = evaluator.metrics_for(lambda x: predict(candidate, x))
            sweep_note[str(sparsity)] = metrics[primary_metric(config.task)]
            if best is None or metrics[primary_metric(config.task)] > best[1][primary_metric(config.task)]:
                best = (sparsity, metrics, candidate)
        sparsity, metrics, model = best
        validate_compatible([*models, model])
        cost = measure_cost_ratio(lambda: predict(model, timing_inputs),
                                  lambda: predict(models[0], timing_inputs),
                                  repetitions=COST_REPETITIONS)
        rows.extend(_method_rows(master_seed, n_models, "pruning", metrics,
                                 cost.ratio, time.perf_counter() - start))
        artifacts[(master_seed, "pruning")] = model
        notes.setdefault("pruning_sweep", {})[str(master_seed)] = {
            "chosen_sparsity": sparsity, "primary_metric_by_sparsity": sweep_note}

    _stage("pruning", run_pruning)

    start = time.perf_counter()

    def run_ensemble() -> None:
        weights = config.ensemble_weights
        if weights is not None and len(weights) != n_models:
            raise ConfigError(f"{len(weights)} ensemble weights for {n_models} models")
        scorer = lambda x: output_ensemble(models, x, weights)  # noqa: E731
        cost = measure_cost_ratio(lambda: scorer(timing_inputs),
                                  lambda: base_scorer(timing_inputs),
                                  repetitions=COST_REPETITIONS)
        metrics = evaluator.metrics_for(scorer)
        rows.extend(_method_rows(master_seed, n_models, "ensemble", metrics,
                                 cost.ratio, time.perf_counter() - start))

    _stage("ensemble", run_ensemble)

    start = time.perf_counter()
    averaged = _stage("averaging", parameter_average, models)
    _stage("evaluate averaging", add_model_method, "averaging", averaged, start)

    start = time.perf_counter()
    assess_batch = config.model.assess_batch_size
    fit = _stage("assessment training", fit_assessment, models, data, config.mode,
                 spec, config.assess_epochs, seed=derive_seed(master_seed, "assess"),
                 **({"batch_size": assess_batch} if assess_batch else {}))
    compat = _stage("assessment", assess, models, fit.networks, spec)
    assess_wall = time.perf_counter() - start
    artifacts[(master_seed, "networks")] = fit.networks
    artifacts[(master_seed, "assessment_history")] = fit.history

    start = time.perf_counter()
    hard = _stage("hard splice", hard_splice, models, compat)
    _stage("evaluate cki-hard", add_model_method, "cki-hard", hard,
           start - assess_wall)

    start = time.perf_counter()
    soft = _stage("soft splice", soft_splice, models, compat)
    _stage("evaluate cki-soft", add_model_method, "cki-soft", soft,
           start - assess_wall)

    start = time.perf_counter()
    tuned = _stage("finetune", finetune, soft, data, config.finetune_epochs,
                   config=_model_config(config, derive_seed(master_seed, "finetune")))
    _stage("evaluate cki-soft-finetuned", add_model_method, "cki-soft-finetuned",
           tuned, start)

    for name in config.extra_methods:
        start = time.perf_counter()
        built = _stage(f"extra method {name}", EXTRA_METHOD_BUILDERS[name],
                       models, data, config, master_seed)
        _stage(f"evaluate {name}", add_model_method, name, built, start)


def run_compare(config: ExperimentConfig, write: bool = True) -> Report:
    """Full protocol: train n bases per master seed, run every method, and
    evaluate all metrics. Deterministic given the config; timing fields are
    the only run-to-run variation."""
    rows: list[ReportRow] = []
    notes: dict = {"eval_negatives": EVAL_NEGATIVES if config.task == TASK_RANKING else None,
                   "primary_metric": primary_metric(config.task)}
    artifacts: dict = {}
    for master_seed in config.seeds:
        data = _stage("generate data", generate_dataset, config, master_seed)
        models = _stage("train bases", train_base_models, config, master_seed,
                        data, config.n_models)
        for k, model in enumerate(models):
            artifacts[(master_seed, f"base-{k}")] = model
        artifacts[(master_seed, "data")] = data
        _seed_compare(config, master_seed, data, models, config.n_models,
                      rows, notes, artifacts)
    report = Report("compare", config, rows, notes, artifacts)
    if write:
        report.write(config.out_dir)
    return report


def sweep_model_count(config: ExperimentConfig, n_list: list[int],
                      write: bool = True) -> Report:
    """One compare block per model count, reusing base models: the largest
    requested n is trained once per seed and smaller runs take prefixes."""
    if not n_list or any(n < 2 for n in n_list):
        raise ConfigError("each swept model count must be >= 2")
    rows: list[ReportRow] = []
    notes: dict = {"n_list": list(n_list)}
    artifacts: dict = {}
    max_n = max(n_list)
    for master_seed in config.seeds:
        data = _stage("generate data", generate_dataset, config, master_seed)
        all_models = _stage("train bases", train_base_models, config, master_seed,
                            data, max_n)
        for n in n_list:
            _seed_compare(config, master_seed, data, all_models[:n], n,
                          rows, notes, artifacts)
    report = Report("sweep-models", config, rows, notes, artifacts)
    if write:
        report.write(config.out_dir)
    return report


def ablation_assessment(config: ExperimentConfig, write: bool = True) -> Report:
    """Evaluate the four assessment variants (uniform, local-only,
    global-only, full blend) under soft splicing, each with networks trained
    through its own path."""
    rows: list[ReportRow] = []
    artifacts: dict = {}
    spec = HistogramSpec(config.bins)
    for master_seed in config.seeds:
        data = _stage("generate data", generate_dataset, config, master_seed)
        models = _stage("train bases", train_base_models, config, master_seed,
                        data, config.n_models)
        evaluator = _Evaluator(config, master_seed, data)
        artifacts[(master_seed, "averaging")] = parameter_average(models)
        for variant in ASSESSMENT_VARIANTS:
            start = time.perf_counter()
            if variant == "neither":
                compat = assess(models, None, spec, variant="neither")
            else:
                fit = _stage(f"train {variant}", fit_assessment, models, data, "soft",
                             spec, config.assess_epochs, variant=variant,
                             seed=derive_seed(master_seed, "assess"))
                compat = _stage(f"assess {variant}", assess, models, fit.networks,
                                spec, variant)
            model = _stage(f"splice {variant}", soft_splice, models, compat)
            validate_compatible([*models, model])
            metrics = evaluator.metrics_for(lambda x: predict(model, x))
            rows.extend(_method_rows(master_seed, config.n_models, f"assess-{variant}",
                                     metrics, None, time.perf_counter() - start))
            artifacts[(master_seed, f"assess-{variant}")] = model
    report = Report("ablation-assessment", config, rows,
                    {"splice_mode": "soft"}, artifacts)
    if write:
        report.write(config.out_dir)
    return report


def ablation_splicing(config: ExperimentConfig, write: bool = True) -> Report:
    """Evaluate hard vs soft splicing from one shared assessment, so the
    splicing method is the only variable."""
    rows: list[ReportRow] = []
    artifacts: dict = {}
    spec = HistogramSpec(config.bins)
    for master_seed in config.seeds:
        data = _stage("generate data", generate_dataset, config, master_seed)
        models = _stage("train bases", train_base_models, config, master_seed,
                        data, config.n_models)
        evaluator = _Evaluator(config, master_seed, data)
        fit = _stage("assessment training", fit_assessment, models, data, config.mode,
                     spec, config.assess_epochs,
                     seed=derive_seed(master_seed, "assess"))
        compat = _stage("assessment", assess, models, fit.networks, spec)
        artifacts[(master_seed, "compat")] = compat
        for mode, splice in (("hard", hard_splice), ("soft", soft_splice)):
            start = time.perf_counter()
            model = _stage(f"{mode} splice", splice, models, compat)
            validate_compatible([*models, model])
            metrics = evaluator.metrics_for(lambda x: predict(model, x))
            rows.extend(_method_rows(master_seed, config.n_models, f"splice-{mode}",
                                     metrics, None, time.perf_counter() - start))
            artifacts[(master_seed, f"splice-{mode}")] = model
    report = Report("ablation-splicing", config, rows,
                    {"training_mode": config.mode}, artifacts)
    if write:
        report.write(config.out_dir)
    return report
