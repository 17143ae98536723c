"""Experiment harness: config parsing, scenario orchestration, reports.

A single JSON config fans out into (variant, corruption, seed) runs over
the synthetic benchmark; results land in a deterministic JSON report and
a CSV accuracy table (rows corruptions, columns variants, final average
row). Timing lives in a separate metadata file so reports byte-compare
across reruns.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .adapt import (AdaptConfig, Mapper, RunResult, derive_rng, run_delayed, run_online)
from .audiomap import (FixtureClient, HttpChatClient, LLMClientConfig, MappingCache,
                       MappingResult, VideoLabelSpace, build_prompt,
                       load_mapping_examples, map_via_lexical, map_via_llm)
from .databench import (CORRUPTION_KINDS, CorruptionSpec, DatasetSpec, GeneratedDataset,
                        corrupt, gen_dataset, load_dataset)
from .model import ModelConfig, VideoClassifier, VideoClip, predict, train_source
from .stats import TrainStats, compute_train_stats

METHODS = ("source_only", "align_cons_only", "full_audio",
           "full_audio_select", "full_audio_ensemble")
MAPPERS = ("lexical", "llm", "fixture", "oracle")
STATS_SOURCES = ("same_distribution", "shifted")


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the field."""


@dataclass
class VariantSpec:
    name: str
    method: str
    availability: Optional[float] = None
    adapt_overrides: dict = field(default_factory=dict)


@dataclass
class ExperimentConfig:
    dataset: Optional[DatasetSpec] = None
    dataset_path: Optional[str] = None
    corruptions: list[str] = field(default_factory=lambda: ["gaussian", "salt", "pepper", "contrast"])
    severity: int = 5
    variants: list[VariantSpec] = field(default_factory=lambda: [VariantSpec("full_audio", "full_audio")])
    adapt: AdaptConfig = field(default_factory=lambda: AdaptConfig(lr=2e-3))
    mapper: str = "lexical"
    availability: float = 100.0
    seeds: list[int] = field(default_factory=lambda: [0])
    train_stats_source: str = "same_distribution"
    model_widths: tuple[int, ...] = (8, 8)
    model_seed: int = 0
    train_epochs: int = 60
    train_lr: float = 0.05
    llm: Optional[LLMClientConfig] = None
    llm_cache_path: Optional[str] = None

    def __post_init__(self):
        if self.dataset is None and self.dataset_path is None:
            raise ConfigError("dataset: provide an inline spec or a path")
        for kind in self.corruptions:
            if kind not in CORRUPTION_KINDS:
                raise ConfigError(f"corruptions: unknown kind {kind!r}")
        if not self.corruptions:
            raise ConfigError("corruptions: list must be nonempty")
        if not 1 <= self.severity <= 5:
            raise ConfigError("severity: must be in 1..5")
        if not self.seeds:
            raise ConfigError("seeds: list must be nonempty")
        if not 0.0 <= self.availability <= 100.0:
            raise ConfigError("availability: must be in [0, 100]")
        if self.mapper not in MAPPERS:
            raise ConfigError(f"mapper: unknown mapper {self.mapper!r}")
        if self.train_stats_source not in STATS_SOURCES:
            raise ConfigError(f"train_stats_source: choose from {STATS_SOURCES}")
        names = [v.name for v in self.variants]
        if len(set(names)) != len(names):
            raise ConfigError("variants: names must be unique")
        for v in self.variants:
            if v.method not in METHODS:
                raise ConfigError(f"variants: unknown method {v.method!r}")


def _parse_variant(entry, index: int) -> VariantSpec:
    if isinstance(entry, str):
        if entry not in METHODS:
            raise ConfigError(f"variants[{index}]: unknown method {entry!r}")
        return VariantSpec(name=entry, method=entry)
    if not isinstance(entry, dict):
        raise ConfigError(f"variants[{index}]: expected string or object")
    method = entry.get("method", entry.get("name"))
    if method not in METHODS:
        raise ConfigError(f"variants[{index}].method: unknown method {method!r}")
    return VariantSpec(name=str(entry.get("name", method)), method=method,
                       availability=entry.get("availability"),
                       adapt_overrides=dict(entry.get("adapt", {})))


def parse_config(doc: dict) -> ExperimentConfig:
    """Build a validated config from a JSON document, filling defaults."""
    try:
        dataset = None
        dataset_path = doc.get("dataset_path")
        if "dataset" in doc:
            dataset = DatasetSpec.from_dict(doc["dataset"]) if isinstance(doc["dataset"], dict) else None
            if dataset is None:
                raise ConfigError("dataset: expected an object")
        adapt_fields = dict(doc.get("adapt", {}))
        if "lr" not in adapt_fields:
            adapt_fields["lr"] = 2e-3
        try:
            adapt = AdaptConfig(**adapt_fields)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"adapt: {exc}") from exc
        variants = [_parse_variant(v, i) for i, v in enumerate(doc.get("variants", ["full_audio"]))]
        llm = None
        if "llm" in doc:
            llm_doc = dict(doc["llm"])
            cache = llm_doc.pop("cache_path", None)
            try:
                llm = LLMClientConfig(**llm_doc)
            except TypeError as exc:
                raise ConfigError(f"llm: {exc}") from exc
        else:
            cache = None
        return ExperimentConfig(
            dataset=dataset, dataset_path=dataset_path,
            corruptions=list(doc.get("corruptions", ["gaussian", "salt", "pepper", "contrast"])),
            severity=int(doc.get("severity", 5)),
            variants=variants, adapt=adapt,
            mapper=doc.get("mapper", "lexical"),
            availability=float(doc.get("availability", 100.0)),
            seeds=[int(s) for s in doc.get("seeds", [0])],
            train_stats_source=doc.get("train_stats_source", "same_distribution"),
            model_widths=tuple(int(w) for w in doc.get("model", {}).get("layer_widths", [8, 8])),
            model_seed=int(doc.get("model", {}).get("seed", 0)),
            train_epochs=int(doc.get("train", {}).get("epochs", 60)),
            train_lr=float(doc.get("train", {}).get("lr", 0.05)),
            llm=llm, llm_cache_path=cache)
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config does not parse as JSON: {exc}") from exc
    return parse_config(doc)


def config_echo(config: ExperimentConfig) -> dict:
    """Full resolved config as plain JSON data, for replayable reports."""
    return {
        "dataset": config.dataset.to_dict() if config.dataset else None,
        "dataset_path": config.dataset_path,
        "corruptions": list(config.corruptions),
        "severity": config.severity,
        "variants": [{"name": v.name, "method": v.method,
                      "availability": v.availability,
                      "adapt": dict(v.adapt_overrides)} for v in config.variants],
        "adapt": {k: getattr(config.adapt, k) for k in
                  ("lr", "alpha", "beta", "tau", "num_views", "momentum_stats",
                   "delay_window", "theta", "top_k", "use_select", "use_ensemble",
                   "reset_per_run", "cycle_mode")},
        "mapper": config.mapper,
        "availability": config.availability,
        "seeds": list(config.seeds),
        "train_stats_source": config.train_stats_source,
        "model": {"layer_widths": list(config.model_widths), "seed": config.model_seed},
        "train": {"epochs": config.train_epochs, "lr": config.train_lr},
    }


@dataclass
class Bench:
    """Everything shared across runs: data, source model, reference stats."""

    dataset: GeneratedDataset
    model: VideoClassifier
    train_stats: TrainStats
    space: VideoLabelSpace
    source_accuracy: float


def build_bench(config: ExperimentConfig) -> Bench:
    if config.dataset_path is not None:
        ds = load_dataset(config.dataset_path)
    else:
        ds = gen_dataset(config.dataset)
    spec = ds.spec
    t, h, w, c = spec.clip_shape
    model_cfg = ModelConfig(num_classes=spec.num_classes,
                            layer_widths=config.model_widths,
                            input_shape=(16, h, w, c), seed=config.model_seed)
    model = VideoClassifier(model_cfg)
    model, train_acc = train_source(model, ds.train, config.train_epochs,
                                    config.train_lr, derive_rng(config.model_seed, 7))
    if config.train_stats_source == "shifted":
        shifted = gen_dataset(replace(spec, seed=spec.seed + 101))
        stats = compute_train_stats(model, shifted.train)
    else:
        stats = compute_train_stats(model, ds.train)
    return Bench(dataset=ds, model=model, train_stats=stats,
                 space=VideoLabelSpace(spec.class_names), source_accuracy=train_acc)


def make_mapper(kind: str, bench: Bench, llm: Optional[LLMClientConfig] = None,
                cache_path: Optional[str] = None) -> Mapper:
    space, audio = bench.space, bench.dataset.audio
    if kind == "oracle":
        def oracle_mapper(clip: VideoClip) -> Optional[MappingResult]:
            if clip.ground_truth is None:
                return None
            label = space.labels[clip.ground_truth]
            return MappingResult(raw_reply=label, resolved_label=label,
                                 class_index=clip.ground_truth, valid=True,
                                 source="fixture")
        return oracle_mapper
    if kind == "lexical":
        def lexical_mapper(clip: VideoClip) -> Optional[MappingResult]:
            topk = audio.get(clip.sample_id)
            return map_via_lexical(space, topk) if topk is not None else None
        return lexical_mapper
    if kind == "fixture":
        client = FixtureClient.from_examples(load_mapping_examples()["rows"])
    elif kind == "llm":
        if llm is None:
            raise ConfigError("llm: endpoint configuration required for the llm mapper")
        client = HttpChatClient(llm)
    else:
        raise ConfigError(f"mapper: unknown mapper {kind!r}")
    cache = MappingCache(cache_path) if cache_path else None

    def llm_mapper(clip: VideoClip) -> Optional[MappingResult]:
        topk = audio.get(clip.sample_id)
        if topk is None:
            return None
        prompt = build_prompt(space, topk)
        return map_via_llm(client, prompt, space, cache=cache, sample_id=clip.sample_id)

    return llm_mapper


def make_stream(bench: Bench, corruption: str, severity: int, seed: int) -> list[VideoClip]:
    """Seed-shuffled test clips, each corrupted with a per-sample generator."""
    kind_idx = CORRUPTION_KINDS.index(corruption)
    spec = CorruptionSpec(kind=corruption, severity=severity)
    order = derive_rng(seed, 33).permutation(len(bench.dataset.test))
    return [corrupt(bench.dataset.test[int(j)], spec, derive_rng(seed, 44, kind_idx, pos))
            for pos, j in enumerate(order)]


def run_source_only(model: VideoClassifier, samples: list[VideoClip]) -> RunResult:
    predictions = [predict(model, clip) for clip in samples]
    correct = sum(int(p == clip.ground_truth) for p, clip in zip(predictions, samples)
                  if clip.ground_truth is not None)
    return RunResult(records=[], predictions=predictions, correct=correct,
                     total=len(samples), pseudo_valid=0, mean_adapt_seconds=0.0)


def run_variant(bench: Bench, variant: VariantSpec, samples: list[VideoClip],
                config: ExperimentConfig, seed: int,
                model: Optional[VideoClassifier] = None) -> RunResult:
    """One (variant, stream) run on a fresh model copy unless one is given."""
    model = model if model is not None else bench.model.copy()
    if variant.method == "source_only":
        return run_source_only(model, samples)
    adapt_cfg = replace(config.adapt, **variant.adapt_overrides) \
        if variant.adapt_overrides else config.adapt
    if variant.method == "full_audio_select":
        adapt_cfg = replace(adapt_cfg, use_select=True)
    elif variant.method == "full_audio_ensemble":
        adapt_cfg = replace(adapt_cfg, use_ensemble=True)
    availability = variant.availability if variant.availability is not None \
        else config.availability
    if variant.method == "align_cons_only":
        availability = 0.0
    mapper = make_mapper(config.mapper, bench, config.llm, config.llm_cache_path)
    runner = run_delayed if adapt_cfg.delay_window >= 1 else run_online
    return runner(model, samples, config=adapt_cfg, train_stats=bench.train_stats,
                  mapper=mapper, availability=availability, seed=seed)


def report_metrics(runs: list[dict], corruptions: list[str],
                   variant_names: list[str]) -> tuple[str, dict]:
    """Fold per-run results into the CSV table and the JSON metrics block.

    Accuracy cells are percentages rounded to two decimals; the CSV and
    JSON figures come from the same rounded values.
    """
    if not runs:
        raise ValueError("no runs to report")
    per_cell: dict[tuple[str, str], list[float]] = {}
    hist: dict[str, dict[int, int]] = {name: {} for name in variant_names}
    valid_rates: dict[str, list[float]] = {name: [] for name in variant_names}
    for run in runs:
        per_cell.setdefault((run["variant"], run["corruption"]), []).append(run["accuracy_pct"])
        for steps, count in run["steps_histogram"].items():
            hist[run["variant"]][int(steps)] = hist[run["variant"]].get(int(steps), 0) + count
        valid_rates[run["variant"]].append(run["pseudo_valid_rate"])
    per_corruption = {
        name: {kind: round(float(np.mean(per_cell[(name, kind)])), 2)
               for kind in corruptions}
        for name in variant_names}
    averages = {name: round(float(np.mean([per_corruption[name][kind] for kind in corruptions])), 2)
                for name in variant_names}
    lines = ["corruption," + ",".join(variant_names)]
    for kind in corruptions:
        lines.append(kind + "," + ",".join(f"{per_corruption[name][kind]:.2f}"
                                           for name in variant_names))
    lines.append("Avg.," + ",".join(f"{averages[name]:.2f}" for name in variant_names))
    csv_text = "\n".join(lines) + "\n"
    metrics = {
        "per_corruption": per_corruption,
        "average": averages,
        "steps_histogram": {name: {str(k): v for k, v in sorted(hist[name].items())}
                            for name in variant_names},
        "pseudo_valid_rate": {name: round(float(np.mean(valid_rates[name])), 4)
                              for name in variant_names},
    }
    return csv_text, metrics


def run_experiment(config: ExperimentConfig, out_dir: str | Path) -> dict:
    """Execute every (variant, corruption, seed) run and write the report
    files: report.json and table.csv (deterministic), run_meta.json (timing)."""
    started = time.perf_counter()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bench = build_bench(config)
    runs: list[dict] = []
    adapt_seconds: list[float] = []
    for variant in config.variants:
        for seed in config.seeds:
            carried = None if config.adapt.reset_per_run else bench.model.copy()
            for corruption in config.corruptions:
                samples = make_stream(bench, corruption, config.severity, seed)
                result = run_variant(bench, variant, samples, config, seed, model=carried)
                adapt_seconds.append(result.mean_adapt_seconds)
                runs.append({
                    "variant": variant.name, "corruption": corruption, "seed": seed,
                    "accuracy_pct": round(result.accuracy_pct, 2),
                    "correct": result.correct, "total": result.total,
                    "pseudo_valid_rate": round(result.pseudo_valid_rate, 4),
                    "steps_histogram": {str(k): v for k, v in result.steps_histogram().items()},
                    "records": [rec.to_dict() for rec in result.records],
                })
    variant_names = [v.name for v in config.variants]
    csv_text, metrics = report_metrics(runs, config.corruptions, variant_names)
    report = {
        "config": config_echo(config),
        "source_train_accuracy": round(100.0 * bench.source_accuracy, 2),
        "metrics": metrics,
        "runs": runs,
    }
    (out / "report.json").write_text(json.dumps(report, indent=2))
    (out / "table.csv").write_text(csv_text)
    meta = {
        "created_at": datetime.now(timezone.utc).isoformat(),
        "total_seconds": round(time.perf_counter() - started, 3),
        "mean_adapt_seconds_per_sample":
            round(float(np.mean(adapt_seconds)), 6) if adapt_seconds else 0.0,
    }
    (out / "run_meta.json").write_text(json.dumps(meta, indent=2))
    return report
