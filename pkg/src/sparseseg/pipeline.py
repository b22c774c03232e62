"""Experiment configuration and the stages behind each CLI command.

One YAML document drives every stage::

    seed: 0
    out_dir: runs/synthetic
    data:   {synth: {...}, paths: [...], side: 64, query_fraction: 0.5, standardize: false}
    model:  {encoder_channels: [8, 16, 32], center_channels: 64, input_side: 64}
    meta:   {alpha: 0.1, beta: 0.001, meta_iterations: 500, optimizer: adam, ...}
    meta_sparsity: match          # or a tag such as points5 to share one checkpoint
    tune:   {learning_rate: 0.001, epochs: 30, batch_size: 5}
    source_tune: {...}            # dense pretraining for finetune:<task> baselines
    plan:   {held_out_task: synth_banded/ellipse, methods: [...], shots: [...], sparsity: [...]}

Section seeds default to the global ``seed``. Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from . import model as M
from .adaptation import TuneConfig, pretrain_dense, safe_name
from .errors import ConfigError, DataError
from .evaluator import (ExperimentPlan, aggregate, efficiency_curve, evaluate_saved, read_results, run_experiment,
                        target_pairs, write_aggregate, write_plots, write_results)
from .meta_trainer import MetaConfig, meta_train, write_log
from .sparsifier import parse_sparsity
from .task_store import (SynthSpec, build_meta_dataset, ingest_dataset, make_tasks, synth_generate, write_dataset,
                         write_manifest)

log = logging.getLogger(__name__)


@dataclass
class DataConfig:
    synth: SynthSpec | None = None
    paths: list[str] = field(default_factory=list)
    side: int | None = None
    query_fraction: float = 0.5
    standardize: bool = False


@dataclass
class ExperimentConfig:
    plan: ExperimentPlan
    seed: int = 0
    out_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    model: M.ModelConfig = field(default_factory=M.ModelConfig)
    meta: MetaConfig = field(default_factory=MetaConfig)
    meta_sparsity: str = "match"
    tune: TuneConfig = field(default_factory=TuneConfig)
    source_tune: TuneConfig = field(default_factory=TuneConfig)

    @property
    def out(self) -> Path:
        return Path(self.out_dir)

    @property
    def side(self) -> int:
        return self.data.side or self.model.input_side

    def validate(self):
        if self.data.synth is None and not self.data.paths:
            raise ConfigError("data: give either 'synth' or 'paths'")
        if self.data.synth is not None:
            self.data.synth.validate()
        self.model.validate()
        if self.side != self.model.input_side:
            raise ConfigError(f"data.side {self.side} must equal model.input_side {self.model.input_side}")
        self.meta.validate()
        self.tune.validate()
        self.source_tune.validate()
        self.plan.validate()
        if self.meta_sparsity != "match":
            parse_sparsity(self.meta_sparsity)


_SECTIONS = {"data": DataConfig, "model": M.ModelConfig, "meta": MetaConfig, "tune": TuneConfig,
             "source_tune": TuneConfig, "plan": ExperimentPlan}
_SEEDED = ("meta", "tune", "source_tune", "plan")


def _build(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(raw).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(repr(k) for k in unknown)}")
    kwargs = dict(raw)
    if cls is DataConfig and kwargs.get("synth") is not None:
        kwargs["synth"] = _build(SynthSpec, kwargs["synth"], f"{where}.synth")
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    top = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {', '.join(repr(k) for k in unknown)}")
    if "plan" not in raw:
        raise ConfigError("missing required section 'plan'")
    kwargs = {k: v for k, v in raw.items() if k not in _SECTIONS}
    for name, cls in _SECTIONS.items():
        if name in raw:
            kwargs[name] = _build(cls, raw[name] or {}, name)
    cfg = ExperimentConfig(**kwargs)
    for name in _SEEDED:
        if "seed" not in (raw.get(name) or {}):
            setattr(getattr(cfg, name), "seed", cfg.seed)
    cfg.validate()
    return cfg


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """``section.key=value`` assignments; values parse as YAML scalars/lists."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        key, value = item.split("=", 1)
        node = raw
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-mapping")
        node[parts[-1]] = yaml.safe_load(value)
    return raw


def load_config(path: str | Path, overrides: list[str] = (), seed: int | None = None,
                out_dir: str | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    raw = apply_overrides(raw, list(overrides))
    if seed is not None:
        raw["seed"] = seed
    if out_dir is not None:
        raw["out_dir"] = out_dir
    return config_from_dict(raw)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(json.loads(json.dumps(dataclasses.asdict(cfg))), sort_keys=False)


# ---------------------------------------------------------------- stages

def run_synth(cfg: ExperimentConfig) -> list[Path]:
    if cfg.data.synth is None:
        raise ConfigError("config has no data.synth section")
    datasets = synth_generate(cfg.data.synth, cfg.seed)
    root = cfg.out / "data"
    paths = [write_dataset(ds, root / ds.name) for ds in datasets]
    write_manifest(root / "manifest.json", cfg.data.synth, cfg.seed, [ds.name for ds in datasets])
    return paths


def dataset_dirs(cfg: ExperimentConfig) -> list[Path]:
    if cfg.data.paths:
        return [Path(p) for p in cfg.data.paths]
    manifest = cfg.out / "data" / "manifest.json"
    if not manifest.exists():
        raise DataError(f"dataset not found: {manifest} (run 'synth' first)")
    return [cfg.out / "data" / name for name in json.loads(manifest.read_text())["datasets"]]


def load_datasets(cfg: ExperimentConfig) -> dict:
    datasets = {}
    for d in dataset_dirs(cfg):
        ds = ingest_dataset(d)
        datasets[ds.name] = ds
    return datasets


def meta_sparsity_tags(cfg: ExperimentConfig) -> list[str]:
    if cfg.meta_sparsity != "match":
        return [parse_sparsity(cfg.meta_sparsity).tag]
    return [parse_sparsity(s).tag for s in cfg.plan.sparsity]


def weasel_checkpoint_path(cfg: ExperimentConfig, tag: str) -> Path:
    return cfg.out / "checkpoints" / f"weasel_{tag}.ckpt"


def source_checkpoint_path(cfg: ExperimentConfig, source: str) -> Path:
    return cfg.out / "checkpoints" / f"source_{safe_name(source)}.ckpt"


def build_tasks(cfg: ExperimentConfig, datasets: dict, sparsity=None):
    return make_tasks(list(datasets.values()), cfg.side, cfg.data.query_fraction, cfg.seed, sparsity,
                      cfg.data.standardize)


def run_meta_train(cfg: ExperimentConfig, datasets: dict | None = None) -> dict:
    """Meta-train one initialization per needed sparsity; write checkpoints and logs."""
    if "weasel" not in cfg.plan.methods:
        return {}
    datasets = datasets if datasets is not None else load_datasets(cfg)
    out = {}
    for tag in meta_sparsity_tags(cfg):
        tasks = build_tasks(cfg, datasets, parse_sparsity(tag))
        meta = build_meta_dataset(tasks, cfg.plan.held_out_task)
        log.info("meta-training %s on %d tasks (held out %s)", tag, len(meta.tasks), meta.held_out_id)
        params, rows = meta_train(meta, cfg.model, cfg.meta, checkpoint_path=weasel_checkpoint_path(cfg, tag))
        write_log(cfg.out / "logs" / f"meta_train_{tag}.csv", rows)
        out[tag] = params
    return out


def run_pretrain_sources(cfg: ExperimentConfig, datasets: dict | None = None) -> dict:
    sources = [m.split(":", 1)[1] for m in cfg.plan.methods if m.startswith("finetune:")]
    if not sources:
        return {}
    datasets = datasets if datasets is not None else load_datasets(cfg)
    tasks = {t.id: t for t in build_tasks(cfg, datasets)}
    out = {}
    for src in sources:
        if src not in tasks:
            raise DataError(f"unknown source task {src!r}")
        if src == cfg.plan.held_out_task:
            raise ConfigError("source task must differ from the held-out task")
        path = source_checkpoint_path(cfg, src)
        if path.exists():
            out[src], _, _ = M.load_checkpoint(path)
            continue
        params = pretrain_dense(tasks[src], cfg.model, cfg.source_tune)
        M.save_checkpoint(path, params, cfg.model, seed=cfg.source_tune.seed, source=src)
        out[src] = params
    return out


def load_checkpoints(cfg: ExperimentConfig, datasets: dict | None = None) -> dict:
    ckpts = {}
    if "weasel" in cfg.plan.methods:
        for tag in meta_sparsity_tags(cfg):
            params, _, _ = M.load_checkpoint(weasel_checkpoint_path(cfg, tag))
            ckpts[f"weasel@{tag}" if cfg.meta_sparsity == "match" else "weasel"] = params
    for src, params in run_pretrain_sources(cfg, datasets).items():
        ckpts[f"finetune:{src}"] = params
    return ckpts


def results_path(cfg: ExperimentConfig) -> Path:
    return cfg.out / "results" / "results.csv"


def run_adapt(cfg: ExperimentConfig, jobs: int = 1) -> list:
    datasets = load_datasets(cfg)
    pairs = target_pairs(datasets, cfg.plan.held_out_task, cfg.side, cfg.data.standardize)
    return run_experiment(cfg.plan, pairs, cfg.model, cfg.tune, load_checkpoints(cfg, datasets), jobs,
                          save_dir=cfg.out / "adapted")


def run_eval(cfg: ExperimentConfig) -> Path:
    datasets = load_datasets(cfg)
    pairs = target_pairs(datasets, cfg.plan.held_out_task, cfg.side, cfg.data.standardize)
    records = evaluate_saved(cfg.plan, pairs, cfg.model, cfg.out / "adapted")
    return write_results(results_path(cfg), records)


def run_report(cfg: ExperimentConfig) -> list[Path]:
    records = read_results(results_path(cfg))
    report = cfg.out / "report"
    paths = [write_aggregate(report / "aggregate.csv", aggregate(records))]
    curve = efficiency_curve(records)
    lines = ["avg_inputs,mean_iou,sparsity"] + [f"{x:.6f},{y:.6f},{tag}" for x, y, tag in curve]
    (report / "efficiency.csv").write_text("\n".join(lines) + "\n")
    paths.append(report / "efficiency.csv")
    paths += write_plots(report, records)
    return paths


def run_sweep(cfg: ExperimentConfig, jobs: int = 1, datasets: dict | None = None):
    """Adapt + evaluate every cell, write the results CSV and the report."""
    datasets = datasets if datasets is not None else load_datasets(cfg)
    pairs = target_pairs(datasets, cfg.plan.held_out_task, cfg.side, cfg.data.standardize)
    records = run_experiment(cfg.plan, pairs, cfg.model, cfg.tune, load_checkpoints(cfg, datasets), jobs)
    write_results(results_path(cfg), records)
    run_report(cfg)
    return records


def run_all(cfg: ExperimentConfig, jobs: int = 1):
    """synth (if configured), meta-train and sweep in one call."""
    if cfg.data.synth is not None:
        run_synth(cfg)
    datasets = load_datasets(cfg)
    run_meta_train(cfg, datasets)
    return run_sweep(cfg, jobs, datasets)
