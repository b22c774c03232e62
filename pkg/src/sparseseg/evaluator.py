"""k-fold few-shot evaluation: adapt on k sparse shots, score IoU on the fold's validation set.

Protocol per cell (method, k, sparsity, fold):

* images and masks are resized first, then sparsified;
* support = first k samples of the fold's training partition under a
  permutation fixed by the experiment seed;
* query = the whole validation partition, dense labels;
* sparse support labels depend only on (experiment seed, image id,
  sparsity), so every method tunes on identical labels.
"""

from __future__ import annotations

import csv
import io
import logging
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import model as M
from .adaptation import TuneConfig, adapted_checkpoint_name, finetune, with_seed
from .errors import ConfigError, DataError
from .meta_trainer import LabeledBatch, support_batch
from .objective import jaccard
from .sparsifier import SparsitySpec, count_inputs, image_seed, parse_sparsity
from .task_store import Dataset, LabeledPair, binary_pairs, make_folds

log = logging.getLogger(__name__)

DEFAULT_SPARSITY = ["points1", "points5", "points10", "points20", "grid8", "grid12", "grid16", "grid20", "dense"]


@dataclass
class ExperimentPlan:
    held_out_task: str
    methods: list[str] = field(default_factory=lambda: ["weasel", "scratch"])
    shots: list[int] = field(default_factory=lambda: [1, 5, 10, 20])
    sparsity: list[str] = field(default_factory=lambda: list(DEFAULT_SPARSITY))
    folds: int = 5
    seed: int = 0

    def validate(self):
        if not (self.methods and self.shots and self.sparsity):
            raise ConfigError("plan needs nonempty methods, shots and sparsity lists")
        for m in self.methods:
            if m not in ("weasel", "scratch") and not m.startswith("finetune:"):
                raise ConfigError(f"unknown method {m!r}; use weasel, scratch or finetune:<task id>")
        if any(k < 1 for k in self.shots):
            raise ConfigError("shots must be >= 1")
        for s in self.sparsity:
            parse_sparsity(s)
        if "/" not in self.held_out_task:
            raise ConfigError(f"held_out_task must look like 'dataset/class', got {self.held_out_task!r}")

    @property
    def sparsity_specs(self) -> list[SparsitySpec]:
        return [parse_sparsity(s) for s in self.sparsity]


@dataclass
class ResultRecord:
    task: str
    method: str
    k: int
    sparsity: str
    fold: int
    mean_iou: float
    avg_inputs: float


RESULT_FIELDS = [f.name for f in fields(ResultRecord)]


@dataclass
class Cell:
    method: str
    k: int
    sparsity: SparsitySpec
    fold: int
    support: LabeledBatch
    query: list[LabeledPair]
    tune_seed: int


def evaluate(params, query: list[LabeledPair], model_config: M.ModelConfig):
    """Per-image IoU on dense query labels and their arithmetic mean."""
    if not query:
        raise DataError("empty query set")
    preds = M.predict(params, [p.image for p in query], model_config)
    ious = [jaccard(pred, p.labels) for pred, p in zip(preds, query)]
    return ious, float(np.mean(ious))


def target_pairs(datasets: dict[str, Dataset], held_out_task: str, side: int, standardize_images: bool = False):
    ds_name, cls = held_out_task.split("/", 1)
    if ds_name not in datasets:
        raise DataError(f"dataset for held-out task {held_out_task!r} not loaded")
    return binary_pairs(datasets[ds_name], cls, side, standardize_images)


def plan_cells(plan: ExperimentPlan, pairs: list[LabeledPair]) -> list[Cell]:
    """Enumerate cells in a fixed order: fold, sparsity, k, method."""
    plan.validate()
    split = make_folds(len(pairs), plan.folds, plan.seed)
    cells = []
    for fold in range(plan.folds):
        train = split.train_indices(fold)
        order = train[np.random.default_rng([plan.seed, fold]).permutation(len(train))]
        query = [pairs[i] for i in split.val_indices(fold)]
        for sp in plan.sparsity_specs:
            for k in plan.shots:
                if k > len(order):
                    raise DataError(f"{k}-shot needs {k} training samples, fold {fold} has {len(order)}")
                chosen = [pairs[i] for i in order[:k]]
                seeds = [image_seed(plan.seed, p.id, sp.tag) for p in chosen]
                support = support_batch(chosen, sp, seeds)
                tune_seed = image_seed(plan.seed, f"tune|fold{fold}|k{k}", sp.tag)
                for method in plan.methods:
                    cells.append(Cell(method, k, sp, fold, support, query, tune_seed))
    return cells


def initial_params(method: str, sparsity: SparsitySpec, checkpoints: dict, model_config: M.ModelConfig, seed: int):
    if method == "scratch":
        return M.init_params(model_config, seed)
    for key in (f"{method}@{sparsity.tag}", method):
        if key in checkpoints:
            return checkpoints[key]
    raise DataError(f"missing checkpoint for method {method!r} (sparsity {sparsity.tag})")


def _adapt_cell(cell: Cell, checkpoints: dict, model_config: M.ModelConfig, tune: TuneConfig):
    init = initial_params(cell.method, cell.sparsity, checkpoints, model_config, cell.tune_seed)
    return finetune(init, cell.support, model_config, with_seed(tune, cell.tune_seed))


def _record(task: str, cell: Cell, params, model_config) -> ResultRecord:
    _, mean_iou = evaluate(params, cell.query, model_config)
    inputs = [count_inputs(lbl.numpy()) for lbl in cell.support.labels]
    return ResultRecord(task, cell.method, cell.k, cell.sparsity.tag, cell.fold, mean_iou, float(np.mean(inputs)))


def _run_cell(args):
    task, cell, checkpoints, model_config, tune, save_dir = args
    torch.set_num_threads(1)
    params = _adapt_cell(cell, checkpoints, model_config, tune)
    if save_dir is not None:
        name = adapted_checkpoint_name(task, cell.method, cell.k, cell.sparsity.tag, cell.fold)
        M.save_checkpoint(Path(save_dir) / name, params, model_config, seed=cell.tune_seed)
    return _record(task, cell, params, model_config)


def run_experiment(plan: ExperimentPlan, pairs: list[LabeledPair], model_config: M.ModelConfig,
                   tune: TuneConfig, checkpoints: dict | None = None, jobs: int = 1,
                   save_dir: str | Path | None = None) -> list[ResultRecord]:
    """Adapt and evaluate every (method, k, sparsity, fold) cell.

    ``checkpoints`` maps ``"weasel"``, ``"weasel@<sparsity>"`` or
    ``"finetune:<task>"`` to initial parameters. Records come back in cell
    order regardless of ``jobs``.
    """
    checkpoints = checkpoints or {}
    cells = plan_cells(plan, pairs)
    for method in plan.methods:
        for sp in plan.sparsity_specs:
            if method != "scratch":
                initial_params(method, sp, checkpoints, model_config, 0)
    args = [(plan.held_out_task, c, checkpoints, model_config, tune, save_dir) for c in cells]
    if jobs > 1:
        import multiprocessing as mp
        with ProcessPoolExecutor(max_workers=jobs, mp_context=mp.get_context("spawn")) as pool:
            records = list(pool.map(_run_cell, args))
    else:
        records = []
        for i, a in enumerate(args):
            records.append(_run_cell(a))
            r = records[-1]
            log.info("[%d/%d] %s k=%d %s fold=%d IoU=%.3f", i + 1, len(args), r.method, r.k, r.sparsity,
                     r.fold, r.mean_iou)
    return records


def evaluate_saved(plan: ExperimentPlan, pairs: list[LabeledPair], model_config: M.ModelConfig,
                   adapted_dir: str | Path) -> list[ResultRecord]:
    """Score adapted checkpoints written by ``run_experiment(save_dir=...)``."""
    records = []
    for cell in plan_cells(plan, pairs):
        name = adapted_checkpoint_name(plan.held_out_task, cell.method, cell.k, cell.sparsity.tag, cell.fold)
        params, _, _ = M.load_checkpoint(Path(adapted_dir) / name)
        records.append(_record(plan.held_out_task, cell, params, model_config))
    return records


# ---------------------------------------------------------------- reduction

def aggregate(records: list[ResultRecord]) -> dict[tuple[str, int, str], float]:
    """Fold-mean IoU per (method, k, sparsity); every cell must have every fold."""
    if not records:
        return {}
    tasks = {r.task for r in records}
    if len(tasks) > 1:
        raise DataError(f"records mix tasks {sorted(tasks)}")
    folds = {r.fold for r in records}
    cells = defaultdict(dict)
    for r in records:
        key = (r.method, r.k, r.sparsity)
        if r.fold in cells[key]:
            raise DataError(f"duplicate fold {r.fold} in cell {key}")
        cells[key][r.fold] = r.mean_iou
    table = {}
    for key, by_fold in cells.items():
        if set(by_fold) != folds:
            raise DataError(f"incomplete cell {key}: folds {sorted(by_fold)} of {sorted(folds)}")
        table[key] = float(np.mean([by_fold[f] for f in sorted(by_fold)]))
    return table


def efficiency_curve(records: list[ResultRecord], method: str | None = None):
    """``(avg_inputs, mean_iou, sparsity)`` per (k, sparsity) cell, ascending in inputs."""
    if not records:
        raise DataError("no records")
    if method is None:
        methods = {r.method for r in records}
        method = "weasel" if "weasel" in methods else sorted(methods)[0]
    groups = defaultdict(list)
    for r in records:
        if r.method == method:
            groups[(r.k, r.sparsity)].append(r)
    points = []
    for (k, sparsity), rs in groups.items():
        points.append((float(np.mean([r.avg_inputs for r in rs])), float(np.mean([r.mean_iou for r in rs])),
                       sparsity, k))
    points.sort(key=lambda p: (p[0], p[2], p[3]))
    return [(x, y, tag) for x, y, tag, _ in points]


# ---------------------------------------------------------------- files

def _fmt(value) -> str:
    return f"{value:.6f}" if isinstance(value, float) else str(value)


def results_csv(records: list[ResultRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_FIELDS)
    for r in records:
        w.writerow([_fmt(getattr(r, f)) for f in RESULT_FIELDS])
    return buf.getvalue()


def write_results(path: str | Path, records: list[ResultRecord]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(results_csv(records))
    return path


def read_results(path: str | Path) -> list[ResultRecord]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"results not found: {path}")
    with path.open(newline="") as fh:
        return [ResultRecord(row["task"], row["method"], int(row["k"]), row["sparsity"], int(row["fold"]),
                             float(row["mean_iou"]), float(row["avg_inputs"])) for row in csv.DictReader(fh)]


def write_aggregate(path: str | Path, table: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["method,k,sparsity,mean_iou"]
    for (method, k, sparsity), v in sorted(table.items()):
        lines.append(f"{method},{k},{sparsity},{v:.6f}")
    path.write_text("\n".join(lines) + "\n")
    return path


def _family(tag: str) -> str:
    return parse_sparsity(tag).kind


def write_plots(out_dir: str | Path, records: list[ResultRecord]) -> list[Path]:
    """IoU-vs-shots figure per sparsity family, plus the IoU-vs-inputs figure."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = aggregate(records)
    written = []
    families = sorted({_family(s) for _, _, s in table})
    for fam in families:
        fig, ax = plt.subplots(figsize=(5, 4))
        for method in sorted({m for m, _, _ in table}):
            for tag in sorted({s for _, _, s in table if _family(s) == fam}, key=lambda t: parse_sparsity(t).value):
                ks = sorted(k for m, k, s in table if m == method and s == tag)
                if ks:
                    ax.plot(ks, [table[(method, k, tag)] for k in ks], marker="o", label=f"{method} {tag}")
        ax.set_xlabel("shots (k)")
        ax.set_ylabel("Jaccard (IoU)")
        ax.set_ylim(0, 1)
        ax.set_title(f"{records[0].task}: {fam}")
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = out_dir / f"iou_vs_shots_{fam}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        written.append(path)

    fig, ax = plt.subplots(figsize=(5, 4))
    curve = efficiency_curve(records)
    for fam in families:
        pts = [(x, y) for x, y, tag in curve if _family(tag) == fam]
        if pts:
            ax.scatter(*zip(*pts), label=fam)
    ax.set_xlabel("average inputs per image")
    ax.set_ylabel("Jaccard (IoU)")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=7)
    fig.tight_layout()
    path = out_dir / "iou_vs_inputs.png"
    fig.savefig(path, dpi=100)
    plt.close(fig)
    written.append(path)
    return written
