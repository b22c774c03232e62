"""Datasets, binary segmentation tasks, folds and the synthetic task generator.

Images are float32 ``H x W`` arrays in ``[0, 1]``; masks are integer arrays of
class labels (0 = background). Tasks are ``(dataset, foreground class)`` pairs
whose masks have been binarized.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import ConfigError, DataError
from .sparsifier import Dense, SparsitySpec

MIN_SIDE = 8


@dataclass
class Sample:
    id: str
    image: np.ndarray
    mask: np.ndarray
    meta: dict = field(default_factory=dict)


@dataclass
class Dataset:
    name: str
    samples: list[Sample]
    class_names: dict[int, str]

    def __post_init__(self):
        if not self.samples:
            raise DataError(f"dataset {self.name!r} is empty")

    def __len__(self):
        return len(self.samples)

    def label_of(self, foreground) -> int:
        """Resolve a class given by name or label."""
        for label, name in self.class_names.items():
            if foreground == name or (isinstance(foreground, (int, np.integer)) and foreground == label):
                return label
        raise DataError(f"class {foreground!r} not in dataset {self.name!r} vocabulary {sorted(self.class_names.values())}")


@dataclass
class LabeledPair:
    """One image with a binary label grid; ``sparse`` marks labels that may hold UNKNOWN."""

    id: str
    image: np.ndarray
    labels: np.ndarray
    sparse: bool = False


@dataclass
class SegTask:
    """A binary segmentation task: support pool, query pool and the foreground class.

    ``support`` holds dense labels; episodes sparsify them with ``sparsity``.
    """

    id: str
    dataset: str
    foreground_class: str
    support: list[LabeledPair]
    query: list[LabeledPair]
    sparsity: SparsitySpec = field(default_factory=Dense)

    def __post_init__(self):
        shared = {p.id for p in self.support} & {p.id for p in self.query}
        if shared:
            raise DataError(f"task {self.id}: support and query share samples {sorted(shared)[:3]}")
        if any(p.sparse for p in self.query):
            raise DataError(f"task {self.id}: query labels must be dense")

    @property
    def key(self) -> tuple[str, str]:
        return (self.dataset, self.foreground_class)


@dataclass
class MetaDataset:
    tasks: list[SegTask]
    sampling_weights: np.ndarray
    held_out_id: str | None = None

    def __post_init__(self):
        if not self.tasks:
            raise DataError("meta-dataset has no tasks")
        w = np.asarray(self.sampling_weights, dtype=np.float64)
        if w.shape != (len(self.tasks),) or (w < 0).any() or not np.isclose(w.sum(), 1.0):
            raise DataError("sampling weights must be a probability vector over tasks")
        self.sampling_weights = w


@dataclass
class FoldSplit:
    fold_count: int
    assignments: np.ndarray

    def val_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == fold)

    def train_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments != fold)


def task_id(dataset: str, foreground_class: str) -> str:
    return f"{dataset}/{foreground_class}"


# ---------------------------------------------------------------- disk layout

def read_class_map(path: str | Path) -> dict[int, str]:
    class_map = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        try:
            label, name = line.split("\t", 1)
            class_map[int(label)] = name.strip()
        except ValueError:
            raise DataError(f"{path}: bad line {line!r}, expected 'label<TAB>name'") from None
    return class_map


def ingest_dataset(root_path: str | Path, class_map: dict[int, str] | None = None, name: str | None = None) -> Dataset:
    """Load ``<root>/images/*.png`` with their ``<root>/masks/*.png``.

    ``class_map`` defaults to ``<root>/classes.txt``. Label 0 is background and
    is dropped from the vocabulary.
    """
    root = Path(root_path)
    if not root.is_dir():
        raise DataError(f"dataset not found: {root}")
    if class_map is None:
        if not (root / "classes.txt").exists():
            raise DataError(f"{root}: missing classes.txt")
        class_map = read_class_map(root / "classes.txt")
    class_map = {int(k): v for k, v in class_map.items() if int(k) != 0}
    allowed = set(class_map) | {0}

    image_files = {p.stem: p for p in sorted((root / "images").glob("*.png"))}
    mask_files = {p.stem: p for p in sorted((root / "masks").glob("*.png"))}
    if not image_files:
        raise DataError(f"{root}: no images")
    unpaired = sorted(set(image_files) ^ set(mask_files))
    if unpaired:
        raise DataError(f"{root}: unpaired sample(s) {unpaired[:5]}")

    samples = []
    for sid in sorted(image_files):
        image = np.array(PILImage.open(image_files[sid]).convert("L"), dtype=np.float32) / 255.0
        mask = np.array(PILImage.open(mask_files[sid]))
        if mask.ndim != 2:
            raise DataError(f"{mask_files[sid]}: mask must be single channel")
        if mask.shape != image.shape:
            raise DataError(f"{sid}: mask/image shape mismatch {mask.shape} vs {image.shape}")
        if min(image.shape) < MIN_SIDE:
            raise DataError(f"{sid}: image smaller than {MIN_SIDE}x{MIN_SIDE}")
        bad = set(np.unique(mask).tolist()) - allowed
        if bad:
            raise DataError(f"{sid}: unknown label(s) {sorted(bad)}")
        samples.append(Sample(sid, image, mask.astype(np.uint8)))
    return Dataset(name or root.name, samples, dict(sorted(class_map.items())))


def write_dataset(dataset: Dataset, root: str | Path) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in dataset.samples:
        img = np.clip(np.rint(s.image * 255.0), 0, 255).astype(np.uint8)
        PILImage.fromarray(img).save(root / "images" / f"{s.id}.png")
        PILImage.fromarray(s.mask.astype(np.uint8)).save(root / "masks" / f"{s.id}.png")
    lines = [f"{label}\t{name}" for label, name in sorted(dataset.class_names.items())]
    (root / "classes.txt").write_text("\n".join(lines) + "\n")
    return root


# ---------------------------------------------------------------- transforms

def binarize(dataset: Dataset, foreground) -> list[tuple[np.ndarray, np.ndarray]]:
    """Foreground pixels become 1, every other class becomes background."""
    label = dataset.label_of(foreground)
    return [(s.image, (s.mask == label).astype(np.uint8)) for s in dataset.samples]


def resize_pair(image: np.ndarray, mask: np.ndarray, side: int = 128) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear resize for the image, nearest-label for the mask."""
    if side < MIN_SIDE:
        raise ConfigError(f"side must be >= {MIN_SIDE}, got {side}")
    image = np.asarray(image, dtype=np.float32)
    mask = np.asarray(mask)
    if image.shape != mask.shape:
        raise DataError(f"image/mask shape mismatch {image.shape} vs {mask.shape}")
    if image.shape == (side, side):
        return image.copy(), mask.copy()
    img = PILImage.fromarray(image).resize((side, side), PILImage.BILINEAR)
    msk = PILImage.fromarray(mask.astype(np.uint8)).resize((side, side), PILImage.NEAREST)
    out = np.clip(np.asarray(img, dtype=np.float32), 0.0, 1.0)
    return out, np.asarray(msk, dtype=mask.dtype)


def standardize(image: np.ndarray) -> np.ndarray:
    std = float(image.std())
    return ((image - image.mean()) / (std if std > 1e-8 else 1.0)).astype(np.float32)


def make_folds(dataset_size: int, fold_count: int = 5, seed: int = 0) -> FoldSplit:
    if fold_count < 2:
        raise ConfigError("fold_count must be >= 2")
    if dataset_size < fold_count:
        raise ConfigError(f"cannot split {dataset_size} samples into {fold_count} folds")
    order = np.random.default_rng(seed).permutation(dataset_size)
    assignments = np.empty(dataset_size, dtype=np.int64)
    assignments[order] = np.arange(dataset_size) % fold_count
    return FoldSplit(fold_count, assignments)


# ---------------------------------------------------------------- tasks

def binary_pairs(dataset: Dataset, foreground, side: int | None = None,
                 standardize_images: bool = False) -> list[LabeledPair]:
    """Binarized (and optionally resized) pairs carrying sample ids."""
    label = dataset.label_of(foreground)
    pairs = []
    for s in dataset.samples:
        image, labels = s.image, (s.mask == label).astype(np.uint8)
        if side is not None:
            image, labels = resize_pair(image, labels, side)
        if standardize_images:
            image = standardize(image)
        pairs.append(LabeledPair(f"{dataset.name}/{s.id}", image, labels))
    return pairs


def make_tasks(datasets: list[Dataset], side: int | None = None, query_fraction: float = 0.5,
               seed: int = 0, sparsity: SparsitySpec | None = None,
               standardize_images: bool = False) -> list[SegTask]:
    """One task per (dataset, class); samples split into disjoint support and query pools."""
    if not 0.0 < query_fraction < 1.0:
        raise ConfigError("query_fraction must lie in (0, 1)")
    tasks = []
    for d_index, ds in enumerate(datasets):
        if len(ds) < 2:
            raise DataError(f"dataset {ds.name!r} needs >= 2 samples to form a task")
        order = np.random.default_rng([seed, d_index]).permutation(len(ds))
        n_query = min(len(ds) - 1, max(1, int(round(query_fraction * len(ds)))))
        query_idx, support_idx = order[:n_query], order[n_query:]
        for label, name in ds.class_names.items():
            pairs = binary_pairs(ds, label, side, standardize_images)
            tasks.append(SegTask(
                id=task_id(ds.name, name),
                dataset=ds.name,
                foreground_class=name,
                support=[pairs[i] for i in sorted(support_idx)],
                query=[pairs[i] for i in sorted(query_idx)],
                sparsity=sparsity or Dense(),
            ))
    return tasks


def build_meta_dataset(all_tasks: list[SegTask], held_out: str) -> MetaDataset:
    """Leave-one-task-out: drop every task sharing the held-out (dataset, class) pair."""
    by_id = {t.id: t for t in all_tasks}
    if held_out not in by_id:
        raise DataError(f"unknown held-out task {held_out!r}")
    key = by_id[held_out].key
    kept = [t for t in all_tasks if t.key != key]
    if not kept:
        raise DataError("no tasks left after holding out the few-shot task")
    return MetaDataset(kept, np.full(len(kept), 1.0 / len(kept)), held_out)


# ---------------------------------------------------------------- synthetic data

MODALITIES = ("gradient", "speckle", "banded")
SHAPES = ("ellipse", "stripe", "blob")

# object brightness offset relative to the local background, per (modality, shape)
_CONTRAST = {
    "gradient": {"ellipse": 0.35, "stripe": -0.3, "blob": 0.25},
    "speckle": {"ellipse": -0.3, "stripe": 0.35, "blob": 0.3},
    "banded": {"ellipse": 0.3, "stripe": 0.3, "blob": -0.3},
}


@dataclass
class SynthSpec:
    modalities: list[str] = field(default_factory=lambda: list(MODALITIES))
    classes: list[str] = field(default_factory=lambda: ["ellipse", "stripe"])
    images_per_dataset: int = 40
    side: int = 128
    jitter: float = 0.15
    noise: float = 0.03

    def validate(self):
        if not self.modalities:
            raise ConfigError("synth spec needs at least one modality")
        if not self.classes:
            raise ConfigError("synth spec needs at least one class")
        for m in self.modalities:
            if m not in MODALITIES:
                raise ConfigError(f"unknown modality {m!r}; choose from {MODALITIES}")
        for c in self.classes:
            if c not in SHAPES:
                raise ConfigError(f"unknown shape class {c!r}; choose from {SHAPES}")
        if len(set(self.modalities)) != len(self.modalities) or len(set(self.classes)) != len(self.classes):
            raise ConfigError("duplicate modality or class names")
        if self.images_per_dataset < 2:
            raise ConfigError("images_per_dataset must be >= 2")
        if self.side < MIN_SIDE:
            raise ConfigError(f"side must be >= {MIN_SIDE}")


def ellipse_mask(side: int, cy: float, cx: float, ry: float, rx: float, angle: float) -> np.ndarray:
    """Pixels whose centers satisfy the rotated ellipse inequality."""
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(angle), np.sin(angle)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _background(modality: str, side: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side] / side
    if modality == "gradient":
        theta = rng.uniform(0, 2 * np.pi)
        ramp = np.cos(theta) * xx + np.sin(theta) * yy
        ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-8)
        return 0.25 + 0.3 * ramp
    if modality == "speckle":
        speckle = rng.gamma(4.0, 0.25, size=(side, side))
        k = np.ones(3) / 3
        speckle = np.apply_along_axis(np.convolve, 0, speckle, k, "same")
        speckle = np.apply_along_axis(np.convolve, 1, speckle, k, "same")
        return 0.45 + 0.12 * (speckle - 1.0)
    freq = rng.uniform(3, 6)
    phase = rng.uniform(0, 2 * np.pi)
    theta = rng.uniform(-0.3, 0.3)
    coord = np.cos(theta) * yy + np.sin(theta) * xx
    return 0.5 + 0.12 * np.sin(2 * np.pi * freq * coord + phase)


def _shape(kind: str, side: int, jitter: float, rng: np.random.Generator) -> tuple[np.ndarray, dict]:
    j = lambda: rng.uniform(-jitter, jitter) * side  # noqa: E731
    if kind == "ellipse":
        params = dict(cy=side * 0.5 + j(), cx=side * 0.5 + j(),
                      ry=side * rng.uniform(0.15, 0.28), rx=side * rng.uniform(0.12, 0.22),
                      angle=rng.uniform(0, np.pi))
        return ellipse_mask(side, **params), params
    if kind == "stripe":
        yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
        angle = rng.uniform(-0.5, 0.5)
        period = side * rng.uniform(0.1, 0.14)
        width = period * rng.uniform(0.35, 0.5)
        cy, cx = side * 0.5 + j(), side * 0.3 + j()
        along = (xx - cx) * np.cos(angle) + (yy - cy) * np.sin(angle)
        across = -(xx - cx) * np.sin(angle) + (yy - cy) * np.cos(angle)
        count = int(rng.integers(3, 5))
        half_len = side * rng.uniform(0.15, 0.22)
        in_band = np.mod(across, period) < width
        in_box = (np.abs(along) <= half_len) & (across >= 0) & (across < count * period)
        params = dict(cy=cy, cx=cx, angle=angle, period=period, width=width, count=count)
        return in_band & in_box, params
    # blob: thresholded sum of a few isotropic bumps
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    cy, cx = side * 0.5 + j(), side * 0.65 + j()
    field_ = np.zeros((side, side))
    for _ in range(3):
        by, bx = cy + rng.normal(0, side * 0.05), cx + rng.normal(0, side * 0.05)
        r = side * rng.uniform(0.06, 0.1)
        field_ += np.exp(-((yy - by) ** 2 + (xx - bx) ** 2) / (2 * r * r))
    return field_ > 0.5, dict(cy=cy, cx=cx)


def synth_generate(spec: SynthSpec, seed: int) -> list[Dataset]:
    """One multi-class dataset per modality; classes are painted in order, later on top."""
    spec.validate()
    datasets = []
    for m_index, modality in enumerate(spec.modalities):
        rng = np.random.default_rng([int(seed), MODALITIES.index(modality), m_index])
        samples = []
        for i in range(spec.images_per_dataset):
            image = _background(modality, spec.side, rng)
            mask = np.zeros((spec.side, spec.side), dtype=np.uint8)
            meta = {}
            for label, kind in enumerate(spec.classes, start=1):
                region, params = _shape(kind, spec.side, spec.jitter, rng)
                mask[region] = label
                meta[kind] = params
                image = np.where(region, image + _CONTRAST[modality][kind], image)
            image = image + rng.normal(0.0, spec.noise, size=image.shape)
            image = np.clip(image, 0.0, 1.0).astype(np.float32)
            samples.append(Sample(f"{i:04d}", image, mask, meta))
        class_names = {label: kind for label, kind in enumerate(spec.classes, start=1)}
        datasets.append(Dataset(f"synth_{modality}", samples, class_names))
    return datasets


def write_manifest(path: str | Path, spec: SynthSpec, seed: int, names: list[str]) -> None:
    from dataclasses import asdict
    Path(path).write_text(json.dumps({"seed": seed, "spec": asdict(spec), "datasets": names}, indent=2) + "\n")
