"""Simulated sparse annotations (points and grid) and annotation budgets.

A sparse mask is a ``uint8`` array of the same shape as its dense source,
holding ``BACKGROUND`` (0), ``FOREGROUND`` (1) or ``UNKNOWN`` (255). The
same encoding is used on disk (8-bit PNG).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import ConfigError, DataError

BACKGROUND = 0
FOREGROUND = 1
UNKNOWN = 255


@dataclass(frozen=True)
class SparsitySpec:
    """One annotation modality: ``points`` (n per class), ``grid`` (spacing s) or ``dense``."""

    kind: str
    value: int = 0

    def __post_init__(self):
        if self.kind == "points":
            if self.value < 1:
                raise ConfigError(f"points needs n >= 1, got {self.value}")
        elif self.kind == "grid":
            if self.value < 2:
                raise ConfigError(f"grid needs s >= 2, got {self.value}")
        elif self.kind == "dense":
            object.__setattr__(self, "value", 0)
        else:
            raise ConfigError(f"unknown sparsity kind {self.kind!r}")

    @property
    def tag(self) -> str:
        return "dense" if self.kind == "dense" else f"{self.kind}{self.value}"

    def __str__(self) -> str:
        return self.tag


def Points(n: int) -> SparsitySpec:
    return SparsitySpec("points", n)


def Grid(s: int) -> SparsitySpec:
    return SparsitySpec("grid", s)


def Dense() -> SparsitySpec:
    return SparsitySpec("dense")


def parse_sparsity(tag: str) -> SparsitySpec:
    """Inverse of ``SparsitySpec.tag``: ``"points5"``, ``"grid8"``, ``"dense"``."""
    tag = tag.strip().lower()
    if tag == "dense":
        return Dense()
    for kind in ("points", "grid"):
        if tag.startswith(kind):
            rest = tag[len(kind):].lstrip("-_:=")
            if rest.isdigit():
                return SparsitySpec(kind, int(rest))
    raise ConfigError(f"cannot parse sparsity {tag!r}")


def image_seed(experiment_seed: int, image_id: str, tag: str = "") -> int:
    """Stable per-image seed: blake2b over ``(experiment_seed, image_id, tag)``.

    Independent of PYTHONHASHSEED, so every method sees the same labels.
    """
    key = f"{int(experiment_seed)}|{image_id}|{tag}".encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")


def _check_dense(dense: np.ndarray) -> np.ndarray:
    dense = np.asarray(dense)
    if dense.ndim != 2:
        raise DataError(f"expected a 2-D mask, got shape {dense.shape}")
    if not np.isin(dense, (0, 1)).all():
        raise DataError("dense mask must be binary")
    return dense


def points(dense: np.ndarray, n: int, seed: int) -> np.ndarray:
    """Label ``min(n, |fg|)`` foreground and ``min(n, |bg|)`` background pixels at random."""
    dense = _check_dense(dense)
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    flat = dense.ravel()
    out = np.full(flat.shape, UNKNOWN, dtype=np.uint8)
    for cls in (FOREGROUND, BACKGROUND):
        idx = np.flatnonzero(flat == cls)
        take = rng.choice(idx, size=min(n, idx.size), replace=False)
        out[take] = cls
    return out.reshape(dense.shape)


def grid_offsets(s: int, seed: int) -> tuple[int, int]:
    rng = np.random.default_rng(seed)
    o_r, o_c = rng.integers(0, s, size=2)
    return int(o_r), int(o_c)


def grid(dense: np.ndarray, s: int, seed: int, offsets: tuple[int, int] | None = None) -> np.ndarray:
    """Label every pixel on a lattice of spacing ``s`` with its true class.

    Offsets per axis are drawn uniformly from ``{0, .., s-1}`` unless given.
    """
    dense = _check_dense(dense)
    h, w = dense.shape
    if s < 2:
        raise ConfigError(f"s must be >= 2, got {s}")
    if s > min(h, w):
        raise ConfigError(f"grid spacing {s} exceeds image side {min(h, w)}")
    o_r, o_c = grid_offsets(s, seed) if offsets is None else offsets
    if not (0 <= o_r < s and 0 <= o_c < s):
        raise ConfigError(f"offsets {offsets} outside [0, {s})")
    out = np.full(dense.shape, UNKNOWN, dtype=np.uint8)
    out[o_r::s, o_c::s] = dense[o_r::s, o_c::s]
    return out


def densify_passthrough(dense: np.ndarray) -> np.ndarray:
    return _check_dense(dense).astype(np.uint8, copy=True)


def sparsify(dense: np.ndarray, spec: SparsitySpec, seed: int) -> np.ndarray:
    if spec.kind == "points":
        return points(dense, spec.value, seed)
    if spec.kind == "grid":
        return grid(dense, spec.value, seed)
    return densify_passthrough(dense)


def count_inputs(sparse: np.ndarray) -> int:
    """Number of user inputs: each foreground-labeled pixel counts once."""
    return int(np.count_nonzero(np.asarray(sparse) == FOREGROUND))


def labeled_fraction(sparse: np.ndarray) -> float:
    sparse = np.asarray(sparse)
    return float(np.count_nonzero(sparse != UNKNOWN)) / sparse.size


def save_sparse(path: str | Path, sparse: np.ndarray) -> None:
    PILImage.fromarray(np.asarray(sparse, dtype=np.uint8)).save(path)


def load_sparse(path: str | Path) -> np.ndarray:
    arr = np.array(PILImage.open(path))
    if not np.isin(arr, (BACKGROUND, FOREGROUND, UNKNOWN)).all():
        raise DataError(f"{path}: values outside {{0, 1, 255}}")
    return arr.astype(np.uint8)
