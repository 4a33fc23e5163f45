"""Dataset containers, seeded splitting and batching, disjointness checks.

A dataset on disk is a directory: manifest.json describing name/role/shape,
an images tensor file, and (for labeled roles) a labels tensor file. All
binary payloads use the shared tensor format from linalg.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, LabelError, ShapeError, SplitError
from .linalg import load_tensor, save_tensor

ROLES = ("d_in_train", "d_in_test", "d_out_oe", "d_out_val", "d_out_test")
_LABELED_ROLES = ("d_in_train", "d_in_test")


@dataclass
class Dataset:
    """An image set with an experiment role.

    images: (N, C, H, W) float64 in [0, 1]. Labels are present exactly for
    the in-distribution roles and must lie in [0, num_classes).
    """

    images: np.ndarray
    role: str
    name: str
    labels: np.ndarray | None = None
    num_classes: int | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 4:
            raise ShapeError(f"images must be (N, C, H, W), got {self.images.shape}")
        if self.role not in ROLES:
            raise FormatError(f"unknown role {self.role!r}")
        labeled = self.role in _LABELED_ROLES
        if labeled and self.labels is None:
            raise LabelError(f"role {self.role} requires labels")
        if not labeled and self.labels is not None:
            raise LabelError(f"role {self.role} must not carry labels")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.images),):
                raise ShapeError(f"{len(self.labels)} labels for {len(self.images)} images")
            if self.num_classes is None:
                raise LabelError("labeled dataset needs num_classes")
            if len(self.labels) and (self.labels.min() < 0
                                     or self.labels.max() >= self.num_classes):
                raise LabelError(f"labels outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.images)


def save_dataset(ds: Dataset, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": 1,
        "name": ds.name,
        "role": ds.role,
        "shape": list(ds.images.shape),
        "num_classes": ds.num_classes,
        "has_labels": ds.labels is not None,
        "provenance": ds.provenance,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    save_tensor(path / "images.oodt", ds.images)
    if ds.labels is not None:
        save_tensor(path / "labels.oodt", ds.labels.astype(np.float64))


def load_dataset(path) -> Dataset:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"{path}: no manifest.json")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != 1:
        raise FormatError(f"{path}: unsupported container version")
    images = load_tensor(path / "images.oodt")
    if list(images.shape) != manifest["shape"]:
        raise FormatError(f"{path}: images shape {images.shape} != manifest {manifest['shape']}")
    labels = None
    if manifest["has_labels"]:
        raw = load_tensor(path / "labels.oodt")
        if raw.ndim != 1 or len(raw) != len(images):
            raise FormatError(f"{path}: {raw.shape} labels for {len(images)} images")
        labels = raw.astype(np.int64)
        if not np.array_equal(labels.astype(np.float64), raw):
            raise FormatError(f"{path}: labels are not integral")
    return Dataset(images=images, labels=labels, role=manifest["role"],
                   name=manifest["name"], num_classes=manifest["num_classes"],
                   provenance=manifest.get("provenance", {}))


@dataclass(frozen=True)
class SplitPlan:
    seed: int
    fractions: tuple[float, ...]

    def __post_init__(self):
        if abs(sum(self.fractions) - 1.0) > 1e-12:
            raise SplitError(f"fractions {self.fractions} do not sum to 1")
        if any(f < 0 for f in self.fractions):
            raise SplitError("negative fraction")


def split(ds: Dataset, plan: SplitPlan) -> list[Dataset]:
    """Seeded permutation followed by contiguous slicing into disjoint parts."""
    n = len(ds)
    perm = np.random.default_rng(plan.seed).permutation(n)
    sizes = [int(round(f * n)) for f in plan.fractions]
    sizes[-1] = n - sum(sizes[:-1])
    if any(s <= 0 for s in sizes):
        raise SplitError(f"fractions {plan.fractions} give empty split on {n} items")
    parts = []
    start = 0
    for part_index, size in enumerate(sizes):
        idx = perm[start:start + size]
        start += size
        parts.append(Dataset(
            images=ds.images[idx],
            labels=None if ds.labels is None else ds.labels[idx],
            role=ds.role,
            name=f"{ds.name}/split{part_index}",
            num_classes=ds.num_classes,
            provenance=dict(ds.provenance, split_seed=plan.seed, split_part=part_index),
        ))
    return parts


def batch_indices(n: int, batch_size: int, seed: int, epoch: int):
    """Seeded per-epoch shuffle of range(n), yielded in batch_size chunks.

    The epoch is folded into the seed so consecutive epochs get fresh
    permutations while the whole stream stays a pure function of
    (n, batch_size, seed, epoch). The final short batch is emitted.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    perm = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, epoch]).permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def batches(ds: Dataset, batch_size: int, seed: int, epoch: int):
    """Iterate (images, labels-or-None) batches under the seeded shuffle."""
    for idx in batch_indices(len(ds), batch_size, seed, epoch):
        yield ds.images[idx], None if ds.labels is None else ds.labels[idx]


def check_disjoint(a: Dataset, b: Dataset):
    """True iff no image of a is bit-identical to an image of b.

    Returns (disjoint, first_collision) where first_collision is an
    (index_in_a, index_in_b) pair or None. Requires matching image shapes.
    """
    if a.images.shape[1:] != b.images.shape[1:]:
        raise ShapeError(f"image shapes differ: {a.images.shape[1:]} vs {b.images.shape[1:]}")
    seen: dict[bytes, int] = {}
    for j in range(len(b) - 1, -1, -1):
        seen[b.images[j].tobytes()] = j
    for i in range(len(a)):
        j = seen.get(a.images[i].tobytes())
        if j is not None:
            return False, (i, j)
    return True, None
