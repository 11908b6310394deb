"""Synthetic Gaussian-blob classification data and seeded splits."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInputError


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray | None = None
    split_tag: str = "teacher"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise InvalidInputError("features must be an (L, n) matrix")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.features.shape[0],):
                raise InvalidInputError("labels must have one entry per row")

    def __len__(self):
        return self.features.shape[0]

    @property
    def n(self) -> int:
        return self.features.shape[1]

    @property
    def m(self) -> int:
        if "m" in self.meta:
            return int(self.meta["m"])
        return int(self.labels.max()) + 1

    def subset(self, idx, split_tag=None) -> "Dataset":
        idx = np.asarray(idx)
        if idx.dtype != bool:
            idx = idx.astype(np.intp)
        return Dataset(self.features[idx],
                       None if self.labels is None else self.labels[idx],
                       split_tag or self.split_tag, dict(self.meta))

    def unlabeled(self) -> "Dataset":
        return Dataset(self.features, None, self.split_tag, dict(self.meta))

    def save(self, path) -> None:
        """CSV (label column last, empty when unlabeled) plus ``<path>.meta.json``."""
        path = Path(path)
        n = self.n
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"x{j}" for j in range(n)] + ["label"])
            for i, row in enumerate(self.features):
                lab = "" if self.labels is None else str(int(self.labels[i]))
                w.writerow([repr(float(v)) for v in row] + [lab])
        meta = dict(self.meta)
        meta.update(n=n, split_tag=self.split_tag)
        Path(str(path) + ".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "Dataset":
        path = Path(path)
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0][-1] != "label":
            raise InvalidInputError(f"{path}: expected a header ending in 'label'")
        body = rows[1:]
        feats = np.array([[float(v) for v in r[:-1]] for r in body], dtype=np.float64)
        labs = [r[-1] for r in body]
        labels = None if all(v == "" for v in labs) else np.array([int(v) for v in labs])
        meta_path = Path(str(path) + ".meta.json")
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        return cls(feats.reshape(len(body), len(rows[0]) - 1), labels,
                   meta.get("split_tag", "teacher"), meta)


def minmax_normalize(x):
    lo = x.min(axis=0)
    span = x.max(axis=0) - lo
    span[span == 0] = 1.0
    return (x - lo) / span


def make_blobs(m: int = 10, n: int = 32, per_class: int = 1000, spread: float = 0.12,
               seed: int = 0) -> Dataset:
    """Isotropic Gaussian clusters with centers drawn uniformly in [0.2, 0.8]^n,
    min-max normalized to [0, 1] per feature."""
    if m < 2 or n < 2:
        raise InvalidInputError("need m >= 2 classes and n >= 2 dimensions")
    if per_class <= 0:
        raise InvalidInputError("per_class must be positive")
    if spread < 0:
        raise InvalidInputError("spread must be nonnegative")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.2, 0.8, size=(m, n))
    labels = np.repeat(np.arange(m), per_class)
    x = centers[labels] + spread * rng.standard_normal((m * per_class, n))
    order = rng.permutation(labels.size)
    x, labels = x[order], labels[order]
    meta = {"m": m, "n": n, "seed": seed, "sigma": spread, "per_class": per_class}
    return Dataset(minmax_normalize(x), labels, "teacher", meta)


def split(dataset: Dataset, fractions=(0.45, 0.45, 0.1), seed: int = 0):
    """Seeded disjoint split into ``(teacher, student, test)`` parts."""
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.ndim != 1 or fr.size not in (2, 3) or np.any(fr < 0) or abs(fr.sum() - 1) > 1e-9:
        raise InvalidInputError("fractions must be 2 or 3 nonnegative numbers summing to 1")
    L = len(dataset)
    perm = np.random.default_rng(seed).permutation(L)
    cuts = np.round(np.cumsum(fr)[:-1] * L).astype(int)
    parts = np.split(perm, cuts)
    tags = ["teacher", "student", "test"][:fr.size]
    if any(p.size == 0 for p in parts):
        raise InvalidInputError("a split came out empty")
    return tuple(dataset.subset(np.sort(p), t) for p, t in zip(parts, tags))


def sample_queries(dataset: Dataset, count: int, seed: int = 0) -> Dataset:
    if count <= 0 or count > len(dataset):
        raise InvalidInputError(
            f"cannot sample {count} queries from {len(dataset)} points")
    idx = np.random.default_rng(seed).choice(len(dataset), size=count, replace=False)
    return dataset.subset(idx)
