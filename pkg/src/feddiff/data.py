"""Datasets: synthetic Gaussian blobs, IDX and CSV loaders, and the
dominant-class non-IID partitioner.

The partitioner follows the s% scheme: each client receives a fixed number
of examples, s% drawn uniformly over all classes and the remainder drawn
from the client's group-specific dominant classes; test shards follow the
same per-client mixture and are disjoint from the train shard within a
client.
"""

from __future__ import annotations

import csv as _csv
import struct
from dataclasses import dataclass

import numpy as np

from .exceptions import DataError


@dataclass
class LabeledDataset:
    x: np.ndarray  # (N, ...) float32
    y: np.ndarray  # (N,) int64
    n_classes: int

    def __post_init__(self):
        if self.x.shape[0] != self.y.shape[0]:
            raise DataError("feature/label count mismatch")

    def __len__(self) -> int:
        return int(self.y.shape[0])

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx)
        return LabeledDataset(self.x[idx], self.y[idx], self.n_classes)


@dataclass
class PartitionSpec:
    """Non-IID dominant-class partitioning parameters."""

    s_percent: float = 20.0
    dominant_classes_per_client: int = 2
    samples_per_client: int = 600
    test_per_client: int = 200
    n_groups: int | None = None  # default: n_classes // dominant_classes_per_client

    def validate(self) -> None:
        if not 0.0 <= self.s_percent <= 100.0:
            raise ValueError("s_percent must be in [0, 100]")
        if self.samples_per_client < 1 or self.test_per_client < 1:
            raise ValueError("per-client sizes must be >= 1")
        if self.dominant_classes_per_client < 1:
            raise ValueError("dominant_classes_per_client must be >= 1")


def make_blobs(n: int, n_classes: int, dim: int = 8, noise: float = 0.6,
               radius: float = 2.0, rng: np.random.Generator | None = None,
               image_shape: tuple[int, ...] | None = None) -> LabeledDataset:
    """Gaussian blobs with class means spaced on a circle in the first two
    dimensions.  `noise` (shared isotropic std) controls class overlap.
    Label counts are exactly balanced up to the remainder."""
    if rng is None:
        rng = np.random.default_rng(0)
    if dim < 2:
        raise DataError("blob dimension must be >= 2")
    base = n // n_classes
    counts = [base + (1 if k < n % n_classes else 0) for k in range(n_classes)]
    y = np.repeat(np.arange(n_classes), counts)
    rng.shuffle(y)
    angles = 2.0 * np.pi * np.arange(n_classes) / n_classes
    means = np.zeros((n_classes, dim))
    means[:, 0] = radius * np.cos(angles)
    means[:, 1] = radius * np.sin(angles)
    x = means[y] + noise * rng.standard_normal((n, dim))
    x = x.astype(np.float32)
    if image_shape is not None:
        if int(np.prod(image_shape)) != dim:
            raise DataError(f"image_shape {image_shape} != dim {dim}")
        x = x.reshape(n, *image_shape)
    return LabeledDataset(x, y.astype(np.int64), n_classes)


def make_mirrored_pair(n_train: int, n_test: int, dim: int = 2,
                       noise: float = 0.35, radius: float = 1.0,
                       rng: np.random.Generator | None = None):
    """Two binary tasks over the same inputs with opposite label maps.

    Client A labels the +x blob class 1; client B labels it class 0.  Linear
    averaging of two well-trained classifiers lands near the zero function."""
    if rng is None:
        rng = np.random.default_rng(0)

    def draw(n, flip):
        ds = make_blobs(n, 2, dim=dim, noise=noise, radius=radius, rng=rng)
        y = (1 - ds.y) if flip else ds.y
        return LabeledDataset(ds.x, y.astype(np.int64), 2)

    return ((draw(n_train, False), draw(n_test, False)),
            (draw(n_train, True), draw(n_test, True)))


def load_idx(images_path: str, labels_path: str,
             n_classes: int | None = None) -> LabeledDataset:
    """IDX-format image/label pair (the MNIST family container format)."""
    with open(images_path, "rb") as f:
        magic, n, rows, cols = struct.unpack(">IIII", f.read(16))
        if magic != 2051:
            raise DataError(f"bad IDX image magic {magic}")
        raw = np.frombuffer(f.read(n * rows * cols), dtype=np.uint8)
    with open(labels_path, "rb") as f:
        magic, nl = struct.unpack(">II", f.read(8))
        if magic != 2049:
            raise DataError(f"bad IDX label magic {magic}")
        labels = np.frombuffer(f.read(nl), dtype=np.uint8)
    if n != nl:
        raise DataError(f"image/label counts differ: {n} vs {nl}")
    x = (raw.reshape(n, 1, rows, cols).astype(np.float32) / 255.0)
    y = labels.astype(np.int64)
    k = n_classes if n_classes is not None else int(y.max()) + 1
    return LabeledDataset(x, y, k)


def load_csv(path: str, label_col: str = "label",
             n_classes: int | None = None) -> LabeledDataset:
    """Labeled CSV with a header row; all non-label columns must be numeric."""
    with open(path, newline="") as f:
        reader = _csv.DictReader(f)
        if reader.fieldnames is None or label_col not in reader.fieldnames:
            raise DataError(f"CSV missing label column {label_col!r}")
        feat_cols = [c for c in reader.fieldnames if c != label_col]
        xs, ys = [], []
        for row in reader:
            try:
                xs.append([float(row[c]) for c in feat_cols])
                ys.append(int(row[label_col]))
            except (TypeError, ValueError) as exc:
                raise DataError(f"bad CSV row {reader.line_num}: {exc}") from exc
    if not xs:
        raise DataError("empty CSV")
    x = np.asarray(xs, dtype=np.float32)
    y = np.asarray(ys, dtype=np.int64)
    k = n_classes if n_classes is not None else int(y.max()) + 1
    return LabeledDataset(x, y, k)


def dominant_classes_for_group(group: int, n_classes: int,
                               per_client: int) -> tuple[int, ...]:
    return tuple((group * per_client + j) % n_classes for j in range(per_client))


def partition_non_iid(dataset: LabeledDataset, spec: PartitionSpec, n: int,
                      rng: np.random.Generator):
    """Split a pool into n (train, test) client shards under the s% scheme.

    Shards are disjoint within a client; distinct clients may reuse pool
    examples.  Returns (shards, groups) where groups[i] is client i's
    dominant-class tuple."""
    spec.validate()
    C = dataset.n_classes
    per_client = spec.samples_per_client + spec.test_per_client
    if len(dataset) < per_client:
        raise DataError(f"pool of {len(dataset)} examples cannot supply "
                        f"{per_client} per client")
    n_groups = spec.n_groups
    if n_groups is None:
        n_groups = max(1, C // spec.dominant_classes_per_client)

    all_idx = np.arange(len(dataset))
    by_class = [all_idx[dataset.y == k] for k in range(C)]

    def counts(total):
        uni = int(round(spec.s_percent / 100.0 * total))
        return uni, total - uni

    shards = []
    groups = []
    for i in range(n):
        group = i % n_groups
        dom = dominant_classes_for_group(group, C, spec.dominant_classes_per_client)
        groups.append(dom)
        dom_pool = np.concatenate([by_class[k] for k in dom])
        used = np.zeros(len(dataset), dtype=bool)

        def take(pool, k):
            cand = pool[~used[pool]]
            if len(cand) < k:
                raise DataError(
                    f"client {i}: pool exhausted (need {k}, have {len(cand)})")
            pick = rng.choice(cand, size=k, replace=False)
            used[pick] = True
            return pick

        tr_uni, tr_dom = counts(spec.samples_per_client)
        te_uni, te_dom = counts(spec.test_per_client)
        train_idx = np.concatenate([take(all_idx, tr_uni), take(dom_pool, tr_dom)])
        test_idx = np.concatenate([take(all_idx, te_uni), take(dom_pool, te_dom)])
        shards.append((dataset.subset(train_idx), dataset.subset(test_idx)))
    return shards, groups
