"""Lossless flattening of structured weights into 1-D parameter vectors.

A Layout pins the (name, shape, offset, length) of every layer inside the
flat vector; LayerMask selects the subset of layers the server generates;
NormStats carries the per-dimension statistics used to whiten parameter
vectors before diffusion training.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .exceptions import LayoutError

STD_FLOOR = 1e-6


@dataclass(frozen=True)
class LayoutEntry:
    name: str
    shape: tuple[int, ...]
    offset: int
    length: int


class Layout:
    """Ordered layer table for a flat parameter vector."""

    def __init__(self, entries: Sequence[LayoutEntry]):
        offset = 0
        for e in entries:
            if e.offset != offset:
                raise LayoutError(f"non-contiguous layout at {e.name!r}: "
                                  f"offset {e.offset} != {offset}")
            if e.length != int(np.prod(e.shape, dtype=np.int64)):
                raise LayoutError(f"length mismatch for {e.name!r}")
            offset += e.length
        self.entries = tuple(entries)
        self.total = offset
        self._by_name = {e.name: e for e in self.entries}
        if len(self._by_name) != len(self.entries):
            raise LayoutError("duplicate layer names in layout")

    @classmethod
    def from_shapes(cls, pairs: Iterable[tuple[str, tuple[int, ...]]]) -> "Layout":
        entries = []
        offset = 0
        for name, shape in pairs:
            shape = tuple(int(d) for d in shape)
            length = int(np.prod(shape, dtype=np.int64)) if shape else 1
            entries.append(LayoutEntry(name, shape, offset, length))
            offset += length
        return cls(entries)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(e.name for e in self.entries)

    def entry(self, name: str) -> LayoutEntry:
        try:
            return self._by_name[name]
        except KeyError:
            raise LayoutError(f"unknown layer {name!r}") from None

    def slice(self, name: str) -> slice:
        e = self.entry(name)
        return slice(e.offset, e.offset + e.length)

    def __len__(self) -> int:
        return len(self.entries)

    def __eq__(self, other) -> bool:
        return isinstance(other, Layout) and self.entries == other.entries

    def __repr__(self) -> str:
        inner = ", ".join(f"{e.name}:{e.shape}" for e in self.entries)
        return f"Layout({inner}, total={self.total})"


@dataclass(frozen=True)
class LayerMask:
    """Layer names designated as generated; the complement is retained."""

    generated: tuple[str, ...]

    def validate(self, layout: Layout) -> None:
        if not self.generated:
            raise LayoutError("mask selects no layers")
        for name in self.generated:
            layout.entry(name)

    def retained(self, layout: Layout) -> tuple[str, ...]:
        gen = set(self.generated)
        return tuple(n for n in layout.names if n not in gen)

    @classmethod
    def all_layers(cls, layout: Layout) -> "LayerMask":
        return cls(generated=layout.names)


def flatten(weights: Mapping[str, np.ndarray], layout: Layout) -> np.ndarray:
    """Concatenate structured weights into one flat vector in layout order."""
    parts = []
    for e in layout.entries:
        if e.name not in weights:
            raise LayoutError(f"missing layer {e.name!r}")
        arr = np.asarray(weights[e.name])
        if tuple(arr.shape) != e.shape:
            raise LayoutError(f"shape mismatch for {e.name!r}: "
                              f"{arr.shape} != {e.shape}")
        parts.append(arr.reshape(-1))
    extra = set(weights) - set(layout.names)
    if extra:
        raise LayoutError(f"unknown layers {sorted(extra)}")
    return np.concatenate(parts) if parts else np.zeros(0)


def unflatten(vec: np.ndarray, layout: Layout) -> dict[str, np.ndarray]:
    """Exact inverse of flatten."""
    vec = np.asarray(vec)
    if vec.ndim != 1 or vec.shape[0] != layout.total:
        raise LayoutError(f"vector length {vec.shape} != layout total {layout.total}")
    return {e.name: vec[e.offset:e.offset + e.length].reshape(e.shape).copy()
            for e in layout.entries}


def split_by_mask(vec: np.ndarray, layout: Layout,
                  mask: LayerMask) -> tuple[np.ndarray, np.ndarray]:
    """Split a flat vector into (generated, retained) subvectors in layout order."""
    mask.validate(layout)
    vec = np.asarray(vec)
    if vec.shape != (layout.total,):
        raise LayoutError(f"vector length {vec.shape} != layout total {layout.total}")
    gen_names = set(mask.generated)
    gen = [vec[layout.slice(e.name)] for e in layout.entries if e.name in gen_names]
    ret = [vec[layout.slice(e.name)] for e in layout.entries if e.name not in gen_names]
    empty = np.zeros(0, dtype=vec.dtype)
    return (np.concatenate(gen) if gen else empty,
            np.concatenate(ret) if ret else empty)


def merge_by_mask(generated: np.ndarray, retained: np.ndarray, layout: Layout,
                  mask: LayerMask) -> np.ndarray:
    """Inverse of split_by_mask."""
    mask.validate(layout)
    gen_names = set(mask.generated)
    out = np.empty(layout.total,
                   dtype=np.result_type(generated.dtype, retained.dtype))
    g = r = 0
    for e in layout.entries:
        sl = slice(e.offset, e.offset + e.length)
        if e.name in gen_names:
            out[sl] = generated[g:g + e.length]
            g += e.length
        else:
            out[sl] = retained[r:r + e.length]
            r += e.length
    if g != len(generated) or r != len(retained):
        raise LayoutError("subvector lengths do not match mask")
    return out


def mask_dim(layout: Layout, mask: LayerMask) -> int:
    mask.validate(layout)
    return sum(layout.entry(n).length for n in mask.generated)


@dataclass(frozen=True)
class NormStats:
    """Per-dimension mean/std over a collection of parameter vectors."""

    mean: np.ndarray
    std: np.ndarray
    floor: float = STD_FLOOR


def fit_norm(vectors, floor: float = STD_FLOOR) -> NormStats:
    """Fit per-dimension statistics; std is clipped from below at `floor`."""
    mat = np.asarray(vectors, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] < 2:
        raise ValueError("fit_norm needs at least 2 vectors")
    mean = mat.mean(axis=0)
    std = np.maximum(mat.std(axis=0), floor)
    return NormStats(mean=mean, std=std, floor=floor)


def normalize(vec: np.ndarray, stats: NormStats) -> np.ndarray:
    vec = np.asarray(vec)
    return ((vec - stats.mean) / stats.std).astype(vec.dtype)


def denormalize(vec: np.ndarray, stats: NormStats) -> np.ndarray:
    vec = np.asarray(vec)
    return (vec * stats.std + stats.mean).astype(vec.dtype)
