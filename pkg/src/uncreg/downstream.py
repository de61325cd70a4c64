"""Propagation of transform samples to atlas-based segmentation.

A transform field gives, for every masked subject voxel, the atlas-space
world coordinate it maps to (shape (3, M), mask scan order).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._parallel import ordered_map
from .grid import LabelVolume, Mask, ScalarVolume, nearest_label
from .volume_io import UINT16, read_uaf, write_uaf


@dataclass(frozen=True, eq=False)
class LabelDistribution:
    """Per-voxel label counts over ``n_samples`` warped segmentations.

    ``counts`` has shape (L, M) in mask scan order, one row per entry of
    ``label_set``.
    """

    mask: Mask
    label_set: tuple[int, ...]
    counts: np.ndarray
    n_samples: int

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if c.shape != (len(self.label_set), self.mask.count):
            raise ValueError("counts must have shape (L, M)")
        if len(self.label_set) < 1:
            raise ValueError("label set must not be empty")
        if np.any(c.sum(axis=0) != self.n_samples):
            raise ValueError("per-voxel counts must sum to the number of samples")
        object.__setattr__(self, "counts", c)
        object.__setattr__(self, "label_set", tuple(int(v) for v in self.label_set))

    @property
    def grid(self):
        return self.mask.grid


def _check_field(field: np.ndarray, mask: Mask) -> np.ndarray:
    field = np.asarray(field, dtype=float)
    if field.shape != (3, mask.count):
        raise ValueError(f"transform field must have shape (3, {mask.count}), got {field.shape}")
    return field


def warp_labels(transform_field, atlas_seg: LabelVolume, mask: Mask) -> LabelVolume:
    """Pull atlas labels back to the subject grid by nearest-neighbour lookup."""
    field = _check_field(transform_field, mask)
    labels = nearest_label(atlas_seg, field.T)
    return LabelVolume(mask.grid, mask.scatter(np.asarray(labels, dtype=np.int64), fill=0))


def ensemble_labels(samples, atlas_seg: LabelVolume, mask: Mask) -> LabelDistribution:
    """Warp every sample and accumulate per-voxel label counts.

    ``samples`` is a sequence of (3, M) fields. The label set is the atlas
    label set plus background 0.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("ensemble needs at least one sample")
    for s in samples:
        _check_field(s, mask)
    label_set = tuple(sorted(set(atlas_seg.label_set) | {0}))
    lut = {lab: i for i, lab in enumerate(label_set)}
    index = np.zeros(max(label_set) + 1, dtype=np.int64)
    for lab, i in lut.items():
        index[lab] = i

    def one(field):
        lab = np.asarray(nearest_label(atlas_seg, np.asarray(field).T), dtype=np.int64)
        return index[lab]

    counts = np.zeros((len(label_set), mask.count), dtype=np.int64)
    cols = np.arange(mask.count)
    for idx in ordered_map(one, samples):
        np.add.at(counts, (idx, cols), 1)
    return LabelDistribution(mask, label_set, counts, len(samples))


def label_probabilities(dist: LabelDistribution) -> np.ndarray:
    return dist.counts / float(dist.n_samples)


def entropy_map(dist: LabelDistribution) -> ScalarVolume:
    """Per-voxel Shannon entropy (natural log) of the label distribution."""
    p = label_probabilities(dist)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    h = terms.sum(axis=0)
    return ScalarVolume(dist.grid, dist.mask.scatter(h, fill=0.0))


def majority_vote(dist: LabelDistribution) -> LabelVolume:
    """Per-voxel most frequent label; ties go to the smallest label value."""
    order = np.argsort(dist.label_set, kind="stable")
    counts = dist.counts[order]
    labels = np.asarray(dist.label_set)[order]
    winner = labels[np.argmax(counts, axis=0)]
    return LabelVolume(dist.grid, dist.mask.scatter(winner.astype(np.int64), fill=0))


def save_distribution(path, dist: LabelDistribution) -> None:
    """UAF1 with one uint16 count channel per label plus a ``.labels`` sidecar."""
    vol = dist.mask.scatter(dist.counts, fill=0)
    write_uaf(path, dist.grid, vol, len(dist.label_set), UINT16)
    Path(str(path) + ".labels").write_text(
        f"samples = {dist.n_samples}\nlabels = {','.join(str(v) for v in dist.label_set)}\n"
    )


def load_distribution(path, mask: Mask) -> LabelDistribution:
    vol = read_uaf(path)
    mask.grid.check_same(vol.grid, "distribution")
    meta = dict(
        (k.strip(), v.strip())
        for k, v in (line.split("=", 1) for line in Path(str(path) + ".labels").read_text().splitlines() if line.strip())
    )
    labels = tuple(int(v) for v in meta["labels"].split(","))
    counts = mask.gather(vol.data.astype(np.int64))
    return LabelDistribution(mask, labels, counts, int(meta["samples"]))
