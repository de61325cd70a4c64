"""Synthetic ground-truth deformations with heteroscedastic noisy predictions.

The atlas lives on the same lattice as the subject. The true transform maps
subject voxel world coordinates to atlas coordinates; the simulated
predictor reports ``truth + std * g`` with a known ``std`` field.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import _rng
from .grid import Grid, LabelVolume, Mask, MeanStdField, ScalarVolume, nearest_label, unflatten_x_fastest

NOISE_KINDS = ("constant", "radial", "cortex")
ATLAS_PATTERNS = ("shells", "stripes")


@dataclass(frozen=True)
class Bump:
    """Gaussian displacement bump: ``amplitude * exp(-|x - center|^2 / (2 width^2))``."""

    center: tuple[float, float, float]
    width: float
    amplitude: tuple[float, float, float]

    def __post_init__(self):
        if not self.width > 0:
            raise ValueError("bump width must be > 0")


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "cortex"
    sigma_min: float = 0.5
    sigma_max: float = 4.0
    shell_fraction: float = 0.85  # shell radius as a fraction of the mask radius
    shell_width_mm: float = 3.0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"noise kind must be one of {NOISE_KINDS}")
        if not 0 < self.sigma_min <= self.sigma_max:
            raise ValueError("need 0 < sigma_min <= sigma_max")


@dataclass(frozen=True)
class SynthSpec:
    dims: tuple[int, int, int] = (32, 32, 32)
    spacing: tuple[float, float, float] = (2.0, 2.0, 2.0)
    origin: tuple[float, float, float] | None = None  # None centers the grid on 0
    affine: tuple = ((1.0, 0.0, 0.0, 0.0), (0.0, 1.0, 0.0, 0.0), (0.0, 0.0, 1.0, 0.0))
    bumps: tuple[Bump, ...] = ()
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    mask_radius_mm: float | None = None  # None: 0.45 * smallest extent
    atlas_pattern: str = "shells"
    n_labels: int = 4
    stripe_mm: float | None = None  # None: 4 voxels
    miscalibration: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.atlas_pattern not in ATLAS_PATTERNS:
            raise ValueError(f"atlas pattern must be one of {ATLAS_PATTERNS}")
        if self.n_labels < 1:
            raise ValueError("n_labels must be >= 1")
        if np.asarray(self.affine, dtype=float).shape != (3, 4):
            raise ValueError("affine must be a 3x4 matrix")
        if not self.miscalibration > 0:
            raise ValueError("miscalibration factor must be > 0")

    @property
    def grid(self) -> Grid:
        origin = self.origin
        if origin is None:
            origin = tuple(-0.5 * (d - 1) * h for d, h in zip(self.dims, self.spacing))
        return Grid(self.dims, self.spacing, origin)

    @property
    def center(self) -> np.ndarray:
        g = self.grid
        return np.asarray(g.origin) + 0.5 * (np.asarray(g.dims) - 1) * np.asarray(g.spacing)

    @property
    def radius(self) -> float:
        if self.mask_radius_mm is not None:
            return float(self.mask_radius_mm)
        return 0.45 * min(d * h for d, h in zip(self.dims, self.spacing))


class SynthData(NamedTuple):
    truth: np.ndarray  # (3, *dims) atlas coordinates of every subject voxel
    field: MeanStdField
    mask: Mask
    subject_seg: LabelVolume
    atlas_seg: LabelVolume
    sigma: np.ndarray  # (3, *dims) true noise std


def true_transform(spec: SynthSpec, xyz: np.ndarray) -> np.ndarray:
    """Apply the spec's affine + bumps to world points of shape (3, ...)."""
    a = np.asarray(spec.affine, dtype=float)
    out = np.tensordot(a[:, :3], xyz, axes=1) + a[:, 3].reshape((3,) + (1,) * (xyz.ndim - 1))
    for b in spec.bumps:
        c = np.asarray(b.center, dtype=float).reshape((3,) + (1,) * (xyz.ndim - 1))
        d2 = ((xyz - c) ** 2).sum(axis=0)
        out = out + np.asarray(b.amplitude, dtype=float).reshape((3,) + (1,) * (xyz.ndim - 1)) * np.exp(
            -0.5 * d2 / b.width**2
        )
    return out


def noise_sigma(spec: SynthSpec, r: np.ndarray) -> np.ndarray:
    n = spec.noise
    if n.kind == "constant":
        return np.full_like(r, n.sigma_min)
    if n.kind == "radial":
        return n.sigma_min + (n.sigma_max - n.sigma_min) * np.clip(r / spec.radius, 0, 1)
    shell = n.shell_fraction * spec.radius
    return n.sigma_min + (n.sigma_max - n.sigma_min) * np.exp(-0.5 * ((r - shell) / n.shell_width_mm) ** 2)


def atlas_labels(spec: SynthSpec, xyz: np.ndarray) -> np.ndarray:
    r = np.sqrt(((xyz - spec.center.reshape(3, 1, 1, 1)) ** 2).sum(axis=0))
    inside = r <= spec.radius
    if spec.atlas_pattern == "shells":
        lab = 1 + np.minimum(np.floor(r / spec.radius * spec.n_labels), spec.n_labels - 1)
    else:
        width = spec.stripe_mm or 4 * spec.spacing[0]
        x0 = spec.grid.origin[0]
        lab = 1 + np.mod(np.floor((xyz[0] - x0) / width + 1e-9), spec.n_labels)
    return np.where(inside, lab, 0).astype(np.int64)


def generate(spec: SynthSpec) -> SynthData:
    """Build truth, noisy prediction, mask and paired segmentations."""
    grid = spec.grid
    xyz = grid.all_world()
    r = np.sqrt(((xyz - spec.center.reshape(3, 1, 1, 1)) ** 2).sum(axis=0))
    mask = Mask(grid, r <= spec.radius)
    mask.require_foreground()

    truth = true_transform(spec, xyz)
    sigma = np.broadcast_to(noise_sigma(spec, r), (3,) + grid.dims).copy()
    g = unflatten_x_fastest(_rng.standard_normal(spec.seed, _rng.STREAM_SYNTH, 0, (3, grid.size)), grid.dims)
    mean = truth + sigma * g
    field = MeanStdField(grid, mean, sigma * spec.miscalibration, mask)

    atlas = LabelVolume(grid, atlas_labels(spec, xyz))
    pulled = nearest_label(atlas, np.moveaxis(truth, 0, -1))
    subject = LabelVolume(grid, np.where(mask.values, pulled, 0))
    return SynthData(truth, field, mask, subject, atlas, sigma)


def error_field(field: MeanStdField, truth) -> ScalarVolume:
    """Squared coordinate error per masked voxel; 0 outside the mask."""
    truth = np.asarray(truth, dtype=float)
    if truth.shape != (3,) + field.grid.dims:
        raise ValueError(f"truth shape {truth.shape} does not match grid {field.grid.dims}")
    err = ((field.mean - truth) ** 2).sum(axis=0)
    return ScalarVolume(field.grid, np.where(field.mask.values, err, 0.0))


def masked_rmse(fitted: np.ndarray, truth: np.ndarray, mask: Mask) -> float:
    """RMS Euclidean error between a (3, M) field and a (3, *dims) truth."""
    t = mask.gather(truth)
    return float(np.sqrt(((np.asarray(fitted) - t) ** 2).sum(axis=0).mean()))
