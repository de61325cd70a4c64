"""Voxel lattice geometry, volume containers and interpolation primitives.

Volumes are stored as numpy arrays indexed ``[i, j, k]`` (x, y, z). Whenever a
volume is flattened, x varies fastest (Fortran order), matching NIfTI.
The mask scan order is the x-fastest order of the foreground voxels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class EmptyForegroundError(ValueError):
    """Raised when an operation needs at least one foreground voxel."""

    def __init__(self, msg: str = "empty foreground"):
        super().__init__(msg)


class GridMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    """Axis-aligned voxel lattice.

    Attributes:
        dims: Voxels per axis.
        spacing: Voxel size in mm per axis.
        origin: World coordinate (mm) of voxel index (0, 0, 0).
    """

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
            raise ValueError("grid needs exactly 3 dims, spacings and origin values")
        if any(d < 1 for d in dims):
            raise ValueError(f"dims must be >= 1, got {dims}")
        if any(not s > 0 or not np.isfinite(s) for s in spacing):
            raise ValueError(f"spacing must be > 0, got {spacing}")
        if not all(np.isfinite(origin)):
            raise ValueError(f"origin must be finite, got {origin}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.dims

    def world_of(self, index) -> np.ndarray:
        """Map voxel indices (..., 3) to world mm."""
        index = np.asarray(index, dtype=float)
        return np.asarray(self.origin) + index * np.asarray(self.spacing)

    def index_of(self, point) -> np.ndarray:
        """Map world mm (..., 3) to continuous voxel indices."""
        point = np.asarray(point, dtype=float)
        return (point - np.asarray(self.origin)) / np.asarray(self.spacing)

    def flat_to_index(self, flat) -> np.ndarray:
        """x-fastest flat index -> (..., 3) integer voxel indices."""
        i, j, k = np.unravel_index(np.asarray(flat), self.dims, order="F")
        return np.stack([i, j, k], axis=-1)

    def all_world(self) -> np.ndarray:
        """World coordinates of every voxel, shape (3, *dims)."""
        axes = [self.origin[a] + self.spacing[a] * np.arange(self.dims[a]) for a in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"))

    def check_same(self, other: "Grid", what: str = "volume") -> None:
        if self != other:
            raise GridMismatchError(f"{what} grid {other} does not match {self}")


def flatten_x_fastest(volume) -> np.ndarray:
    """(..., nx, ny, nz) -> (..., N) with x varying fastest."""
    volume = np.asarray(volume)
    n = volume.ndim
    axes = tuple(range(n - 3)) + (n - 1, n - 2, n - 3)
    return volume.transpose(axes).reshape(volume.shape[:-3] + (-1,))


def unflatten_x_fastest(flat, dims) -> np.ndarray:
    """Inverse of :func:`flatten_x_fastest`."""
    flat = np.asarray(flat)
    n = flat.ndim + 2
    vol = flat.reshape(flat.shape[:-1] + tuple(dims)[::-1])
    axes = tuple(range(n - 3)) + (n - 1, n - 2, n - 3)
    return np.ascontiguousarray(vol.transpose(axes))


def _as_volume(grid: Grid, values, dtype) -> np.ndarray:
    arr = np.asarray(values, dtype=dtype)
    if arr.ndim == 1:
        if arr.size != grid.size:
            raise ValueError(f"expected {grid.size} values, got {arr.size}")
        arr = arr.reshape(grid.dims, order="F")
    if arr.shape != grid.dims:
        raise ValueError(f"volume shape {arr.shape} does not match grid dims {grid.dims}")
    arr = arr.copy()
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ScalarVolume:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        arr = _as_volume(self.grid, self.values, float)
        if not np.all(np.isfinite(arr)):
            raise ValueError("scalar volume contains non-finite values")
        object.__setattr__(self, "values", arr)


@dataclass(frozen=True, eq=False)
class Mask:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values)
        if arr.dtype != bool:
            if not np.all(np.isin(arr, (0, 1))):
                raise ValueError("mask values must be 0 or 1")
        object.__setattr__(self, "values", _as_volume(self.grid, arr, bool))

    @classmethod
    def full(cls, grid: Grid) -> "Mask":
        return cls(grid, np.ones(grid.dims, dtype=bool))

    @property
    def count(self) -> int:
        return int(self.values.sum())

    def flat_indices(self) -> np.ndarray:
        """Flat (x-fastest) indices of foreground voxels, in mask scan order."""
        return np.flatnonzero(self.values.ravel(order="F"))

    def voxel_indices(self) -> np.ndarray:
        """(M, 3) voxel indices in mask scan order."""
        return self.grid.flat_to_index(self.flat_indices())

    def gather(self, volume: np.ndarray) -> np.ndarray:
        """Extract masked values of a (..., *dims) array as (..., M)."""
        return flatten_x_fastest(volume)[..., self.flat_indices()]

    def scatter(self, values: np.ndarray, fill: float = 0.0) -> np.ndarray:
        """Inverse of :meth:`gather`: (..., M) -> (..., *dims), ``fill`` outside."""
        values = np.asarray(values)
        lead = values.shape[:-1]
        out = np.full(lead + (self.grid.size,), fill, dtype=np.result_type(values, type(fill)))
        out[..., self.flat_indices()] = values
        return unflatten_x_fastest(out, self.grid.dims)

    def require_foreground(self) -> None:
        if not self.values.any():
            raise EmptyForegroundError()


@dataclass(frozen=True, eq=False)
class MeanStdField:
    """Per-voxel predicted target coordinates and their standard deviations.

    ``mean`` and ``std`` have shape (3, *dims). Only voxels inside ``mask``
    are meaningful; ``std`` must be strictly positive and ``mean`` finite
    there.
    """

    grid: Grid
    mean: np.ndarray
    std: np.ndarray
    mask: Mask

    def __post_init__(self):
        self.grid.check_same(self.mask.grid, "mask")
        mean = np.array(self.mean, dtype=float)
        std = np.array(self.std, dtype=float)
        if mean.shape != (3,) + self.grid.dims or std.shape != (3,) + self.grid.dims:
            raise ValueError("mean and std must have shape (3, *dims)")
        inside = self.mask.values
        if not np.all(np.isfinite(mean[:, inside])):
            raise ValueError("mean must be finite inside the mask")
        s = std[:, inside]
        if not np.all(np.isfinite(s) & (s > 0)):
            raise ValueError("std must be finite and > 0 inside the mask")
        mean.setflags(write=False)
        std.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    def masked_mean(self) -> np.ndarray:
        """(3, M) predicted coordinates in mask scan order."""
        return self.mask.gather(self.mean)

    def masked_std(self) -> np.ndarray:
        return self.mask.gather(self.std)


@dataclass(frozen=True, eq=False)
class LabelVolume:
    grid: Grid
    labels: np.ndarray
    label_set: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        arr = np.asarray(self.labels)
        if arr.size and (np.any(arr < 0) or not np.all(arr == np.round(arr))):
            raise ValueError("labels must be non-negative integers")
        arr = _as_volume(self.grid, arr, np.int64)
        object.__setattr__(self, "labels", arr)
        object.__setattr__(self, "label_set", tuple(int(v) for v in np.unique(arr)))


def world_coordinates(grid: Grid, mask: Mask) -> np.ndarray:
    """World mm coordinates of the masked voxels, shape (3, M), mask scan order."""
    grid.check_same(mask.grid, "mask")
    mask.require_foreground()
    return grid.world_of(mask.voxel_indices()).T


def trilinear_sample(vol: ScalarVolume, point) -> float | np.ndarray:
    """Trilinear interpolation at world point(s) ``(..., 3)``.

    Points outside the lattice are clamped to the boundary voxels.
    """
    values = vol.values
    dims = np.asarray(vol.grid.dims)
    idx = np.clip(vol.grid.index_of(point), 0, dims - 1)
    lo = np.minimum(np.floor(idx).astype(np.int64), np.maximum(dims - 2, 0))
    frac = idx - lo
    hi = np.minimum(lo + 1, dims - 1)
    out = 0.0
    for cx in (0, 1):
        wx = frac[..., 0] if cx else 1 - frac[..., 0]
        ix = hi[..., 0] if cx else lo[..., 0]
        for cy in (0, 1):
            wy = frac[..., 1] if cy else 1 - frac[..., 1]
            iy = hi[..., 1] if cy else lo[..., 1]
            for cz in (0, 1):
                wz = frac[..., 2] if cz else 1 - frac[..., 2]
                iz = hi[..., 2] if cz else lo[..., 2]
                out = out + wx * wy * wz * values[ix, iy, iz]
    if np.ndim(out) == 0:
        return float(out)
    return out


def nearest_voxel(grid: Grid, point) -> tuple[np.ndarray, np.ndarray]:
    """Nearest voxel indices for world point(s) and an in-grid flag.

    Exact half-way ties go to the lower index on each axis, which yields the
    lexicographically smallest voxel among the equidistant candidates.
    """
    idx = grid.index_of(point)
    nearest = np.ceil(idx - 0.5).astype(np.int64)
    inside = np.all((nearest >= 0) & (nearest < np.asarray(grid.dims)), axis=-1)
    return nearest, inside


def nearest_label(vol: LabelVolume, point) -> int | np.ndarray:
    """Label of the nearest voxel center; background 0 outside the grid."""
    nearest, inside = nearest_voxel(vol.grid, point)
    safe = np.where(inside[..., None], nearest, 0)
    out = np.where(inside, vol.labels[safe[..., 0], safe[..., 1], safe[..., 2]], 0)
    if np.ndim(out) == 0:
        return int(out)
    return out
