"""Sparse design matrices for affine, cubic B-spline and joint models.

Rows follow mask scan order; columns are basis functions. B-spline control
points are numbered x-fastest over the control lattice.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import scipy.sparse as sp

from .grid import Grid, Mask, world_coordinates

DEFAULT_BSPLINE_SPACING_MM = 10.0
DEFAULT_MAX_COLUMNS = 200_000
DROP_TOL = 1e-12
LATTICE_PAD = 2  # control spacings beyond the mask bounding box


class BasisError(ValueError):
    pass


class BasisTooLargeError(BasisError):
    pass


@dataclass(frozen=True)
class BSplineLattice:
    spacing: tuple[float, float, float]
    dims: tuple[int, int, int]
    origin: tuple[float, float, float]

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    def as_grid(self) -> Grid:
        return Grid(self.dims, self.spacing, self.origin)

    def to_dict(self) -> dict:
        return {"spacing": list(self.spacing), "dims": list(self.dims), "origin": list(self.origin)}

    @classmethod
    def from_dict(cls, d: dict) -> "BSplineLattice":
        return cls(tuple(d["spacing"]), tuple(d["dims"]), tuple(d["origin"]))


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    """Basis functions evaluated at the masked voxels.

    Attributes:
        matrix: CSR matrix of shape (M, B).
        basis_spec: JSON-serializable description of how the columns were
            generated; enough to rebuild the matrix from a grid and mask.
    """

    matrix: sp.csr_matrix
    basis_spec: dict[str, Any] = field(default_factory=lambda: {"kind": "custom"})

    def __post_init__(self):
        m = sp.csr_matrix(self.matrix, dtype=np.float64)
        m.sort_indices()
        if not np.all(np.isfinite(m.data)):
            raise BasisError("design matrix has non-finite entries")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def from_dense(cls, array, kind: str = "custom") -> "DesignMatrix":
        return cls(sp.csr_matrix(np.asarray(array, dtype=float)), {"kind": kind})

    @property
    def rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def cols(self) -> int:
        return self.matrix.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()

    def empty_columns(self) -> np.ndarray:
        """Columns with no nonzero entry over the mask."""
        counts = np.diff(self.matrix.tocsc().indptr)
        return np.flatnonzero(counts == 0)

    def __matmul__(self, other):
        return self.matrix @ other


def affine_basis(grid: Grid, mask: Mask) -> DesignMatrix:
    """Columns x, y, z (world mm) and a column of ones."""
    xyz = world_coordinates(grid, mask)
    dense = np.column_stack([xyz.T, np.ones(xyz.shape[1])])
    return DesignMatrix(sp.csr_matrix(dense), {"kind": "affine"})


def cubic_bspline_pieces(u: np.ndarray) -> np.ndarray:
    """Uniform cubic B-spline weights for local parameter ``u`` in [0, 1).

    Returns shape (..., 4) for control offsets -1, 0, +1, +2.
    """
    u = np.asarray(u, dtype=float)
    u2 = u * u
    u3 = u2 * u
    return np.stack(
        [
            (1 - u) ** 3 / 6.0,
            (3 * u3 - 6 * u2 + 4) / 6.0,
            (-3 * u3 + 3 * u2 + 3 * u + 1) / 6.0,
            u3 / 6.0,
        ],
        axis=-1,
    )


def bspline_lattice(grid: Grid, mask: Mask, spacing_mm: float) -> BSplineLattice:
    """Control lattice aligned to the mask bounding box, padded by two spacings."""
    if not spacing_mm > 0:
        raise BasisError(f"B-spline spacing must be > 0, got {spacing_mm}")
    xyz = world_coordinates(grid, mask)
    lo = xyz.min(axis=1)
    hi = xyz.max(axis=1)
    dims = tuple(int(math.ceil((hi[a] - lo[a]) / spacing_mm - 1e-9)) + 1 + 2 * LATTICE_PAD for a in range(3))
    origin = tuple(float(lo[a] - LATTICE_PAD * spacing_mm) for a in range(3))
    return BSplineLattice((float(spacing_mm),) * 3, dims, origin)


def bspline_basis(
    grid: Grid,
    mask: Mask,
    spacing_mm: float = DEFAULT_BSPLINE_SPACING_MM,
    max_columns: int = DEFAULT_MAX_COLUMNS,
) -> tuple[DesignMatrix, BSplineLattice]:
    """Tensor-product cubic B-spline design matrix over the masked voxels.

    Raises:
        BasisTooLargeError: if the lattice has more than ``max_columns``
            control points.
    """
    lattice = bspline_lattice(grid, mask, spacing_mm)
    n_cols = lattice.size
    if n_cols > max_columns:
        raise BasisTooLargeError(
            f"B-spline lattice {lattice.dims} has B={n_cols} columns, exceeding the cap of {max_columns}"
        )
    xyz = world_coordinates(grid, mask)
    n_rows = xyz.shape[1]
    lo = np.asarray(lattice.origin) + LATTICE_PAD * spacing_mm

    ks, ws = [], []
    for a in range(3):
        t = LATTICE_PAD + (xyz[a] - lo[a]) / spacing_mm
        snapped = np.round(t)
        t = np.where(np.abs(t - snapped) < 1e-9, snapped, t)
        k = np.floor(t).astype(np.int64)
        ks.append(k - 1)  # first of the 4 supporting controls
        ws.append(cubic_bspline_pieces(t - k))

    offs = np.arange(4)
    cx = ks[0][:, None, None, None] + offs[None, :, None, None]
    cy = ks[1][:, None, None, None] + offs[None, None, :, None]
    cz = ks[2][:, None, None, None] + offs[None, None, None, :]
    w = ws[0][:, :, None, None] * ws[1][:, None, :, None] * ws[2][:, None, None, :]
    nx, ny, _ = lattice.dims
    col = (cx + nx * (cy + ny * cz)).reshape(n_rows, 64)
    w = w.reshape(n_rows, 64)
    row = np.repeat(np.arange(n_rows), 64).reshape(n_rows, 64)
    keep = w >= DROP_TOL
    mat = sp.csr_matrix((w[keep], (row[keep], col[keep])), shape=(n_rows, n_cols))
    spec = {"kind": "bspline", "spacing_mm": float(spacing_mm), "lattice": lattice.to_dict()}
    return DesignMatrix(mat, spec), lattice


def joint_basis(parts: list[DesignMatrix]) -> DesignMatrix:
    """Horizontal concatenation of design matrices sharing the same rows."""
    if not parts:
        raise BasisError("joint basis needs at least one part")
    if len(parts) == 1:
        return parts[0]
    rows = {p.rows for p in parts}
    if len(rows) != 1:
        raise BasisError(f"parts have mismatched row counts {sorted(rows)}")
    ranges, start = [], 0
    for p in parts:
        ranges.append([start, start + p.cols])
        start += p.cols
    spec = {"kind": "joint", "parts": [p.basis_spec for p in parts], "ranges": ranges}
    return DesignMatrix(sp.hstack([p.matrix for p in parts], format="csr"), spec)


def constant_basis(grid: Grid, mask: Mask) -> DesignMatrix:
    """Single column of ones."""
    mask.require_foreground()
    return DesignMatrix(sp.csr_matrix(np.ones((mask.count, 1))), {"kind": "constant"})


def design_from_spec(spec: dict, grid: Grid, mask: Mask) -> DesignMatrix:
    """Rebuild a design matrix from its ``basis_spec``."""
    kind = spec.get("kind")
    if kind == "affine":
        return affine_basis(grid, mask)
    if kind == "constant":
        return constant_basis(grid, mask)
    if kind == "bspline":
        phi, lattice = bspline_basis(grid, mask, spec["spacing_mm"])
        if "lattice" in spec and lattice != BSplineLattice.from_dict(spec["lattice"]):
            raise BasisError("mask bounding box does not reproduce the stored B-spline lattice")
        return phi
    if kind == "joint":
        return joint_basis([design_from_spec(s, grid, mask) for s in spec["parts"]])
    raise BasisError(f"cannot rebuild basis of kind {kind!r}")
