"""Uncertainty-aware weighted least-squares fitting of basis-function transforms.

Each coordinate direction ``j`` is fitted independently with precision
weights ``w = std**-2``::

    c_mean = (phi' W phi + eps I)^-1 phi' W mu
    c_cov  = A W^-1 A',   A = (phi' W phi + eps I)^-1 phi' W

The normal matrix is factorized once (upper Cholesky factor ``R``) and every
downstream quantity is computed from that factor.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp

from . import _rng
from ._parallel import ordered_map
from .basis import DEFAULT_BSPLINE_SPACING_MM, DesignMatrix, affine_basis, bspline_basis
from .grid import Grid, Mask, MeanStdField

DEFAULT_EPS_SCALE = 1e-8
DEFAULT_OVERSAMPLE = 10
DEFAULT_POWER_ITERS = 2
DEFAULT_SCALE_RANGE = (-3.0, 3.0)
MAX_DENSE_COLS = 4096


class FitError(ValueError):
    pass


class FactorizationError(FitError):
    def __init__(self, direction: int, columns):
        self.direction = direction
        self.columns = [int(c) for c in columns]
        super().__init__(
            f"normal matrix for direction {direction} is not positive definite; "
            f"offending columns: {self.columns}"
        )


class BasisMismatchError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DirectionFit:
    coef_mean: np.ndarray  # (B,), zero on pruned columns
    factor: np.ndarray  # (Ba, Ba) upper triangular over active columns
    epsilon: float


@dataclass(frozen=True, eq=False)
class TransformPosterior:
    """Fitted coefficient posterior for the three coordinate directions.

    Pruned columns (basis functions with no support inside the mask) keep a
    zero coefficient and are reported with infinite variance.
    """

    basis_spec: dict
    n_cols: int
    active: np.ndarray
    directions: tuple[DirectionFit, DirectionFit, DirectionFit]
    weighted: bool = True

    @property
    def pruned(self) -> np.ndarray:
        mask = np.ones(self.n_cols, dtype=bool)
        mask[self.active] = False
        return np.flatnonzero(mask)

    @property
    def coef_mean(self) -> np.ndarray:
        """(3, B) coefficient means."""
        return np.stack([d.coef_mean for d in self.directions])

    @property
    def epsilon(self) -> tuple[float, float, float]:
        return tuple(d.epsilon for d in self.directions)

    def check_design(self, phi: DesignMatrix) -> None:
        if phi.cols != self.n_cols or phi.basis_spec != self.basis_spec:
            raise BasisMismatchError(
                f"design matrix ({phi.basis_spec.get('kind')}, B={phi.cols}) does not match "
                f"posterior ({self.basis_spec.get('kind')}, B={self.n_cols})"
            )


@dataclass(frozen=True, eq=False)
class ModeBundle:
    eigenvalues: np.ndarray  # (3, k), descending
    eigenvectors: np.ndarray  # (3, k, B), orthonormal rows, zero on pruned columns


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------


def _precisions(field: MeanStdField, weighted: bool) -> np.ndarray:
    sd = field.masked_std()
    if not weighted:
        return np.ones_like(sd)
    return sd ** -2.0


def _offending_columns(normal: np.ndarray) -> np.ndarray:
    _, r, piv = la.qr(normal, pivoting=True)
    d = np.abs(np.diag(r))
    tol = max(d[0], 1.0e-300) * normal.shape[0] * 1e-12 if d.size else 0.0
    rank = int(np.sum(d > tol))
    return piv[rank:] if rank < normal.shape[0] else piv[-1:]


def _fit_direction(phi_a: sp.csr_matrix, mu: np.ndarray, w: np.ndarray, epsilon, j: int):
    normal = (phi_a.T @ sp.diags(w) @ phi_a).toarray()
    normal = 0.5 * (normal + normal.T)
    n_active = normal.shape[0]
    eps = DEFAULT_EPS_SCALE * np.trace(normal) / n_active if epsilon is None else float(epsilon)
    if eps < 0:
        raise FitError("epsilon must be >= 0")
    if eps:
        normal[np.diag_indices(n_active)] += eps
    try:
        r = la.cholesky(normal, lower=False)
    except la.LinAlgError:
        raise FactorizationError(j, _offending_columns(normal)) from None
    if not np.all(np.diag(r) > 0):
        raise FactorizationError(j, _offending_columns(normal))
    coef = la.cho_solve((r, False), phi_a.T @ (w * mu))
    return coef, r, eps


def _fit(field: MeanStdField, phi: DesignMatrix, epsilon, weighted: bool) -> TransformPosterior:
    mu = field.masked_mean()
    if phi.rows != mu.shape[1]:
        raise BasisMismatchError(f"design has {phi.rows} rows but the mask has {mu.shape[1]} voxels")
    w = _precisions(field, weighted)
    active = np.setdiff1d(np.arange(phi.cols), phi.empty_columns())
    if active.size == 0:
        raise FitError("design matrix has no columns with support inside the mask")
    phi_a = phi.matrix.tocsc()[:, active].tocsr()

    def one(j):
        return _fit_direction(phi_a, mu[j], w[j], epsilon, j)

    dirs = []
    for coef, r, eps in ordered_map(one, range(3)):
        full = np.zeros(phi.cols)
        full[active] = coef
        dirs.append(DirectionFit(full, r, eps))
    return TransformPosterior(dict(phi.basis_spec), phi.cols, active, tuple(dirs), weighted)


def fit_weighted(field: MeanStdField, phi: DesignMatrix, epsilon: float | None = None) -> TransformPosterior:
    """Precision-weighted least-squares fit, one scalar fit per direction.

    Args:
        field: Predicted coordinates and standard deviations.
        phi: Design matrix whose rows are the field's masked voxels.
        epsilon: Tikhonov term added to the normal matrix. ``None`` uses
            ``1e-8 * trace / B`` per direction; ``0`` gives the plain formula.

    Raises:
        FactorizationError: when the (regularized) normal matrix is not
            positive definite; lists the offending columns.
    """
    return _fit(field, phi, epsilon, weighted=True)


def fit_unweighted(field: MeanStdField, phi: DesignMatrix, epsilon: float | None = None) -> TransformPosterior:
    """Same as :func:`fit_weighted` with every precision set to one."""
    return _fit(field, phi, epsilon, weighted=False)


def fit(field, phi, epsilon=None, weighted=True) -> TransformPosterior:
    return _fit(field, phi, epsilon, weighted)


def most_likely_field(p: TransformPosterior, phi: DesignMatrix) -> np.ndarray:
    """``phi @ c_mean`` per direction, shape (3, M)."""
    p.check_design(phi)
    return np.asarray(phi.matrix @ p.coef_mean.T).T


# ---------------------------------------------------------------------------
# Covariance
# ---------------------------------------------------------------------------


def _inverse_normal(d: DirectionFit) -> np.ndarray:
    rinv = la.solve_triangular(d.factor, np.eye(d.factor.shape[0]), lower=False)
    return rinv @ rinv.T


def coefficient_covariance(p: TransformPosterior, direction: int) -> np.ndarray:
    """Dense covariance over the active columns, shape (Ba, Ba)."""
    d = p.directions[direction]
    if d.factor.shape[0] > MAX_DENSE_COLS:
        raise FitError(f"dense covariance refused for B={d.factor.shape[0]} > {MAX_DENSE_COLS}")
    ninv = _inverse_normal(d)
    if d.epsilon:
        ninv = ninv - d.epsilon * (ninv @ ninv)
    return 0.5 * (ninv + ninv.T)


def coefficient_variance(p: TransformPosterior) -> np.ndarray:
    """Diagonal of the coefficient covariance, shape (3, B); ``inf`` on pruned columns."""
    out = np.full((3, p.n_cols), np.inf)
    for j, d in enumerate(p.directions):
        rinv = la.solve_triangular(d.factor, np.eye(d.factor.shape[0]), lower=False)
        var = np.einsum("ij,ij->i", rinv, rinv)
        if d.epsilon:
            ninv = rinv @ rinv.T
            var = var - d.epsilon * np.einsum("ij,ij->i", ninv, ninv)
        out[j, p.active] = var
    return out


def _apply_covariance(d: DirectionFit, v: np.ndarray) -> np.ndarray:
    x = la.cho_solve((d.factor, False), v)
    if d.epsilon:
        x = x - d.epsilon * la.cho_solve((d.factor, False), x)
    return x


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def _noise(seed: int, s: int, mask: Mask) -> np.ndarray:
    g = _rng.standard_normal(seed, _rng.STREAM_WLS_SAMPLE, s, (3, mask.grid.size))
    return g[:, mask.flat_indices()]


def sample_coefficients(
    p: TransformPosterior,
    phi: DesignMatrix,
    field: MeanStdField,
    count: int,
    seed: int,
    start: int = 0,
    literal_paper_noise: bool = False,
) -> np.ndarray:
    """Draw coefficient vectors ``A (mu + noise)``, shape (count, 3, B).

    ``noise = std * g`` so that the coefficient covariance equals ``A W^-1 A'``.
    With ``literal_paper_noise`` the perturbation is ``W^-1 g = std**2 * g``.
    Sample ``s`` depends only on ``(seed, s)``.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    p.check_design(phi)
    if phi.rows != field.mask.count:
        raise BasisMismatchError("design rows do not match the field mask")
    sd = field.masked_std() if p.weighted else np.ones((3, phi.rows))
    w = sd ** -2.0
    scale = w * (sd**2 if literal_paper_noise else sd)
    phi_at = phi.matrix.tocsc()[:, p.active].T.tocsr()
    cmean = p.coef_mean

    def one(s):
        g = _noise(seed, s, field.mask)
        out = cmean.copy()
        for j, d in enumerate(p.directions):
            out[j, p.active] += la.cho_solve((d.factor, False), phi_at @ (scale[j] * g[j]))
        return out

    return np.stack(ordered_map(one, range(start, start + count)))


def sample_fields(
    p: TransformPosterior,
    phi: DesignMatrix,
    field: MeanStdField,
    count: int,
    seed: int,
    start: int = 0,
    literal_paper_noise: bool = False,
) -> np.ndarray:
    """Sampled transforms ``phi A (mu + noise)``, shape (count, 3, M)."""
    coefs = sample_coefficients(p, phi, field, count, seed, start, literal_paper_noise)
    return np.stack([np.asarray(phi.matrix @ c.T).T for c in coefs])


# ---------------------------------------------------------------------------
# Modes of variation
# ---------------------------------------------------------------------------


def _test_matrix(seed: int, n: int, cols: int) -> np.ndarray:
    return np.column_stack([_rng.standard_normal(seed, _rng.STREAM_MODES, c, n) for c in range(cols)])


def _randomized_eigh(d: DirectionFit, k: int, oversample: int, power_iters: int, seed: int):
    n = d.factor.shape[0]
    width = min(n, k + oversample)
    y = _apply_covariance(d, _test_matrix(seed, n, width))
    for _ in range(power_iters):
        q, _ = la.qr(y, mode="economic")
        y = _apply_covariance(d, q)
    q, _ = la.qr(y, mode="economic")
    t = q.T @ _apply_covariance(d, q)
    vals, vecs = la.eigh(0.5 * (t + t.T))
    order = np.argsort(vals)[::-1][:k]
    vals = np.maximum(vals[order], 0.0)
    vecs = q @ vecs[:, order]
    # deterministic sign: largest-magnitude entry positive
    idx = np.argmax(np.abs(vecs), axis=0)
    vecs = vecs * np.sign(vecs[idx, np.arange(k)])
    return vals, vecs


def leading_modes(
    p: TransformPosterior,
    k: int = 3,
    oversample: int = DEFAULT_OVERSAMPLE,
    seed: int = 0,
    power_iters: int = DEFAULT_POWER_ITERS,
) -> ModeBundle:
    """Top-``k`` eigenpairs of each direction's coefficient covariance.

    Randomized range finder with a Gaussian test matrix (column ``c`` keyed
    on ``(seed, c)``), ``power_iters`` subspace iterations and a Rayleigh-Ritz
    step. The covariance is only ever applied through the Cholesky factor.
    """
    n_active = p.active.size
    if not 1 <= k <= n_active:
        raise ValueError(f"k must be in [1, {n_active}], got {k}")
    if oversample < 0:
        raise ValueError("oversample must be >= 0")

    def one(j):
        return _randomized_eigh(p.directions[j], k, oversample, power_iters, seed)

    vals, vecs = [], []
    for lam, e in ordered_map(one, range(3)):
        full = np.zeros((k, p.n_cols))
        full[:, p.active] = e.T
        vals.append(lam)
        vecs.append(full)
    return ModeBundle(np.stack(vals), np.stack(vecs))


def mode_displacement(
    p: TransformPosterior,
    phi: DesignMatrix,
    modes: ModeBundle,
    mode: int,
    scale: float,
    sqrt_eigenvalue: bool = False,
    scale_range: tuple[float, float] = DEFAULT_SCALE_RANGE,
) -> np.ndarray:
    """``phi (c_mean + scale * lambda_i * e_i)`` per direction, shape (3, M).

    ``mode`` is zero-based. With ``sqrt_eigenvalue`` the step uses
    ``sqrt(lambda_i)`` (one standard deviation along the mode).
    """
    p.check_design(phi)
    if not 0 <= mode < modes.eigenvalues.shape[1]:
        raise IndexError(f"mode index {mode} out of range for {modes.eigenvalues.shape[1]} modes")
    if not scale_range[0] <= scale <= scale_range[1]:
        raise ValueError(f"scale {scale} outside {scale_range}")
    lam = modes.eigenvalues[:, mode]
    step = np.sqrt(lam) if sqrt_eigenvalue else lam
    coef = p.coef_mean + scale * step[:, None] * modes.eigenvectors[:, mode, :]
    return np.asarray(phi.matrix @ coef.T).T


# ---------------------------------------------------------------------------
# Linear / nonlinear combinations
# ---------------------------------------------------------------------------


def residual_field(field: MeanStdField, fitted: np.ndarray) -> MeanStdField:
    """Copy of ``field`` with ``fitted`` (3, M) subtracted from the mean."""
    mean = field.mean - field.mask.scatter(fitted)
    return MeanStdField(field.grid, mean, field.std, field.mask)


def sequential_fit_designs(
    field: MeanStdField, parts: list[DesignMatrix], epsilon=None, weighted: bool = True
) -> list[TransformPosterior]:
    """Fit each design in turn on the residual left by the previous ones."""
    posts = []
    current = field
    for phi in parts:
        p = _fit(current, phi, epsilon, weighted)
        posts.append(p)
        current = residual_field(current, most_likely_field(p, phi))
    return posts


def sequential_fit(
    field: MeanStdField,
    grid: Grid,
    mask: Mask,
    spacing_mm: float = DEFAULT_BSPLINE_SPACING_MM,
    epsilon=None,
    weighted: bool = True,
) -> tuple[TransformPosterior, TransformPosterior]:
    """Affine fit followed by a B-spline fit of the affine residual."""
    phi_aff = affine_basis(grid, mask)
    phi_bs, _ = bspline_basis(grid, mask, spacing_mm)
    aff, bs = sequential_fit_designs(field, [phi_aff, phi_bs], epsilon, weighted)
    return aff, bs


def composed_field(posts, phis) -> np.ndarray:
    return sum(most_likely_field(p, phi) for p, phi in zip(posts, phis))


# ---------------------------------------------------------------------------
# UTP1 serialization
# ---------------------------------------------------------------------------

UTP_MAGIC = b"UTP1"


class PosteriorFormatError(ValueError):
    pass


def encode_posterior(p: TransformPosterior) -> bytes:
    spec = json.dumps(p.basis_spec, sort_keys=True, separators=(",", ":")).encode()
    n_active = p.active.size
    iu = np.triu_indices(n_active)
    chunks = [
        UTP_MAGIC,
        struct.pack("<I", len(spec)),
        spec,
        struct.pack("<BII", int(p.weighted), p.n_cols, n_active),
        p.active.astype("<u4").tobytes(),
    ]
    for d in p.directions:
        chunks.append(struct.pack("<d", d.epsilon))
        chunks.append(d.coef_mean.astype("<f8").tobytes())
        chunks.append(d.factor[iu].astype("<f8").tobytes())
    return b"".join(chunks)


def decode_posterior(raw: bytes, source="<bytes>") -> TransformPosterior:
    if raw[:4] != UTP_MAGIC:
        raise PosteriorFormatError(f"{source}: bad magic")
    try:
        off = 4
        (spec_len,) = struct.unpack_from("<I", raw, off)
        off += 4
        spec = json.loads(raw[off:off + spec_len].decode())
        off += spec_len
        weighted, n_cols, n_active = struct.unpack_from("<BII", raw, off)
        off += 9
        active = np.frombuffer(raw, "<u4", n_active, off).astype(np.int64)
        off += 4 * n_active
        iu = np.triu_indices(n_active)
        npack = iu[0].size
        dirs = []
        for _ in range(3):
            (eps,) = struct.unpack_from("<d", raw, off)
            off += 8
            coef = np.frombuffer(raw, "<f8", n_cols, off).astype(np.float64)
            off += 8 * n_cols
            r = np.zeros((n_active, n_active))
            r[iu] = np.frombuffer(raw, "<f8", npack, off)
            off += 8 * npack
            if not np.all(np.diag(r) > 0):
                raise PosteriorFormatError(f"{source}: factor has non-positive diagonal")
            dirs.append(DirectionFit(coef, r, eps))
    except (struct.error, ValueError) as exc:
        if isinstance(exc, PosteriorFormatError):
            raise
        raise PosteriorFormatError(f"{source}: truncated or corrupt posterior ({exc})") from None
    if off != len(raw):
        raise PosteriorFormatError(f"{source}: trailing bytes")
    return TransformPosterior(spec, n_cols, active, tuple(dirs), bool(weighted))


def save_posterior(path, p: TransformPosterior) -> None:
    Path(path).write_bytes(encode_posterior(p))


def load_posterior(path) -> TransformPosterior:
    return decode_posterior(Path(path).read_bytes(), source=path)
