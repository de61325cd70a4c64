"""Non-parametric (Demons-style) transforms: kernel smoothing of the prediction.

Two estimators are provided:

* ``precision``: ``K * (w mu) / (K * w)`` with ``w = std**-2`` inside the mask
  and 0 outside; variance ``(K.K * w) / (K * w)**2``.
* ``plain``: ``K * mu`` with taps renormalized over the mask (clipped at the
  grid edges); variance ``(K.K * std**2) / (K * 1)**2``, which is exactly
  ``(K.K) * std**2`` wherever the kernel footprint lies inside the mask.

Convolutions are separable and zero-padded; all volumes have shape
(3, *dims).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import _rng
from ._parallel import ordered_map
from .grid import Grid, Mask, MeanStdField
from .volume_io import FLOAT32, read_uaf, write_uaf

DEFAULT_SIGMA_MM = 3.0
DEFAULT_TRUNCATION = 3.0
MODES = ("precision", "plain")


class DemonsError(ValueError):
    pass


@dataclass(frozen=True)
class SmoothingKernel:
    """Separable smoothing kernel.

    A Gaussian of ``sigma_mm`` truncated at ``truncation`` standard
    deviations, or explicit 1-D ``taps`` (shared by all axes) when given.
    """

    sigma_mm: float = DEFAULT_SIGMA_MM
    truncation: float = DEFAULT_TRUNCATION
    taps: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.taps is not None:
            t = np.asarray(self.taps, dtype=float)
            if t.ndim != 1 or t.size % 2 == 0:
                raise ValueError("taps must be a 1-D sequence of odd length")
            if np.any(t < 0) or not np.allclose(t, t[::-1], rtol=0, atol=1e-15) or t.sum() <= 0:
                raise ValueError("taps must be symmetric, non-negative and not all zero")
            object.__setattr__(self, "taps", tuple(float(v) for v in t / t.sum()))
        else:
            if not self.sigma_mm > 0:
                raise ValueError("sigma_mm must be > 0")
            if not self.truncation > 0:
                raise ValueError("truncation must be > 0")

    @classmethod
    def identity(cls) -> "SmoothingKernel":
        return cls(taps=(1.0,))

    def axis_taps(self, grid: Grid) -> list[np.ndarray]:
        """Normalized 1-D taps per axis, accounting for voxel spacing."""
        if self.taps is not None:
            return [np.asarray(self.taps)] * 3
        out = []
        for h in grid.spacing:
            s = self.sigma_mm / h
            radius = int(self.truncation * s + 0.5)
            x = np.arange(-radius, radius + 1, dtype=float)
            t = np.exp(-0.5 * (x / s) ** 2)
            out.append(t / t.sum())
        return out

    def to_dict(self) -> dict:
        if self.taps is not None:
            return {"taps": ",".join(repr(t) for t in self.taps)}
        return {"sigma_mm": repr(self.sigma_mm), "truncation": repr(self.truncation)}


def convolve(volume: np.ndarray, taps: list[np.ndarray]) -> np.ndarray:
    """Separable zero-padded correlation over the last three axes."""
    out = np.asarray(volume, dtype=float)
    for axis, t in zip((-3, -2, -1), taps):
        out = ndimage.correlate1d(out, t, axis=axis, mode="constant", cval=0.0)
    return out


@dataclass(frozen=True, eq=False)
class NonParamPosterior:
    grid: Grid
    mask: Mask
    mean: np.ndarray  # (3, *dims), zero outside mask
    variance: np.ndarray  # (3, *dims), zero outside mask
    mode: str
    kernel: SmoothingKernel
    paper_variance: bool = False


def _weights(field: MeanStdField, mode: str) -> np.ndarray:
    m = field.mask.values
    if mode == "precision":
        return np.where(m, field.std, 1.0) ** -2.0 * m
    if mode == "plain":
        return np.broadcast_to(m.astype(float), (3,) + field.grid.dims)
    raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


class _Smoother:
    """Linear mean operator of a mode; precomputes the normalization."""

    def __init__(self, field: MeanStdField, kernel: SmoothingKernel, mode: str):
        self.mask = field.mask.values
        self.taps = kernel.axis_taps(field.grid)
        self.w = _weights(field, mode)
        self.den = convolve(self.w, self.taps)
        bad = self.mask[None] & ~(self.den > 0)
        if bad.any():
            c, i, j, k = np.argwhere(bad)[0]
            raise DemonsError(f"kernel footprint of masked voxel ({i}, {j}, {k}) has zero total weight")

    def __call__(self, mu: np.ndarray) -> np.ndarray:
        num = convolve(np.where(self.mask, mu, 0.0) * self.w, self.taps)
        return np.where(self.mask, num / np.where(self.mask, self.den, 1.0), 0.0)


def demons_fit(
    field: MeanStdField,
    kernel: SmoothingKernel = SmoothingKernel(),
    mode: str = "precision",
    paper_variance: bool = False,
) -> NonParamPosterior:
    """Smoothed transform estimate and its per-voxel variance.

    Args:
        field: Predicted coordinates and standard deviations.
        kernel: Smoothing kernel.
        mode: ``"precision"`` or ``"plain"``.
        paper_variance: In precision mode, report ``(K.K) * std**2`` instead of
            the precision-weighted variance.
    """
    smooth = _Smoother(field, kernel, mode)
    mean = smooth(field.mean)
    m = field.mask.values
    taps2 = [t * t for t in smooth.taps]
    den = np.where(m, smooth.den, 1.0)
    if mode == "precision" and not paper_variance:
        var = convolve(smooth.w, taps2) / den**2
    elif mode == "precision":
        var = convolve(np.where(m, field.std, 0.0) ** 2, taps2)
    else:
        var = convolve(np.where(m, field.std, 0.0) ** 2, taps2) / den**2
    var = np.where(m, var, 0.0)
    return NonParamPosterior(field.grid, field.mask, mean, var, mode, kernel, paper_variance)


def demons_sample(
    field: MeanStdField,
    kernel: SmoothingKernel = SmoothingKernel(),
    mode: str = "precision",
    count: int = 1,
    seed: int = 0,
    start: int = 0,
    literal_paper_noise: bool = False,
) -> np.ndarray:
    """Smoothed perturbed fields, shape (count, 3, *dims).

    Each sample perturbs the mean by ``std * g`` (``std**2 * g`` with
    ``literal_paper_noise``) and applies the same operator as
    :func:`demons_fit`. Sample ``s`` depends only on ``(seed, s)``.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    smooth = _Smoother(field, kernel, mode)
    std = np.where(field.mask.values, field.std, 0.0)
    scale = std**2 if literal_paper_noise else std
    shape = (3,) + field.grid.dims

    def one(s):
        g = _rng.standard_normal(seed, _rng.STREAM_DEMONS_SAMPLE, s, shape)
        return smooth(field.mean + scale * g)

    return np.stack(ordered_map(one, range(start, start + count)))


def demons_variance_error_correlation(field: MeanStdField, truth: np.ndarray, posterior: NonParamPosterior):
    """Spearman and Pearson correlation of summed variance vs squared error."""
    from .metrics import pearson, spearman

    field.grid.check_same(posterior.grid, "posterior")
    truth = np.asarray(truth, dtype=float)
    if truth.shape != (3,) + field.grid.dims:
        raise ValueError("truth must have shape (3, *dims)")
    m = field.mask
    var = m.gather(posterior.variance).sum(axis=0)
    err = (m.gather(truth - posterior.mean) ** 2).sum(axis=0)
    return spearman(var, err), pearson(var, err)


def save_nonparam(prefix, post: NonParamPosterior) -> list[Path]:
    """Write ``<prefix>.mean.uaf`` (3 mean channels + mask), ``<prefix>.var.uaf``
    and ``<prefix>.meta.txt``."""
    prefix = str(prefix)
    paths = [Path(prefix + ".mean.uaf"), Path(prefix + ".var.uaf"), Path(prefix + ".meta.txt")]
    write_uaf(paths[0], post.grid, np.concatenate([post.mean, post.mask.values[None].astype(float)]), 4, FLOAT32)
    write_uaf(paths[1], post.grid, post.variance, 3, FLOAT32)
    meta = {"mode": post.mode, "paper_variance": str(int(post.paper_variance)), **post.kernel.to_dict()}
    paths[2].write_text("".join(f"{k} = {v}\n" for k, v in meta.items()))
    return paths


def load_nonparam(prefix) -> NonParamPosterior:
    prefix = str(prefix)
    mean = read_uaf(prefix + ".mean.uaf")
    var = read_uaf(prefix + ".var.uaf")
    mean.grid.check_same(var.grid, "variance")
    meta = {}
    for line in Path(prefix + ".meta.txt").read_text().splitlines():
        if line.strip():
            k, v = line.split("=", 1)
            meta[k.strip()] = v.strip()
    if "taps" in meta:
        kernel = SmoothingKernel(taps=tuple(float(t) for t in meta["taps"].split(",")))
    else:
        kernel = SmoothingKernel(float(meta["sigma_mm"]), float(meta["truncation"]))
    data = mean.data.astype(float)
    mask = Mask(mean.grid, data[3].astype(bool))
    return NonParamPosterior(
        mean.grid, mask, data[:3], var.data.astype(float), meta["mode"], kernel, meta.get("paper_variance") == "1"
    )
