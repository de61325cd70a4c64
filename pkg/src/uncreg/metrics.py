"""Training-loss evaluators, overlap and correlation statistics, sample summaries."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .grid import Grid, LabelVolume, Mask, MeanStdField

PROB_CLAMP = 1e-7
STD_FLOOR = 1e-6
CE_WEIGHT, DICE_WEIGHT = 0.25, 0.75


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_mask: float = 0.5
    lambda_seg: float = 5.0
    lambda_uncer: float = 0.1

    def __post_init__(self):
        if min(self.lambda_mask, self.lambda_seg, self.lambda_uncer) < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass(frozen=True, eq=False)
class MaskPrediction:
    grid: Grid
    prob: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.prob, dtype=float)
        if p.shape != self.grid.dims:
            raise ValueError("mask prediction shape does not match grid")
        if np.any((p < 0) | (p > 1)) or not np.all(np.isfinite(p)):
            raise ValueError("mask probabilities must lie in [0, 1]")
        object.__setattr__(self, "prob", p)


def _mask_weights(mask) -> np.ndarray:
    m = mask.values if isinstance(mask, Mask) else np.asarray(mask)
    m = m.astype(float)
    if m.sum() == 0:
        raise ValueError("empty foreground")
    return m


def loss_coord(pred, truth, mask, norm: str = "l2") -> float:
    """Masked mean per-voxel coordinate loss.

    ``l2`` is the squared Euclidean norm of the residual vector, ``l1`` the
    sum of absolute residuals. ``pred`` and ``truth`` have shape (3, *dims).
    """
    m = _mask_weights(mask)
    r = np.asarray(truth, dtype=float) - np.asarray(pred, dtype=float)
    if norm == "l2":
        per = (r**2).sum(axis=0)
    elif norm == "l1":
        per = np.abs(r).sum(axis=0)
    else:
        raise ValueError(f"norm must be 'l1' or 'l2', got {norm!r}")
    return float((m * per).sum() / m.sum())


def loss_mask(pred: MaskPrediction, truth: Mask) -> float:
    """0.25 * binary cross-entropy + 0.75 * two-class soft Dice loss."""
    pred.grid.check_same(truth.grid, "mask")
    p = np.clip(pred.prob, PROB_CLAMP, 1 - PROB_CLAMP)
    t = truth.values.astype(float)
    ce = -np.mean(t * np.log(p) + (1 - t) * np.log(1 - p))
    q = pred.prob
    dices = []
    for a, b in ((q, t), (1 - q, 1 - t)):
        denom = a.sum() + b.sum()
        dices.append(1.0 if denom == 0 else 2 * (a * b).sum() / denom)
    return float(CE_WEIGHT * ce + DICE_WEIGHT * (1 - np.mean(dices)))


def loss_seg(warped, truth: LabelVolume, mask=None, labels=None) -> float:
    """Mean over non-background labels of (1 - Dice) inside ``mask``.

    ``warped`` is a :class:`LabelVolume` or a soft one-hot array of shape
    (L, *dims) whose channels correspond to ``labels``.
    """
    m = np.ones(truth.grid.dims, bool) if mask is None else (mask.values if isinstance(mask, Mask) else np.asarray(mask, bool))
    if isinstance(warped, LabelVolume):
        warped.grid.check_same(truth.grid, "segmentation")
        use = sorted((set(warped.label_set) | set(truth.label_set)) - {0}) if labels is None else list(labels)
        soft = {lab: (warped.labels == lab).astype(float) for lab in use}
    else:
        arr = np.asarray(warped, dtype=float)
        if labels is None or len(labels) != arr.shape[0]:
            raise ValueError("soft segmentations need one label per channel")
        soft = {int(lab): arr[i] for i, lab in enumerate(labels) if int(lab) != 0}
        use = sorted(soft)
    losses = []
    for lab in use:
        a = soft[lab] * m
        b = (truth.labels == lab) * m
        denom = a.sum() + b.sum()
        if denom == 0:
            continue
        losses.append(1 - 2 * (a * b).sum() / denom)
    if not losses:
        raise ValueError("no common labels to score")
    return float(np.mean(losses))


def loss_uncer(pred_mean, pred_std, truth, mask, dist: str = "gaussian") -> float:
    """Masked negative log-likelihood of the coordinate targets.

    Gaussian: ``sum_j 0.5 * (r**2 / s**2 + log s**2)``.
    Laplace (scale ``b = s``): ``sum_j (|r| / b + log(2 b))``.
    """
    m = _mask_weights(mask)
    s = np.asarray(pred_std, dtype=float)
    inside = np.broadcast_to(m > 0, s.shape)
    if np.any(s[inside] <= 0):
        raise ValueError("predicted std must be > 0 inside the mask")
    s = np.where(inside, s, 1.0)
    r = np.where(inside, np.asarray(truth, dtype=float) - np.asarray(pred_mean, dtype=float), 0.0)
    if dist == "gaussian":
        per = 0.5 * (r**2 / s**2 + np.log(s**2))
    elif dist == "laplace":
        per = np.abs(r) / s + np.log(2 * s)
    else:
        raise ValueError(f"dist must be 'gaussian' or 'laplace', got {dist!r}")
    return float((m * per.sum(axis=0)).sum() / m.sum())


def loss_total(coord=None, mask=None, seg=None, uncer=None, weights: LossWeights = LossWeights()) -> float:
    """Weighted sum of the available loss terms; ``None`` terms are dropped."""
    total = 0.0
    for value, lam in ((coord, 1.0), (mask, weights.lambda_mask), (seg, weights.lambda_seg), (uncer, weights.lambda_uncer)):
        if value is not None:
            total += lam * value
    return total


def std_from_logvar(logvar) -> np.ndarray:
    return np.exp(0.5 * np.asarray(logvar, dtype=float))


# ---------------------------------------------------------------------------
# Evaluation statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DiceResult:
    per_label: dict[int, float]
    mean: float
    skipped: tuple[int, ...]


def dice_score(a: LabelVolume, b: LabelVolume, labels=None) -> DiceResult:
    """Per-label Dice ``2|A∩B| / (|A| + |B|)``.

    Labels absent from both volumes are skipped and reported. Background 0
    is excluded from the mean.
    """
    a.grid.check_same(b.grid, "segmentation")
    if labels is None:
        labels = sorted(set(a.label_set) | set(b.label_set))
    per, skipped = {}, []
    for lab in labels:
        x = a.labels == lab
        y = b.labels == lab
        n = int(x.sum() + y.sum())
        if n == 0:
            skipped.append(int(lab))
            continue
        per[int(lab)] = 2.0 * np.logical_and(x, y).sum() / n
    scored = [v for k, v in per.items() if k != 0]
    if not scored:
        raise ValueError("no labels left to score")
    return DiceResult(per, float(np.mean(scored)), tuple(skipped))


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.size != y.size or x.size < 2:
        raise ValueError("pearson needs two equal-length inputs with at least 2 values")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = np.sqrt((xc * xc).sum())
    sy = np.sqrt((yc * yc).sum())
    if sx == 0 or sy == 0:
        raise DegenerateInputError("zero variance in rank/centered data")
    return float(np.clip((xc * yc).sum() / (sx * sy), -1.0, 1.0))


def spearman(x, y) -> float:
    """Pearson correlation of average ranks (ties share their mean rank)."""
    return pearson(rankdata(np.ravel(x)), rankdata(np.ravel(y)))


def summarize_samples(samples, mask: Mask, grid: Grid | None = None) -> MeanStdField:
    """Mean and sample std (divisor S-1, floored at 1e-6 mm) of S fields.

    ``samples`` has shape (S, 3, *dims).
    """
    arr = np.asarray(samples, dtype=float)
    if arr.ndim != 5 or arr.shape[0] < 2:
        raise ValueError("summarize_samples needs at least 2 samples of shape (3, *dims)")
    grid = grid or mask.grid
    mean = arr.mean(axis=0)
    std = np.maximum(arr.std(axis=0, ddof=1), STD_FLOOR)
    return MeanStdField(grid, mean, std, mask)
