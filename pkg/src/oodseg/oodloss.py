"""Pixel-wise objectives for suppressing logits on outlier-labeled pixels.

Each loss returns its scalar value together with the full analytic gradient
with respect to the logits, normalized by the number of contributing pixels
summed over whatever leading batch shape the caller passes in (one global
average per call).  Pixels that do not contribute carry exactly zero
gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError
from .imagery import OOD_ID, LabelMap, LogitMap

VARIANTS = ("topk_ovr", "full_ovr", "uniform_ce", "energy_max")


@dataclass(frozen=True)
class LossConfig:
    """Outlier-loss knobs: variant, top-k width, logistic slope, blend weight."""

    variant: str = "topk_ovr"
    top_k: int = 5
    slope: float = 2.0
    ood_weight: float = 0.01

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ArgumentError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.top_k < 1:
            raise ArgumentError("top_k must be at least 1")
        if self.slope <= 0:
            raise ArgumentError("slope must be positive")
        if self.ood_weight < 0:
            raise ArgumentError("ood_weight must be non-negative")


@dataclass(eq=False)
class LossResult:
    """Scalar loss plus gradient with the same shape as the input logits."""

    value: float
    grad: np.ndarray
    n_pixels: int


def _softplus(x: np.ndarray) -> np.ndarray:
    # max(x, 0) + log1p(exp(-|x|)) never overflows
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    t = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t))


def _softmax_lse(lam: np.ndarray):
    # one exp pass serves both the probabilities and the log-partition
    m = lam.max(axis=-1, keepdims=True)
    e = np.exp(lam - m)
    s = e.sum(axis=-1, keepdims=True)
    lse = (m + np.log(s))[..., 0]
    e /= s
    return e, lse


def _as_arrays(logits, labels):
    lam = logits.data if isinstance(logits, LogitMap) else np.asarray(logits, dtype=np.float64)
    lab = labels.data if isinstance(labels, LabelMap) else np.asarray(labels)
    if lam.ndim < 2:
        raise ArgumentError("logits must have a trailing class axis")
    if lam.shape[:-1] != lab.shape:
        raise ArgumentError(f"logits {lam.shape} and labels {lab.shape} disagree on pixel grid")
    if lam.shape[-1] < 2:
        raise ArgumentError("need at least 2 classes")
    return lam, lab


def _ovr_loss(logits, labels, cfg: LossConfig, k: int) -> LossResult:
    lam, lab = _as_arrays(logits, labels)
    num_classes = lam.shape[-1]
    k = min(k, num_classes)
    flat = lam.reshape(-1, num_classes)
    mask = lab.reshape(-1) == OOD_ID
    grad = np.zeros_like(flat)
    n = int(mask.sum())
    if n == 0:
        return LossResult(0.0, grad.reshape(lam.shape), 0)
    sel = flat[mask]
    # stable argsort keeps ascending class index among tied logits
    order = np.argsort(-sel, axis=1, kind="stable")[:, :k]
    top = np.take_along_axis(sel, order, axis=1)
    value = float(_softplus(cfg.slope * top).sum() / (k * n))
    gtop = cfg.slope * _sigmoid(cfg.slope * top) / (k * n)
    gsel = np.zeros_like(sel)
    np.put_along_axis(gsel, order, gtop, axis=1)
    grad[mask] = gsel
    return LossResult(value, grad.reshape(lam.shape), n)


def ood_topk_ovr(logits, labels, cfg: LossConfig) -> LossResult:
    """One-vs-rest suppression of the k highest logits on outlier pixels.

    Per selected entry the penalty is softplus(slope * logit), i.e. the
    negative log-probability that a logistic one-vs-rest detector rejects
    the class; ties at the k-th place resolve to the lower class index.
    """
    return _ovr_loss(logits, labels, cfg, cfg.top_k)


def ood_full_ovr(logits, labels, cfg: LossConfig) -> LossResult:
    """One-vs-rest suppression over all classes (top_k = C)."""
    lam = logits.data if isinstance(logits, LogitMap) else np.asarray(logits)
    return _ovr_loss(logits, labels, cfg, lam.shape[-1])


def ood_uniform_ce(logits, labels, cfg: LossConfig) -> LossResult:
    """Cross-entropy against the uniform distribution on outlier pixels."""
    lam, lab = _as_arrays(logits, labels)
    num_classes = lam.shape[-1]
    flat = lam.reshape(-1, num_classes)
    mask = lab.reshape(-1) == OOD_ID
    grad = np.zeros_like(flat)
    n = int(mask.sum())
    if n == 0:
        return LossResult(0.0, grad.reshape(lam.shape), 0)
    sel = flat[mask]
    p, lse = _softmax_lse(sel)
    value = float((lse - sel.mean(axis=1)).sum() / n)
    grad[mask] = (p - 1.0 / num_classes) / n
    return LossResult(value, grad.reshape(lam.shape), n)


def ood_energy_max(logits, labels, cfg: LossConfig) -> LossResult:
    """Mean log-sum-exp on outlier pixels: a smooth cap on the largest logit."""
    lam, lab = _as_arrays(logits, labels)
    num_classes = lam.shape[-1]
    flat = lam.reshape(-1, num_classes)
    mask = lab.reshape(-1) == OOD_ID
    grad = np.zeros_like(flat)
    n = int(mask.sum())
    if n == 0:
        return LossResult(0.0, grad.reshape(lam.shape), 0)
    sel = flat[mask]
    p, lse = _softmax_lse(sel)
    value = float(lse.sum() / n)
    grad[mask] = p / n
    return LossResult(value, grad.reshape(lam.shape), n)


def id_cross_entropy(logits, labels) -> LossResult:
    """Mean cross-entropy over pixels holding a real class label.

    Pixels labeled OOD_ID or IGNORE_ID (or any code >= C) contribute
    neither loss nor gradient.
    """
    lam, lab = _as_arrays(logits, labels)
    num_classes = lam.shape[-1]
    flat = lam.reshape(-1, num_classes)
    codes = lab.reshape(-1)
    mask = codes < num_classes
    n = int(mask.sum())
    if n == 0:
        return LossResult(0.0, np.zeros_like(lam), 0)
    # softmax over every row; masking only the cheap scalar reductions avoids
    # gathering and re-scattering the full logit matrix
    p, lse = _softmax_lse(flat)
    rows = np.arange(flat.shape[0])
    target = np.where(mask, codes, 0).astype(np.intp)
    value = float((lse[mask].sum() - flat[rows, target][mask].sum()) / n)
    p[rows, target] -= 1.0
    p /= n
    if n != flat.shape[0]:
        p[~mask] = 0.0
    return LossResult(value, p.reshape(lam.shape), n)


_OOD_VARIANTS = {
    "topk_ovr": ood_topk_ovr,
    "full_ovr": ood_full_ovr,
    "uniform_ce": ood_uniform_ce,
    "energy_max": ood_energy_max,
}


@dataclass(eq=False)
class CombinedLoss:
    """id term + ood_weight * ood term, with both gradients kept separate."""

    value: float
    id_term: LossResult
    ood_term: LossResult
    ood_weight: float


def combined_loss(logits_pre, logits_post, labels_full, labels_pre, cfg: LossConfig) -> CombinedLoss:
    """Blend the class loss on upsampled logits with the outlier loss on the
    coarse grid.  The caller applies ood_weight when consuming ood_term.grad.
    """
    id_term = id_cross_entropy(logits_post, labels_full)
    ood_term = _OOD_VARIANTS[cfg.variant](logits_pre, labels_pre, cfg)
    return CombinedLoss(
        id_term.value + cfg.ood_weight * ood_term.value, id_term, ood_term, cfg.ood_weight
    )
