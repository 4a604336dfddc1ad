"""Per-pixel anomaly scores derived from segmentation logits.

Every score is oriented so that higher means more anomalous, and every
score is finite for finite logits.  `SCORE_NAMES` fixes the registry order
used by report serialization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError
from .imagery import LogitMap, ScoreMap

STD_CLAMP = 1e-6

SCORE_NAMES = ("msp", "entropy", "max_logit", "energy", "std_ml", "max_min")


def _as_logit_array(logits) -> np.ndarray:
    arr = logits.data if isinstance(logits, LogitMap) else np.asarray(logits, dtype=np.float64)
    if arr.ndim < 1 or arr.shape[-1] < 2:
        raise ArgumentError("logits must carry at least 2 classes on the last axis")
    return arr


def _wrap(template, arr: np.ndarray):
    if isinstance(template, LogitMap):
        return ScoreMap(arr)
    return arr


def _softmax(lam: np.ndarray) -> np.ndarray:
    e = np.exp(lam - lam.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _logsumexp(lam: np.ndarray) -> np.ndarray:
    m = lam.max(axis=-1)
    return m + np.log(np.exp(lam - m[..., None]).sum(axis=-1))


def score_msp(logits):
    """One minus the maximum softmax probability."""
    lam = _as_logit_array(logits)
    return _wrap(logits, 1.0 - _softmax(lam).max(axis=-1))


def score_entropy(logits):
    """Shannon entropy of the softmax, in nats; zero terms for zero mass."""
    lam = _as_logit_array(logits)
    p = _softmax(lam)
    terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return _wrap(logits, -terms.sum(axis=-1))


def score_max_logit(logits):
    """Negated maximum logit."""
    lam = _as_logit_array(logits)
    return _wrap(logits, -lam.max(axis=-1))


def score_energy(logits):
    """Negated log-sum-exp: a smooth version of the negated max logit."""
    lam = _as_logit_array(logits)
    return _wrap(logits, -_logsumexp(lam))


def score_max_min(logits):
    """Negated gap between the largest and smallest logit.

    The gap collapses where every class is suppressed together, which
    separates genuinely anomalous pixels from ordinary boundary ambiguity
    (where only the top classes compete while the rest stay low).
    """
    lam = _as_logit_array(logits)
    return _wrap(logits, -(lam.max(axis=-1) - lam.min(axis=-1)))


@dataclass(frozen=True, eq=False)
class ClasswiseStats:
    """Mean/std of the winning logit per predicted class.

    Classes never predicted in the fitting collection get the neutral
    (mean 0, std 1); fitted stds are clamped at 1e-6.
    """

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        if mean.ndim != 1 or mean.shape != std.shape:
            raise ArgumentError("classwise stats need matching 1-d mean/std")
        if (std <= 0).any():
            raise ArgumentError("classwise std must be positive")
        mean.setflags(write=False)
        std.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @property
    def num_classes(self) -> int:
        return self.mean.shape[0]


def fit_classwise_stats(logit_maps) -> ClasswiseStats:
    """Fit per-class winning-logit statistics over a collection of maps.

    Uses only predictions (argmax), never ground truth, so it can be fitted
    post-hoc on the exact logits being scored.  Population std.
    """
    maps = list(logit_maps)
    if not maps:
        raise ArgumentError("need at least one logit map to fit stats")
    num_classes = None
    count = None
    total = None
    total_sq = None
    for m in maps:
        lam = _as_logit_array(m)
        c = lam.shape[-1]
        if num_classes is None:
            num_classes = c
            count = np.zeros(c, dtype=np.float64)
            total = np.zeros(c, dtype=np.float64)
            total_sq = np.zeros(c, dtype=np.float64)
        elif c != num_classes:
            raise ArgumentError("logit maps disagree on class count")
        win = lam.argmax(axis=-1).reshape(-1)
        top = lam.max(axis=-1).reshape(-1)
        count += np.bincount(win, minlength=c)
        total += np.bincount(win, weights=top, minlength=c)
        total_sq += np.bincount(win, weights=top * top, minlength=c)
    seen = count > 0
    mean = np.zeros(num_classes)
    std = np.ones(num_classes)
    mean[seen] = total[seen] / count[seen]
    var = np.zeros(num_classes)
    var[seen] = np.maximum(total_sq[seen] / count[seen] - mean[seen] ** 2, 0.0)
    std[seen] = np.maximum(np.sqrt(var[seen]), STD_CLAMP)
    return ClasswiseStats(mean, std)


def score_standardized_ml(logits, stats: ClasswiseStats):
    """Max-logit standardized by the stats of the predicted class, negated."""
    lam = _as_logit_array(logits)
    if lam.shape[-1] != stats.num_classes:
        raise ArgumentError("stats fitted for a different class count")
    win = lam.argmax(axis=-1)
    top = lam.max(axis=-1)
    return _wrap(logits, -(top - stats.mean[win]) / stats.std[win])


def compute_score(name: str, logits, stats: ClasswiseStats | None = None):
    """Dispatch by registry name; std_ml requires fitted stats."""
    if name == "std_ml":
        if stats is None:
            raise ArgumentError("std_ml requires fitted classwise stats")
        return score_standardized_ml(logits, stats)
    try:
        fn = _SIMPLE_SCORES[name]
    except KeyError:
        raise ArgumentError(f"unknown score {name!r}; choose from {SCORE_NAMES}") from None
    return fn(logits)


_SIMPLE_SCORES = {
    "msp": score_msp,
    "entropy": score_entropy,
    "max_logit": score_max_logit,
    "energy": score_energy,
    "max_min": score_max_min,
}
