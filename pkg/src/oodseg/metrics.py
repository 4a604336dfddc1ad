"""Anomaly-ranking metrics with exact tie handling, plus segmentation mIoU.

Conventions, fixed once and tested against brute-force oracles:
  - AUROC uses Mann-Whitney midranks, so ties contribute half weight.
  - Average precision is the step-wise sum P(n) * (R(n) - R(n-1)) over
    thresholds at descending unique score values; tied scores enter as one
    group at a single threshold.  No interpolation.
  - FPR at a TPR target reports the false-positive rate at the largest
    threshold whose TPR reaches the target.  No interpolation.
higher score = more anomalous; truth 1 = anomalous.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ArgumentError, StateError, UndefinedMetricError
from .imagery import IGNORE_ID, OOD_ID, LabelMap, LogitMap, read_logit_dump
from .scores import SCORE_NAMES, compute_score, fit_classwise_stats


def _flat_pair(scores, truth):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    t = np.asarray(truth).reshape(-1)
    if s.shape != t.shape:
        raise ArgumentError(f"scores {s.shape} and truth {t.shape} disagree")
    if s.size == 0:
        raise UndefinedMetricError("no pixels to rank")
    if not np.isfinite(s).all():
        raise ArgumentError("scores must be finite")
    t = t.astype(bool)
    return s, t


def auroc(scores, truth) -> float:
    """Area under the ROC curve via the midrank Mann-Whitney statistic."""
    s, t = _flat_pair(scores, truth)
    n_pos = int(t.sum())
    n_neg = t.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs at least one positive and one negative")
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    ranks = np.empty(s.size, dtype=np.float64)
    # group boundaries over tied runs, midrank = average 1-based rank
    boundaries = np.flatnonzero(np.diff(sorted_s)) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [s.size]))
    for a, b in zip(starts, ends):
        ranks[order[a:b]] = 0.5 * (a + 1 + b)
    u_stat = ranks[t].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u_stat / (n_pos * n_neg))


def _grouped_counts(s: np.ndarray, t: np.ndarray):
    """Cumulative TP/FP after each distinct threshold, thresholds descending."""
    order = np.argsort(-s, kind="mergesort")
    sorted_s = s[order]
    sorted_t = t[order]
    boundary = np.flatnonzero(np.diff(sorted_s)) + 1
    ends = np.concatenate((boundary, [s.size]))
    cum_tp = np.cumsum(sorted_t)[ends - 1].astype(np.float64)
    cum_fp = ends - cum_tp
    return cum_tp, cum_fp


def average_precision(scores, truth) -> float:
    """Step-wise AP with tied scores grouped at one threshold."""
    s, t = _flat_pair(scores, truth)
    n_pos = int(t.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AP needs at least one positive")
    cum_tp, cum_fp = _grouped_counts(s, t)
    recall = cum_tp / n_pos
    precision = cum_tp / (cum_tp + cum_fp)
    prev_recall = np.concatenate(([0.0], recall[:-1]))
    return float(((recall - prev_recall) * precision).sum())


def fpr_at_tpr(scores, truth, target: float = 0.95) -> float:
    """FPR at the largest threshold whose TPR reaches the target."""
    if not 0.0 < target <= 1.0:
        raise ArgumentError("target TPR must be in (0, 1]")
    s, t = _flat_pair(scores, truth)
    n_pos = int(t.sum())
    n_neg = t.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("FPR@TPR needs at least one positive and one negative")
    cum_tp, cum_fp = _grouped_counts(s, t)
    tpr = cum_tp / n_pos
    hit = np.flatnonzero(tpr >= target)
    # target <= 1 and the final group reaches TPR 1, so hit is never empty
    return float(cum_fp[hit[0]] / n_neg)


def miou(pred, truth, num_classes: int):
    """Mean IoU over classes present in prediction or truth.

    Truth pixels labeled OOD_ID/IGNORE_ID (or any code >= num_classes) are
    excluded.  Returns (miou, per_class) where per_class holds NaN for
    classes absent from both sides.
    """
    p = pred.data if isinstance(pred, LabelMap) else np.asarray(pred)
    t = truth.data if isinstance(truth, LabelMap) else np.asarray(truth)
    if p.shape != t.shape:
        raise ArgumentError("pred and truth disagree on shape")
    if num_classes < 2:
        raise ArgumentError("need at least 2 classes")
    p = p.reshape(-1).astype(np.int64)
    t = t.reshape(-1).astype(np.int64)
    if p.size and (p.min() < 0 or p.max() >= num_classes):
        raise ArgumentError("prediction codes must be class ids")
    keep = t < num_classes
    conf = confusion_matrix(p[keep], t[keep], num_classes)
    inter = np.diag(conf).astype(np.float64)
    union = conf.sum(axis=0) + conf.sum(axis=1) - inter
    per_class = np.full(num_classes, np.nan)
    present = union > 0
    per_class[present] = inter[present] / union[present]
    if not present.any():
        raise UndefinedMetricError("no class present in prediction or truth")
    return float(per_class[present].mean()), per_class


def confusion_matrix(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> np.ndarray:
    """Counts indexed [truth, pred]; inputs must already be valid class ids."""
    idx = truth * num_classes + pred
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


@dataclass(eq=False)
class OodConfusion:
    """What the net says on anomalous pixels: class votes and confidence."""

    class_counts: np.ndarray
    class_frac: np.ndarray
    confidence_counts: np.ndarray
    n_pixels: int


def ood_confusion_analysis(logits, truth) -> OodConfusion:
    """Histogram predictions and max-softmax confidence over OOD-truth pixels."""
    lam = logits.data if isinstance(logits, LogitMap) else np.asarray(logits, dtype=np.float64)
    t = truth.data if isinstance(truth, LabelMap) else np.asarray(truth)
    if lam.shape[:-1] != t.shape:
        raise ArgumentError("logits and truth disagree on pixel grid")
    num_classes = lam.shape[-1]
    sel = lam.reshape(-1, num_classes)[t.reshape(-1) == OOD_ID]
    n = sel.shape[0]
    class_counts = np.zeros(num_classes, dtype=np.int64)
    conf_counts = np.zeros(20, dtype=np.int64)
    if n:
        win = sel.argmax(axis=1)
        class_counts = np.bincount(win, minlength=num_classes)
        e = np.exp(sel - sel.max(axis=1, keepdims=True))
        conf = (e.max(axis=1) / e.sum(axis=1))
        conf_counts, _ = np.histogram(conf, bins=20, range=(0.0, 1.0))
    frac = class_counts / n if n else class_counts.astype(np.float64)
    return OodConfusion(class_counts, frac, conf_counts, n)


# ---------------------------------------------------------------------------
# Split-level evaluation

@dataclass(eq=False)
class EvalReport:
    """Anomaly-ranking metrics plus segmentation quality over one split."""

    score: str
    auroc: float
    ap: float
    fpr95: float
    miou: float
    per_class_iou: np.ndarray
    confusion: OodConfusion
    n_ood_pixels: int
    n_id_pixels: int

    def rows(self):
        return [
            ("auroc", self.auroc),
            ("ap", self.ap),
            ("fpr95", self.fpr95),
            ("miou", self.miou),
        ]

    def to_kv(self) -> str:
        lines = [f"score={self.score}"]
        lines += [f"{k}={v!r}" for k, v in self.rows()]
        lines.append(f"n_ood_pixels={self.n_ood_pixels}")
        lines.append(f"n_id_pixels={self.n_id_pixels}")
        for c, v in enumerate(self.per_class_iou):
            if np.isfinite(v):
                lines.append(f"iou_class_{c}={v!r}")
        return "\n".join(lines) + "\n"


def _logit_maps_from(source, corpus, split: str):
    """Yield (id, LogitMap) for a split from a net or a dump directory."""
    ids = corpus.ids(split)
    if not ids:
        raise ArgumentError(f"corpus has no {split} split")
    if isinstance(source, (str, Path)):
        root = Path(source)
        maps = []
        for sid in ids:
            path = root / f"{sid}.oodl"
            if not path.is_file():
                raise StateError(f"missing logit dump {path}")
            maps.append(read_logit_dump(path))
        return ids, maps
    # duck-typed net: anything with .params and forward through the package
    from .segnet import forward

    maps = [forward(source, sample.image)[1] for sample in corpus.samples(split)]
    return ids, maps


def evaluate(source, corpus, score_name: str, split: str = "eval") -> EvalReport:
    """Score a split and compute ranking metrics, mIoU, and confusion.

    `source` is a trained net or a directory of per-image logit dumps.
    Pixels labeled IGNORE_ID are dropped everywhere; OOD_ID pixels are the
    ranking positives and are excluded from mIoU.
    """
    from .synth import Corpus, load_corpus

    if score_name not in SCORE_NAMES:
        raise ArgumentError(f"unknown score {score_name!r}; choose from {SCORE_NAMES}")
    if not isinstance(corpus, Corpus):
        corpus = load_corpus(corpus)
    ids, maps = _logit_maps_from(source, corpus, split)
    labels = [s.labels for s in corpus.samples(split)]
    stats = fit_classwise_stats(maps) if score_name == "std_ml" else None

    num_classes = maps[0].num_classes
    all_scores, all_truth = [], []
    conf_counts = None
    class_counts = None
    n_ood = 0
    pooled_conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    for lm, lab in zip(maps, labels):
        if (lm.height, lm.width) != (lab.height, lab.width):
            raise ArgumentError("logit map and labels disagree on size")
        smap = compute_score(score_name, lm, stats)
        keep = lab.data != IGNORE_ID
        all_scores.append(smap.data[keep])
        all_truth.append(lab.data[keep] == OOD_ID)
        part = ood_confusion_analysis(lm, lab)
        n_ood += part.n_pixels
        conf_counts = part.confidence_counts if conf_counts is None else conf_counts + part.confidence_counts
        class_counts = part.class_counts if class_counts is None else class_counts + part.class_counts
        id_keep = lab.data < num_classes
        pred = lm.data.argmax(axis=-1)[id_keep].astype(np.int64)
        pooled_conf += confusion_matrix(pred, lab.data[id_keep].astype(np.int64), num_classes)

    flat_scores = np.concatenate(all_scores)
    flat_truth = np.concatenate(all_truth)
    inter = np.diag(pooled_conf).astype(np.float64)
    union = pooled_conf.sum(axis=0) + pooled_conf.sum(axis=1) - inter
    per_class = np.full(num_classes, np.nan)
    present = union > 0
    per_class[present] = inter[present] / union[present]
    confusion = OodConfusion(
        class_counts, class_counts / n_ood if n_ood else class_counts.astype(float),
        conf_counts, n_ood,
    )
    return EvalReport(
        score=score_name,
        auroc=auroc(flat_scores, flat_truth),
        ap=average_precision(flat_scores, flat_truth),
        fpr95=fpr_at_tpr(flat_scores, flat_truth, 0.95),
        miou=float(per_class[present].mean()),
        per_class_iou=per_class,
        confusion=confusion,
        n_ood_pixels=int(flat_truth.sum()),
        n_id_pixels=int(pooled_conf.sum()),
    )
