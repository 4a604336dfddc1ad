"""Anomaly-aware semantic segmentation at desk scale.

Pipeline stages: synthesize a street-scene corpus, train a small stride-4
segmenter, fine-tune its classification head against copy-pasted anomaly
proxies with a one-vs-rest suppression loss, then score and rank held-out
anomalies with per-pixel statistics.
"""

__version__ = "0.1.0"

from .imagery import (
    IGNORE_ID,
    OOD_ID,
    Image,
    LabelMap,
    LogitMap,
    ScoreMap,
    SegSample,
)

__all__ = [
    "IGNORE_ID",
    "OOD_ID",
    "Image",
    "LabelMap",
    "LogitMap",
    "ScoreMap",
    "SegSample",
    "__version__",
]
