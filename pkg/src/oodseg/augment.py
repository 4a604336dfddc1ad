"""Copy-paste anomaly augmentation with photometric moment alignment.

Pasted objects tend to advertise themselves through a color-statistics gap
with the host scene; aligning each object's per-channel mean and standard
deviation to the scene before pasting removes that shortcut so training
has to rely on shape and texture instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError
from .imagery import OOD_ID, Image, LabelMap, SegSample
from .synth import OodObject, rng_from

STD_FLOOR = 1e-6


@dataclass(frozen=True)
class MixConfig:
    """Knobs for anomaly_mix."""

    mix_probability: float = 0.1
    style_align: bool = True
    max_objects_per_scene: int = 1
    placement: str = "uniform"

    def __post_init__(self):
        if not 0.0 <= self.mix_probability <= 1.0:
            raise ArgumentError(f"mix_probability must be in [0, 1], got {self.mix_probability}")
        if self.max_objects_per_scene < 1:
            raise ArgumentError("max_objects_per_scene must be at least 1")
        if self.placement != "uniform":
            raise ArgumentError(f"unknown placement policy {self.placement!r}")


@dataclass(frozen=True, eq=False)
class ChannelStats:
    """Per-channel mean and standard deviation; std is floored at 1e-6."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        if mean.shape != (3,) or std.shape != (3,):
            raise ArgumentError("channel stats must have shape (3,)")
        if (std < 0).any():
            raise ArgumentError("std must be non-negative")
        std = np.maximum(std, STD_FLOOR)
        mean.setflags(write=False)
        std.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)


def extract_style(image: Image, region: np.ndarray | None = None) -> ChannelStats:
    """Population mean/std per channel over the whole image or a boolean region."""
    arr = image.data
    if region is None:
        pixels = arr.reshape(-1, 3)
    else:
        region = np.asarray(region, dtype=bool)
        if region.shape != arr.shape[:2]:
            raise ArgumentError("region mask must match the image size")
        pixels = arr[region]
    if pixels.shape[0] == 0:
        raise ArgumentError("cannot extract style from an empty region")
    return ChannelStats(pixels.mean(axis=0), pixels.std(axis=0))


def style_align(obj: OodObject, target: ChannelStats) -> OodObject:
    """Affinely remap the object texture so its masked moments match target.

    The map is exact when no clamping occurs; a (near-)constant texture has
    its std floored, which recenters it onto the target mean.
    """
    src = extract_style(obj.texture, obj.mask)
    arr = obj.texture.data.copy()
    vals = arr[obj.mask]
    arr[obj.mask] = np.clip((vals - src.mean) / src.std * target.std + target.mean, 0.0, 1.0)
    return OodObject(obj.mask, Image(arr), obj.family, obj.shape_kind, obj.texture_kind)


def paste(sample: SegSample, obj: OodObject, position: tuple[int, int], seed: int | None = None) -> SegSample:
    """Hard-paste the object; masked pixels get its texture and OOD_ID labels.

    Pixels outside the mask are untouched.  The seed parameter is accepted
    for call-site symmetry with the stochastic stages and is unused.
    """
    r0, c0 = int(position[0]), int(position[1])
    h, w = sample.labels.height, sample.labels.width
    if r0 < 0 or c0 < 0 or r0 + obj.height > h or c0 + obj.width > w:
        raise ArgumentError(
            f"object {obj.mask.shape} at {(r0, c0)} exceeds scene bounds ({h}, {w})"
        )
    img = sample.image.data.copy()
    lab = sample.labels.data.copy()
    win = (slice(r0, r0 + obj.height), slice(c0, c0 + obj.width))
    img[win][obj.mask] = obj.texture.data[obj.mask]
    lab[win][obj.mask] = OOD_ID
    return SegSample(Image(img), LabelMap(lab))


def anomaly_mix(sample: SegSample, cfg: MixConfig, object_source, seed: int) -> SegSample:
    """With probability cfg.mix_probability, paste anomaly objects in.

    Draw order is fixed (gate, count, then per object: source seed and
    position) so a given seed always produces the same output.  Objects are
    aligned against the statistics of the original scene, and positions are
    uniform over all in-bounds placements.
    """
    rng = rng_from(seed, 7)
    if rng.random() >= cfg.mix_probability:
        return sample
    if cfg.max_objects_per_scene == 1:
        count = 1
    else:
        count = int(rng.integers(1, cfg.max_objects_per_scene + 1))
    h, w = sample.labels.height, sample.labels.width
    scene_stats = extract_style(sample.image) if cfg.style_align else None
    out = sample
    for _ in range(count):
        obj = object_source(int(rng.integers(0, 2**62)))
        if scene_stats is not None:
            obj = style_align(obj, scene_stats)
        if obj.height > h or obj.width > w:
            raise ArgumentError("object larger than the scene")
        r0 = int(rng.integers(0, h - obj.height + 1))
        c0 = int(rng.integers(0, w - obj.width + 1))
        out = paste(out, obj, (r0, c0))
    return out
