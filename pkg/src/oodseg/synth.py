"""Procedural street-scene corpus with two disjoint anomaly object families.

Scenes are driving-like layouts (sky band, building band with vegetation,
road band with cars and pedestrians) rendered from class color palettes
plus per-pixel texture noise, then passed through a photometric style.
Region edges snap to a 4-pixel grid so the corpus stays learnable for a
stride-4 segmenter.

Anomaly objects come from two generator families that share no parameters:
training proxies are filled simple polygons carrying fine checker or
stripe textures, held-out objects are unions of up to three ellipses
carrying wave or dot textures at the same fine scale.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ArgumentError, FormatError
from .imagery import (
    IGNORE_ID,
    OOD_ID,
    Image,
    LabelMap,
    SegSample,
    read_image,
    read_label_map,
    write_image,
    write_label_map,
)

CLASS_NAMES = ("road", "sky", "building", "vegetation", "car", "pedestrian")
NUM_CLASSES = 6
ROAD, SKY, BUILDING, VEGETATION, CAR, PEDESTRIAN = range(NUM_CLASSES)

RNG_ALGORITHM = "pcg64"
CORPUS_FORMAT = 1

# Base colors per class; instances get jittered copies.
_BASE_COLOR = {
    # extreme per-class colors keep every template far from scene-mean mixes
    ROAD: (0.08, 0.08, 0.10),
    SKY: (0.55, 0.85, 0.98),
    BUILDING: (0.82, 0.30, 0.24),
    VEGETATION: (0.10, 0.62, 0.16),
}
_CAR_PALETTE = ((0.85, 0.10, 0.10), (0.10, 0.20, 0.82), (0.88, 0.78, 0.12))
_PED_PALETTE = ((0.80, 0.12, 0.62), (0.10, 0.68, 0.74))
_NOISE_SIGMA = {
    ROAD: 0.020,
    SKY: 0.010,
    BUILDING: 0.020,
    VEGETATION: 0.030,
    CAR: 0.015,
    PEDESTRIAN: 0.015,
}
_EDGE_BLUR = 0.8


def rng_from(seed: int, *key: int) -> np.random.Generator:
    """Seeded 64-bit generator; key components derive independent streams."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=key)))


def derive_seed(seed: int, *key: int) -> int:
    """A reproducible child seed for handing to another seeded component."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=key)
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


@dataclass(frozen=True)
class StyleDomain:
    """Photometric rendering style: per-channel affine warp over a gamma curve."""

    name: str
    channel_gains: tuple[float, float, float]
    channel_offsets: tuple[float, float, float]
    gamma: float
    noise_sigma: float

    def __post_init__(self):
        if len(self.channel_gains) != 3 or len(self.channel_offsets) != 3:
            raise ArgumentError("style needs 3 gains and 3 offsets")
        if self.gamma <= 0:
            raise ArgumentError("gamma must be positive")
        if self.noise_sigma < 0:
            raise ArgumentError("noise_sigma must be non-negative")


STYLE_DOMAINS = {
    "styleA": StyleDomain("styleA", (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), 1.0, 0.010),
    "styleB": StyleDomain("styleB", (0.70, 1.00, 1.40), (0.10, -0.02, -0.08), 1.60, 0.030),
}


def get_style(name_or_style) -> StyleDomain:
    if isinstance(name_or_style, StyleDomain):
        return name_or_style
    try:
        return STYLE_DOMAINS[name_or_style]
    except KeyError:
        raise ArgumentError(f"unknown style {name_or_style!r}") from None


def _apply_style_array(arr: np.ndarray, style: StyleDomain, rng: np.random.Generator) -> np.ndarray:
    gains = np.asarray(style.channel_gains)
    offsets = np.asarray(style.channel_offsets)
    out = gains * np.power(arr, style.gamma) + offsets
    if style.noise_sigma > 0:
        out = out + rng.normal(0.0, style.noise_sigma, arr.shape)
    return np.clip(out, 0.0, 1.0)


def apply_style(image: Image, style, seed: int) -> Image:
    """Apply a photometric style to an image; output stays clamped to [0, 1]."""
    return Image(_apply_style_array(image.data, get_style(style), rng_from(seed, 0xA5)))


@dataclass(frozen=True)
class SceneSpec:
    """Layout parameters for one generated scene."""

    height: int = 128
    width: int = 256
    style: StyleDomain = STYLE_DOMAINS["styleA"]
    seed: int = 0

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0:
            raise ArgumentError("scene must have positive area")
        if self.height % 4 or self.width % 4:
            raise ArgumentError("scene sides must be multiples of 4")
        if self.height < 32 or self.width < 32:
            raise ArgumentError("scene sides must be at least 32 pixels")

    @property
    def num_classes(self) -> int:
        return NUM_CLASSES


def _snap4(rng: np.random.Generator, lo: int, hi: int) -> int:
    """A multiple of 4 drawn uniformly from [lo, hi] (inclusive, in units of 4)."""
    return 4 * int(rng.integers(lo // 4, hi // 4 + 1))


def generate_scene(spec: SceneSpec) -> SegSample:
    """Render one scene deterministically from spec.seed.

    The road band always keeps at least 30% of the pixels after cars and
    pedestrians are painted on it.
    """
    rng = rng_from(spec.seed, 0)
    h, w = spec.height, spec.width

    labels = np.empty((h, w), dtype=np.uint8)
    img = np.empty((h, w, 3), dtype=np.float64)

    sky_rows = _snap4(rng, max(4, round(0.25 * h)), round(0.35 * h))
    road_rows = _snap4(rng, round(0.38 * h), round(0.47 * h))
    road_top = h - road_rows

    def jitter(base, scale):
        return np.clip(np.asarray(base) + rng.uniform(-scale, scale, 3), 0.02, 0.98)

    labels[:sky_rows] = SKY
    img[:sky_rows] = jitter(_BASE_COLOR[SKY], 0.04)
    labels[road_top:] = ROAD
    img[road_top:] = jitter(_BASE_COLOR[ROAD], 0.03)

    # Building band as vertical slabs with per-slab facade colors.
    labels[sky_rows:road_top] = BUILDING
    n_slabs = int(rng.integers(3, 6))
    edges = np.unique([0, *(_snap4(rng, 8, w - 8) for _ in range(n_slabs - 1)), w])
    for x0, x1 in zip(edges[:-1], edges[1:]):
        img[sky_rows:road_top, x0:x1] = jitter(_BASE_COLOR[BUILDING], 0.07)

    # Vegetation patches inside the building band.
    band = road_top - sky_rows
    for _ in range(int(rng.integers(2, 5))):
        vh = min(_snap4(rng, 8, 24), band)
        vw = min(_snap4(rng, 16, 48), w)
        r0 = _snap4(rng, sky_rows, road_top - vh)
        c0 = _snap4(rng, 0, w - vw)
        labels[r0 : r0 + vh, c0 : c0 + vw] = VEGETATION
        img[r0 : r0 + vh, c0 : c0 + vw] = jitter(_BASE_COLOR[VEGETATION], 0.06)

    # Cars and pedestrians sit inside the road band.  At the default size
    # their worst-case total area leaves the road above the 30% floor; tiny
    # scenes can overrun it, so placements that would are skipped (the draw
    # sequence stays fixed either way).
    road_floor = int(np.ceil(0.30 * h * w))

    def paint_on_road(r0, c0, oh, ow, cls, color):
        box = (slice(r0, r0 + oh), slice(c0, c0 + ow))
        removed = int((labels[box] == ROAD).sum())
        if int((labels == ROAD).sum()) - removed < road_floor:
            return
        labels[box] = cls
        img[box] = color

    for _ in range(int(rng.integers(1, 4))):
        ch_, cw = _snap4(rng, 8, 12), _snap4(rng, 16, 24)
        r0 = _snap4(rng, road_top, h - ch_)
        c0 = _snap4(rng, 0, w - cw)
        color = jitter(_CAR_PALETTE[int(rng.integers(len(_CAR_PALETTE)))], 0.04)
        paint_on_road(r0, c0, ch_, cw, CAR, color)
    for _ in range(int(rng.integers(1, 3))):
        ph, pw = min(_snap4(rng, 12, 16), road_rows), 8
        r0 = _snap4(rng, road_top, h - ph)
        c0 = _snap4(rng, 0, w - pw)
        color = jitter(_PED_PALETTE[int(rng.integers(len(_PED_PALETTE)))], 0.04)
        paint_on_road(r0, c0, ph, pw, PEDESTRIAN, color)

    # soft optical transitions between regions; labels stay hard
    img = ndimage.gaussian_filter(img, sigma=(_EDGE_BLUR, _EDGE_BLUR, 0.0))

    sigma = np.zeros((h, w), dtype=np.float64)
    for cls, s in _NOISE_SIGMA.items():
        sigma[labels == cls] = s
    img = np.clip(img + rng.normal(0.0, 1.0, (h, w, 3)) * sigma[:, :, None], 0.0, 1.0)
    img = _apply_style_array(img, spec.style, rng)
    return SegSample(Image(img), LabelMap(labels))


# ---------------------------------------------------------------------------
# Anomaly object generators

@dataclass(frozen=True, eq=False)
class OodObject:
    """A paste-ready anomaly: boolean mask plus texture over the mask bbox."""

    mask: np.ndarray
    texture: Image
    family: str
    shape_kind: str
    texture_kind: str

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        if mask.ndim != 2 or not mask.any():
            raise ArgumentError("object mask must be a non-empty 2-d boolean array")
        if mask.shape != self.texture.data.shape[:2]:
            raise ArgumentError("mask and texture disagree on size")
        if self.family not in ("proxy", "test"):
            raise ArgumentError(f"unknown object family {self.family!r}")
        frozen = np.array(mask, copy=True)
        frozen.setflags(write=False)
        object.__setattr__(self, "mask", frozen)

    @property
    def height(self) -> int:
        return self.mask.shape[0]

    @property
    def width(self) -> int:
        return self.mask.shape[1]


_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


def _largest_component(mask: np.ndarray) -> np.ndarray:
    lbl, n = ndimage.label(mask, structure=_CROSS)
    if n == 0:
        raise ArgumentError("degenerate object mask")
    if n > 1:
        sizes = np.bincount(lbl.ravel())
        sizes[0] = 0
        mask = lbl == int(np.argmax(sizes))
    return mask


def _crop_to_bbox(mask: np.ndarray):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return (slice(rows[0], rows[-1] + 1), slice(cols[0], cols[-1] + 1))


def _two_colors(rng: np.random.Generator):
    """A jittered light/dark pair spanning the scene's luminance extremes.

    Anchoring the pair at the brightest and darkest scene templates keeps
    cell contrast high even after moment-matching style alignment, and
    their mixture sits near the whole-scene mean, so alignment stays close
    to an identity transform on the fill.
    """
    c1 = np.clip(np.asarray(_BASE_COLOR[SKY]) + rng.uniform(-0.06, 0.06, 3), 0.02, 0.98)
    c2 = np.clip(np.asarray(_BASE_COLOR[ROAD]) + rng.uniform(-0.06, 0.06, 3), 0.02, 0.98)
    return c1, c2


def _polygon_mask(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Fill a star-shaped simple polygon by even-odd crossing counts."""
    n_vert = int(rng.integers(5, 10))
    angles = np.sort(rng.uniform(0.0, 2.0 * np.pi, n_vert))
    radial = rng.uniform(0.55, 0.98, n_vert)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    vx = cx + radial * np.cos(angles) * (w / 2.0 - 1.0)
    vy = cy + radial * np.sin(angles) * (h / 2.0 - 1.0)
    px, py = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    inside = np.zeros((h, w), dtype=bool)
    for k in range(n_vert):
        x1, y1 = vx[k], vy[k]
        x2, y2 = vx[(k + 1) % n_vert], vy[(k + 1) % n_vert]
        if y1 == y2:
            continue
        crosses = ((y1 > py) != (y2 > py)) & (px < (x2 - x1) * (py - y1) / (y2 - y1) + x1)
        inside ^= crosses
    return inside


def _ellipse_union_mask(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Union of up to three overlapping ellipses (overlap keeps it connected)."""
    py, px = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    a0 = (w / 2.0 - 1.0) * rng.uniform(0.55, 0.9)
    b0 = (h / 2.0 - 1.0) * rng.uniform(0.55, 0.9)
    mask = ((px - cx) / a0) ** 2 + ((py - cy) / b0) ** 2 <= 1.0
    for _ in range(int(rng.integers(0, 3))):
        dx = rng.uniform(-0.55, 0.55) * a0
        dy = rng.uniform(-0.55, 0.55) * b0
        a = a0 * rng.uniform(0.35, 0.75)
        b = b0 * rng.uniform(0.35, 0.75)
        mask |= ((px - cx - dx) / a) ** 2 + ((py - cy - dy) / b) ** 2 <= 1.0
    return mask


def _proxy_texture(rng: np.random.Generator, h: int, w: int):
    # 2-px cells repeat every 4 px, the encoder's total stride, so every
    # interior window sees the same pattern phase and the fill maps to a
    # near-constant feature per object instead of a speckled one
    c1, c2 = _two_colors(rng)
    yy, xx = np.mgrid[0:h, 0:w]
    if rng.random() < 0.5:
        kind = "checker"
        pattern = ((yy // 2) + (xx // 2)) % 2
    else:
        kind = "stripe"
        axis = int(rng.integers(3))
        coord = (yy, xx, yy + xx)[axis]
        pattern = (coord // 2) % 2
    tex = np.where(pattern[:, :, None] == 0, c1, c2)
    tex = np.clip(tex + rng.normal(0.0, 0.02, (h, w, 3)), 0.0, 1.0)
    return tex, kind


def _test_texture(rng: np.random.Generator, h: int, w: int):
    # same 4-px period as the proxy fills but different generators
    c1, c2 = _two_colors(rng)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if rng.random() < 0.5:
        kind = "wave"
        axis = int(rng.integers(3))
        coord = (yy, xx, yy + xx)[axis]
        v = 0.5 + 0.5 * np.sin(np.pi / 2.0 * coord + rng.uniform(0.0, 2.0 * np.pi))
    else:
        kind = "dots"
        v = (((yy % 4) < 2) & ((xx % 4) < 2)).astype(np.float64)
        if rng.random() < 0.5:
            v = 1.0 - v
    tex = c1[None, None, :] + (c2 - c1)[None, None, :] * v[:, :, None]
    tex = np.clip(tex + rng.normal(0.0, 0.02, (h, w, 3)), 0.0, 1.0)
    return tex, kind


def generate_ood_object(family: str, seed: int) -> OodObject:
    """Draw one anomaly object from the named family.

    The two families share no shape or texture generators: proxies are
    polygon masks with checker/stripe fills, test objects are ellipse
    unions with wave/dot fills.
    """
    if family == "proxy":
        rng = rng_from(seed, 1)
        h = int(rng.integers(16, 49))
        w = int(rng.integers(20, 65))
        mask = _largest_component(_polygon_mask(rng, h, w))
        tex, kind = _proxy_texture(rng, h, w)
        shape_kind = "polygon"
    elif family == "test":
        rng = rng_from(seed, 2)
        h = int(rng.integers(16, 49))
        w = int(rng.integers(20, 65))
        mask = _largest_component(_ellipse_union_mask(rng, h, w))
        tex, kind = _test_texture(rng, h, w)
        shape_kind = "ellipse_union"
    else:
        raise ArgumentError(f"unknown object family {family!r}")
    box = _crop_to_bbox(mask)
    return OodObject(mask[box], Image(tex[box]), family, shape_kind, kind)


def make_object_source(family: str, stain=None):
    """A seed -> OodObject callable; `stain` optionally restyles textures."""
    stain_style = get_style(stain) if stain is not None else None

    def source(seed: int) -> OodObject:
        obj = generate_ood_object(family, seed)
        if stain_style is None:
            return obj
        stained = apply_style(obj.texture, stain_style, derive_seed(seed, 77))
        return OodObject(obj.mask, stained, obj.family, obj.shape_kind, obj.texture_kind)

    return source


# ---------------------------------------------------------------------------
# Corpus builder and loader

@dataclass(frozen=True)
class CorpusSummary:
    root: Path
    n_train: int
    n_val: int
    n_ood_eval: int
    eval_object_families: frozenset
    eval_object_records: tuple


def build_corpus(
    n_train: int,
    n_val: int,
    n_ood_eval: int,
    style,
    seed: int,
    out_dir,
    height: int = 128,
    width: int = 256,
) -> CorpusSummary:
    """Generate and write a train/val/eval corpus under out_dir.

    Eval scenes receive 1-2 held-out-family objects, moment-aligned to the
    host scene (an anomaly photographed in-domain shares the domain's
    photometry) and pasted at uniformly random positions with OOD_ID labels.
    """
    from .augment import extract_style, paste, style_align

    if n_train < 1 or n_val < 1 or n_ood_eval < 1:
        raise ArgumentError("corpus needs at least one scene per split")
    style = get_style(style)
    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)

    splits = ["train"] * n_train + ["val"] * n_val + ["eval"] * n_ood_eval
    rows = []
    records = []
    families = set()
    for i, split in enumerate(splits):
        scene_seed = derive_seed(seed, 10, i)
        sample = generate_scene(SceneSpec(height, width, style, scene_seed))
        has_ood = 0
        if split == "eval":
            has_ood = 1
            orng = rng_from(scene_seed, 3)
            scene_stats = extract_style(sample.image)
            for _ in range(int(orng.integers(1, 3))):
                obj = generate_ood_object("test", int(orng.integers(0, 2**62)))
                obj = style_align(obj, scene_stats)
                r0 = int(orng.integers(0, height - obj.height + 1))
                c0 = int(orng.integers(0, width - obj.width + 1))
                sample = paste(sample, obj, (r0, c0))
                families.add(obj.family)
                records.append((f"{i:04d}", obj.family, obj.shape_kind, obj.texture_kind))
        sid = f"{i:04d}"
        write_image(sample.image, root / "images" / f"{sid}.ppm")
        write_label_map(sample.labels, root / "labels" / f"{sid}.pgm")
        rows.append((sid, split, style.name, has_ood, scene_seed))

    with open(root / "index.csv", "w", newline="") as fh:
        fh.write(f"# rng={RNG_ALGORITHM} corpus_format={CORPUS_FORMAT}\n")
        writer = csv.writer(fh)
        writer.writerow(["id", "split", "style", "has_ood", "seed"])
        writer.writerows(rows)
    with open(root / "construction.log", "w") as fh:
        for rec in records:
            fh.write("id={} family={} shape={} texture={}\n".format(*rec))
    return CorpusSummary(root, n_train, n_val, n_ood_eval, frozenset(families), tuple(records))


class Corpus:
    """Lazy per-split loader over a corpus directory."""

    def __init__(self, root):
        self.root = Path(root)
        index = self.root / "index.csv"
        if not index.is_file():
            raise FormatError(f"no index.csv under {self.root}")
        self._entries = []
        with open(index, newline="") as fh:
            lines = [ln for ln in fh if not ln.startswith("#")]
        reader = csv.DictReader(lines)
        expected = ["id", "split", "style", "has_ood", "seed"]
        if reader.fieldnames != expected:
            raise FormatError(f"index columns {reader.fieldnames} != {expected}")
        for row in reader:
            self._entries.append(
                (row["id"], row["split"], row["style"], int(row["has_ood"]), int(row["seed"]))
            )
        self._cache = {}

    def ids(self, split: str) -> list[str]:
        return [e[0] for e in self._entries if e[1] == split]

    def samples(self, split: str) -> list[SegSample]:
        if split not in self._cache:
            loaded = []
            for sid in self.ids(split):
                img = read_image(self.root / "images" / f"{sid}.ppm")
                lab = read_label_map(self.root / "labels" / f"{sid}.pgm")
                loaded.append(SegSample(img, lab))
            self._cache[split] = loaded
        return self._cache[split]


def load_corpus(root) -> Corpus:
    return Corpus(root)
