"""A small stride-4 convolutional segmenter with hand-rolled backprop.

Architecture (fixed): 3x3 conv stride 2 (3->16) + ReLU, 3x3 conv stride 2
(16->32) + ReLU, 3x3 conv stride 1 (32->32) + ReLU, 1x1 classification
head (32->C), then a fixed bilinear x4 upsampler back to input resolution.
All arithmetic is float64 and fully deterministic for a given seed.

The upsampler is applied as a dense separable interpolation matrix, so its
backward pass is the exact transpose by construction.  Training transports
the class loss through the upsampled logits and the outlier loss through
the coarse pre-upsample logits; fine-tuning freezes everything except the
head and must leave backbone bytes untouched.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .augment import MixConfig, anomaly_mix
from .errors import ArgumentError, FormatError, StateError, TruncationError
from .imagery import Image, LabelMap, LogitMap, SegSample
from .oodloss import LossConfig, combined_loss, id_cross_entropy
from .synth import Corpus, derive_seed, load_corpus, make_object_source, rng_from

UPSAMPLE_FACTOR = 4
ARCH_TAG = "conv3x3x2-16-32-32/head1x1/up4"
_CHECKPOINT_MAGIC = b"OSCK"
_CHECKPOINT_VERSION = 1

BACKBONE_KEYS = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "conv3_w", "conv3_b")
HEAD_KEYS = ("head_w", "head_b")
PARAM_KEYS = BACKBONE_KEYS + HEAD_KEYS

DEFAULT_TRAIN_LR = 3e-3
DEFAULT_FINETUNE_LR = 4e-3


def _param_shapes(num_classes: int) -> dict:
    return {
        "conv1_w": (3, 3, 3, 16),
        "conv1_b": (16,),
        "conv2_w": (3, 3, 16, 32),
        "conv2_b": (32,),
        "conv3_w": (3, 3, 32, 32),
        "conv3_b": (32,),
        "head_w": (32, num_classes),
        "head_b": (num_classes,),
    }


class SegNet:
    """Parameter container; `version` is bumped on every in-place update."""

    def __init__(self, params: dict, num_classes: int):
        shapes = _param_shapes(num_classes)
        if set(params) != set(PARAM_KEYS):
            raise ArgumentError(f"params must have keys {PARAM_KEYS}")
        for k in PARAM_KEYS:
            arr = np.asarray(params[k], dtype=np.float64)
            if arr.shape != shapes[k]:
                raise ArgumentError(f"{k} must have shape {shapes[k]}, got {arr.shape}")
            params[k] = arr
        self.params = {k: params[k] for k in PARAM_KEYS}
        self.num_classes = num_classes
        self.version = 0


def init_segnet(num_classes: int = 6, seed: int = 0) -> SegNet:
    """He-normal weights, zero biases, drawn from a seeded stream."""
    if num_classes < 2:
        raise ArgumentError("need at least 2 classes")
    rng = rng_from(seed, 11)
    params = {}
    for k, shape in _param_shapes(num_classes).items():
        if k.endswith("_b"):
            params[k] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[:-1]))
            params[k] = rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)
    return SegNet(params, num_classes)


# ---------------------------------------------------------------------------
# Conv kernels (batched; one BLAS matmul per kernel offset, no im2col buffer)

def _conv_fwd(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int) -> np.ndarray:
    bb, h, wd, _ = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ho = (h - 1) // stride + 1
    wo = (wd - 1) // stride + 1
    hi = stride * (ho - 1) + 1
    wi = stride * (wo - 1) + 1
    out = np.zeros((bb, ho, wo, w.shape[3]))
    for i in range(3):
        for j in range(3):
            out += xp[:, i : i + hi : stride, j : j + wi : stride, :] @ w[i, j]
    out += b
    return out


def _conv_bwd(x: np.ndarray, w: np.ndarray, stride: int, gout: np.ndarray, need_gx: bool):
    bb, ho, wo, co = gout.shape
    ci = x.shape[3]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    hi = stride * (ho - 1) + 1
    wi = stride * (wo - 1) + 1
    gmat = gout.reshape(bb * ho * wo, co)
    gw = np.empty((3, 3, ci, co))
    gb = gmat.sum(axis=0)
    gxp = np.zeros(xp.shape) if need_gx else None
    for i in range(3):
        for j in range(3):
            xs = xp[:, i : i + hi : stride, j : j + wi : stride, :]
            gw[i, j] = np.ascontiguousarray(xs).reshape(-1, ci).T @ gmat
            if need_gx:
                gxp[:, i : i + hi : stride, j : j + wi : stride, :] += gout @ w[i, j].T
    gx = gxp[:, 1:-1, 1:-1, :] if need_gx else None
    return gw, gb, gx


# ---------------------------------------------------------------------------
# Bilinear x4 upsampler as dense separable matrices (exact transpose free)

_INTERP_CACHE: dict = {}


def _interp_matrix(n_in: int, factor: int) -> np.ndarray:
    key = (n_in, factor)
    if key not in _INTERP_CACHE:
        n_out = n_in * factor
        out = np.arange(n_out, dtype=np.float64)
        src = out / factor
        i0 = np.floor(src).astype(int)
        t = src - i0
        i1 = np.minimum(i0 + 1, n_in - 1)
        mat = np.zeros((n_out, n_in))
        np.add.at(mat, (np.arange(n_out), i0), 1.0 - t)
        np.add.at(mat, (np.arange(n_out), i1), t)
        _INTERP_CACHE[key] = mat
    return _INTERP_CACHE[key]


def bilinear_upsample(x: np.ndarray, factor: int = UPSAMPLE_FACTOR) -> np.ndarray:
    """Separable bilinear upsampling; output (4i, 4j) equals input (i, j)."""
    rows = _interp_matrix(x.shape[1], factor)
    cols = _interp_matrix(x.shape[2], factor)
    xr = np.einsum("oi,bivc->bovc", rows, x, optimize=True)
    return np.einsum("pj,bojc->bopc", cols, xr, optimize=True)


def bilinear_upsample_transpose(gy: np.ndarray, factor: int = UPSAMPLE_FACTOR) -> np.ndarray:
    """Exact adjoint of bilinear_upsample (same matrices, transposed)."""
    rows = _interp_matrix(gy.shape[1] // factor, factor)
    cols = _interp_matrix(gy.shape[2] // factor, factor)
    gxr = np.einsum("pj,bopc->bojc", cols, gy, optimize=True)
    return np.einsum("oi,bovc->bivc", rows, gxr, optimize=True)


# ---------------------------------------------------------------------------
# Forward / backward

@dataclass(eq=False)
class ForwardCache:
    x: np.ndarray
    z1: np.ndarray
    a1: np.ndarray
    z2: np.ndarray
    a2: np.ndarray
    z3: np.ndarray
    a3: np.ndarray
    pre: np.ndarray
    post: np.ndarray
    version: int


def _as_batch(images) -> np.ndarray:
    if isinstance(images, Image):
        return images.data[None]
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[3] != 3:
        raise ArgumentError(f"expected (B, h, w, 3) images, got {arr.shape}")
    return arr


def run_forward(net: SegNet, images) -> ForwardCache:
    """Batched forward pass keeping every activation for backward."""
    x = _as_batch(images)
    if x.shape[1] % UPSAMPLE_FACTOR or x.shape[2] % UPSAMPLE_FACTOR:
        raise ArgumentError("input sides must be multiples of 4")
    p = net.params
    z1 = _conv_fwd(x, p["conv1_w"], p["conv1_b"], 2)
    a1 = np.maximum(z1, 0.0)
    z2 = _conv_fwd(a1, p["conv2_w"], p["conv2_b"], 2)
    a2 = np.maximum(z2, 0.0)
    z3 = _conv_fwd(a2, p["conv3_w"], p["conv3_b"], 1)
    a3 = np.maximum(z3, 0.0)
    pre = a3 @ p["head_w"] + p["head_b"]
    post = bilinear_upsample(pre)
    return ForwardCache(x, z1, a1, z2, a2, z3, a3, pre, post, net.version)


def forward(net: SegNet, image) -> tuple[LogitMap, LogitMap]:
    """Public single-image forward: (coarse logits, upsampled logits)."""
    cache = run_forward(net, image)
    return LogitMap(cache.pre[0]), LogitMap(cache.post[0])


def backward(
    net: SegNet,
    cache: ForwardCache,
    grad_pre: np.ndarray | None = None,
    grad_post: np.ndarray | None = None,
    freeze_backbone: bool = False,
) -> dict:
    """Parameter gradients for a loss with given logit gradients.

    Raises StateError if the parameters changed since the forward pass.
    Frozen-backbone calls return exact zeros for backbone keys.
    """
    if cache.version != net.version:
        raise StateError("stale forward cache: parameters changed since run_forward")
    if grad_pre is None and grad_post is None:
        raise ArgumentError("need a gradient for at least one logit head")
    g_pre = np.zeros_like(cache.pre) if grad_pre is None else np.asarray(grad_pre, dtype=np.float64)
    if g_pre.shape != cache.pre.shape:
        raise ArgumentError(f"grad_pre must have shape {cache.pre.shape}")
    if grad_post is not None:
        gp = np.asarray(grad_post, dtype=np.float64)
        if gp.shape != cache.post.shape:
            raise ArgumentError(f"grad_post must have shape {cache.post.shape}")
        g_pre = g_pre + bilinear_upsample_transpose(gp)

    p = net.params
    grads = {}
    flat_a3 = cache.a3.reshape(-1, cache.a3.shape[-1])
    flat_g = g_pre.reshape(-1, net.num_classes)
    grads["head_w"] = flat_a3.T @ flat_g
    grads["head_b"] = flat_g.sum(axis=0)
    if freeze_backbone:
        for k in BACKBONE_KEYS:
            grads[k] = np.zeros_like(p[k])
        return grads
    ga3 = (flat_g @ p["head_w"].T).reshape(cache.a3.shape)
    gz3 = ga3 * (cache.z3 > 0)
    gw3, gb3, ga2 = _conv_bwd(cache.a2, p["conv3_w"], 1, gz3, True)
    gz2 = ga2 * (cache.z2 > 0)
    gw2, gb2, ga1 = _conv_bwd(cache.a1, p["conv2_w"], 2, gz2, True)
    gz1 = ga1 * (cache.z1 > 0)
    gw1, gb1, _ = _conv_bwd(cache.x, p["conv1_w"], 2, gz1, False)
    grads.update(
        conv1_w=gw1, conv1_b=gb1, conv2_w=gw2, conv2_b=gb2, conv3_w=gw3, conv3_b=gb3
    )
    return grads


# ---------------------------------------------------------------------------
# AdamW with polynomial learning-rate decay

@dataclass(eq=False)
class OptimState:
    """Decoupled-weight-decay Adam over a named subset of parameters."""

    m: dict
    v: dict
    step: int
    base_lr: float
    total_steps: int
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    poly_power: float = 0.9


def make_optim_state(
    params: dict,
    keys,
    total_steps: int,
    base_lr: float = 1e-5,
    weight_decay: float = 0.01,
) -> OptimState:
    if total_steps < 1:
        raise ArgumentError("total_steps must be positive")
    if base_lr <= 0:
        raise ArgumentError("base_lr must be positive")
    keys = tuple(keys)
    return OptimState(
        m={k: np.zeros_like(params[k]) for k in keys},
        v={k: np.zeros_like(params[k]) for k in keys},
        step=0,
        base_lr=base_lr,
        total_steps=total_steps,
        weight_decay=weight_decay,
    )


def poly_lr(state: OptimState) -> float:
    """base_lr * (1 - t/total)^power with t = completed steps."""
    remaining = max(0.0, 1.0 - state.step / state.total_steps)
    return state.base_lr * remaining**state.poly_power


def adamw_step(state: OptimState, params: dict, grads: dict) -> float:
    """One update over the state's keys; returns the learning rate used.

    Weight decay is decoupled: it scales the parameter directly and never
    enters the moment estimates.
    """
    lr = poly_lr(state)
    state.step += 1
    b1c = 1.0 - state.beta1**state.step
    b2c = 1.0 - state.beta2**state.step
    for k in state.m:
        g = grads[k]
        state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g
        m_hat = state.m[k] / b1c
        v_hat = state.v[k] / b2c
        params[k] = params[k] - lr * m_hat / (np.sqrt(v_hat) + state.eps) - lr * state.weight_decay * params[k]
    return lr


def apply_step(net: SegNet, state: OptimState, grads: dict) -> float:
    lr = adamw_step(state, net.params, grads)
    net.version += 1
    return lr


# ---------------------------------------------------------------------------
# Label downsampling for the coarse-grid loss

def downsample_labels(labels, factor: int = UPSAMPLE_FACTOR) -> LabelMap:
    """Nearest-neighbor: each factor x factor block keeps its (1,1)-offset
    sample (general factor: offset (factor - 1) // 2)."""
    arr = labels.data if isinstance(labels, LabelMap) else np.asarray(labels)
    if arr.ndim != 2:
        raise ArgumentError("labels must be 2-d")
    if arr.shape[0] % factor or arr.shape[1] % factor:
        raise ArgumentError(f"label sides must be multiples of {factor}")
    off = (factor - 1) // 2
    return LabelMap(arr[off::factor, off::factor])


def _downsample_array(arr: np.ndarray, factor: int = UPSAMPLE_FACTOR) -> np.ndarray:
    off = (factor - 1) // 2
    return arr[:, off::factor, off::factor]


# ---------------------------------------------------------------------------
# Checkpoints

def save_checkpoint(net: SegNet, path, optim: OptimState | None = None) -> None:
    """Versioned little-endian binary: arch tag, params, optional optimizer."""
    buf = io.BytesIO()
    buf.write(_CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", _CHECKPOINT_VERSION))
    tag = ARCH_TAG.encode("ascii")
    buf.write(struct.pack("<H", len(tag)))
    buf.write(tag)
    buf.write(struct.pack("<I", net.num_classes))

    def write_named(name: str, arr: np.ndarray):
        enc = name.encode("ascii")
        buf.write(struct.pack("<H", len(enc)))
        buf.write(enc)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.astype("<f8").tobytes())

    buf.write(struct.pack("<I", len(PARAM_KEYS)))
    for k in PARAM_KEYS:
        write_named(k, net.params[k])
    if optim is None:
        buf.write(struct.pack("<B", 0))
    else:
        buf.write(struct.pack("<B", 1))
        buf.write(
            struct.pack(
                "<QQdddddd",
                optim.step,
                optim.total_steps,
                optim.base_lr,
                optim.beta1,
                optim.beta2,
                optim.eps,
                optim.weight_decay,
                optim.poly_power,
            )
        )
        keys = sorted(optim.m)
        buf.write(struct.pack("<I", len(keys)))
        for k in keys:
            write_named(k, optim.m[k])
            write_named(k, optim.v[k])
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise TruncationError("checkpoint ends mid-record")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path):
    """Returns (net, optim_state_or_None)."""
    rd = _Reader(open(path, "rb").read())
    if rd.take(4) != _CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint file")
    (version,) = rd.unpack("<I")
    if version != _CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (tag_len,) = rd.unpack("<H")
    tag = rd.take(tag_len).decode("ascii")
    if tag != ARCH_TAG:
        raise FormatError(f"architecture tag {tag!r} does not match {ARCH_TAG!r}")
    (num_classes,) = rd.unpack("<I")

    def read_named():
        (name_len,) = rd.unpack("<H")
        name = rd.take(name_len).decode("ascii")
        (ndim,) = rd.unpack("<B")
        shape = rd.unpack(f"<{ndim}I")
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(rd.take(count * 8), dtype="<f8").reshape(shape).astype(np.float64)
        return name, arr

    (n_params,) = rd.unpack("<I")
    params = dict(read_named() for _ in range(n_params))
    net = SegNet(params, num_classes)
    (has_optim,) = rd.unpack("<B")
    optim = None
    if has_optim:
        step, total_steps, base_lr, b1, b2, eps, wd, power = rd.unpack("<QQdddddd")
        (n_keys,) = rd.unpack("<I")
        m, v = {}, {}
        for _ in range(n_keys):
            name, arr_m = read_named()
            _, arr_v = read_named()
            m[name], v[name] = arr_m, arr_v
        optim = OptimState(m, v, step, base_lr, total_steps, b1, b2, eps, wd, power)
    if rd.pos != len(rd.blob):
        raise FormatError("trailing bytes after checkpoint payload")
    return net, optim


# ---------------------------------------------------------------------------
# Training loops

@dataclass(frozen=True)
class TrainConfig:
    """Shared knobs for train() and finetune()."""

    epochs: int = 20
    batch_size: int = 4
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    mix: MixConfig = field(default_factory=MixConfig)
    freeze_backbone: bool = False
    base_lr: float | None = None
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.epochs < 1:
            raise ArgumentError("epochs must be positive")
        if self.batch_size < 1:
            raise ArgumentError("batch_size must be positive")
        if self.base_lr is not None and self.base_lr <= 0:
            raise ArgumentError("base_lr must be positive")


def _val_miou(net: SegNet, val_samples, num_classes: int, chunk: int = 8) -> float:
    """Pooled-confusion mIoU over a sample list."""
    from .metrics import confusion_matrix

    pooled = np.zeros((num_classes, num_classes), dtype=np.int64)
    for i in range(0, len(val_samples), chunk):
        batch = val_samples[i : i + chunk]
        x = np.stack([s.image.data for s in batch])
        post = run_forward(net, x).post
        pred = post.argmax(axis=-1)
        for b, s in enumerate(batch):
            lab = s.labels.data
            keep = lab < num_classes
            pooled += confusion_matrix(
                pred[b][keep].astype(np.int64), lab[keep].astype(np.int64), num_classes
            )
    inter = np.diag(pooled).astype(np.float64)
    union = pooled.sum(axis=0) + pooled.sum(axis=1) - inter
    present = union > 0
    return float((inter[present] / union[present]).mean())


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def train(net: SegNet, corpus, cfg: TrainConfig):
    """Train all parameters with pixel cross-entropy on the train split.

    Returns per-epoch log rows: epoch, lr, loss_id, loss_ood (always 0 here),
    val_miou.  Fully deterministic for a given (net, corpus, cfg.seed).
    """
    if cfg.freeze_backbone:
        raise ArgumentError("train() updates the whole net; use finetune() to freeze")
    if not isinstance(corpus, Corpus):
        corpus = load_corpus(corpus)
    samples = corpus.samples("train")
    if not samples:
        raise ArgumentError("corpus has no train split")
    val = corpus.samples("val")
    steps_per_epoch = -(-len(samples) // cfg.batch_size)
    state = make_optim_state(
        net.params,
        PARAM_KEYS,
        total_steps=cfg.epochs * steps_per_epoch,
        base_lr=cfg.base_lr if cfg.base_lr is not None else DEFAULT_TRAIN_LR,
        weight_decay=cfg.weight_decay,
    )
    shuffle_rng = rng_from(cfg.seed, 13)
    log = []
    for epoch in range(cfg.epochs):
        epoch_loss = 0.0
        n_batches = 0
        lr = poly_lr(state)
        for idx in _epoch_batches(len(samples), cfg.batch_size, shuffle_rng):
            x = np.stack([samples[i].image.data for i in idx])
            labels = np.stack([samples[i].labels.data for i in idx])
            cache = run_forward(net, x)
            loss = id_cross_entropy(cache.post, labels)
            grads = backward(net, cache, grad_post=loss.grad)
            lr = apply_step(net, state, grads)
            epoch_loss += loss.value
            n_batches += 1
        row = {
            "epoch": epoch,
            "lr": lr,
            "loss_id": epoch_loss / n_batches,
            "loss_ood": 0.0,
            "val_miou": _val_miou(net, val, net.num_classes) if val else float("nan"),
        }
        log.append(row)
    return log


def finetune(net: SegNet, corpus, cfg: TrainConfig, object_source=None):
    """Head-only fine-tuning with anomaly copy-paste mixing.

    The blended objective keeps the class loss on upsampled logits (mixed
    labels, anomaly pixels excluded) and applies the configured outlier
    loss on the coarse logits against nearest-downsampled labels.  Backbone
    parameters are never touched.
    """
    if not cfg.freeze_backbone:
        raise ArgumentError("finetune() requires freeze_backbone=True")
    if not isinstance(corpus, Corpus):
        corpus = load_corpus(corpus)
    samples = corpus.samples("train")
    if not samples:
        raise ArgumentError("corpus has no train split")
    val = corpus.samples("val")
    if object_source is None:
        object_source = make_object_source("proxy")
    steps_per_epoch = -(-len(samples) // cfg.batch_size)
    state = make_optim_state(
        net.params,
        HEAD_KEYS,
        total_steps=cfg.epochs * steps_per_epoch,
        base_lr=cfg.base_lr if cfg.base_lr is not None else DEFAULT_FINETUNE_LR,
        weight_decay=cfg.weight_decay,
    )
    shuffle_rng = rng_from(cfg.seed, 17)
    log = []
    for epoch in range(cfg.epochs):
        sums = {"id": 0.0, "ood": 0.0}
        n_batches = 0
        lr = poly_lr(state)
        for idx in _epoch_batches(len(samples), cfg.batch_size, shuffle_rng):
            mixed = [
                anomaly_mix(
                    samples[i], cfg.mix, object_source, derive_seed(cfg.seed, 19, epoch, int(i))
                )
                for i in idx
            ]
            x = np.stack([s.image.data for s in mixed])
            labels_full = np.stack([s.labels.data for s in mixed])
            labels_pre = _downsample_array(labels_full)
            cache = run_forward(net, x)
            combined = combined_loss(cache.pre, cache.post, labels_full, labels_pre, cfg.loss)
            grads = backward(
                net,
                cache,
                grad_pre=cfg.loss.ood_weight * combined.ood_term.grad,
                grad_post=combined.id_term.grad,
                freeze_backbone=True,
            )
            lr = apply_step(net, state, {k: grads[k] for k in HEAD_KEYS})
            sums["id"] += combined.id_term.value
            sums["ood"] += combined.ood_term.value
            n_batches += 1
        log.append(
            {
                "epoch": epoch,
                "lr": lr,
                "loss_id": sums["id"] / n_batches,
                "loss_ood": sums["ood"] / n_batches,
                "val_miou": _val_miou(net, val, net.num_classes) if val else float("nan"),
            }
        )
    return log


def write_train_log(log_rows, path) -> None:
    """CSV with a fixed column order; floats via repr for lossless reload."""
    cols = ("epoch", "lr", "loss_id", "loss_ood", "val_miou")
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for row in log_rows:
            fh.write(",".join(repr(row[c]) if c != "epoch" else str(row[c]) for c in cols) + "\n")
