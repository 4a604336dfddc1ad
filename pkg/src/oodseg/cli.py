"""Command-line pipeline driver.

Subcommands: synth, train, finetune, eval, ablate-k.  Runs are configured
by a flat key=value file plus command-line overrides; every command writes
the fully resolved configuration next to its outputs so a run can be
reproduced from its artifacts alone.  Outputs are bit-identical across
reruns with the same inputs.

Exit codes: 0 success, 2 usage/validation, 3 I/O, 4 missing or stale state.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .augment import MixConfig
from .errors import (
    ArgumentError,
    DataError,
    FormatError,
    OodsegError,
    StateError,
    UndefinedMetricError,
)
from .imagery import write_heatmap, write_logit_dump
from .metrics import EvalReport, evaluate
from .oodloss import LossConfig
from .scores import SCORE_NAMES, compute_score, fit_classwise_stats
from .segnet import (
    TrainConfig,
    finetune,
    forward,
    init_segnet,
    load_checkpoint,
    save_checkpoint,
    train,
    write_train_log,
)
from .synth import build_corpus, get_style, load_corpus, make_object_source

_TRUE = {"true", "on", "yes", "1"}
_FALSE = {"false", "off", "no", "0"}


def _parse_bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in _TRUE:
        return True
    if low in _FALSE:
        return False
    raise ArgumentError(f"expected a boolean, got {text!r}")


@dataclass(frozen=True)
class RunConfig:
    """Flat experiment configuration; one key per line in the file form."""

    height: int = 128
    width: int = 256
    style: str = "styleA"
    n_train: int = 200
    n_val: int = 50
    n_ood_eval: int = 50
    seed: int = 0
    mix_probability: float = 0.1
    style_align: bool = True
    max_objects_per_scene: int = 1
    proxy_style: str = "none"
    variant: str = "topk_ovr"
    k: int = 5
    s: float = 2.0
    gamma: float = 0.01
    epochs: int = 8
    batch_size: int = 4
    base_lr: float = 0.003
    finetune_epochs: int = 20
    finetune_lr: float = 0.004
    score: str = "all"
    k_list: str = "3,5,7"

    def __post_init__(self):
        # constructing the domain configs performs their validation
        self.mix_config()
        self.loss_config()
        get_style(self.style)
        if self.proxy_style != "none":
            get_style(self.proxy_style)
        if self.score != "all" and self.score not in SCORE_NAMES:
            raise ArgumentError(f"unknown score {self.score!r}")
        if self.seed < 0:
            raise ArgumentError("seed must be non-negative")
        for name in ("n_train", "n_val", "n_ood_eval", "epochs", "batch_size", "finetune_epochs"):
            if getattr(self, name) < 1:
                raise ArgumentError(f"{name} must be at least 1")
        if self.base_lr <= 0 or self.finetune_lr <= 0:
            raise ArgumentError("learning rates must be positive")
        self.parsed_k_list()

    def mix_config(self) -> MixConfig:
        return MixConfig(
            mix_probability=self.mix_probability,
            style_align=self.style_align,
            max_objects_per_scene=self.max_objects_per_scene,
        )

    def loss_config(self, variant: str | None = None, k: int | None = None) -> LossConfig:
        return LossConfig(
            variant=variant if variant is not None else self.variant,
            top_k=k if k is not None else self.k,
            slope=self.s,
            ood_weight=self.gamma,
        )

    def parsed_k_list(self) -> list[int]:
        try:
            values = [int(tok) for tok in self.k_list.split(",") if tok.strip()]
        except ValueError:
            raise ArgumentError(f"k_list must be comma-separated integers, got {self.k_list!r}")
        if not values or any(v < 1 for v in values):
            raise ArgumentError("k_list entries must be positive")
        return values

    def scores_selected(self) -> list[str]:
        return list(SCORE_NAMES) if self.score == "all" else [self.score]


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _coerce(name: str, raw):
    if name not in _FIELD_TYPES:
        raise ArgumentError(f"unknown config key {name!r}")
    if not isinstance(raw, str):
        return raw
    kind = _FIELD_TYPES[name]
    if kind == "int":
        try:
            return int(raw)
        except ValueError:
            raise ArgumentError(f"{name} expects an integer, got {raw!r}")
    if kind == "float":
        try:
            return float(raw)
        except ValueError:
            raise ArgumentError(f"{name} expects a number, got {raw!r}")
    if kind == "bool":
        return _parse_bool(raw)
    return raw


def read_config(path) -> RunConfig:
    """Parse a key=value file; '#' comments and blank lines allowed."""
    values = {}
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ArgumentError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in body.split("=", 1))
        values[key] = _coerce(key, raw)
    return RunConfig(**values)


def resolve_config(path_or_none, overrides: dict) -> RunConfig:
    base = read_config(path_or_none) if path_or_none else RunConfig()
    clean = {k: _coerce(k, v) for k, v in overrides.items() if v is not None}
    return dataclasses.replace(base, **clean)


def write_config(cfg: RunConfig, path) -> None:
    lines = []
    for f in dataclasses.fields(RunConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{f.name}={value}")
    Path(path).write_text("\n".join(lines) + "\n")


def _prepare_out(out_dir, cfg: RunConfig) -> Path:
    out = Path(out_dir)
    parent = out.parent
    if not parent.exists():
        raise OSError(f"parent directory {parent} does not exist")
    out.mkdir(exist_ok=True)
    write_config(cfg, out / "config.resolved.cfg")
    return out


def _train_config(cfg: RunConfig, finetuning: bool, variant=None, k=None, seed=None) -> TrainConfig:
    return TrainConfig(
        epochs=cfg.finetune_epochs if finetuning else cfg.epochs,
        batch_size=cfg.batch_size,
        seed=cfg.seed if seed is None else seed,
        loss=cfg.loss_config(variant=variant, k=k),
        mix=cfg.mix_config(),
        freeze_backbone=finetuning,
        base_lr=cfg.finetune_lr if finetuning else cfg.base_lr,
    )


def _proxy_source(cfg: RunConfig):
    stain = None if cfg.proxy_style == "none" else cfg.proxy_style
    return make_object_source("proxy", stain=stain)


# ---------------------------------------------------------------------------
# Commands

def cmd_synth(cfg: RunConfig, out_dir) -> None:
    out = Path(out_dir)
    if not out.parent.exists():
        raise OSError(f"parent directory {out.parent} does not exist")
    summary = build_corpus(
        cfg.n_train,
        cfg.n_val,
        cfg.n_ood_eval,
        cfg.style,
        cfg.seed,
        out,
        height=cfg.height,
        width=cfg.width,
    )
    write_config(cfg, out / "config.resolved.cfg")
    print(
        f"corpus {out}: {summary.n_train} train / {summary.n_val} val / "
        f"{summary.n_ood_eval} eval, {len(summary.eval_object_records)} eval objects"
    )


def cmd_train(cfg: RunConfig, corpus_dir, out_dir) -> None:
    corpus = load_corpus(corpus_dir)
    out = _prepare_out(out_dir, cfg)
    net = init_segnet(num_classes=6, seed=cfg.seed)
    log = train(net, corpus, _train_config(cfg, finetuning=False))
    save_checkpoint(net, out / "checkpoint.osck")
    write_train_log(log, out / "train_log.csv")


def cmd_finetune(cfg: RunConfig, corpus_dir, checkpoint, out_dir) -> None:
    ckpt = Path(checkpoint)
    if not ckpt.is_file():
        raise StateError(f"missing checkpoint {ckpt}; run train first")
    corpus = load_corpus(corpus_dir)
    out = _prepare_out(out_dir, cfg)
    net, _ = load_checkpoint(ckpt)
    log = finetune(net, corpus, _train_config(cfg, finetuning=True), _proxy_source(cfg))
    save_checkpoint(net, out / "checkpoint.osck")
    write_train_log(log, out / "finetune_log.csv")


def _write_report(report: EvalReport, score_dir: Path) -> None:
    with open(score_dir / "report.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        for name, value in report.rows():
            writer.writerow([name, repr(value)])
    (score_dir / "report.kv").write_text(report.to_kv())
    with open(score_dir / "confusion.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "bin", "count"])
        for c, n in enumerate(report.confusion.class_counts):
            writer.writerow(["predicted_class", c, int(n)])
        for b, n in enumerate(report.confusion.confidence_counts):
            writer.writerow(["confidence_bin", b, int(n)])


def cmd_eval(cfg: RunConfig, corpus_dir, out_dir, checkpoint=None, dumps=None) -> None:
    if (checkpoint is None) == (dumps is None):
        raise ArgumentError("eval needs exactly one of --checkpoint or --dumps")
    corpus = load_corpus(corpus_dir)
    out = _prepare_out(out_dir, cfg)
    if checkpoint is not None:
        ckpt = Path(checkpoint)
        if not ckpt.is_file():
            raise StateError(f"missing checkpoint {ckpt}")
        source, _ = load_checkpoint(ckpt)
    else:
        source = Path(dumps)
        if not source.is_dir():
            raise StateError(f"missing dump directory {source}")

    ids = corpus.ids("eval")
    eval_samples = corpus.samples("eval")
    if checkpoint is not None:
        logit_maps = [forward(source, s.image)[1] for s in eval_samples]
    else:
        from .imagery import read_logit_dump

        logit_maps = []
        for sid in ids:
            path = source / f"{sid}.oodl"
            if not path.is_file():
                raise StateError(f"missing logit dump {path}")
            logit_maps.append(read_logit_dump(path))

    summary_rows = []
    for score_name in cfg.scores_selected():
        report = evaluate(source, corpus, score_name)
        score_dir = out / score_name
        score_dir.mkdir(exist_ok=True)
        _write_report(report, score_dir)
        heat_dir = score_dir / "heatmaps"
        heat_dir.mkdir(exist_ok=True)
        stats = fit_classwise_stats(logit_maps) if score_name == "std_ml" else None
        for sid, lm in zip(ids, logit_maps):
            write_heatmap(compute_score(score_name, lm, stats), heat_dir / f"{sid}.pgm")
        summary_rows.append((score_name, report))

    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["score", "auroc", "ap", "fpr95", "miou"])
        for score_name, report in summary_rows:
            writer.writerow(
                [score_name, repr(report.auroc), repr(report.ap), repr(report.fpr95), repr(report.miou)]
            )


def cmd_dump_logits(cfg: RunConfig, corpus_dir, checkpoint, out_dir) -> None:
    """Write per-image eval-split logit dumps for later offline scoring."""
    ckpt = Path(checkpoint)
    if not ckpt.is_file():
        raise StateError(f"missing checkpoint {ckpt}")
    corpus = load_corpus(corpus_dir)
    out = _prepare_out(out_dir, cfg)
    net, _ = load_checkpoint(ckpt)
    for sid, sample in zip(corpus.ids("eval"), corpus.samples("eval")):
        write_logit_dump(forward(net, sample.image)[1], out / f"{sid}.oodl")


_ABLATE_SCORES = ("max_logit", "energy", "max_min")


def cmd_ablate_k(cfg: RunConfig, corpus_dir, checkpoint, out_dir) -> None:
    """Fine-tune once per k and tabulate ranking metrics per score."""
    ckpt = Path(checkpoint)
    if not ckpt.is_file():
        raise StateError(f"missing checkpoint {ckpt}; run train first")
    corpus = load_corpus(corpus_dir)
    out = _prepare_out(out_dir, cfg)
    rows = []
    for k in cfg.parsed_k_list():
        net, _ = load_checkpoint(ckpt)
        run_dir = out / "runs" / f"k{k}"
        run_dir.mkdir(parents=True, exist_ok=True)
        log = finetune(
            net,
            corpus,
            _train_config(cfg, finetuning=True, variant="topk_ovr", k=k),
            _proxy_source(cfg),
        )
        save_checkpoint(net, run_dir / "checkpoint.osck")
        write_train_log(log, run_dir / "finetune_log.csv")
        cells = [str(k)]
        for score_name in _ABLATE_SCORES:
            report = evaluate(net, corpus, score_name)
            cells += [repr(report.auroc), repr(report.ap), repr(report.fpr95)]
        rows.append(cells)
    header = ["k"]
    for score_name in _ABLATE_SCORES:
        header += [f"{score_name}_auroc", f"{score_name}_ap", f"{score_name}_fpr95"]
    with open(out / "ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# Argument parsing

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--seed", type=int, help="override config seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="oodseg",
        description="synthetic-scene anomaly segmentation pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a corpus")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, dest="n_train")
    p.add_argument("--n-val", type=int, dest="n_val")
    p.add_argument("--n-ood-eval", type=int, dest="n_ood_eval")
    p.add_argument("--style")
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)

    p = sub.add_parser("train", help="train the segmenter from scratch")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float, dest="base_lr")

    p = sub.add_parser("finetune", help="head-only fine-tuning with anomaly mixing")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant")
    p.add_argument("--k", type=int)
    p.add_argument("--s", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--mix-prob", type=float, dest="mix_probability")
    p.add_argument("--style-align", dest="style_align")
    p.add_argument("--proxy-style", dest="proxy_style")
    p.add_argument("--epochs", type=int, dest="finetune_epochs")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float, dest="finetune_lr")

    p = sub.add_parser("eval", help="score a checkpoint or logit dumps")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--dumps")
    p.add_argument("--score")

    p = sub.add_parser("dump-logits", help="export eval-split logits")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("ablate-k", help="sweep the top-k width")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k-list", dest="k_list")
    p.add_argument("--gamma", type=float)
    p.add_argument("--s", type=float)
    p.add_argument("--mix-prob", type=float, dest="mix_probability")
    p.add_argument("--style-align", dest="style_align")
    p.add_argument("--proxy-style", dest="proxy_style")
    p.add_argument("--epochs", type=int, dest="finetune_epochs")
    p.add_argument("--lr", type=float, dest="finetune_lr")
    return parser


_CONFIG_KEYS = set(_FIELD_TYPES)


def run(argv=None) -> int:
    parser = build_parser()
    args = vars(parser.parse_args(argv))
    command = args.pop("command")
    config_path = args.pop("config", None)
    paths = {k: args.pop(k, None) for k in ("out", "corpus", "checkpoint", "dumps")}
    overrides = {k: v for k, v in args.items() if k in _CONFIG_KEYS}
    cfg = resolve_config(config_path, overrides)

    if command == "synth":
        cmd_synth(cfg, paths["out"])
    elif command == "train":
        cmd_train(cfg, paths["corpus"], paths["out"])
    elif command == "finetune":
        cmd_finetune(cfg, paths["corpus"], paths["checkpoint"], paths["out"])
    elif command == "eval":
        cmd_eval(cfg, paths["corpus"], paths["out"], paths["checkpoint"], paths["dumps"])
    elif command == "dump-logits":
        cmd_dump_logits(cfg, paths["corpus"], paths["checkpoint"], paths["out"])
    elif command == "ablate-k":
        cmd_ablate_k(cfg, paths["corpus"], paths["checkpoint"], paths["out"])
    else:  # pragma: no cover - argparse enforces the choices
        raise ArgumentError(f"unknown command {command!r}")
    return 0


def main(argv=None) -> int:
    try:
        return run(argv)
    except (ArgumentError, FormatError, DataError, UndefinedMetricError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except StateError as exc:
        print(f"state error: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
