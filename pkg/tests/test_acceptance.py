"""Acceptance gate: one test per shipped claim, one PASS/FAIL line each.

Fast claims (gradients, closed forms, oracle equivalence, determinism,
throughput) run live.  The directional claims need 30 default-scale
fine-tune+eval runs; those artifacts come from the digest-keyed cache built
through the public CLI by acceptance_protocol.py (pre-seed it with
`python3 tests/acceptance_protocol.py`, hours of CPU; reruns reuse it).
"""

import csv
import statistics
import struct
import time
from pathlib import Path

import numpy as np
import pytest

import acceptance_protocol
from oodseg.cli import main
from oodseg.imagery import OOD_ID
from oodseg.metrics import auroc, average_precision, fpr_at_tpr
from oodseg.oodloss import (
    LossConfig,
    combined_loss,
    ood_energy_max,
    ood_full_ovr,
    ood_topk_ovr,
    ood_uniform_ce,
)
from oodseg.scores import SCORE_NAMES
from oodseg.segnet import (
    HEAD_KEYS,
    backward,
    init_segnet,
    load_checkpoint,
    run_forward,
)

SEEDS = acceptance_protocol.SEEDS


def _line(ok: bool, text: str) -> bool:
    print(f"{'PASS' if ok else 'FAIL'}  {text}")
    return ok


@pytest.fixture(scope="session")
def protocol():
    root = acceptance_protocol.ensure_built()
    assert (root / "DONE").read_text().strip() == acceptance_protocol.source_digest()
    return root


def _summary(root, name):
    out = {}
    with open(root / name / "summary.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            out[row["score"]] = {k: float(v) for k, v in row.items() if k != "score"}
    return out


# ---------------------------------------------------------------------------
# criterion 1: finite-difference gradient suite

def _fd_grad(fn, lam, h=1e-6):
    g = np.zeros_like(lam)
    it = np.nditer(lam, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        lp = lam.copy()
        lp[idx] += h
        lm = lam.copy()
        lm[idx] -= h
        g[idx] = (fn(lp) - fn(lm)) / (2 * h)
    return g


def _rel_err(analytic, fd):
    return np.abs(analytic - fd).max() / max(np.abs(fd).max(), 1e-12)


_LOSS_FNS = {
    "topk_ovr": ood_topk_ovr,
    "full_ovr": ood_full_ovr,
    "uniform_ce": ood_uniform_ce,
    "energy_max": ood_energy_max,
}


def test_criterion_1_gradient_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(100)
    worst_loss = 0.0
    n_loss = 0
    for variant, fn in _LOSS_FNS.items():
        for k in (1, 3, 17):
            for _ in range(9):
                n = int(rng.integers(2, 7))
                c = int(rng.integers(2, 20))
                lam = rng.normal(scale=2.0, size=(1, n, c))
                labels = np.full((1, n), OOD_ID, dtype=np.uint8)
                labels[0, 0] = 0  # one in-distribution pixel stays untouched
                cfg = LossConfig(variant=variant, top_k=k, slope=2.0)
                out = fn(lam, labels, cfg)
                fd = _fd_grad(lambda l: fn(l, labels, cfg).value, lam)
                worst_loss = max(worst_loss, _rel_err(out.grad, fd))
                n_loss += 1

    # end-to-end: combined loss through the head parameters
    worst_e2e = 0.0
    net = init_segnet(6, seed=3)
    x = rng.random((1, 8, 8, 3))
    labels = rng.integers(0, 6, (1, 8, 8)).astype(np.uint8)
    labels[:, 0:4, 0:4] = OOD_ID
    labels_pre = labels[:, 1::4, 1::4]
    cfg = LossConfig(variant="topk_ovr", top_k=5, slope=2.0, ood_weight=0.01)

    def value():
        cache = run_forward(net, x)
        return combined_loss(cache.pre, cache.post, labels, labels_pre, cfg).value

    cache = run_forward(net, x)
    comb = combined_loss(cache.pre, cache.post, labels, labels_pre, cfg)
    grads = backward(
        net,
        cache,
        grad_pre=cfg.ood_weight * comb.ood_term.grad,
        grad_post=comb.id_term.grad,
    )
    h = 1e-5
    for key in HEAD_KEYS:
        flat = net.params[key].reshape(-1)
        picks = rng.choice(flat.size, size=min(20, flat.size), replace=False)
        fd = np.zeros(len(picks))
        for j, idx in enumerate(picks):
            keep = flat[idx]
            flat[idx] = keep + h
            up = value()
            flat[idx] = keep - h
            down = value()
            flat[idx] = keep
            fd[j] = (up - down) / (2 * h)
        analytic = grads[key].reshape(-1)[picks]
        worst_e2e = max(worst_e2e, _rel_err(analytic, fd))
    elapsed = time.perf_counter() - t0

    ok = n_loss >= 100 and worst_loss < 1e-5 and worst_e2e < 1e-4 and elapsed < 60
    assert _line(ok, f"criterion 1 gradient suite: {n_loss} loss instances "
                     f"worst {worst_loss:.2e} (<1e-5), end-to-end worst "
                     f"{worst_e2e:.2e} (<1e-4), {elapsed:.1f}s (<60s)")


# ---------------------------------------------------------------------------
# criterion 2: closed-form loss values

def test_criterion_2_closed_forms():
    lam = np.array([[[1.0, 0.0, -1.0]]])
    ood = np.full((1, 1), OOD_ID, dtype=np.uint8)
    got = ood_topk_ovr(lam, ood, LossConfig(variant="topk_ovr", top_k=2, slope=2.0))
    err_topk = abs(got.value - 1.410038)

    errs_ce = []
    for c in (2, 6, 19):
        v = ood_uniform_ce(np.zeros((1, 1, c)), ood, LossConfig(variant="uniform_ce"))
        errs_ce.append(abs(v.value - np.log(c)))
    ok = err_topk < 1e-6 and max(errs_ce) < 1e-9
    assert _line(ok, f"criterion 2 closed forms: top-k example err {err_topk:.2e} "
                     f"(<1e-6), uniform-CE ln C err {max(errs_ce):.2e} (<1e-9)")


# ---------------------------------------------------------------------------
# criterion 3: metric oracle equivalence

def _auroc_brute(s, t):
    pos, neg = s[t], s[~t]
    cmp = (pos[:, None] > neg[None, :]) + 0.5 * (pos[:, None] == neg[None, :])
    return cmp.mean()


def _ap_brute(s, t):
    prev_r, total = 0.0, 0.0
    for th in sorted(set(s.tolist()), reverse=True):
        hit = s >= th
        tp = int((hit & t).sum())
        total += (tp / t.sum() - prev_r) * (tp / hit.sum())
        prev_r = tp / t.sum()
    return total


def _fpr_brute(s, t, target):
    for th in sorted(set(s.tolist()), reverse=True):
        hit = s >= th
        if (hit & t).sum() / t.sum() >= target:
            return (hit & ~t).sum() / (~t).sum()


def test_criterion_3_metric_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(300)
    worst = 0.0
    n = 0
    while n < 1000:
        size = int(rng.integers(5, 201))
        t = np.zeros(size, dtype=bool)
        t[rng.choice(size, size=int(rng.integers(1, size)), replace=False)] = True
        levels = int(rng.integers(2, 8))
        s = rng.integers(0, levels, size).astype(np.float64)
        target = float(rng.choice([0.5, 0.8, 0.95, 1.0]))
        worst = max(
            worst,
            abs(auroc(s, t) - _auroc_brute(s, t)),
            abs(average_precision(s, t) - _ap_brute(s, t)),
            abs(fpr_at_tpr(s, t, target) - _fpr_brute(s, t, target)),
        )
        n += 1
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-12 and elapsed < 120
    assert _line(ok, f"criterion 3 metric oracles: {n} tied instances, worst "
                     f"|diff| {worst:.2e} (<1e-12), {elapsed:.1f}s (<120s)")


# ---------------------------------------------------------------------------
# criteria 4-8: directional claims on the default-scale protocol artifacts

def test_criterion_4_t1_finetune_gains(protocol):
    base = _summary(protocol, "e_base")
    per_seed = [_summary(protocol, f"e_d_{s}") for s in SEEDS]
    all_ok = True
    for score in SCORE_NAMES:
        margins = [100 * (d[score]["ap"] - base[score]["ap"]) for d in per_seed]
        med = statistics.median(margins)
        all_ok &= _line(med >= 5.0,
                        f"criterion 4 [{score}] median fine-tune AP margin "
                        f"{med:+.2f} points (>= +5.00)")
    assert all_ok, "criterion 4: at least one score misses the +5 AP margin"


def test_criterion_5_t2_style_alignment(protocol):
    wins = 0
    for s in SEEDS:
        on = _summary(protocol, f"e_t2on_{s}")["energy"]["ap"]
        off = _summary(protocol, f"e_t2off_{s}")["energy"]["ap"]
        wins += on >= off
    ok = wins >= 4
    assert _line(ok, f"criterion 5 style-alignment energy AP wins {wins}/5 (>= 4/5)")


def test_criterion_6_t3_max_min_fpr(protocol):
    per_seed = [_summary(protocol, f"e_d_{s}") for s in SEEDS]
    mm = statistics.median([d["max_min"]["fpr95"] for d in per_seed])
    ml = statistics.median([d["max_logit"]["fpr95"] for d in per_seed])
    ok = mm <= ml
    assert _line(ok, f"criterion 6 median FPR95: max_min {mm:.4f} <= max_logit {ml:.4f}")


def test_criterion_7_miou_preservation(protocol):
    base = _summary(protocol, "e_base")["msp"]["miou"]
    drifts = [100 * abs(_summary(protocol, f"e_d_{s}")["msp"]["miou"] - base)
              for s in SEEDS]
    med = statistics.median(drifts)

    ref, _ = load_checkpoint(protocol / "base" / "checkpoint.osck")
    frozen = [k for k in ref.params if k not in HEAD_KEYS]
    byte_equal = True
    for tag in acceptance_protocol.VARIANTS:
        for s in SEEDS:
            net, _ = load_checkpoint(protocol / f"f_{tag}_{s}" / "checkpoint.osck")
            byte_equal &= all(
                net.params[k].tobytes() == ref.params[k].tobytes() for k in frozen
            )
    ok = med <= 1.0 and byte_equal
    assert _line(ok, f"criterion 7 median |mIoU drift| {med:.3f} points (<= 1.0), "
                     f"backbone byte-equal across all 30 runs: {byte_equal}")


def test_criterion_8_k_robustness(protocol):
    spreads, gains = [], []
    for s in SEEDS:
        aps = {tag: _summary(protocol, f"e_{tag}_{s}")["max_logit"]["ap"]
               for tag in ("k3", "d", "k7", "full")}
        in_sweep = [aps["k3"], aps["d"], aps["k7"]]
        spreads.append(100 * (max(in_sweep) - min(in_sweep)))
        gains.append(100 * (aps["d"] - aps["full"]))
    spread = statistics.median(spreads)
    gain = statistics.median(gains)
    ok = spread <= gain
    assert _line(ok, f"criterion 8 median AP spread over K {spread:.2f} <= "
                     f"median gain over full-OvR {gain:.2f}")


# ---------------------------------------------------------------------------
# criterion 9: every command rerun-identical

def _tree(root):
    return {p.relative_to(root): p.read_bytes()
            for p in sorted(Path(root).rglob("*")) if p.is_file()}


def test_criterion_9_determinism(tmp_path):
    sizes = ["--n-train", "3", "--n-val", "1", "--n-ood-eval", "2",
             "--height", "32", "--width", "64"]
    ok = True
    for rep in ("a", "b"):
        d = tmp_path / rep
        d.mkdir()
        assert main(["synth", "--out", str(d / "c"), "--seed", "4", *sizes]) == 0
        assert main(["train", "--corpus", str(d / "c"), "--out", str(d / "base"),
                     "--epochs", "2", "--seed", "4"]) == 0
        ckpt = str(d / "base" / "checkpoint.osck")
        assert main(["finetune", "--corpus", str(d / "c"), "--checkpoint", ckpt,
                     "--out", str(d / "ft"), "--epochs", "1", "--seed", "4",
                     "--mix-prob", "0.5"]) == 0
        ft = str(d / "ft" / "checkpoint.osck")
        assert main(["eval", "--corpus", str(d / "c"), "--checkpoint", ft,
                     "--out", str(d / "ev")]) == 0
        assert main(["dump-logits", "--corpus", str(d / "c"), "--checkpoint", ft,
                     "--out", str(d / "dumps")]) == 0
        assert main(["eval", "--corpus", str(d / "c"), "--dumps", str(d / "dumps"),
                     "--out", str(d / "evd"), "--score", "energy"]) == 0
        assert main(["ablate-k", "--corpus", str(d / "c"), "--checkpoint", ckpt,
                     "--out", str(d / "ab"), "--k-list", "2,3", "--epochs", "1",
                     "--seed", "4"]) == 0
    for sub in ("c", "base", "ft", "ev", "dumps", "evd", "ab"):
        same = _tree(tmp_path / "a" / sub) == _tree(tmp_path / "b" / sub)
        ok &= _line(same, f"criterion 9 [{sub}] rerun bit-identical: {same}")
    assert ok, "criterion 9: some command is not rerun-identical"


# ---------------------------------------------------------------------------
# criterion 10: throughput and pipeline wall clock

def test_criterion_10_performance(protocol):
    rng = np.random.default_rng(1000)
    s = rng.normal(size=10_000_000)
    t = rng.random(10_000_000) < 0.1
    t0 = time.perf_counter()
    auroc(s, t)
    average_precision(s, t)
    fpr_at_tpr(s, t)
    metric_s = time.perf_counter() - t0

    import json

    timing = json.loads((protocol / "timing.json").read_text())
    pipeline_s = timing["pipeline_s"]
    ok = metric_s < 10.0 and pipeline_s < 1800.0
    assert _line(ok, f"criterion 10 metric engine 1e7 pairs {metric_s:.2f}s (<10s), "
                     f"measured synth+train+finetune+eval pipeline "
                     f"{pipeline_s:.0f}s (<1800s)")
