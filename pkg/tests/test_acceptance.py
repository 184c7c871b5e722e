"""Acceptance criteria, one test each, on the default synthetic benchmark.

Every test records a PASS/FAIL line that is printed in the terminal summary.
The shared benchmark run (pretrain, learning-rate search, finetune) happens
once per session.
"""

import json
import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from relmap import tensor as T
from relmap.cli import main
from relmap.evaluator import ablation_suite, finetune_and_report, robustness_report, segmentation_report
from relmap.objectives import (
    LossWeights,
    loss_bg,
    loss_confidence,
    loss_fg,
    loss_gradmask,
    loss_relevance,
    loss_rrr,
    loss_total,
    patch_mask_from_pixels,
)
from relmap.relevance import aggregate_relevance, attention_gradients, relevance_map
from relmap.sis import find_sis, replay, target_confidence
from relmap.synthdata import DatasetConfig, make_benchmark, stack
from relmap.trainer import (
    FinetuneConfig,
    LossToggles,
    PretrainConfig,
    batch_loss,
    finetune_relevance,
    lr_grid_search,
    select_finetune_subset,
)
from relmap.vit import ViTConfig, forward, init_model, predict_logits

from conftest import VERDICTS

LR_CANDIDATES = (1e-5, 3e-5, 1e-4, 3e-4)


def verdict(number, title: str, ok: bool, detail: str = "") -> None:
    VERDICTS.append(f"[{'PASS' if ok else 'FAIL'}] {number} {title}" + (f": {detail}" if detail else ""))
    assert ok, f"{title}: {detail}"


@pytest.fixture(scope="session")
def bench():
    return make_benchmark(DatasetConfig(), test_per_class=50)


@pytest.fixture(scope="session")
def pretrained(bench):
    t0 = time.perf_counter()
    model, report = pretrain_model(bench)
    return model, report, time.perf_counter() - t0


def pretrain_model(bench):
    from relmap.trainer import pretrain

    return pretrain(ViTConfig(), bench.train, PretrainConfig())


def _validation(bench):
    return bench.test[::10]


@pytest.fixture(scope="session")
def finetuned(bench, pretrained):
    base, _, _ = pretrained
    t0 = time.perf_counter()
    cfg = FinetuneConfig()
    classes = cfg.class_subset(base.config.num_classes)
    subset = select_finetune_subset(bench.train, classes, cfg.samples_per_class, cfg.seed)
    search = lr_grid_search(base, LR_CANDIDATES, subset, cfg, _validation(bench))
    cfg = replace(cfg, learning_rate=search.chosen_lr)
    tuned, train_report = finetune_relevance(base, subset, cfg)
    robust = robustness_report(tuned, base, bench.suites(), classes)
    elapsed = time.perf_counter() - t0
    return tuned, cfg, search, train_report, robust, elapsed


# ------------------------------------------------------------------ 1


def test_c1_gae_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(50):
        t = int(rng.integers(2, 9))
        depth = int(rng.integers(1, 5))
        heads = int(rng.integers(1, 5))
        layers = []
        closed = np.eye(t)
        for _ in range(depth):
            a = rng.dirichlet(np.ones(t), size=(heads, t))
            g = rng.normal(size=(heads, t, t))
            abar = np.maximum(g * a, 0.0).mean(axis=0)
            layers.append(T.Tensor(abar, dtype=np.float64))
            closed = (np.eye(t) + abar) @ closed
        got = aggregate_relevance(layers, t).numpy()
        worst = max(worst, float(np.abs(got - closed).max()))
    hand_bar = T.Tensor(np.array([[0.7, 0.0], [0.2, 1.2]]), dtype=np.float64)
    hand = aggregate_relevance([hand_bar], 2).numpy()
    exact = bool(np.array_equal(hand, np.array([[1.7, 0.0], [0.2, 2.2]])))
    elapsed = time.perf_counter() - t0
    verdict(1, "GAE oracle equivalence", worst <= 1e-5 and exact and elapsed < 5,
            f"max err {worst:.2e}, hand example exact={exact}, {elapsed:.2f}s")


# ------------------------------------------------------------------ 2


def _frozen_total(model, images, pmask, frozen, target, w: LossWeights):
    rmap, logits, _ = relevance_map(model, images, target, frozen_grads=frozen, return_logits=True)
    rel = loss_relevance(loss_bg(rmap, pmask), loss_fg(rmap, pmask), w)
    return loss_total(rel, loss_confidence(logits), w)


def test_c2_gradient_correctness(bench):
    t0 = time.perf_counter()
    cfg = FinetuneConfig()
    images, masks, labels = stack(bench.train[::400][:2])
    images = images.astype(np.float64)
    pmask = patch_mask_from_pixels(masks, ViTConfig().patch_size).astype(np.float64)
    worst = 0.0
    eps = 1e-6
    for seed in range(5):
        model = init_model(ViTConfig(), seed).copy(np.float64)
        loss, _ = batch_loss(model, images, masks, labels, cfg)
        names = list(model.params)
        analytic = dict(zip(names, T.grad(loss, [model.params[n] for n in names])))
        logits, attns = forward(model, images)
        target = logits.data.argmax(axis=-1)
        frozen = [T.detach(g) for g in attention_gradients(logits, attns, target)]
        pick = np.random.default_rng([seed, 9])

        def f():
            return _frozen_total(model, images, pmask, frozen, target, cfg.weights).item()

        assert f() == pytest.approx(loss.item(), rel=1e-9)
        for name in names:
            p = model.params[name].data
            for flat in pick.choice(p.size, size=min(3, p.size), replace=False):
                idx = np.unravel_index(flat, p.shape)
                old = p[idx]
                p[idx] = old + eps
                up = f()
                p[idx] = old - eps
                down = f()
                p[idx] = old
                num = (up - down) / (2 * eps)
                ana = float(analytic[name].data[idx])
                scale = max(abs(num), abs(ana), 1e-7)
                worst = max(worst, abs(num - ana) / scale)
    elapsed = time.perf_counter() - t0
    verdict(2, "gradient correctness", worst < 1e-2 and elapsed < 120,
            f"max relative error {worst:.2e} over every weight tensor, 5 seeds, {elapsed:.1f}s")


# ------------------------------------------------------------------ 3


def test_c3_loss_arithmetic():
    R = T.tensor(np.array([[1.0, 0.2], [0.4, 0.0]]))
    S = np.array([[1.0, 0.0], [0.0, 0.0]])
    w = LossWeights(bg=2.0, fg=0.3, relevance=0.8, classification=0.2)
    bg, fg = loss_bg(R, S).item(), loss_fg(R, S).item()
    rel = loss_relevance(T.tensor(bg), T.tensor(fg), w).item()
    logits = T.tensor(np.zeros((1, 2)))
    total = loss_total(T.tensor(rel), loss_confidence(logits), w).item()
    expected_total = 0.8 * 0.325 + 0.2 * math.log(2)
    ok = (abs(bg - 0.05) <= 1e-6 and abs(fg - 0.75) <= 1e-6 and abs(rel - 0.325) <= 1e-6
          and abs(total - expected_total) <= 1e-6 and abs(total - 0.3986) < 5e-5)
    verdict(3, "loss arithmetic", ok, f"bg={bg:.6f} fg={fg:.6f} rel={rel:.6f} total={total:.6f}")


# ------------------------------------------------------------------ 4, 5


def test_pretrain_reference_values(bench, pretrained):
    model, report, elapsed = pretrained
    base = robustness_report(model, model, bench.suites(), ())
    ind, swap = base.splits["in_distribution"].top1, base.splits["background_swap"].top1
    # the cue shortcut shows as a larger drop under background swap than anywhere else
    ok = ind >= 0.9 and (ind - swap) > 0.1
    verdict("ref", "pretrained model learns the task and the shortcut", ok,
            f"in-distribution {ind:.4f}, background_swap {swap:.4f}, {elapsed:.0f}s")


def test_c4_robustness_direction(finetuned):
    tuned, cfg, search, train_report, robust, elapsed = finetuned
    swap = robust.splits["background_swap"]
    ind = robust.splits["in_distribution"]
    ok = (swap.delta_top1 >= 0.10 and ind.delta_top1 >= -0.03
          and swap.heldout_delta > 0 and elapsed < 600)
    verdict(4, "end-to-end robustness direction", ok,
            f"lr={cfg.learning_rate:g} swap {swap.ref_top1:.4f}->{swap.top1:.4f} "
            f"({swap.delta_top1:+.4f}), in-dist {ind.ref_top1:.4f}->{ind.top1:.4f} "
            f"({ind.delta_top1:+.4f}), held-out swap delta {swap.heldout_delta:+.4f}, {elapsed:.0f}s")


def test_finetune_lowers_background_loss(finetuned):
    _, _, _, train_report, _, _ = finetuned
    bg = [e["bg"] for e in train_report.epoch_losses]
    verdict("ref", "background relevance loss falls during finetuning", bg[-1] < bg[0],
            f"{bg[0]:.5f} -> {bg[-1]:.5f}")


def test_c5_segmentation_direction(bench, pretrained, finetuned):
    base = pretrained[0]
    tuned = finetuned[0]
    before = segmentation_report(base, bench.test)
    after = segmentation_report(tuned, bench.test)
    ok = (after.pixel_accuracy > before.pixel_accuracy and after.miou > before.miou
          and after.map > before.map)
    verdict(5, "segmentation improvement direction", ok,
            f"pixAcc {before.pixel_accuracy:.4f}->{after.pixel_accuracy:.4f}, "
            f"mIoU {before.miou:.4f}->{after.miou:.4f}, mAP {before.map:.4f}->{after.map:.4f}")


# ------------------------------------------------------------------ 6


def test_c6_ablation_direction(bench, pretrained, finetuned):
    base = pretrained[0]
    cfg = finetuned[1]
    t0 = time.perf_counter()
    rows = {"full": {}, "w/o bg": {"loss_toggles": LossToggles(use_bg=False)}}
    report = ablation_suite(base, bench.train, bench.suites(), cfg, rows)
    full, no_bg = report.rows["full"].delta("background_swap"), report.rows["w/o bg"].delta("background_swap")
    off = replace(cfg, loss_toggles=LossToggles(False, False, False))
    classes = cfg.class_subset(base.config.num_classes)
    subset = select_finetune_subset(bench.train, classes, cfg.samples_per_class, cfg.seed)
    frozen, _ = finetune_relevance(base, subset, off)
    identical = all(np.array_equal(frozen.params[k].data, base.params[k].data) for k in base.params)
    elapsed = time.perf_counter() - t0
    verdict(6, "ablation direction", no_bg < full and identical and elapsed < 1200,
            f"swap delta full {full:+.4f} vs w/o bg {no_bg:+.4f}, all-off bit-identical={identical}, "
            f"{elapsed:.0f}s")


# ------------------------------------------------------------------ 7


def test_c7_baseline_parity(bench, pretrained, finetuned):
    base = pretrained[0]
    ours = finetuned[4].to_dict()
    keys = {}
    for method in ("gradmask", "rrr"):
        cfg = replace(FinetuneConfig(), method=method, learning_rate=finetuned[1].learning_rate)
        _, rep = finetune_and_report(base, bench.train, bench.suites(), cfg)
        d = rep.to_dict()
        keys[method] = (set(d["splits"]) == set(ours["splits"])
                        and all(set(d["splits"][s]) == set(ours["splits"][s]) for s in d["splits"]))
    grad = T.tensor(np.ones((2, 2, 1)))
    mask = np.array([[1, 0], [0, 0]])
    gm, rrr = loss_gradmask(grad, mask).item(), loss_rrr(grad, mask).item()
    ok = all(keys.values()) and abs(gm - math.sqrt(3)) <= 1e-6 and abs(rrr - 3.0) <= 1e-6
    verdict(7, "baseline parity harness", ok,
            f"comparable reports {keys}, gradmask={gm:.7f}, rrr={rrr:.7f}")


# ------------------------------------------------------------------ 8


def test_c8_sis_probe(bench, pretrained):
    model = pretrained[0]
    images, _, _ = stack(bench.test)
    t0 = time.perf_counter()
    results = []
    logits = predict_logits(model, images)
    for i in range(0, len(bench.test), 80):
        # elimination can only keep a confidence the full image already has
        target = int(logits[i].argmax())
        if target_confidence(model, images[i][None], target)[0] < 0.9:
            continue
        res = find_sis(model, images[i], target)
        results.append((res, abs(replay(model, images[i], res) - res.final_confidence)))
        if len(results) == 4:
            break
    ok = bool(results)
    details = []
    for res, err in results:
        shrinking = all(b < a for a, b in zip(res.sizes, res.sizes[1:]))
        good = (not res.success) or (res.final_confidence >= 0.9 and shrinking and err <= 1e-5)
        ok = ok and res.success and good
        details.append(f"kept {res.retained_fraction:.3f} conf {res.final_confidence:.4f} replay err {err:.1e}")
    verdict(8, "SIS probe", ok, f"{len(results)} searches in {time.perf_counter() - t0:.0f}s; " + "; ".join(details))


# ------------------------------------------------------------------ 9

SMALL = [
    "--data.classes", "4", "--data.per_class", "4", "--data.image_size", "16",
    "--bench.test_per_class", "2", "--bench.validation_stride", "2",
    "--model.image_size", "16", "--model.embed_dim", "8", "--model.depth", "2",
    "--model.heads", "2", "--model.num_classes", "4",
    "--pretrain.epochs", "2", "--finetune.epochs", "2", "--finetune.samples_per_class", "2",
    "--lr_search.search_epochs", "1", "--sweep.samples_per_class", "[1, 2]",
    "--sweep.class_counts", "[2]", "--sis.threshold", "0.3",
]


def test_c9_cli_determinism(tmp_path):
    first = tmp_path / "pre"
    assert main(["pretrain", *SMALL, "--run.out_dir", str(first)]) == 0
    ckpt = str(first / "model.ckpt")
    runs = {"gen-data": [], "pretrain": []}
    for cmd in ("finetune", "lr-search", "eval", "seg-eval", "ablate", "sweep", "relevance", "sis"):
        runs[cmd] = ["--run.checkpoint", ckpt]
    mismatched = []
    for cmd, extra in runs.items():
        a, b = tmp_path / f"{cmd}-a", tmp_path / f"{cmd}-b"
        code_a = main([cmd, *SMALL, *extra, "--run.out_dir", str(a)])
        code_b = main([cmd, "--config", str(a / "config.json"), "--run.out_dir", str(b)])
        reports = sorted(p.relative_to(a) for p in a.rglob("*.json") if p.name != "config.json")
        same = code_a == code_b == 0 and bool(reports) and all(
            (a / r).read_bytes() == (b / r).read_bytes() for r in reports)
        if not same:
            mismatched.append(cmd)
    verdict(9, "CLI determinism", not mismatched,
            f"{len(runs)} subcommands re-run from config.json" + (f", mismatched {mismatched}" if mismatched else ""))
