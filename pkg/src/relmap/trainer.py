"""Pretraining, relevance-guided finetuning, input-gradient baselines and lr selection."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .objectives import (
    LossBreakdown,
    LossWeights,
    loss_bg,
    loss_ce_ground_truth,
    loss_confidence,
    loss_fg,
    loss_gradmask,
    loss_rrr,
    patch_mask_from_pixels,
    predicted_class,
)
from .relevance import attention_gradients, relevance_from_capture
from .synthdata import Sample, stack
from .tensor import ContractError, Tensor
from .vit import ViTConfig, ViTModel, forward, init_model, predict_logits

log = logging.getLogger(__name__)

# ViT-B rows of the baseline hyperparameter tables: (lambda_bg, lambda_classification)
BASELINE_DEFAULTS = {"gradmask": (50.0, 3e-9), "rrr": (1e-10, 2e-6)}


# --------------------------------------------------------------- optimizer


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> AdamWState:
    """One AdamW update in place on ``params``; returns the advanced state."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        data = p.data
        if weight_decay:
            data = data - lr * weight_decay * data
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.data = (data - lr * update).astype(p.data.dtype)
    return state


# ------------------------------------------------------------------ configs


@dataclass(frozen=True)
class PretrainConfig:
    lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    weight_decay: float = 0.05


@dataclass(frozen=True)
class LossToggles:
    use_bg: bool = True
    use_fg: bool = True
    use_classification: bool = True


@dataclass(frozen=True)
class FinetuneConfig:
    learning_rate: float = 1e-4
    epochs: int = 50
    batch_size: int = 8
    weights: LossWeights = LossWeights()
    samples_per_class: int = 3
    train_class_subset: tuple[int, ...] | None = None  # None: first half of the classes
    seed: int = 0
    target_class_mode: str = "predicted"  # or "ground_truth"
    loss_toggles: LossToggles = LossToggles()
    classification_mode: str = "confidence"  # or "ground_truth_ce"
    method: str = "ours"  # or "gradmask", "rrr"
    baseline_bg: float | None = None
    baseline_classification: float | None = None
    double_backward: bool = False
    weight_decay: float = 0.0

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ContractError("epochs must be >= 0")
        if self.target_class_mode not in ("predicted", "ground_truth"):
            raise ContractError(f"bad target_class_mode {self.target_class_mode!r}")
        if self.classification_mode not in ("confidence", "ground_truth_ce"):
            raise ContractError(f"bad classification_mode {self.classification_mode!r}")
        if self.method not in ("ours", "gradmask", "rrr"):
            raise ContractError(f"bad method {self.method!r}")

    def class_subset(self, num_classes: int) -> tuple[int, ...]:
        if self.train_class_subset is None:
            return tuple(range(num_classes // 2))
        return tuple(int(c) for c in self.train_class_subset)

    def baseline_weights(self) -> tuple[float, float]:
        bg, cls = BASELINE_DEFAULTS.get(self.method, (0.0, 0.0))
        if self.baseline_bg is not None:
            bg = self.baseline_bg
        if self.baseline_classification is not None:
            cls = self.baseline_classification
        return bg, cls


@dataclass
class TrainReport:
    epoch_losses: list[dict] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    wall_clock: float = 0.0
    checkpoint: str | None = None
    samples_per_epoch: int = 0

    def to_dict(self, include_timing: bool = False) -> dict:
        d = asdict(self)
        if not include_timing:
            d.pop("wall_clock")
        return d


# ----------------------------------------------------------------- helpers


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def _grads(loss, model: ViTModel) -> dict[str, np.ndarray]:
    names = list(model.params)
    if not isinstance(loss, Tensor) or not loss.requires_grad:
        return {k: np.zeros_like(p.data) for k, p in model.params.items()}
    gs = T.grad(loss, [model.params[k] for k in names])
    return {k: g.data for k, g in zip(names, gs)}


def accuracy(model: ViTModel, samples: Sequence[Sample]) -> float:
    images, _, labels = stack(samples)
    logits = predict_logits(model, images)
    return float((logits.argmax(axis=1) == labels).mean())


# ---------------------------------------------------------------- pretrain


def pretrain(
    model_config: ViTConfig,
    dataset: Sequence[Sample],
    config: PretrainConfig = PretrainConfig(),
    validation: Sequence[Sample] | None = None,
) -> tuple[ViTModel, TrainReport]:
    """Train from scratch on ground-truth cross-entropy."""
    if not dataset:
        raise ContractError("empty dataset")
    images, _, labels = stack(dataset)
    if labels.max() >= model_config.num_classes or labels.min() < 0:
        raise ContractError("dataset labels outside the model's class range")
    model = init_model(model_config, config.seed)
    rng = np.random.default_rng([config.seed, 1])
    state = AdamWState()
    report = TrainReport(samples_per_epoch=len(dataset))
    start = time.perf_counter()
    for epoch in range(config.epochs):
        total, count = 0.0, 0
        for idx in _batches(len(images), config.batch_size, rng):
            logits, _ = forward(model, images[idx])
            loss = loss_ce_ground_truth(logits, labels[idx])
            optimizer_step(model.params, _grads(loss, model), state, config.lr,
                           weight_decay=config.weight_decay)
            total += loss.item() * len(idx)
            count += len(idx)
        entry = {"ce_gt": total / count}
        report.epoch_losses.append(entry)
        if validation:
            report.val_accuracy.append(accuracy(model, validation))
        log.info("pretrain epoch %d ce=%.4f", epoch, entry["ce_gt"])
    report.wall_clock = time.perf_counter() - start
    return model, report


# ---------------------------------------------------------------- finetune


def select_finetune_subset(
    samples: Sequence[Sample], classes: Sequence[int], per_class: int, seed: int = 0
) -> list[Sample]:
    """``per_class`` masked samples from each class in ``classes`` (seeded choice)."""
    rng = np.random.default_rng([seed, 2])
    out = []
    for c in classes:
        pool = [s for s in samples if s.label == c and s.mask is not None]
        if len(pool) < per_class:
            raise ContractError(f"class {c} has only {len(pool)} masked samples")
        pick = rng.choice(len(pool), size=per_class, replace=False)
        out.extend(pool[i] for i in sorted(pick))
    return out


def batch_loss(
    model: ViTModel,
    images: np.ndarray,
    masks: np.ndarray,
    labels: np.ndarray,
    config: FinetuneConfig,
):
    """Loss tensor (or 0.0 when every term is off) plus its breakdown."""
    w = config.weights
    toggles = config.loss_toggles
    if config.method == "ours":
        logits, attns = forward(model, images)
        if config.target_class_mode == "predicted":
            target = predicted_class(logits)
        else:
            target = labels
        bd = LossBreakdown()
        rel_terms = []
        if toggles.use_bg or toggles.use_fg:
            grads = attention_gradients(logits, attns, target, create_graph=config.double_backward)
            if not config.double_backward:
                grads = [T.detach(g) for g in grads]
            rmap = relevance_from_capture(attns, grads, target)
            pmask = patch_mask_from_pixels(masks, model.config.patch_size)
            if toggles.use_bg:
                bg = loss_bg(rmap, pmask)
                bd.bg = bg.item()
                rel_terms.append(T.scale(bg, w.bg))
            if toggles.use_fg:
                fg = loss_fg(rmap, pmask)
                bd.fg = fg.item()
                rel_terms.append(T.scale(fg, w.fg))
        bd.relevance = w.bg * bd.bg + w.fg * bd.fg
        terms = []
        if rel_terms:
            rel = rel_terms[0] if len(rel_terms) == 1 else T.add(*rel_terms)
            terms.append(T.scale(rel, w.relevance))
        if toggles.use_classification:
            if config.classification_mode == "confidence":
                cls = loss_confidence(logits)
            else:
                cls = loss_ce_ground_truth(logits, labels)
                bd.ce_gt = cls.item()
            bd.classification = cls.item()
            terms.append(T.scale(cls, w.classification))
        bd.total = w.relevance * bd.relevance + w.classification * bd.classification
        if not terms:
            return 0.0, bd
        loss = terms[0] if len(terms) == 1 else T.add(*terms)
        return loss, bd

    # input-gradient baselines
    lam_bg, lam_cls = config.baseline_weights()
    x = T.Tensor(images, requires_grad=True)
    logits, _ = forward(model, x)
    bd = LossBreakdown()
    if config.method == "gradmask":
        onehot = np.eye(logits.shape[-1], dtype=np.float32)[labels]
        score = T.sum_all(T.hadamard(logits, T.constant(onehot, logits)))
        (gx,) = T.grad(score, [x], create_graph=True)
        bg = loss_gradmask(gx, masks)
        bd.gradmask = bg.item()
    else:
        score = T.sum_all(T.log_softmax_lastdim(logits))
        (gx,) = T.grad(score, [x], create_graph=True)
        bg = loss_rrr(gx, masks)
        bd.rrr = bg.item()
    ce = loss_ce_ground_truth(logits, labels)
    bd.bg = bg.item()
    bd.ce_gt = bd.classification = ce.item()
    bd.relevance = bd.bg
    bd.total = lam_bg * bd.bg + lam_cls * bd.classification
    loss = T.add(T.scale(bg, lam_bg), T.scale(ce, lam_cls))
    return loss, bd


def _check_finetune_set(samples: Sequence[Sample], subset: Sequence[int]) -> None:
    allowed = set(subset)
    for s in samples:
        if s.mask is None:
            raise ContractError("finetuning sample has no foreground mask")
        if s.label not in allowed:
            raise ContractError(f"sample of class {s.label} outside the training class subset")


def finetune_relevance(
    model: ViTModel,
    masked_subset: Sequence[Sample],
    config: FinetuneConfig = FinetuneConfig(),
    validation: Sequence[Sample] | None = None,
) -> tuple[ViTModel, TrainReport]:
    """Finetune a copy of ``model``; the input model is left untouched."""
    config.validate()
    subset = config.class_subset(model.config.num_classes)
    _check_finetune_set(masked_subset, subset)
    if not masked_subset:
        raise ContractError("empty finetuning set")
    model = model.copy()
    images, masks, labels = stack(masked_subset)
    rng = np.random.default_rng([config.seed, 3])
    state = AdamWState()
    report = TrainReport(samples_per_epoch=len(masked_subset))
    start = time.perf_counter()
    keys = ("bg", "fg", "relevance", "classification", "total")
    for epoch in range(config.epochs):
        sums: dict[str, float] = {}
        count = 0
        for idx in _batches(len(images), config.batch_size, rng):
            loss, bd = batch_loss(model, images[idx], masks[idx], labels[idx], config)
            optimizer_step(model.params, _grads(loss, model), state, config.learning_rate,
                           weight_decay=config.weight_decay)
            for k, v in bd.to_dict().items():
                sums[k] = sums.get(k, 0.0) + v * len(idx)
            count += len(idx)
        entry = {k: sums[k] / count for k in sums}
        for k in keys:
            entry.setdefault(k, 0.0)
        report.epoch_losses.append(entry)
        if validation:
            report.val_accuracy.append(accuracy(model, validation))
        log.info("finetune epoch %d %s", epoch, entry)
    report.wall_clock = time.perf_counter() - start
    return model, report


# --------------------------------------------------------------- lr search


def mean_confidence_loss(model: ViTModel, samples: Sequence[Sample]) -> float:
    images, _, _ = stack(samples)
    logits = predict_logits(model, images)
    return float(loss_confidence(T.tensor(logits)).item())


@dataclass
class LrCandidate:
    lr: float
    val_acc_before: float
    val_acc_after: float
    cls_before: float
    cls_after: float
    qualifies: bool


@dataclass
class LrSearchResult:
    chosen_lr: float
    candidates: list[LrCandidate]
    warning: bool

    def to_dict(self) -> dict:
        return asdict(self)


def lr_grid_search(
    model: ViTModel,
    candidates: Sequence[float],
    masked_subset: Sequence[Sample],
    config: FinetuneConfig,
    validation: Sequence[Sample],
    search_epochs: int | None = None,
    max_acc_drop: float = 0.03,
) -> LrSearchResult:
    """Largest lr whose short finetune keeps val accuracy within ``max_acc_drop``
    and does not raise the confidence loss on the validation set."""
    if not candidates:
        raise ContractError("no learning-rate candidates")
    acc0 = accuracy(model, validation)
    cls0 = mean_confidence_loss(model, validation)
    rows = []
    for lr in candidates:
        cfg = replace(config, learning_rate=float(lr))
        if search_epochs is not None:
            cfg = replace(cfg, epochs=search_epochs)
        tuned, _ = finetune_relevance(model, masked_subset, cfg)
        acc1 = accuracy(tuned, validation)
        cls1 = mean_confidence_loss(tuned, validation)
        ok = (acc0 - acc1) <= max_acc_drop + 1e-12 and cls1 <= cls0
        rows.append(LrCandidate(float(lr), acc0, acc1, cls0, cls1, bool(ok)))
    qualified = [r.lr for r in rows if r.qualifies]
    if qualified:
        return LrSearchResult(max(qualified), rows, False)
    log.warning("no learning rate qualified; falling back to the smallest candidate")
    return LrSearchResult(min(r.lr for r in rows), rows, True)
