"""Accuracy under shift, segmentation-from-relevance scores, ablations and budget sweeps."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .objectives import predicted_class
from .relevance import relevance_map, upsample_map
from .synthdata import Sample, stack
from .tensor import ContractError, DimensionError
from .trainer import FinetuneConfig, LossToggles, finetune_relevance, select_finetune_subset
from .vit import ViTModel, predict_logits


# ---------------------------------------------------------------- accuracy


def topk_hits(logits: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """Boolean per row: label among the k largest logits, ties to the lower index."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if not 1 <= k <= logits.shape[-1]:
        raise ContractError(f"k={k} outside [1, {logits.shape[-1]}]")
    own = np.take_along_axis(logits, labels[:, None], axis=1)
    idx = np.arange(logits.shape[1])[None, :]
    ahead = (logits > own) | ((logits == own) & (idx < labels[:, None]))
    return ahead.sum(axis=1) < k


def topk_accuracy(model: ViTModel, samples: Sequence[Sample], k: int = 1) -> float:
    if not samples:
        raise ContractError("empty sample list")
    images, _, labels = stack(samples)
    return float(topk_hits(predict_logits(model, images), labels, k).mean())


@dataclass
class SplitScores:
    top1: float
    top5: float
    ref_top1: float
    ref_top5: float
    delta_top1: float
    delta_top5: float
    # class -> (count, top1 delta)
    per_class: dict[int, tuple[int, float]] = field(default_factory=dict)
    subset_delta: float = 0.0
    heldout_delta: float = 0.0


@dataclass
class RobustnessReport:
    splits: dict[str, SplitScores]
    train_class_subset: tuple[int, ...]

    def delta(self, split: str) -> float:
        return self.splits[split].delta_top1

    def to_dict(self) -> dict:
        out = {"train_class_subset": list(self.train_class_subset), "splits": {}}
        for name, s in self.splits.items():
            d = asdict(s)
            d["per_class"] = {str(c): {"count": n, "delta_top1": v} for c, (n, v) in s.per_class.items()}
            out["splits"][name] = d
        return out


def _weighted_delta(per_class: Mapping[int, tuple[int, float]], classes) -> float:
    n = sum(per_class[c][0] for c in classes if c in per_class)
    if n == 0:
        return 0.0
    return sum(per_class[c][0] * per_class[c][1] for c in classes if c in per_class) / n


def robustness_report(
    model: ViTModel,
    reference: ViTModel,
    suites: Mapping[str, Sequence[Sample]],
    train_class_subset: Sequence[int],
) -> RobustnessReport:
    k = model.config.num_classes
    if reference.config.num_classes != k:
        raise ContractError("model and reference disagree on the number of classes")
    top = min(5, k)
    subset = tuple(sorted(int(c) for c in train_class_subset))
    splits = {}
    for name, samples in suites.items():
        if not samples:
            raise ContractError(f"split {name!r} is empty")
        images, _, labels = stack(samples)
        if labels.min() < 0 or labels.max() >= k:
            raise ContractError(f"split {name!r} labels outside the model's label space")
        lm, lr = predict_logits(model, images), predict_logits(reference, images)
        h1, h5 = topk_hits(lm, labels, 1), topk_hits(lm, labels, top)
        r1, r5 = topk_hits(lr, labels, 1), topk_hits(lr, labels, top)
        per_class = {}
        for c in np.unique(labels):
            sel = labels == c
            per_class[int(c)] = (int(sel.sum()), float(h1[sel].mean() - r1[sel].mean()))
        heldout = [c for c in per_class if c not in subset]
        splits[name] = SplitScores(
            top1=float(h1.mean()),
            top5=float(h5.mean()),
            ref_top1=float(r1.mean()),
            ref_top5=float(r5.mean()),
            delta_top1=float(h1.mean() - r1.mean()),
            delta_top5=float(h5.mean() - r5.mean()),
            per_class=per_class,
            subset_delta=_weighted_delta(per_class, subset),
            heldout_delta=_weighted_delta(per_class, heldout),
        )
    return RobustnessReport(splits, subset)


# ------------------------------------------------------------ segmentation


@dataclass
class SegReport:
    pixel_accuracy: float
    miou: float
    map: float
    images: int

    def to_dict(self) -> dict:
        return asdict(self)


def average_precision(scores: np.ndarray, target: np.ndarray) -> float:
    """Area under the precision-recall curve by the trapezoid rule.

    Thresholds run over the distinct scores from high to low; the curve
    starts at recall 0 with the precision of the first threshold, so a
    constant score gives the positive fraction.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(target).ravel().astype(bool)
    pos = y.sum()
    if pos == 0:
        raise ContractError("average precision needs at least one positive")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    # last index of every run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = tp[ends].astype(np.float64)
    npred = (ends + 1).astype(np.float64)
    precision = tp / npred
    recall = tp / pos
    precision = np.r_[precision[0], precision]
    recall = np.r_[0.0, recall]
    return float(np.sum(np.diff(recall) * (precision[1:] + precision[:-1]) / 2.0))


def segmentation_metrics(maps: Sequence[np.ndarray], masks: Sequence[np.ndarray]) -> SegReport:
    """Score relevance maps (already at mask resolution) against binary masks.

    Each map is binarized at its own mean value (strictly above = foreground).
    Pixel accuracy and the two-class IoUs pool pixel counts over the set; AP
    is computed per image on the raw scores and averaged over images that have
    both foreground and background.
    """
    if len(maps) != len(masks) or not maps:
        raise ContractError("need the same nonzero number of maps and masks")
    correct = total = 0
    inter = np.zeros(2)
    union = np.zeros(2)
    aps = []
    for m, y in zip(maps, masks):
        m = np.asarray(m, dtype=np.float64)
        y = np.asarray(y).astype(bool)
        if m.shape != y.shape:
            raise DimensionError(f"map {m.shape} vs mask {y.shape}")
        pred = m > m.mean()
        correct += int((pred == y).sum())
        total += y.size
        for cls, (p, t) in enumerate(((~pred, ~y), (pred, y))):
            inter[cls] += (p & t).sum()
            union[cls] += (p | t).sum()
        if 0 < y.sum() < y.size:
            aps.append(average_precision(m, y))
    iou = np.where(union > 0, inter / np.maximum(union, 1), 1.0)
    return SegReport(
        pixel_accuracy=correct / total,
        miou=float(iou.mean()),
        map=float(np.mean(aps)) if aps else 0.0,
        images=len(maps),
    )


def relevance_maps(
    model: ViTModel, samples: Sequence[Sample], target_mode: str = "predicted", chunk: int = 64
) -> list[np.ndarray]:
    """Upsampled relevance for each sample, for the predicted or the true class."""
    images, _, labels = stack(samples)
    n = images.shape[-2]
    out = []
    for i in range(0, len(images), chunk):
        batch = images[i : i + chunk]
        if target_mode == "predicted":
            target = predicted_class(predict_logits(model, batch))
        elif target_mode == "ground_truth":
            target = labels[i : i + chunk]
        else:
            raise ContractError(f"bad target mode {target_mode!r}")
        rmap = relevance_map(model, batch, target)
        out.extend(upsample_map(v, n, n) for v in rmap.numpy())
    return out


def segmentation_report(model: ViTModel, samples: Sequence[Sample], target_mode: str = "predicted") -> SegReport:
    if any(s.mask is None for s in samples):
        raise ContractError("segmentation needs masked samples")
    return segmentation_metrics(relevance_maps(model, samples, target_mode), [s.mask for s in samples])


# ---------------------------------------------------------------- ablation


def _toggles(bg=True, fg=True, cls=True) -> LossToggles:
    return LossToggles(use_bg=bg, use_fg=fg, use_classification=cls)


ABLATION_ROWS: dict[str, dict] = {
    "full": {},
    "w/o classification": {"loss_toggles": _toggles(cls=False)},
    "w/o bg": {"loss_toggles": _toggles(bg=False)},
    "w/o fg": {"loss_toggles": _toggles(fg=False)},
    "w/ ground-truth": {"classification_mode": "ground_truth_ce"},
}


@dataclass
class AblationReport:
    rows: dict[str, RobustnessReport]

    def delta_table(self) -> dict[str, dict[str, float]]:
        return {
            name: {split: s.delta_top1 for split, s in rep.splits.items()}
            for name, rep in self.rows.items()
        }

    def to_dict(self) -> dict:
        return {
            "rows": {k: v.to_dict() for k, v in self.rows.items()},
            "delta_table": self.delta_table(),
        }


def finetune_and_report(
    base: ViTModel,
    pool: Sequence[Sample],
    suites: Mapping[str, Sequence[Sample]],
    config: FinetuneConfig,
) -> tuple[ViTModel, RobustnessReport]:
    classes = config.class_subset(base.config.num_classes)
    subset = select_finetune_subset(pool, classes, config.samples_per_class, config.seed)
    tuned, _ = finetune_relevance(base, subset, config)
    return tuned, robustness_report(tuned, base, suites, classes)


def ablation_suite(
    base: ViTModel,
    pool: Sequence[Sample],
    suites: Mapping[str, Sequence[Sample]],
    config: FinetuneConfig = FinetuneConfig(),
    rows: Mapping[str, dict] | None = None,
) -> AblationReport:
    """One finetune per row plus an untouched "original" control row."""
    rows = ABLATION_ROWS if rows is None else rows
    classes = config.class_subset(base.config.num_classes)
    out = {"original": robustness_report(base, base, suites, classes)}
    for name, overrides in rows.items():
        cfg = replace(config, **overrides)
        cfg.validate()
        _, out[name] = finetune_and_report(base, pool, suites, cfg)
    return AblationReport(out)


# ------------------------------------------------------------------- sweep


@dataclass
class SweepCell:
    samples_per_class: int
    class_count: int
    report: RobustnessReport


def sensitivity_sweep(
    base: ViTModel,
    pool: Sequence[Sample],
    suites: Mapping[str, Sequence[Sample]],
    samples_per_class: Sequence[int],
    class_counts: Sequence[int],
    config: FinetuneConfig = FinetuneConfig(),
) -> list[SweepCell]:
    """Finetune for every (samples per class, number of classes) cell; the
    classes used are the first ``class_count`` labels."""
    if not samples_per_class or not class_counts:
        raise ContractError("sweep lists must be nonempty")
    cells = []
    for n in samples_per_class:
        for c in class_counts:
            if not 1 <= c <= base.config.num_classes:
                raise ContractError(f"class count {c} out of range")
            cfg = replace(config, samples_per_class=int(n), train_class_subset=tuple(range(c)))
            _, rep = finetune_and_report(base, pool, suites, cfg)
            cells.append(SweepCell(int(n), int(c), rep))
    return cells


def sweep_rows(cells: Sequence[SweepCell]) -> list[dict]:
    rows = []
    for cell in cells:
        row = {"samples_per_class": cell.samples_per_class, "class_count": cell.class_count}
        for split, s in cell.report.splits.items():
            row[f"{split}_top1"] = s.top1
            row[f"{split}_delta_top1"] = s.delta_top1
        rows.append(row)
    return rows


# ---------------------------------------------------------------- emitters


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def dumps_json(obj) -> str:
    """Canonical JSON text: sorted keys, fixed indentation, trailing newline."""
    return json.dumps(_plain(obj), sort_keys=True, indent=2) + "\n"


def write_json(obj, path) -> Path:
    path = Path(path)
    path.write_text(dumps_json(obj))
    return path


def write_csv(rows: Sequence[dict], path) -> Path:
    path = Path(path)
    fields = list(rows[0]) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return path
