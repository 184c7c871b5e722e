"""Sufficient input subsets by gradient-guided backward elimination.

Pixels (all three channels at one location) are removed by setting them to a
fill value. Each round drops the retained pixels with the smallest
|gradient| * |value| saliency; a round that pushes the target probability
below the threshold is undone and the batch fraction halved. Once single
removals are reached, the remaining candidates are tried in saliency order
until none can be dropped. There is no input optimization, so a target the
full image does not already reach is reported as a failure.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .synthdata import to_uint8, write_pnm
from .tensor import ContractError
from .vit import ViTModel, forward, predict_logits


@dataclass
class SisResult:
    target: int
    threshold: float
    success: bool
    retained: np.ndarray  # flat row-major pixel indices, ascending
    final_confidence: float
    trace: list[float] = field(default_factory=list)
    # retained pixel count after each accepted round, aligned with ``trace``
    sizes: list[int] = field(default_factory=list)
    retained_fraction: float = 1.0
    image_shape: tuple[int, int] = (0, 0)

    def retained_mask(self) -> np.ndarray:
        m = np.zeros(self.image_shape[0] * self.image_shape[1], dtype=bool)
        m[self.retained] = True
        return m.reshape(self.image_shape)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["retained"] = [int(i) for i in self.retained]
        d["image_shape"] = list(self.image_shape)
        return d


def masked_image(image: np.ndarray, keep: np.ndarray, fill: float | np.ndarray = 0.0) -> np.ndarray:
    keep = np.asarray(keep, dtype=bool)
    return np.where(keep[..., None], image, np.asarray(fill, dtype=image.dtype)).astype(np.float32)


def target_confidence(model: ViTModel, images: np.ndarray, target: int) -> np.ndarray:
    """Softmax probability of ``target`` for a stack of images (float64)."""
    logits = predict_logits(model, images).astype(np.float64)
    logits -= logits.max(axis=-1, keepdims=True)
    p = np.exp(logits)
    return p[:, target] / p.sum(axis=-1)


def _saliency(model: ViTModel, image: np.ndarray, target: int) -> np.ndarray:
    x = T.Tensor(image, requires_grad=True)
    logits, _ = forward(model, x)
    prob = T.softmax_lastdim(logits)[target]
    (g,) = T.grad(prob, [x])
    return (np.abs(g.data) * np.abs(image)).sum(axis=-1)


def replay(model: ViTModel, image: np.ndarray, result: SisResult, fill=0.0) -> float:
    keep = result.retained_mask()
    return float(target_confidence(model, masked_image(image, keep, fill)[None], result.target)[0])


def find_sis(
    model: ViTModel,
    image: np.ndarray,
    target_class: int,
    threshold: float = 0.9,
    batch_eliminate_fraction: float = 0.05,
    fill: str = "zero",
    candidate_chunk: int = 64,
    max_rounds: int = 100_000,
) -> SisResult:
    if not 0.0 < threshold < 1.0:
        raise ContractError(f"threshold {threshold} outside (0, 1)")
    if not 0.0 < batch_eliminate_fraction <= 1.0:
        raise ContractError("batch_eliminate_fraction must be in (0, 1]")
    k = model.config.num_classes
    if not 0 <= target_class < k:
        raise ContractError(f"target class {target_class} outside [0, {k})")
    image = np.asarray(image, dtype=np.float32)
    H, W = image.shape[:2]
    if fill == "zero":
        fill_value = np.zeros(3, np.float32)
    elif fill == "mean":
        fill_value = image.reshape(-1, 3).mean(axis=0)
    else:
        raise ContractError(f"bad fill {fill!r}")

    keep = np.ones(H * W, dtype=bool)

    def conf(masks: np.ndarray) -> np.ndarray:
        imgs = masked_image(image[None], masks.reshape(-1, H, W), fill_value)
        return target_confidence(model, imgs, target_class)

    current = float(conf(keep[None])[0])
    trace = [current]
    sizes = [H * W]
    if current < threshold:
        return SisResult(target_class, threshold, False, np.flatnonzero(keep), current,
                         trace, sizes, 1.0, (H, W))

    frac = batch_eliminate_fraction
    for _ in range(max_rounds):
        alive = np.flatnonzero(keep)
        if len(alive) <= 1:
            break
        sal = _saliency(model, masked_image(image, keep.reshape(H, W), fill_value), target_class)
        order = alive[np.argsort(sal.ravel()[alive], kind="stable")]
        n = int(np.floor(frac * len(alive)))
        if n >= 1:
            trial = keep.copy()
            trial[order[:n]] = False
            p = float(conf(trial[None])[0])
            if p >= threshold:
                keep, current = trial, p
                trace.append(p)
                sizes.append(int(keep.sum()))
            else:
                frac /= 2.0
            continue
        # single removals: first candidate in saliency order that stays above threshold
        removed = False
        for i in range(0, len(order), candidate_chunk):
            cand = order[i : i + candidate_chunk]
            trials = np.repeat(keep[None], len(cand), axis=0)
            trials[np.arange(len(cand)), cand] = False
            ps = conf(trials)
            for j in np.flatnonzero(ps >= threshold):
                trial = keep.copy()
                trial[cand[j]] = False
                # re-evaluate alone so the recorded value matches a replay exactly
                p = float(conf(trial[None])[0])
                if p >= threshold:
                    keep, current = trial, p
                    trace.append(p)
                    sizes.append(int(keep.sum()))
                    removed = True
                    break
            if removed:
                break
        if not removed:
            break
    alive = np.flatnonzero(keep)
    return SisResult(target_class, threshold, True, alive, current, trace, sizes,
                     len(alive) / (H * W), (H, W))


def export_sis(result: SisResult, image: np.ndarray, stem) -> tuple[Path, Path]:
    """Write ``stem.ppm`` (eliminated pixels black) and ``stem.json``."""
    stem = Path(stem)
    ppm, js = stem.with_suffix(".ppm"), stem.with_suffix(".json")
    write_pnm(ppm, to_uint8(masked_image(np.asarray(image, np.float32), result.retained_mask())))
    js.write_text(json.dumps(result.to_dict(), sort_keys=True, indent=2) + "\n")
    return ppm, js
