"""Gradient-weighted attention relevance (GAE) for the ViT in :mod:`relmap.vit`."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import ContractError, DimensionError, Tensor
from .vit import ViTModel, forward

NORM_FLOOR = 1e-12


@dataclass
class RelevanceMap:
    """Per-patch relevance in [0, 1].

    ``values`` is a tensor of shape (..., grid, grid) that stays on the tape
    when built during training. ``target_class`` is an int or an int array
    for batched maps.
    """

    values: Tensor
    target_class: int | np.ndarray

    @property
    def grid(self) -> int:
        return self.values.shape[-1]

    def numpy(self) -> np.ndarray:
        return self.values.data


def layer_relevance(attn: Tensor, grad_attn: Tensor) -> Tensor:
    """Head-mean of the positive part of grad ⊙ attention: (..., h, T, T) -> (..., T, T)."""
    if attn.shape != grad_attn.shape:
        raise DimensionError(f"attention {attn.shape} vs gradient {grad_attn.shape}")
    if attn.ndim < 3 or attn.shape[-1] != attn.shape[-2]:
        raise DimensionError(f"expected (..., heads, T, T), got {attn.shape}")
    return T.mean_axis(T.positive_part(T.hadamard(grad_attn, attn)), -3)


def aggregate_relevance(layers: Sequence[Tensor], n_tokens: int) -> Tensor:
    """R = I, then R <- R + Ā·R for each layer in network order."""
    eye = np.eye(n_tokens, dtype=np.float32)
    if not layers:
        return T.tensor(eye)
    R = None
    for a in layers:
        if a.shape[-2:] != (n_tokens, n_tokens):
            raise DimensionError(f"layer relevance {a.shape} does not match T={n_tokens}")
        if R is None:
            # first step: I + Ā·I
            R = T.add(T.constant(eye, a), a)
        else:
            R = T.add(R, T.matmul(a, R))
    return R


def cls_patch_relevance(R: Tensor, target_class=None) -> RelevanceMap:
    """CLS row without its self-entry, divided by its maximum, as a (grid, grid) map."""
    n = R.shape[-1] - 1
    g = int(round(np.sqrt(n)))
    if g * g != n:
        raise DimensionError(f"{n} patch tokens do not form a square grid")
    row = R[..., 0, 1:]
    peak = T.max_lastdim(row, keepdims=True)
    safe = peak.data >= NORM_FLOOR
    # rows whose peak is below the floor map to all-zero: zero them and divide by 1
    gate = T.constant(safe.astype(np.float32), row)
    denom = T.add(T.hadamard(peak, gate), T.constant(1.0 - safe.astype(np.float32), row))
    values = T.hadamard(T.hadamard(row, gate), T.power(denom, -1.0))
    values = T.reshape(values, row.shape[:-1] + (g, g))
    return RelevanceMap(values, target_class)


def _target_onehot(target, batch_shape, k: int) -> np.ndarray:
    target = np.broadcast_to(np.asarray(target, dtype=np.int64), batch_shape)
    if np.any(target < 0) or np.any(target >= k):
        raise ContractError(f"target class out of range [0, {k})")
    return np.eye(k, dtype=np.float32)[target]


def attention_gradients(
    logits: Tensor, attentions: Sequence[Tensor], target, create_graph: bool = False
) -> list[Tensor]:
    """d(target logit)/dA for every captured layer; batch items are independent."""
    k = logits.shape[-1]
    onehot = _target_onehot(target, logits.shape[:-1], k)
    picked = T.sum_all(T.hadamard(logits, T.constant(onehot, logits)))
    return T.grad(picked, list(attentions), create_graph=create_graph)


def relevance_from_capture(
    attentions: Sequence[Tensor], grads: Sequence[Tensor], target=None
) -> RelevanceMap:
    layers = [layer_relevance(a, g) for a, g in zip(attentions, grads)]
    R = aggregate_relevance(layers, attentions[0].shape[-1])
    return cls_patch_relevance(R, target)


def relevance_map(
    model: ViTModel,
    image,
    target_class,
    *,
    double_backward: bool = False,
    frozen_grads: Sequence[Tensor] | None = None,
    return_logits: bool = False,
):
    """Relevance of ``target_class`` for one image (H,W,3) or a batch (B,H,W,3).

    The attention gradients are computed once and then treated as constants,
    so the map stays differentiable with respect to the weights through the
    attention maps only. ``double_backward`` keeps them on the tape instead.
    ``frozen_grads`` skips the gradient pass and uses the given tensors.
    """
    logits, attentions = forward(model, image)
    k = model.config.num_classes
    _target_onehot(target_class, logits.shape[:-1], k)
    if frozen_grads is not None:
        grads = [T.detach(g) for g in frozen_grads]
    else:
        grads = attention_gradients(logits, attentions, target_class, create_graph=double_backward)
        if not double_backward:
            grads = [T.detach(g) for g in grads]
    rmap = relevance_from_capture(attentions, grads, target_class)
    if return_logits:
        return rmap, logits, grads
    return rmap


def upsample_map(rmap, height: int, width: int) -> np.ndarray:
    """Bilinear resize of a (g,g) map (align-corners=False pixel centres)."""
    values = rmap.numpy() if isinstance(rmap, RelevanceMap) else np.asarray(rmap)
    if height <= 0 or width <= 0:
        raise ContractError("target size must be positive")
    values = values.astype(np.float64)
    gh, gw = values.shape[-2:]

    def coords(n_out, n_in):
        c = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        c = np.clip(c, 0, n_in - 1)
        lo = np.floor(c).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, c - lo

    y0, y1, fy = coords(height, gh)
    x0, x1, fx = coords(width, gw)
    top = values[..., y0, :][..., :, x0] * (1 - fx) + values[..., y0, :][..., :, x1] * fx
    bot = values[..., y1, :][..., :, x0] * (1 - fx) + values[..., y1, :][..., :, x1] * fx
    out = top * (1 - fy)[:, None] + bot * fy[:, None]
    lo, hi = values.min(), values.max()
    return np.clip(out, lo, hi).astype(np.float32)


# ----------------------------------------------------------------- heatmaps

_STOPS = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0]])


def to_gray8(values: np.ndarray) -> np.ndarray:
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.round(255.0 * v).astype(np.uint8)


def colormap(values: np.ndarray) -> np.ndarray:
    """Black -> red -> yellow, linear between stops at 0, 0.5, 1; output uint8 RGB."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    pos = v * 2.0
    lo = np.minimum(np.floor(pos).astype(int), 1)
    frac = (pos - lo)[..., None]
    rgb = _STOPS[lo] * (1 - frac) + _STOPS[lo + 1] * frac
    return np.round(255.0 * rgb).astype(np.uint8)


def write_pgm(path, gray: np.ndarray) -> None:
    gray = np.asarray(gray, dtype=np.uint8)
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def export_heatmap(values: np.ndarray, stem) -> tuple[Path, Path]:
    """Write ``stem.pgm`` (grayscale) and ``stem.ppm`` (colormapped)."""
    stem = Path(stem)
    pgm, ppm = stem.with_suffix(".pgm"), stem.with_suffix(".ppm")
    write_pgm(pgm, to_gray8(values))
    write_ppm(ppm, colormap(values))
    return pgm, ppm
