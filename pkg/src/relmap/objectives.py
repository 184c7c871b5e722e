"""Loss functions: relevance-guided objective and the input-gradient baselines."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .relevance import RelevanceMap
from .tensor import ContractError, DimensionError, Tensor


@dataclass(frozen=True)
class LossWeights:
    bg: float = 2.0
    fg: float = 0.3
    relevance: float = 0.8
    classification: float = 0.2

    def __post_init__(self):
        for name, v in asdict(self).items():
            if v < 0:
                raise ContractError(f"loss weight {name} must be nonnegative")


@dataclass
class LossBreakdown:
    bg: float = 0.0
    fg: float = 0.0
    relevance: float = 0.0
    classification: float = 0.0
    total: float = 0.0
    ce_gt: float | None = None
    gradmask: float | None = None
    rrr: float | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def patch_mask_from_pixels(mask: np.ndarray, patch_size: int) -> np.ndarray:
    """Soft per-patch foreground fraction; (..., H, W) -> (..., H/p, W/p)."""
    mask = np.asarray(mask, dtype=np.float64)
    H, W = mask.shape[-2:]
    if H % patch_size or W % patch_size:
        raise DimensionError(f"mask {H}x{W} not divisible by patch {patch_size}")
    p = patch_size
    lead = mask.shape[:-2]
    blocks = mask.reshape(lead + (H // p, p, W // p, p))
    return blocks.mean(axis=(-3, -1)).astype(np.float32)


def _values(R) -> Tensor:
    return R.values if isinstance(R, RelevanceMap) else R


def _check_grid(r: Tensor, mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=r.data.dtype)
    if r.shape[-2:] != mask.shape[-2:]:
        raise DimensionError(f"relevance grid {r.shape} vs mask {mask.shape}")
    try:
        np.broadcast_shapes(r.shape, mask.shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    return mask


def loss_bg(R, mask) -> Tensor:
    """Mean over patches of (R ⊙ (1 - S))²."""
    r = _values(R)
    m = _check_grid(r, mask)
    masked = T.hadamard(r, T.constant(1.0 - m, r))
    return T.mean_all(T.hadamard(masked, masked))


def loss_fg(R, mask) -> Tensor:
    """Mean over patches of (R ⊙ S - 1)²; background patches add a constant 1."""
    r = _values(R)
    m = _check_grid(r, mask)
    diff = T.add(T.hadamard(r, T.constant(m, r)), T.constant(-np.ones(()), r))
    return T.mean_all(T.hadamard(diff, diff))


def loss_relevance(bg, fg, w: LossWeights = LossWeights()):
    return _weighted(bg, w.bg, fg, w.fg)


def loss_total(relevance, classification, w: LossWeights = LossWeights()):
    return _weighted(relevance, w.relevance, classification, w.classification)


def _weighted(a, wa, b, wb):
    if isinstance(a, Tensor) or isinstance(b, Tensor):
        a = a if isinstance(a, Tensor) else T.tensor(a)
        b = b if isinstance(b, Tensor) else T.tensor(b)
        return T.add(T.scale(a, wa), T.scale(b, wb))
    return wa * a + wb * b


def _log_probs(logits: Tensor) -> Tensor:
    if logits.shape[-1] < 2:
        raise ContractError("need at least two classes")
    return T.log_softmax_lastdim(logits)


def predicted_class(logits) -> np.ndarray:
    """Argmax over the last axis; ties go to the lowest index."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return data.argmax(axis=-1)


def _nll(logp: Tensor, target: np.ndarray) -> Tensor:
    onehot = np.eye(logp.shape[-1], dtype=np.float32)[target]
    picked = T.sum_axis(T.hadamard(logp, T.constant(onehot, logp)), -1)
    return T.scale(T.mean_all(picked), -1.0)


def loss_confidence(logits: Tensor) -> Tensor:
    """Cross-entropy against the model's own (gradient-stopped) argmax; batch-mean."""
    logp = _log_probs(logits)
    return _nll(logp, predicted_class(logits))


def loss_ce_ground_truth(logits: Tensor, label) -> Tensor:
    k = logits.shape[-1]
    label = np.broadcast_to(np.asarray(label, dtype=np.int64), logits.shape[:-1])
    if np.any(label < 0) or np.any(label >= k):
        raise ContractError(f"label out of range [0, {k})")
    return _nll(_log_probs(logits), label)


def _background_gradient(input_grad: Tensor, pixel_mask) -> Tensor:
    m = np.asarray(pixel_mask, dtype=input_grad.data.dtype)
    if input_grad.ndim < 3 or input_grad.shape[:-1] != m.shape:
        raise DimensionError(f"gradient {input_grad.shape} vs mask {m.shape}")
    bg = T.constant((1.0 - m)[..., None], input_grad)
    return T.hadamard(input_grad, bg)


def loss_gradmask(input_grad: Tensor, pixel_mask) -> Tensor:
    """L2 norm of the background part of the input gradient (batch-mean of per-image norms)."""
    masked = _background_gradient(input_grad, pixel_mask)
    sq = T.hadamard(masked, masked)
    if sq.ndim == 3:
        ss = T.sum_all(sq)
    else:
        ss = T.sum_axis(sq, (-3, -2, -1))
    # keep the gradient finite where the norm is exactly zero
    floor = (ss.data == 0).astype(ss.data.dtype) * ss.data.dtype.type(1e-30)
    norm = T.add(T.power(T.add(ss, T.constant(floor, ss)), 0.5), T.constant(-np.power(floor, 0.5), ss))
    return T.mean_all(norm)


def loss_rrr(logprob_sum_grad: Tensor, pixel_mask) -> Tensor:
    """Sum of squared background input gradients (batch-mean of per-image sums)."""
    masked = _background_gradient(logprob_sum_grad, pixel_mask)
    sq = T.hadamard(masked, masked)
    if sq.ndim == 3:
        return T.sum_all(sq)
    return T.mean_all(T.sum_axis(sq, (-3, -2, -1)))
