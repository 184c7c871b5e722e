"""A small pre-norm Vision Transformer that keeps its attention maps."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor


class ConfigError(ValueError):
    pass


class CheckpointError(IOError):
    pass


class CorruptHeaderError(CheckpointError):
    pass


class TruncatedBlobError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 2.0
    num_classes: int = 8

    def validate(self) -> None:
        if min(self.image_size, self.patch_size, self.embed_dim, self.depth, self.heads) < 1:
            raise ConfigError("all sizes must be positive")
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if self.hidden_dim < 1:
            raise ConfigError("mlp_ratio too small")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def hidden_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size**2


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(np.float32)


def param_shapes(cfg: ViTConfig) -> dict[str, tuple[int, ...]]:
    D, H = cfg.embed_dim, cfg.hidden_dim
    shapes = {
        "patch.w": (cfg.patch_dim, D),
        "patch.b": (D,),
        "cls": (1, D),
        "pos": (cfg.num_tokens, D),
    }
    for i in range(cfg.depth):
        p = f"blocks.{i}."
        shapes.update(
            {
                p + "ln1.g": (D,),
                p + "ln1.b": (D,),
                p + "qkv.w": (D, 3 * D),
                p + "qkv.b": (3 * D,),
                p + "proj.w": (D, D),
                p + "proj.b": (D,),
                p + "ln2.g": (D,),
                p + "ln2.b": (D,),
                p + "fc1.w": (D, H),
                p + "fc1.b": (H,),
                p + "fc2.w": (H, D),
                p + "fc2.b": (D,),
            }
        )
    shapes.update({"norm.g": (D,), "norm.b": (D,), "head.w": (D, cfg.num_classes), "head.b": (cfg.num_classes,)})
    return shapes


class ViTModel:
    """Weights live in ``params`` (name -> Tensor), ordered as in :func:`param_shapes`."""

    def __init__(self, config: ViTConfig, params: dict[str, Tensor]):
        config.validate()
        self.config = config
        self.params = params

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self):
        return self.params.items()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self, dtype=None) -> "ViTModel":
        params = {
            k: Tensor(v.data.astype(dtype or v.data.dtype, copy=True), requires_grad=True)
            for k, v in self.params.items()
        }
        return ViTModel(self.config, params)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, v in self.params.items():
            v.data = np.ascontiguousarray(state[k], dtype=v.data.dtype)

    def __call__(self, images):
        return forward(self, images)


def init_model(config: ViTConfig, seed: int = 0) -> ViTModel:
    config.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            data = np.ones(shape, np.float32)
        elif leaf == "b":
            data = np.zeros(shape, np.float32)
        else:
            data = _trunc_normal(rng, shape)
        params[name] = Tensor(data, requires_grad=True)
    return ViTModel(config, params)


# ------------------------------------------------------------------ patches


def _check_image(images: np.ndarray, image_size: int) -> None:
    if images.ndim not in (3, 4) or images.shape[-3:] != (image_size, image_size, 3):
        raise DimensionError(
            f"expected (..., {image_size}, {image_size}, 3) image, got {images.shape}"
        )


def patchify(images, patch_size: int) -> Tensor:
    """(B,H,W,3) or (H,W,3) -> (B,n,3*p*p) / (n,3*p*p).

    Patches run row-major over the grid; inside a patch the layout is
    (row, column, channel), channel fastest.
    """
    t = images if isinstance(images, Tensor) else T.tensor(images)
    single = t.ndim == 3
    if t.ndim not in (3, 4) or t.shape[-1] != 3:
        raise DimensionError(f"bad image shape {t.shape}")
    H, W = t.shape[-3], t.shape[-2]
    if H != W or H % patch_size:
        raise DimensionError(f"image {H}x{W} not tileable by patch {patch_size}")
    g, p = H // patch_size, patch_size
    x = t if not single else T.reshape(t, (1, H, W, 3))
    B = x.shape[0]
    x = T.reshape(x, (B, g, p, g, p, 3))
    x = T.permute(x, (0, 1, 3, 2, 4, 5))
    x = T.reshape(x, (B, g * g, p * p * 3))
    return T.reshape(x, (g * g, p * p * 3)) if single else x


def unpatchify(tokens: np.ndarray, patch_size: int) -> np.ndarray:
    tokens = np.asarray(tokens)
    single = tokens.ndim == 2
    x = tokens[None] if single else tokens
    B, n, _ = x.shape
    g = int(round(np.sqrt(n)))
    p = patch_size
    x = x.reshape(B, g, g, p, p, 3).transpose(0, 1, 3, 2, 4, 5).reshape(B, g * p, g * p, 3)
    return x[0] if single else x


# ------------------------------------------------------------------ forward


def _affine_ln(x: Tensor, g: Tensor, b: Tensor) -> Tensor:
    return T.add(T.hadamard(T.layernorm(x), g), b)


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.add(T.matmul(x, w), b)


def forward(model: ViTModel, images) -> tuple[Tensor, list[Tensor]]:
    """Return logits (B,K) or (K,) and the per-layer attention maps.

    Each attention map is (B,heads,T,T) (or (heads,T,T) for a single image)
    and stays on the tape, so logits can be differentiated with respect to it.
    """
    cfg = model.config
    P = model.params
    data = images.data if isinstance(images, Tensor) else np.asarray(images)
    _check_image(data, cfg.image_size)
    single = data.ndim == 3
    tokens = patchify(images if isinstance(images, Tensor) else T.tensor(data), cfg.patch_size)
    if single:
        tokens = T.reshape(tokens, (1,) + tokens.shape)
    B = tokens.shape[0]
    D, Hh, d, Tn = cfg.embed_dim, cfg.heads, cfg.head_dim, cfg.num_tokens

    x = _linear(tokens, P["patch.w"], P["patch.b"])
    cls = T.hadamard(T.constant(np.ones((B, 1, 1)), x), T.reshape(P["cls"], (1, 1, D)))
    x = T.concat([cls, x], axis=1)
    x = T.add(x, P["pos"])

    attentions = []
    inv_sqrt = 1.0 / np.sqrt(d)
    for i in range(cfg.depth):
        p = f"blocks.{i}."
        h = _affine_ln(x, P[p + "ln1.g"], P[p + "ln1.b"])
        qkv = _linear(h, P[p + "qkv.w"], P[p + "qkv.b"])
        qkv = T.permute(T.reshape(qkv, (B, Tn, 3, Hh, d)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = T.scale(T.matmul(q, T.transpose_lastdims(k)), inv_sqrt)
        attn = T.softmax_lastdim(scores)
        if single:
            # capture the per-image map and compute from it, so it lies on the logit path
            cap = T.reshape(attn, attn.shape[1:])
            attn = T.reshape(cap, (1,) + cap.shape)
            attentions.append(cap)
        else:
            attentions.append(attn)
        out = T.matmul(attn, v)
        out = T.reshape(T.permute(out, (0, 2, 1, 3)), (B, Tn, D))
        x = T.add(x, _linear(out, P[p + "proj.w"], P[p + "proj.b"]))
        h = _affine_ln(x, P[p + "ln2.g"], P[p + "ln2.b"])
        h = _linear(T.gelu(_linear(h, P[p + "fc1.w"], P[p + "fc1.b"])), P[p + "fc2.w"], P[p + "fc2.b"])
        x = T.add(x, h)

    x = _affine_ln(x, P["norm.g"], P["norm.b"])
    logits = _linear(x[:, 0, :], P["head.w"], P["head.b"])
    if single:
        logits = logits[0]
    return logits, attentions


def predict_logits(model: ViTModel, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Gradient-free logits for a stack of images."""
    images = np.asarray(images, dtype=np.float32)
    out = []
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            logits, _ = forward(model, images[i : i + batch_size])
            out.append(logits.data)
    if not out:
        return np.zeros((0, model.config.num_classes), np.float32)
    return np.concatenate(out, axis=0)


# --------------------------------------------------------------- checkpoints

_MAGIC = b"RELMAPCK"


def save_checkpoint(model: ViTModel, path) -> None:
    """JSON header (config + tensor directory) followed by a little-endian float32 blob.

    Layout: 8-byte magic, uint64 LE header length, UTF-8 JSON header, blob.
    """
    entries = []
    offset = 0
    chunks = []
    for name, t in model.params.items():
        buf = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset})
        chunks.append(buf)
        offset += len(buf)
    header = json.dumps(
        {"config": asdict(model.config), "tensors": entries, "blob_bytes": offset},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)


def load_checkpoint(path) -> ViTModel:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:8] != _MAGIC:
        raise CorruptHeaderError(f"{path}: not a checkpoint")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if 16 + hlen > len(raw):
        raise CorruptHeaderError(f"{path}: header length exceeds file")
    try:
        header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
        config = ViTConfig(**header["config"])
        entries = header["tensors"]
        blob_bytes = int(header["blob_bytes"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptHeaderError(f"{path}: corrupt header ({exc})") from exc
    blob = raw[16 + hlen :]
    if len(blob) < blob_bytes:
        raise TruncatedBlobError(f"{path}: truncated blob ({len(blob)} < {blob_bytes} bytes)")
    try:
        config.validate()
    except ConfigError as exc:
        raise ConfigMismatchError(f"{path}: {exc}") from exc
    expected = param_shapes(config)
    names = [e["name"] for e in entries]
    if names != list(expected):
        raise ConfigMismatchError(f"{path}: tensor directory does not match config")
    params = {}
    for e in entries:
        shape = tuple(e["shape"])
        if shape != expected[e["name"]]:
            raise ConfigMismatchError(
                f"{path}: {e['name']} has shape {shape}, config implies {expected[e['name']]}"
            )
        n = int(np.prod(shape)) * 4
        start = int(e["offset"])
        if start + n > len(blob):
            raise TruncatedBlobError(f"{path}: tensor {e['name']} runs past end of blob")
        arr = np.frombuffer(blob, dtype="<f4", count=n // 4, offset=start).reshape(shape)
        params[e["name"]] = Tensor(arr.astype(np.float32), requires_grad=True)
    return ViTModel(config, params)
