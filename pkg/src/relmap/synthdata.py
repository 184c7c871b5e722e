"""Procedural spurious-cue benchmark: glyphs on class-correlated textures.

Each class owns one glyph shape and one background texture. With probability
``cue_correlation`` a sample is drawn on its class texture, otherwise on one
of the others, so a classifier can shortcut through the background. Masks are
the exact glyph support (coverage >= 50% under 5x5 supersampling).
"""

from __future__ import annotations

import colorsys
import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

GLYPHS = ("disk", "square", "triangle", "cross", "ring", "bar", "L-shape", "diamond")
TEXTURES = ("solid", "stripes", "checker", "gradient", "noise", "dots", "grid", "rings")

# area of each glyph in units of r², where r is the bounding-circle radius
GLYPH_UNIT_AREA = {
    "disk": math.pi,
    "square": 2.0,
    "triangle": 3 * math.sqrt(3) / 4,
    "cross": 8 * 0.9 * 0.3 - 4 * 0.3**2,
    "ring": math.pi * (1 - 0.55**2),
    "bar": 4 * 0.95 * 0.25,
    "L-shape": 0.5 * 1.2 * 2 - 0.5**2,
    "diamond": 2 * 0.95 * 0.55,
}

SUPERSAMPLE = 5
NOISE_AMPLITUDE = 0.03


class SynthError(ValueError):
    """Scene or dataset contract violated."""


class DatasetIOError(IOError):
    pass


class MissingFileError(DatasetIOError):
    pass


class ManifestError(DatasetIOError):
    pass


class ShiftKind(str, Enum):
    BACKGROUND_SWAP = "background_swap"
    LOCATION = "location"
    ROTATION = "rotation"
    SIZE = "size"


@dataclass(frozen=True)
class SceneSpec:
    class_id: int
    glyph_id: int
    fg_color: tuple[float, float, float]
    bg_texture_id: int
    position: tuple[float, float]  # (x, y) centre in pixels
    rotation: float  # degrees
    scale: float  # bounding-circle diameter as a fraction of the image side
    noise_seed: int

    def radius(self, image_size: int) -> float:
        return self.scale * image_size / 2.0

    def fits(self, image_size: int) -> bool:
        r = self.radius(image_size)
        x, y = self.position
        eps = 1e-9
        return r > 0 and r - eps <= x <= image_size - r + eps and r - eps <= y <= image_size - r + eps

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fg_color"] = list(self.fg_color)
        d["position"] = list(self.position)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(
            class_id=int(d["class_id"]),
            glyph_id=int(d["glyph_id"]),
            fg_color=tuple(float(c) for c in d["fg_color"]),
            bg_texture_id=int(d["bg_texture_id"]),
            position=tuple(float(c) for c in d["position"]),
            rotation=float(d["rotation"]),
            scale=float(d["scale"]),
            noise_seed=int(d["noise_seed"]),
        )


@dataclass
class Sample:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    mask: np.ndarray  # (H, W) uint8, 1 = foreground
    label: int
    provenance: SceneSpec


@dataclass(frozen=True)
class DatasetConfig:
    classes: int = 8
    per_class: int = 200
    cue_correlation: float = 0.95
    image_size: int = 32
    seed: int = 0
    scale_range: tuple[float, float] = (0.5, 0.7)
    rotation_range: tuple[float, float] = (-20.0, 20.0)
    # centre jitter as a fraction of the image side around the middle
    position_jitter: float = 0.12

    def validate(self) -> None:
        if not 0.0 <= self.cue_correlation <= 1.0:
            raise SynthError(f"cue_correlation {self.cue_correlation} outside [0, 1]")
        if not 2 <= self.classes <= len(GLYPHS):
            raise SynthError(f"classes must be in [2, {len(GLYPHS)}]")
        if self.per_class < 0:
            raise SynthError("per_class must be nonnegative")
        lo, hi = self.scale_range
        if not 0 < lo <= hi <= 1:
            raise SynthError(f"bad scale range {self.scale_range}")


# ------------------------------------------------------------------ glyphs


def _inside(glyph: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Inside test in glyph-local unit coordinates (shape within the unit circle)."""
    if glyph == "disk":
        return u * u + v * v <= 1.0
    if glyph == "square":
        a = 1 / math.sqrt(2)
        return (np.abs(u) <= a) & (np.abs(v) <= a)
    if glyph == "triangle":
        inside = np.ones_like(u, dtype=bool)
        for ang in (-90.0, 30.0, 150.0):
            t = math.radians(ang)
            inside &= u * math.cos(t) + v * math.sin(t) <= 0.5
        return inside
    if glyph == "cross":
        a, b = 0.9, 0.3
        return ((np.abs(u) <= a) & (np.abs(v) <= b)) | ((np.abs(u) <= b) & (np.abs(v) <= a))
    if glyph == "ring":
        rr = u * u + v * v
        return (rr <= 1.0) & (rr >= 0.55**2)
    if glyph == "bar":
        return (np.abs(u) <= 0.95) & (np.abs(v) <= 0.25)
    if glyph == "L-shape":
        box = (np.abs(u) <= 0.6) & (np.abs(v) <= 0.6)
        return box & ((u <= -0.1) | (v <= -0.1))
    if glyph == "diamond":
        return np.abs(u) / 0.95 + np.abs(v) / 0.55 <= 1.0
    raise SynthError(f"unknown glyph {glyph!r}")


def glyph_coverage(spec: SceneSpec, image_size: int) -> np.ndarray:
    """Fraction of each pixel covered by the glyph, on a 5x5 subpixel grid."""
    n, s = image_size, SUPERSAMPLE
    offs = (np.arange(n * s) + 0.5) / s
    ys, xs = np.meshgrid(offs, offs, indexing="ij")
    cx, cy = spec.position
    r = spec.radius(n)
    t = math.radians(spec.rotation)
    dx, dy = xs - cx, ys - cy
    # rotate image offsets into the glyph frame
    u = (dx * math.cos(t) + dy * math.sin(t)) / r
    v = (-dx * math.sin(t) + dy * math.cos(t)) / r
    inside = _inside(GLYPHS[spec.glyph_id], u, v).astype(np.float64)
    return inside.reshape(n, s, n, s).mean(axis=(1, 3))


# ---------------------------------------------------------------- textures


def _hsv(h: float, s: float, v: float) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v))


def _texture_colors(tid: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    # hue is random per sample so the cue is the texture pattern, not a colour
    hue = rng.uniform(0, 1)
    val = rng.uniform(0.4, 0.6)
    c1 = _hsv(hue, rng.uniform(0.55, 0.8), val)
    c2 = _hsv(hue + rng.uniform(-0.03, 0.03), rng.uniform(0.5, 0.8), val * rng.uniform(0.35, 0.55))
    return c1, c2


def render_texture(tid: int, n: int, rng: np.random.Generator) -> np.ndarray:
    name = TEXTURES[tid]
    c1, c2 = _texture_colors(tid, rng)
    ys, xs = np.meshgrid(np.arange(n) + 0.5, np.arange(n) + 0.5, indexing="ij")
    if name == "solid":
        w = np.zeros((n, n))
    elif name == "stripes":
        period = rng.uniform(4, 7)
        w = (np.floor((ys + rng.uniform(0, period)) / period * 2) % 2).astype(float)
    elif name == "checker":
        period = rng.uniform(5, 8)
        ox, oy = rng.uniform(0, period, 2)
        w = ((np.floor((xs + ox) / period * 2) + np.floor((ys + oy) / period * 2)) % 2).astype(float)
    elif name == "gradient":
        t = rng.uniform(0, 2 * math.pi)
        proj = (xs - n / 2) * math.cos(t) + (ys - n / 2) * math.sin(t)
        w = np.clip(proj / n + 0.5, 0, 1)
    elif name == "noise":
        cells = 5
        lattice = rng.uniform(0, 1, (cells + 1, cells + 1))
        g = ys / n * cells
        h = xs / n * cells
        i0, j0 = np.floor(g).astype(int), np.floor(h).astype(int)
        fy, fx = g - i0, h - j0
        fy, fx = fy * fy * (3 - 2 * fy), fx * fx * (3 - 2 * fx)
        w = (
            lattice[i0, j0] * (1 - fy) * (1 - fx)
            + lattice[i0 + 1, j0] * fy * (1 - fx)
            + lattice[i0, j0 + 1] * (1 - fy) * fx
            + lattice[i0 + 1, j0 + 1] * fy * fx
        )
    elif name == "dots":
        period = rng.uniform(5, 7)
        ox, oy = rng.uniform(0, period, 2)
        dx = (xs + ox) % period - period / 2
        dy = (ys + oy) % period - period / 2
        w = (dx * dx + dy * dy <= (period * 0.28) ** 2).astype(float)
    elif name == "grid":
        period = rng.uniform(5, 8)
        ox, oy = rng.uniform(0, period, 2)
        w = (((xs + ox) % period < 1.2) | ((ys + oy) % period < 1.2)).astype(float)
    elif name == "rings":
        period = rng.uniform(4, 7)
        cx, cy = rng.uniform(0, n, 2)
        d = np.sqrt((xs - cx) ** 2 + (ys - cy) ** 2)
        w = (np.floor(d / period * 2) % 2).astype(float)
    else:  # pragma: no cover
        raise SynthError(f"unknown texture {tid}")
    img = c1 * (1 - w[..., None]) + c2 * w[..., None]
    img = img + rng.uniform(-NOISE_AMPLITUDE, NOISE_AMPLITUDE, img.shape)
    return img


# ------------------------------------------------------------------- scenes


def render_scene(spec: SceneSpec, image_size: int) -> Sample:
    if not 0 <= spec.glyph_id < len(GLYPHS):
        raise SynthError(f"glyph id {spec.glyph_id} out of range")
    if not 0 <= spec.bg_texture_id < len(TEXTURES):
        raise SynthError(f"texture id {spec.bg_texture_id} out of range")
    if not spec.fits(image_size):
        raise SynthError(f"glyph at {spec.position} with scale {spec.scale} leaves the image")
    n = image_size
    seeds = np.random.SeedSequence(spec.noise_seed).spawn(2)
    bg = render_texture(spec.bg_texture_id, n, np.random.default_rng(seeds[0]))
    fg_rng = np.random.default_rng(seeds[1])
    fg = np.asarray(spec.fg_color)[None, None, :] + fg_rng.uniform(
        -NOISE_AMPLITUDE, NOISE_AMPLITUDE, (n, n, 3)
    )
    cov = glyph_coverage(spec, n)
    mask = cov >= 0.5
    # mask pixels are pure foreground, so the background never leaks into them
    alpha = np.where(mask, 1.0, cov)[..., None]
    img = np.clip(bg * (1 - alpha) + fg * alpha, 0.0, 1.0).astype(np.float32)
    img[mask] = np.clip(fg[mask], 0.0, 1.0).astype(np.float32)
    return Sample(img, mask.astype(np.uint8), spec.class_id, spec)


def _draw_center(rng, n: int, radius: float, jitter: float | None) -> tuple[float, float]:
    lo, hi = radius, n - radius
    if jitter is not None:
        lo = max(lo, n / 2 - jitter * n)
        hi = min(hi, n / 2 + jitter * n)
    if hi < lo:
        lo = hi = n / 2
    return float(rng.uniform(lo, hi)), float(rng.uniform(lo, hi))


def _fg_color(rng) -> tuple[float, float, float]:
    c = _hsv(rng.uniform(0, 1), rng.uniform(0.0, 0.35), rng.uniform(0.88, 1.0))
    return tuple(float(x) for x in c)


def draw_scene(config: DatasetConfig, index: int) -> SceneSpec:
    rng = np.random.default_rng([config.seed, index])
    label = index % config.classes
    if rng.uniform() < config.cue_correlation:
        tex = label
    else:
        others = [t for t in range(len(TEXTURES)) if t != label]
        tex = int(others[rng.integers(len(others))])
    scale = float(rng.uniform(*config.scale_range))
    r = scale * config.image_size / 2
    pos = _draw_center(rng, config.image_size, r, config.position_jitter)
    rot = float(rng.uniform(*config.rotation_range))
    return SceneSpec(
        class_id=label,
        glyph_id=label,
        fg_color=_fg_color(rng),
        bg_texture_id=tex,
        position=pos,
        rotation=rot,
        scale=scale,
        noise_seed=int(rng.integers(2**31)),
    )


def _map(fn, items, threads: int):
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def generate_dataset(config: DatasetConfig, threads: int = 1) -> tuple[list[Sample], list[dict]]:
    config.validate()
    total = config.classes * config.per_class

    def one(i):
        return render_scene(draw_scene(config, i), config.image_size)

    samples = _map(one, range(total), threads)
    return samples, manifest_rows(samples)


def manifest_rows(samples: Sequence[Sample]) -> list[dict]:
    rows = []
    for i, s in enumerate(samples):
        rows.append(
            {
                "image_path": f"images/{i:06d}.ppm",
                "mask_path": f"masks/{i:06d}.pgm",
                "label": int(s.label),
                **s.provenance.to_dict(),
            }
        )
    return rows


def manifest_hash(rows: Sequence[dict]) -> str:
    payload = "\n".join(json.dumps(r, sort_keys=True) for r in rows)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def dataset_hash(samples: Sequence[Sample]) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(to_uint8(s.image).tobytes())
        h.update(s.mask.tobytes())
        h.update(str(s.label).encode())
    return h.hexdigest()


# ------------------------------------------------------------------- shifts


def make_shifted_variant(
    sample: Sample, kind: ShiftKind | str, seed: int, config: DatasetConfig = DatasetConfig()
) -> Sample:
    kind = ShiftKind(kind)
    spec = sample.provenance
    n = sample.image.shape[0]
    rng = np.random.default_rng([seed, spec.noise_seed, list(ShiftKind).index(kind)])
    if kind is ShiftKind.BACKGROUND_SWAP:
        class_tex = spec.class_id
        others = [t for t in range(len(TEXTURES)) if t != class_tex]
        new = replace(spec, bg_texture_id=int(others[rng.integers(len(others))]))
        return render_scene(new, n)
    lo, hi = config.scale_range
    for _ in range(100):
        if kind is ShiftKind.LOCATION:
            new = replace(spec, position=_draw_center(rng, n, spec.radius(n), None))
        elif kind is ShiftKind.ROTATION:
            new = replace(spec, rotation=float(rng.uniform(0.0, 360.0)))
        else:
            new = replace(spec, scale=float(rng.uniform(0.5 * lo, min(1.5 * hi, 1.0))))
        if new.fits(n):
            return render_scene(new, n)
    raise SynthError(f"could not place a {kind.value} variant inside the image after 100 draws")


def shift_suite(
    samples: Sequence[Sample],
    kind: ShiftKind | str,
    seed: int,
    config: DatasetConfig = DatasetConfig(),
    threads: int = 1,
) -> list[Sample]:
    return _map(lambda s: make_shifted_variant(s, kind, seed, config), list(samples), threads)


# ------------------------------------------------------------------ file io


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pnm(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.uint8)
    magic = "P6" if arr.ndim == 3 else "P5"
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"{magic}\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_pnm(path) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise MissingFileError(f"missing file {path}") from exc
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetIOError(f"{path}: truncated PNM header")
        tokens.append(raw[start:pos])
    pos += 1
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise DatasetIOError(f"{path}: unsupported PNM type {magic!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise DatasetIOError(f"{path}: maxval {maxval} unsupported")
    ch = 3 if magic == b"P6" else 1
    need = w * h * ch
    body = raw[pos : pos + need]
    if len(body) != need:
        raise DatasetIOError(f"{path}: truncated pixel data")
    arr = np.frombuffer(body, dtype=np.uint8)
    return arr.reshape((h, w, 3) if ch == 3 else (h, w)).copy()


def write_dataset(samples: Sequence[Sample], directory) -> Path:
    d = Path(directory)
    (d / "images").mkdir(parents=True, exist_ok=True)
    (d / "masks").mkdir(parents=True, exist_ok=True)
    rows = manifest_rows(samples)
    for s, row in zip(samples, rows):
        write_pnm(d / row["image_path"], to_uint8(s.image))
        write_pnm(d / row["mask_path"], s.mask.astype(np.uint8) * 255)
    with open(d / "manifest.jsonl", "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return d / "manifest.jsonl"


_REQUIRED = ("image_path", "label", "class_id", "glyph_id", "fg_color", "bg_texture_id",
             "position", "rotation", "scale", "noise_seed")


def read_dataset(directory, require_masks: bool = False) -> list[Sample]:
    d = Path(directory)
    manifest = d / "manifest.jsonl"
    if not manifest.exists():
        raise MissingFileError(f"missing manifest {manifest}")
    samples = []
    for lineno, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            missing = [k for k in _REQUIRED if k not in row]
            if missing:
                raise KeyError(", ".join(missing))
            spec = SceneSpec.from_dict(row)
            label = int(row["label"])
        except (ValueError, KeyError, TypeError) as exc:
            raise ManifestError(f"{manifest}:{lineno}: malformed row ({exc})") from exc
        img = read_pnm(d / row["image_path"]).astype(np.float32) / 255.0
        mask_path = row.get("mask_path")
        if mask_path is None:
            if require_masks:
                raise ManifestError(f"{manifest}:{lineno}: no mask for sample")
            mask = None
        else:
            mask = (read_pnm(d / mask_path) > 127).astype(np.uint8)
        samples.append(Sample(img, mask, label, spec))
    return samples


def stack(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    images = np.stack([s.image for s in samples]).astype(np.float32)
    masks = np.stack([s.mask for s in samples]) if samples and samples[0].mask is not None else None
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return images, masks, labels


# ---------------------------------------------------------------- benchmark


@dataclass
class Benchmark:
    train: list[Sample]
    test: list[Sample]
    shifts: dict[str, list[Sample]] = field(default_factory=dict)

    def suites(self) -> dict[str, list[Sample]]:
        return {"in_distribution": self.test, **self.shifts}


def make_benchmark(
    config: DatasetConfig = DatasetConfig(),
    test_per_class: int = 50,
    test_cue_correlation: float | None = None,
    threads: int = 1,
) -> Benchmark:
    """Train split, an in-distribution test split and the four shifted suites."""
    train, _ = generate_dataset(config, threads)
    rho = config.cue_correlation if test_cue_correlation is None else test_cue_correlation
    test_cfg = replace(config, per_class=test_per_class, cue_correlation=rho, seed=config.seed + 1_000_003)
    test, _ = generate_dataset(test_cfg, threads)
    shifts = {
        k.value: shift_suite(test, k, config.seed + 7, config, threads) for k in ShiftKind
    }
    return Benchmark(train, test, shifts)
