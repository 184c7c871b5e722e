"""Command-line entry point: ``relmap <subcommand> [--section.key value ...]``.

Every run writes ``config.json`` (the fully resolved configuration) and
``report.json`` into ``run.out_dir``. Re-running a subcommand with
``--config <run>/config.json`` reproduces the reports byte for byte.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, fields, is_dataclass
from pathlib import Path

import numpy as np

from . import evaluator as E
from .relevance import export_heatmap, relevance_map, upsample_map
from .sis import export_sis, find_sis, target_confidence
from .synthdata import (
    DatasetConfig,
    ShiftKind,
    dataset_hash,
    make_benchmark,
    manifest_hash,
    manifest_rows,
    read_dataset,
    read_pnm,
    write_dataset,
)
from .trainer import (
    FinetuneConfig,
    PretrainConfig,
    accuracy,
    finetune_relevance,
    lr_grid_search,
    pretrain,
    select_finetune_subset,
)
from .vit import ViTConfig, load_checkpoint, predict_logits, save_checkpoint

log = logging.getLogger("relmap")

SUBCOMMANDS = ("gen-data", "pretrain", "finetune", "lr-search", "eval", "seg-eval",
               "ablate", "sweep", "relevance", "sis")


class UsageError(ValueError):
    pass


@dataclass(frozen=True)
class BenchConfig:
    test_per_class: int = 50
    # None: same cue correlation as the training split
    test_cue_correlation: float | None = None
    # every n-th test sample forms the validation slice used by lr-search
    validation_stride: int = 10


@dataclass(frozen=True)
class LrSearchConfig:
    candidates: tuple[float, ...] = (1e-5, 3e-5, 1e-4, 3e-4)
    search_epochs: int | None = None
    max_acc_drop: float = 0.03


@dataclass(frozen=True)
class SweepConfig:
    samples_per_class: tuple[int, ...] = (1, 2, 3)
    class_counts: tuple[int, ...] = (4,)


@dataclass(frozen=True)
class RelevanceConfig:
    image_index: int = 0
    image_path: str | None = None
    target_class: int | None = None  # None: predicted class
    split: str = "in_distribution"


@dataclass(frozen=True)
class SisConfig:
    image_index: int = 0
    image_path: str | None = None
    target_class: int | None = None
    threshold: float = 0.9
    batch_eliminate_fraction: float = 0.05
    fill: str = "zero"


@dataclass(frozen=True)
class RunPaths:
    out_dir: str = "runs/latest"
    data_dir: str | None = None  # None: regenerate the benchmark from `data`
    checkpoint: str | None = None
    reference: str | None = None  # reference model for eval/seg-eval; default: none


@dataclass(frozen=True)
class RunConfig:
    model: ViTConfig = ViTConfig()
    data: DatasetConfig = DatasetConfig()
    bench: BenchConfig = BenchConfig()
    pretrain: PretrainConfig = PretrainConfig()
    finetune: FinetuneConfig = FinetuneConfig()
    lr_search: LrSearchConfig = LrSearchConfig()
    sweep: SweepConfig = SweepConfig()
    relevance: RelevanceConfig = RelevanceConfig()
    sis: SisConfig = SisConfig()
    run: RunPaths = RunPaths()


# ------------------------------------------------------------ config tree


def flatten(obj, prefix: str = "") -> dict:
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        key = prefix + f.name
        if is_dataclass(v):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise UsageError(f"expected true/false, got {value!r}")
        return value
    if isinstance(default, tuple) or (default is None and isinstance(value, list)):
        return tuple(value)
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def build(cls, values: dict, prefix: str = ""):
    """Instantiate a config dataclass from a flat dotted mapping (missing keys keep defaults)."""
    proto = cls()
    kwargs = {}
    for f in fields(cls):
        default = getattr(proto, f.name)
        key = prefix + f.name
        if is_dataclass(default):
            kwargs[f.name] = build(type(default), values, key + ".")
        elif key in values:
            kwargs[f.name] = _coerce(values[key], default)
    return cls(**kwargs)


def nest(flat: dict) -> dict:
    out: dict = {}
    for key, v in flat.items():
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = list(v) if isinstance(v, tuple) else v
    return out


def _flat_from_nested(doc: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in doc.items():
        if isinstance(v, dict):
            out.update(_flat_from_nested(v, prefix + k + "."))
        else:
            out[prefix + k] = v
    return out


def resolve_config(config_path: str | None, overrides: dict) -> RunConfig:
    known = flatten(RunConfig())
    flat = {}
    if config_path:
        try:
            doc = json.loads(Path(config_path).read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{config_path}: not valid JSON ({exc})") from exc
        flat.update(_flat_from_nested(doc))
    flat.update(overrides)
    unknown = sorted(set(flat) - set(known))
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    try:
        cfg = build(RunConfig, flat)
    except TypeError as exc:
        raise UsageError(str(exc)) from exc
    cfg.model.validate()
    cfg.data.validate()
    cfg.finetune.validate()
    return cfg


def _parse_flag(text: str):
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("null", "none"):
        return None
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


# ------------------------------------------------------------------- data


def _validation_slice(test, stride: int):
    return [s for i, s in enumerate(test) if i % stride == 0]


def load_benchmark(cfg: RunConfig, threads: int):
    """(train, suites) from ``run.data_dir`` when given, else regenerated."""
    if cfg.run.data_dir:
        root = Path(cfg.run.data_dir)
        train = read_dataset(root / "train")
        suites = {"in_distribution": read_dataset(root / "test")}
        for k in ShiftKind:
            suites[k.value] = read_dataset(root / k.value)
        return train, suites
    bench = make_benchmark(cfg.data, cfg.bench.test_per_class, cfg.bench.test_cue_correlation, threads)
    return bench.train, bench.suites()


def _checkpoint(path: str | None, what: str = "run.checkpoint"):
    if not path:
        raise UsageError(f"{what} is required for this subcommand")
    return load_checkpoint(path)


def _file_sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _pick_image(cfg_section, suites):
    if cfg_section.image_path:
        img = read_pnm(cfg_section.image_path).astype(np.float32) / 255.0
        return img, None
    split = getattr(cfg_section, "split", "in_distribution")
    if split not in suites:
        raise UsageError(f"unknown split {split!r}")
    samples = suites[split]
    if not 0 <= cfg_section.image_index < len(samples):
        raise UsageError(f"image_index {cfg_section.image_index} out of range")
    s = samples[cfg_section.image_index]
    return s.image, s.label


# ------------------------------------------------------------ subcommands


def cmd_gen_data(cfg: RunConfig, out: Path, threads: int) -> dict:
    bench = make_benchmark(cfg.data, cfg.bench.test_per_class, cfg.bench.test_cue_correlation, threads)
    report = {}
    for name, samples in [("train", bench.train), ("test", bench.test), *bench.shifts.items()]:
        write_dataset(samples, out / "data" / name)
        report[name] = {
            "count": len(samples),
            "manifest_sha256": manifest_hash(manifest_rows(samples)),
            "dataset_sha256": dataset_hash(samples),
        }
    return report


def cmd_pretrain(cfg: RunConfig, out: Path, threads: int) -> dict:
    train, suites = load_benchmark(cfg, threads)
    val = _validation_slice(suites["in_distribution"], cfg.bench.validation_stride)
    model, rep = pretrain(cfg.model, train, cfg.pretrain, val)
    ckpt = out / "model.ckpt"
    save_checkpoint(model, ckpt)
    rep.checkpoint = ckpt.name
    return {
        "train": rep.to_dict(),
        "checkpoint_sha256": _file_sha(ckpt),
        "accuracy": {k: accuracy(model, v) for k, v in suites.items()},
    }


def cmd_finetune(cfg: RunConfig, out: Path, threads: int) -> dict:
    base = _checkpoint(cfg.run.checkpoint)
    train, suites = load_benchmark(cfg, threads)
    ft = cfg.finetune
    classes = ft.class_subset(base.config.num_classes)
    subset = select_finetune_subset(train, classes, ft.samples_per_class, ft.seed)
    val = _validation_slice(suites["in_distribution"], cfg.bench.validation_stride)
    tuned, rep = finetune_relevance(base, subset, ft, val)
    ckpt = out / "finetuned.ckpt"
    save_checkpoint(tuned, ckpt)
    rep.checkpoint = ckpt.name
    robust = E.robustness_report(tuned, base, suites, classes)
    return {
        "method": ft.method,
        "train": rep.to_dict(),
        "checkpoint_sha256": _file_sha(ckpt),
        "robustness": robust.to_dict(),
    }


def cmd_lr_search(cfg: RunConfig, out: Path, threads: int) -> dict:
    base = _checkpoint(cfg.run.checkpoint)
    train, suites = load_benchmark(cfg, threads)
    ft = cfg.finetune
    subset = select_finetune_subset(train, ft.class_subset(base.config.num_classes),
                                    ft.samples_per_class, ft.seed)
    val = _validation_slice(suites["in_distribution"], cfg.bench.validation_stride)
    res = lr_grid_search(base, cfg.lr_search.candidates, subset, ft, val,
                         cfg.lr_search.search_epochs, cfg.lr_search.max_acc_drop)
    return res.to_dict()


def _reference(cfg: RunConfig, model):
    return load_checkpoint(cfg.run.reference) if cfg.run.reference else model


def cmd_eval(cfg: RunConfig, out: Path, threads: int) -> dict:
    model = _checkpoint(cfg.run.checkpoint)
    _, suites = load_benchmark(cfg, threads)
    ref = _reference(cfg, model)
    classes = cfg.finetune.class_subset(model.config.num_classes)
    return E.robustness_report(model, ref, suites, classes).to_dict()


def cmd_seg_eval(cfg: RunConfig, out: Path, threads: int) -> dict:
    model = _checkpoint(cfg.run.checkpoint)
    _, suites = load_benchmark(cfg, threads)
    test = suites["in_distribution"]
    mode = cfg.finetune.target_class_mode
    report = {"model": E.segmentation_report(model, test, mode).to_dict()}
    if cfg.run.reference:
        report["reference"] = E.segmentation_report(load_checkpoint(cfg.run.reference), test, mode).to_dict()
    return report


def cmd_ablate(cfg: RunConfig, out: Path, threads: int) -> dict:
    base = _checkpoint(cfg.run.checkpoint)
    train, suites = load_benchmark(cfg, threads)
    return E.ablation_suite(base, train, suites, cfg.finetune).to_dict()


def cmd_sweep(cfg: RunConfig, out: Path, threads: int) -> dict:
    base = _checkpoint(cfg.run.checkpoint)
    train, suites = load_benchmark(cfg, threads)
    cells = E.sensitivity_sweep(base, train, suites, cfg.sweep.samples_per_class,
                                cfg.sweep.class_counts, cfg.finetune)
    rows = E.sweep_rows(cells)
    E.write_csv(rows, out / "sweep.csv")
    return {"rows": rows}


def cmd_relevance(cfg: RunConfig, out: Path, threads: int) -> dict:
    model = _checkpoint(cfg.run.checkpoint)
    rc = cfg.relevance
    suites = {} if rc.image_path else load_benchmark(cfg, threads)[1]
    image, label = _pick_image(rc, suites)
    logits = predict_logits(model, image[None])[0]
    target = int(logits.argmax()) if rc.target_class is None else rc.target_class
    rmap = relevance_map(model, image, target)
    values = rmap.numpy()
    n = image.shape[0]
    export_heatmap(upsample_map(values, n, n), out / "relevance")
    return {
        "target_class": target,
        "label": label,
        "logits": logits.tolist(),
        "relevance": values.tolist(),
        "files": ["relevance.pgm", "relevance.ppm"],
    }


def cmd_sis(cfg: RunConfig, out: Path, threads: int) -> dict:
    model = _checkpoint(cfg.run.checkpoint)
    sc = cfg.sis
    suites = {} if sc.image_path else load_benchmark(cfg, threads)[1]
    image, label = _pick_image(sc, suites)
    target = sc.target_class
    if target is None:
        target = int(predict_logits(model, image[None])[0].argmax())
    res = find_sis(model, image, target, sc.threshold, sc.batch_eliminate_fraction, sc.fill)
    export_sis(res, image, out / "sis")
    d = res.to_dict()
    d["label"] = label
    d["full_image_confidence"] = float(target_confidence(model, image[None], target)[0])
    return d


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "lr-search": cmd_lr_search,
    "eval": cmd_eval,
    "seg-eval": cmd_seg_eval,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "relevance": cmd_relevance,
    "sis": cmd_sis,
}

HELP = {
    "gen-data": "write the benchmark splits as PPM/PGM + JSONL",
    "pretrain": "train a classifier from scratch on the training split",
    "finetune": "relevance-guided (or gradmask/rrr) finetuning of a checkpoint",
    "lr-search": "pick the finetuning learning rate on the validation slice",
    "eval": "top-1/top-5 per split, deltas against a reference model",
    "seg-eval": "pixel accuracy, mIoU and mAP of relevance maps against masks",
    "ablate": "finetune once per loss ablation and compare",
    "sweep": "finetune over sample-budget and class-count grids",
    "relevance": "dump a relevance heatmap for one image",
    "sis": "search a sufficient input subset for one image",
}

# short flags that set dotted keys
ALIASES = {
    "gen-data": {"--seed": ("data.seed",), "--out": ("run.out_dir",)},
    "pretrain": {"--seed": ("pretrain.seed",)},
    "finetune": {"--method": ("finetune.method",), "--seed": ("finetune.seed",)},
    "relevance": {"--class": ("relevance.target_class",)},
    "sis": {"--class": ("sis.target_class",)},
}


# ----------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="relmap", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND", parser_class=_Parser)
    defaults = flatten(RunConfig())
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=HELP[name], description=HELP[name])
        p.add_argument("--config", help="JSON RunConfig to start from")
        p.add_argument("--threads", type=int, default=None,
                       help="worker threads for data generation (default: $RELMAP_THREADS or 1)")
        p.add_argument("-v", "--verbose", action="store_true")
        for flag, keys in ALIASES.get(name, {}).items():
            p.add_argument(flag, dest=f"alias:{keys[0]}", default=argparse.SUPPRESS,
                           metavar="V", help=f"shorthand for --{keys[0]}")
        group = p.add_argument_group("config keys")
        for key, default in defaults.items():
            shown = json.dumps(list(default) if isinstance(default, tuple) else default)
            group.add_argument(f"--{key}", dest=f"key:{key}", default=argparse.SUPPRESS,
                               metavar="V", help=f"(default: {shown})")
    return parser


def _threads(value) -> int:
    if value is not None:
        return max(1, int(value))
    env = os.environ.get("RELMAP_THREADS")
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        raise UsageError(f"RELMAP_THREADS={env!r} is not an integer") from None


def run(argv) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        raise UsageError(parser.format_usage().strip())
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {}
    for dest, v in vars(args).items():
        if dest.startswith(("key:", "alias:")):
            overrides[dest.split(":", 1)[1]] = _parse_flag(v)
    cfg = resolve_config(args.config, overrides)
    out = Path(cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    E.write_json(nest(flatten(cfg)), out / "config.json")
    report = COMMANDS[args.command](cfg, out, _threads(args.threads))
    E.write_json(report, out / "report.json")
    print(out / "report.json")
    return 0


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        return run(argv)
    except OSError as exc:
        print(f"relmap: I/O error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        # contract, configuration and usage errors all derive from ValueError
        print(f"relmap: error: {exc}", file=sys.stderr)
        return 1
