import hashlib
import json
from pathlib import Path

import pytest

from relmap.cli import RunConfig, build_parser, flatten, main

SMALL = [
    "--data.classes", "4", "--data.per_class", "4", "--data.image_size", "16",
    "--data.scale_range", "[0.6, 0.8]", "--bench.test_per_class", "2",
    "--model.image_size", "16", "--model.embed_dim", "8", "--model.depth", "2",
    "--model.heads", "2", "--model.num_classes", "4",
]


def _tree_hash(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def pretrained(tmp_path_factory):
    out = tmp_path_factory.mktemp("pre")
    assert main(["pretrain", *SMALL, "--pretrain.epochs", "2", "--run.out_dir", str(out)]) == 0
    return out / "model.ckpt"


def test_gen_data_twice_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["gen-data", "--seed", "0", *SMALL, "--run.out_dir", str(tmp_path / name)]) == 0
    assert _tree_hash(tmp_path / "a" / "data") == _tree_hash(tmp_path / "b" / "data")
    report = json.loads((tmp_path / "a" / "report.json").read_text())
    assert report["train"]["count"] == 16


def test_threads_do_not_change_data(tmp_path, monkeypatch):
    monkeypatch.setenv("RELMAP_THREADS", "3")
    assert main(["gen-data", *SMALL, "--run.out_dir", str(tmp_path / "t3")]) == 0
    assert main(["gen-data", *SMALL, "--threads", "1", "--run.out_dir", str(tmp_path / "t1")]) == 0
    assert _tree_hash(tmp_path / "t3" / "data") == _tree_hash(tmp_path / "t1" / "data")


def test_finetune_without_masks_is_contract_error(tmp_path, pretrained):
    assert main(["gen-data", *SMALL, "--run.out_dir", str(tmp_path / "g")]) == 0
    manifest = tmp_path / "g" / "data" / "train" / "manifest.jsonl"
    rows = [json.loads(l) for l in manifest.read_text().splitlines()]
    manifest.write_text("".join(json.dumps({k: v for k, v in r.items() if k != "mask_path"}) + "\n" for r in rows))
    code = main(["finetune", *SMALL, "--run.checkpoint", str(pretrained),
                 "--run.data_dir", str(tmp_path / "g" / "data"), "--run.out_dir", str(tmp_path / "f")])
    assert code == 1


def test_relevance_outputs(tmp_path, pretrained):
    out = tmp_path / "r"
    assert main(["relevance", *SMALL, "--class", "3", "--run.checkpoint", str(pretrained), "--run.out_dir", str(out)]) == 0
    assert len(list(out.glob("*.pgm"))) == 1 and len(list(out.glob("*.ppm"))) == 1
    report = json.loads((out / "report.json").read_text())
    assert report["target_class"] == 3
    assert (out / "relevance.pgm").read_bytes().startswith(b"P5\n16 16\n255\n")


def test_rerun_from_resolved_config(tmp_path, pretrained):
    first = tmp_path / "1"
    args = ["finetune", *SMALL, "--finetune.epochs", "2", "--run.checkpoint", str(pretrained)]
    assert main([*args, "--run.out_dir", str(first)]) == 0
    second = tmp_path / "2"
    assert main(["finetune", "--config", str(first / "config.json"), "--run.out_dir", str(second)]) == 0
    assert (first / "report.json").read_bytes() == (second / "report.json").read_bytes()


def test_error_codes(tmp_path):
    assert main(["nonsense"]) == 1
    assert main([]) == 1
    assert main(["eval", "--run.out_dir", str(tmp_path / "e")]) == 1  # no checkpoint given
    assert main(["eval", "--run.checkpoint", str(tmp_path / "missing.ckpt"), "--run.out_dir", str(tmp_path / "e")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {"depth": 2, "colour": "red"}}))
    assert main(["eval", "--config", str(bad)]) == 1
    assert main(["eval", "--model.embed_dim", "6", "--model.heads", "4"]) == 1


def test_help_lists_every_key(capsys):
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args(["sis", "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for key in flatten(RunConfig()):
        assert f"--{key}" in text
    assert "(default: 0.9)" in text
