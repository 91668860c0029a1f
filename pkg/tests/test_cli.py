import json
from pathlib import Path

import numpy as np
import pytest
import torch

from visual_sentences import experiments as E
from visual_sentences.checkpoint import (
    CheckpointError,
    load_checkpoint,
    load_lora,
    read_container,
    save_checkpoint,
    write_container,
)
from visual_sentences.cli import main
from visual_sentences.dit import ModelConfig, SentenceDiT
from visual_sentences.io import read_sample, write_sample
from visual_sentences.lora import LoRAConfig, inject
from visual_sentences.worlds import TaskKind, make_task_sample

TINY_MODEL = {"dim": 32, "heads": 2, "layers": 2}


def tree_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def write_config(path: Path, **kw) -> Path:
    cfg = {"tasks": ["depth_map"], "context": "II", "iters_per_epoch": 2, "epochs": 2,
           "num_samples": 3, "lr": 1e-3, "model": TINY_MODEL, "lora": {"rank": 2}}
    cfg.update(kw)
    path.write_text(json.dumps(cfg))
    return path


# container -------------------------------------------------------------------

def test_container_round_trip(tmp_path):
    tensors = {"a": np.arange(6, dtype=np.float32).reshape(2, 3),
               "b": np.array([1, 2], dtype=np.int64), "c": np.float64(3.5) * np.ones(())}
    write_container(tmp_path / "x.vsck", {"k": [1, 2]}, tensors)
    meta, back = read_container(tmp_path / "x.vsck")
    assert meta == {"k": [1, 2]}
    for k in tensors:
        assert back[k].dtype == tensors[k].dtype
        np.testing.assert_array_equal(back[k], tensors[k])


def test_container_rejects_garbage(tmp_path):
    (tmp_path / "bad.vsck").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(CheckpointError):
        read_container(tmp_path / "bad.vsck")
    write_container(tmp_path / "ok.vsck", {}, {"a": np.zeros(4, np.float32)})
    data = (tmp_path / "ok.vsck").read_bytes()
    (tmp_path / "cut.vsck").write_bytes(data[:-3])
    with pytest.raises(CheckpointError):
        read_container(tmp_path / "cut.vsck")


def test_model_checkpoint_is_bit_exact(tmp_path):
    model, _ = inject(SentenceDiT(ModelConfig(**TINY_MODEL)), LoRAConfig(rank=2))
    with torch.no_grad():
        for n, p in model.named_parameters():
            if n.endswith(".up"):
                p.normal_()
    save_checkpoint(tmp_path / "m.vsck", model)
    back, meta = load_checkpoint(tmp_path / "m.vsck")
    a, b = model.state_dict(), back.state_dict()
    assert a.keys() == b.keys()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert meta["lora_config"]["rank"] == 2
    save_checkpoint(tmp_path / "m2.vsck", back)
    assert (tmp_path / "m.vsck").read_bytes() == (tmp_path / "m2.vsck").read_bytes()


def test_sample_files_round_trip(tmp_path):
    s = make_task_sample(TaskKind.of("semantic_seg"), 3, "IIVV")
    write_sample(s, tmp_path / "s")
    back = read_sample(tmp_path / "s")
    # PNG stores 8 bits; rendered colours come back within quantisation
    for x, y in zip(s.clips, back.clips):
        assert np.abs(x.frames - y.frames).max() <= 0.5 / 255 + 1e-12
    assert back.kind == s.kind


# config ----------------------------------------------------------------------

def test_config_env_overrides(tmp_path):
    cfg = E.load_run_config(write_config(tmp_path / "c.json", out="run"),
                            env={"VS_SEED": "7", "VS_OUTPUT_ROOT": str(tmp_path)})
    assert cfg.train.seed == 7 and cfg.out == str(tmp_path / "run")


def test_config_errors(tmp_path):
    with pytest.raises(E.ConfigError):
        E.load_run_config({"tasks": ["depth_map"], "mystery": 1}, env={})
    with pytest.raises(E.ConfigError):
        E.load_run_config(tmp_path / "missing.json", env={})


# CLI -------------------------------------------------------------------------

def test_gen_data_is_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        assert main(["gen-data", "--task", "depth_map", "--context", "III", "--count", "3",
                     "--seed", "4", "--out", str(tmp_path / name)]) == 0
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert a == b and "manifest.json" in a
    m = json.loads(a["manifest.json"])
    assert m["plan"] == ["image", "image", "video", "video"] and len(m["samples"]) == 3


def test_camera_move_in_image_context_exits_2(tmp_path, capsys):
    code = main(["gen-data", "--task", "camera_move", "--context", "II", "--out", str(tmp_path)])
    assert code == 2
    cfg = write_config(tmp_path / "c.json", tasks=["camera_move"], context="II")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 2


def test_unknown_config_key_exits_2(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", mystery=True)
    assert main(["train", "--config", str(cfg)]) == 2


def test_missing_checkpoint_exits_3(tmp_path, capsys):
    assert main(["inspect-checkpoint", str(tmp_path / "none.vsck")]) == 3
    (tmp_path / "junk.vsck").write_bytes(b"junk")
    assert main(["eval", "--checkpoint", str(tmp_path / "junk.vsck"), "--task", "depth_map",
                 "--context", "II", "--out", str(tmp_path / "e")]) == 3


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = write_config(root / "c.json")
    assert main(["train", "--config", str(cfg), "--out", str(root / "full")]) == 0
    return root


def test_train_writes_run_artifacts(trained):
    full = trained / "full"
    for name in ("epoch_001.vsck", "epoch_002.vsck", "final.vsck", "adapter.vsck",
                 "losses.csv", "manifest.json"):
        assert (full / name).exists(), name
    manifest = E.RunManifest.load(full / "manifest.json")
    manifest.verify()
    assert manifest.regime == "per-task-per-context"
    assert len((full / "losses.csv").read_text().splitlines()) == 5


def test_adapter_file_restores_model(trained):
    model, _ = load_checkpoint(trained / "full" / "final.vsck")
    base = SentenceDiT(ModelConfig(**{**TINY_MODEL, "seed": 0}))
    restored = load_lora(trained / "full" / "adapter.vsck", base)
    a, b = model.state_dict(), restored.state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_rerun_and_resume_are_bit_identical(trained, capsys):
    cfg = trained / "c.json"
    assert main(["train", "--config", str(cfg), "--out", str(trained / "again")]) == 0
    assert main(["train", "--config", str(cfg), "--out", str(trained / "resumed"),
                 "--resume", str(trained / "full" / "epoch_001.vsck")]) == 0
    full = (trained / "full" / "final.vsck").read_bytes()
    assert (trained / "again" / "final.vsck").read_bytes() == full
    assert (trained / "resumed" / "final.vsck").read_bytes() == full


def test_manifest_detects_tampering(trained, tmp_path):
    import shutil

    copy = tmp_path / "copy"
    shutil.copytree(trained / "full", copy)
    m = json.loads((copy / "manifest.json").read_text())
    for bucket in ("checkpoints", "reports"):
        for item in m[bucket].values():
            item["path"] = str(copy / Path(item["path"]).name)
    manifest = E.RunManifest(**m)
    manifest.verify()
    (copy / "losses.csv").write_text("changed\n")
    with pytest.raises(E.DataError):
        manifest.verify()


def test_eval_and_sample_are_deterministic(trained, capsys):
    ckpt = str(trained / "full" / "final.vsck")
    for name in ("e1", "e2"):
        assert main(["eval", "--checkpoint", ckpt, "--task", "depth_map", "--context", "II",
                     "--count", "2", "--steps", "3", "--out", str(trained / name)]) == 0
    a, b = (trained / "e1" / "report.json").read_bytes(), (trained / "e2" / "report.json").read_bytes()
    assert a == b
    report = json.loads(a)[0]
    assert report["task"] == "depth_map:understanding" and "abs_rel" in report["values"]
    assert main(["sample", "--checkpoint", ckpt, "--task", "depth_map", "--context", "III",
                 "--seed", "1", "--steps", "3", "--trace-strip", "--out",
                 str(trained / "s")]) == 0
    m = json.loads((trained / "s" / "manifest.json").read_text())
    assert m["seed"] == 1 and (trained / "s" / "trace.png").exists()


def test_inspect_checkpoint_lists_tensors(trained, capsys):
    assert main(["inspect-checkpoint", str(trained / "full" / "final.vsck")]) == 0
    out = capsys.readouterr().out
    assert "lora.blocks.0.self_attn.q.down" in out and "optim." in out
    assert '"rank": 2' in out
