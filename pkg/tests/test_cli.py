import json

import numpy as np
import pytest

from soundobj.cli import build_parser, main
from soundobj.maskops import mask_iou
from soundobj.encoders import EncoderParams, Perceptron, save_checkpoint
from soundobj.synthworld import WorldSpec, generate_dataset, read_dataset, write_dataset

SMALL_SPEC = """\
height = 48
width = 48
objects = 2,3
candidates = 3,4
train_size = 60
finetune_size = 30
eval_size = 40
"""


def manifest(path):
    return json.loads((path / "manifest.json").read_text())


def records(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "spec.txt").write_text(SMALL_SPEC)
    assert main(["gen-data", "--spec", str(root / "spec.txt"), "--seed", "3", "--out", str(root / "data")]) == 0
    return root


def test_gen_data_split_counts(tmp_path):
    text = SMALL_SPEC.split("train_size")[0] + "train_size = 300\nfinetune_size = 100\neval_size = 100\n"
    (tmp_path / "spec.txt").write_text(text)
    assert main(["gen-data", "--spec", str(tmp_path / "spec.txt"), "--out", str(tmp_path / "d")]) == 0
    counts = {name: len(read_dataset(tmp_path / "d" / f"{name}.sod")[0]) for name in ("train", "finetune", "eval")}
    assert counts == {"train": 300, "finetune": 100, "eval": 100}
    samples, _ = read_dataset(tmp_path / "d" / "eval.sod")
    for s in samples:
        for gt in s.gt_masks:
            assert max(mask_iou(s.pool.candidates[p], gt) for p in s.pool.positive_indices) >= 0.5
    m = manifest(tmp_path / "d")
    assert m["status"] == "ok" and m["command"] == "gen-data" and m["seeds"] == {"root": 0}


def test_gen_data_same_seed_identical(small_data, tmp_path):
    assert main(["gen-data", "--spec", str(small_data / "spec.txt"), "--seed", "3", "--out", str(tmp_path / "again")]) == 0
    for name in ("train.sod", "finetune.sod", "eval.sod"):
        assert (small_data / "data" / name).read_bytes() == (tmp_path / "again" / name).read_bytes()


def test_gen_data_rejects_bad_spec(tmp_path, capsys):
    (tmp_path / "spec.txt").write_text("height = 50\n")
    assert main(["gen-data", "--spec", str(tmp_path / "spec.txt"), "--out", str(tmp_path / "d")]) != 0
    assert manifest(tmp_path / "d")["status"] == "failed"
    (tmp_path / "spec2.txt").write_text("colour = red\n")
    assert main(["gen-data", "--spec", str(tmp_path / "spec2.txt"), "--out", str(tmp_path / "d2")]) != 0
    assert "error" in capsys.readouterr().err


def test_train_single_stage_and_full(small_data, tmp_path):
    data = str(small_data / "data")
    assert main(["train", "--data", data, "--stage", "align", "--out", str(tmp_path / "a"), "--align-epochs", "1"]) == 0
    assert sorted(p.name for p in (tmp_path / "a").glob("*.ckpt")) == ["align.ckpt"]

    args = ["train", "--data", data, "--align-epochs", "1", "--refine-epochs", "1", "--finetune-epochs", "1", "--lr", "0.01"]
    assert main(args + ["--out", str(tmp_path / "full")]) == 0
    assert sorted(p.name for p in (tmp_path / "full").glob("*.ckpt")) == ["align.ckpt", "finetune.ckpt", "refine.ckpt"]
    assert main(args + ["--out", str(tmp_path / "full2")]) == 0
    for name in ("align.ckpt", "refine.ckpt", "finetune.ckpt"):
        assert (tmp_path / "full" / name).read_bytes() == (tmp_path / "full2" / name).read_bytes()
    m = manifest(tmp_path / "full")
    assert m["config"]["lr"] == 0.01 and m["config"]["refine_epochs"] == 1


def test_train_config_file_with_flag_override(small_data, tmp_path):
    (tmp_path / "cfg.txt").write_text("lr = 0.5\nalign_epochs = 1\nseed = 9\n")
    argv = ["train", "--config", str(tmp_path / "cfg.txt"), "--lr", "0.001", "--stage", "align",
            "--data", str(small_data / "data"), "--out", str(tmp_path / "o")]
    assert main(argv) == 0
    m = manifest(tmp_path / "o")
    assert m["config"]["lr"] == 0.001 and m["config"]["seed"] == 9 and m["seeds"] == {"root": 9}


def test_train_resume_stage_from_checkpoint(small_data, tmp_path):
    data = str(small_data / "data")
    assert main(["train", "--data", data, "--stage", "align", "--align-epochs", "1", "--out", str(tmp_path / "a")]) == 0
    argv = ["train", "--data", data, "--stage", "refine", "--refine-epochs", "1", "--from",
            str(tmp_path / "a" / "align.ckpt"), "--out", str(tmp_path / "r")]
    assert main(argv) == 0
    assert manifest(tmp_path / "r")["inputs"]["from_stage"] == "align"


def test_train_needs_checkpoint_for_later_stage(small_data, tmp_path, capsys):
    code = main(["train", "--data", str(small_data / "data"), "--stage", "refine", "--out", str(tmp_path / "x")])
    assert code != 0
    assert "--from" in capsys.readouterr().err
    m = manifest(tmp_path / "x")
    assert m["status"] == "failed" and "--from" in m["error"]


def test_eval_rejects_mismatched_checkpoint(small_data, tmp_path):
    save_checkpoint(tmp_path / "p.ckpt", EncoderParams.init(16, 16, seed=0), "align", 1)
    code = main(["eval-objects", "--checkpoint", str(tmp_path / "p.ckpt"), "--data",
                 str(small_data / "data" / "eval.sod"), "--out", str(tmp_path / "e")])
    assert code != 0
    assert "input" in manifest(tmp_path / "e")["error"]


def test_eval_objects_uninformative_checkpoint_is_chance(tmp_path):
    spec = WorldSpec(p_pair=0.0, candidates=(5, 5), objects=(2, 5), p_nonsounding=0.0)
    write_dataset(tmp_path / "eval.sod", generate_dataset(spec, 400, 0, "eval"), spec)
    params = EncoderParams.init(32, 32, seed=0)
    vision = params["vision"]
    for w in vision.weights:
        w[:] = 0.0
    vision.biases[-1][:] = np.random.default_rng(1).normal(size=32)  # every patch maps to the same vector
    save_checkpoint(tmp_path / "flat.ckpt", params, "init", 0)
    argv = ["eval-objects", "--checkpoint", str(tmp_path / "flat.ckpt"), "--data", str(tmp_path / "eval.sod"),
            "--out", str(tmp_path / "e"), "--maps", "2"]
    assert main(argv) == 0
    recs = records(tmp_path / "e" / "objects.jsonl")
    summary = recs[-1]["summary"]
    assert summary["evaluated"] == 400
    assert abs(summary["accuracy"] - 0.2) <= 0.05
    assert all(len(r["scores"]) == 5 for r in recs[:-1])
    assert len(list((tmp_path / "e").glob("*.pgm"))) == 2


def test_eval_actions_label_fixture(tmp_path):
    spec = WorldSpec(height=48, width=48, objects=(2, 3), candidates=(3, 4))
    samples = generate_dataset(spec, 30, 2)
    e1, e2 = np.eye(32)[0], np.eye(32)[1]
    for s in samples:
        s.patches = np.broadcast_to(e1, s.patches.shape).copy()
        s.narration = e1.copy()
        s.audio = (e1 if s.sounding else e2).copy()
    write_dataset(tmp_path / "d.sod", samples, spec)
    ident = EncoderParams({m: Perceptron.identity(32) for m in ("vision", "audio", "language")})
    save_checkpoint(tmp_path / "id.ckpt", ident, "init", 0)
    argv = ["eval-actions", "--checkpoint", str(tmp_path / "id.ckpt"), "--data", str(tmp_path / "d.sod"),
            "--out", str(tmp_path / "a")]
    assert main(argv) == 0
    summary = records(tmp_path / "a" / "actions.jsonl")[-1]["summary"]
    assert summary["AV"]["roc"] == 1.0 and summary["AL"]["roc"] == 1.0


def test_cluster_and_threads(small_data, tmp_path):
    save_checkpoint(tmp_path / "p.ckpt", EncoderParams.init(32, 32, seed=0), "align", 1)
    argv = ["cluster", "--checkpoint", str(tmp_path / "p.ckpt"), "--data", str(small_data / "data" / "eval.sod"),
            "--k", "5", "--threads", "1", "--out", str(tmp_path / "c")]
    assert main(argv) == 0
    recs = records(tmp_path / "c" / "clusters.jsonl")
    assert len(recs) == 41
    assert {r["cluster"] for r in recs[:-1]} == set(range(5))
    assert 0 < recs[-1]["summary"]["action_purity"] <= 1


def test_gradcheck_command(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("SOUNDOBJ_OUTPUT_DIR", str(tmp_path / "env"))
    assert main(["gradcheck", "--batches", "1", "--seed", "5"]) == 0
    out = tmp_path / "env" / "gradcheck"
    recs = records(out / "gradcheck.jsonl")
    assert [r["loss"] for r in recs[:-1]] == ["align", "consensus", "refine", "finetune"]
    assert recs[-1]["summary"]["max_rel_error"] <= 1e-4
    assert manifest(out)["seeds"] == {"root": 5}
    assert "worst" in capsys.readouterr().out


def test_help_documents_defaults():
    text = build_parser()._subparsers._group_actions[0].choices["train"].format_help()
    assert "(default: 5e-05)" in text and "(default: 16)" in text


def test_missing_input_is_error(tmp_path):
    code = main(["eval-actions", "--checkpoint", str(tmp_path / "nope.ckpt"), "--data", str(tmp_path / "nope.sod"),
                 "--out", str(tmp_path / "o")])
    assert code != 0
    assert manifest(tmp_path / "o")["status"] == "failed"
