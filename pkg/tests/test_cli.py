import json
import shutil

import pytest

from soundmap.cli import run

SMALL = ["model.d=16", "model.image_width=16", "model.image_heads=2", "model.image_depth=1",
         "model.audio_width=16", "model.text_width=16", "model.text_heads=2", "model.text_depth=1",
         "model.fusion_depth=1", "model.fusion_heads=2", "train.batch_size=8", "train.warmup_steps=2"]


def read_manifest(path):
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run(["synth", "--n", "64", "--seed", "7", "--out", str(root / "data"), "n_sites=2"]) == 0
    cfg = root / "split.json"
    cfg.write_text(json.dumps({"manifest": str(root / "data" / "manifest.jsonl"), "min_cell_count": 5,
                               "holdout_fraction": 0.5}))
    assert run(["split", "--config", str(cfg), "--out", str(root / "split")]) == 0
    assert run(["train", "--manifest", str(root / "data" / "manifest.jsonl"), "--payloads",
                str(root / "data" / "payloads"), "--steps", "3", "--out", str(root / "train"), *SMALL]) == 0
    return root


def test_synth_outputs(pipeline):
    data = pipeline / "data"
    assert len(read_manifest(data / "manifest.jsonl")) == 64
    assert (data / "payloads" / "index.json").exists()
    files = {f["path"] for f in json.loads((data / "run_manifest.json").read_text())["files"]}
    assert "manifest.jsonl" in files and "config.json" in files
    assert json.loads((data / "config.json").read_text())["seed"] == 7


def test_split_outputs(pipeline):
    audit = json.loads((pipeline / "split" / "audit.json").read_text())
    assert audit["shared_cells"] == 0 and audit["sub_threshold_violations"] == 0
    n = sum(len(read_manifest(pipeline / "split" / f"{s}.jsonl")) for s in ("train", "val", "test", "excluded"))
    assert n == 64
    assert (pipeline / "split" / "cells.csv").read_text().startswith("cell_lat,cell_lon,count")


def test_train_outputs(pipeline):
    t = pipeline / "train"
    assert (t / "checkpoint" / "header.json").exists()
    assert len((t / "train_log.jsonl").read_text().splitlines()) == 3
    assert (t / "loss.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    assert json.loads((t / "config.json").read_text())["model.d"] == 16


def test_eval_prints_report(pipeline, capsys, tmp_path):
    code = run(["eval", "--checkpoint", str(pipeline / "train" / "checkpoint"), "--manifest",
                str(pipeline / "data" / "manifest.jsonl"), "--payloads", str(pipeline / "data" / "payloads"),
                "--direction", "i2a", "--zoom", "3", "--use-text", "--use-meta", "--out", str(tmp_path / "ev")])
    assert code == 0
    rep = json.loads(capsys.readouterr().out.splitlines()[0])
    assert rep["zoom"] == 3 and rep["use_text"] and rep["use_metadata"] and rep["n"] == 64
    assert json.loads((tmp_path / "ev" / "report.json").read_text()) == rep
    assert (tmp_path / "ev" / "ranks.png").exists()


def test_map_and_uncertainty(tmp_path, pipeline):
    assert run(["synth", "--grid-rows", "3", "--grid-cols", "4", "--out", str(tmp_path / "g")]) == 0
    assert run(["train", "--manifest", str(tmp_path / "g" / "manifest.jsonl"), "--payloads",
                str(tmp_path / "g" / "payloads"), "--steps", "1", "--out", str(tmp_path / "t"), *SMALL]) == 0
    common = ["--checkpoint", str(tmp_path / "t" / "checkpoint"), "--grid", str(tmp_path / "g" / "grid.json"),
              "--payloads", str(tmp_path / "g" / "payloads")]
    assert run(["map", *common, "--manifest", str(tmp_path / "g" / "manifest.jsonl"), "--query-id", "s000005",
                "--out", str(tmp_path / "m"), "hours=[6,18]"]) == 0
    summary = json.loads((tmp_path / "m" / "summary.json").read_text())
    assert summary["hours"] == [6, 18] and len(summary["argmax_tile"]) == 2
    for h in (6, 18):
        assert (tmp_path / "m" / f"score_h{h:02d}.png").exists()
        assert (tmp_path / "m" / f"score_h{h:02d}_figure.png").exists()
        side = json.loads((tmp_path / "m" / f"score_h{h:02d}.json").read_text())
        assert side["value_range"] == summary["value_range"]
    assert len((tmp_path / "m" / "score.csv").read_text().splitlines()) == 1 + 2 * 12
    assert run(["uncertainty", *common, "--no-meta", "--out", str(tmp_path / "u")]) == 0
    assert (tmp_path / "u" / "uncertainty_h12.png").exists()


def test_dry_run_has_no_side_effects(tmp_path, capsys):
    out = tmp_path / "nothing"
    assert run(["train", "--dry-run", "--out", str(out), "train.steps=5"]) == 0
    cfg = json.loads(capsys.readouterr().out)
    assert cfg["train.steps"] == 5 and cfg["model.fusion_depth"] == 3
    assert not out.exists()
    for cmd in ("synth", "split", "eval", "map", "uncertainty", "gradcheck"):
        assert run([cmd, "--dry-run", "--out", str(out)]) == 0
    assert not out.exists()


def test_precedence(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"n": 10, "planted_dim": 3}))
    assert run(["synth", "--config", str(cfg), "--dry-run", "n=20"]) == 0
    assert json.loads(capsys.readouterr().out)["n"] == 20
    assert run(["synth", "--config", str(cfg), "--dry-run", "n=20", "--n", "30"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["n"] == 30 and out["planted_dim"] == 3


def test_user_errors_exit_one(tmp_path, capsys):
    assert run(["synth", "--dry-run", "bogus=1"]) == 1
    assert "bogus" in capsys.readouterr().err
    assert run(["split", "--manifest", str(tmp_path / "missing.jsonl"), "--out", str(tmp_path / "s")]) == 1
    assert run(["train", "--out", str(tmp_path / "t")]) == 1
    assert "manifest" in capsys.readouterr().err
    bad = tmp_path / "bad.json"
    bad.write_text("[1, 2")
    assert run(["synth", "--config", str(bad), "--dry-run"]) == 1
    assert run(["nonsense"]) == 1
    assert run(["synth", "--threads", "0", "--dry-run"]) == 1


def test_identical_argv_identical_outputs(tmp_path):
    out = tmp_path / "run"
    argv = [["synth", "--n", "32", "--seed", "3", "--out", str(out / "data")],
            ["train", "--manifest", str(out / "data" / "manifest.jsonl"), "--payloads", str(out / "data" / "payloads"),
             "--steps", "2", "--seed", "3", "--out", str(out / "train"), *SMALL]]

    def go():
        if out.exists():
            shutil.rmtree(out)
        for a in argv:
            assert run(a) == 0
        return {p.relative_to(out): p.read_bytes() for p in out.rglob("*") if p.is_file()}

    first, second = go(), go()
    assert first.keys() == second.keys()
    for rel in first:
        assert first[rel] == second[rel], rel
