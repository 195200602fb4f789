import csv
import json

import pytest

from relpose.cli import main


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli") / "scene"
    assert main(["synth-gen", "--out", str(d), "--grid", "4x4", "--views", "8", "--queries", "2",
                 "--pairs-per-view", "2", "--seed", "3"]) == 0
    return d


def test_synth_gen_outputs(scene_dir):
    for name in ["manifest.json", "db.json", "queries.json", "retrieval.json"]:
        assert (scene_dir / name).exists()
    retrieval = json.loads((scene_dir / "retrieval.json").read_text())
    assert len(retrieval) == 2


def test_eval_pairs_csv(scene_dir, tmp_path):
    out = tmp_path / "m.csv"
    assert main(["eval-pairs", "--pairs", str(scene_dir / "manifest.json"), "--out", str(out),
                 "--matcher", "argmax"]) == 0
    with open(out) as fh:
        header = next(csv.reader(fh))
    assert header == ["pair_id", "inlier_ratio", "rot_err_deg", "trans_err_m", "estimated"]


def test_train_then_eval_with_checkpoint(scene_dir, tmp_path):
    ck = tmp_path / "ck"
    cfg = tmp_path / "train.json"
    cfg.write_text(json.dumps({"learning_rate": 1e-4, "batch_size": 4, "epochs": 1}))
    assert main(["train", "--pairs", str(scene_dir / "manifest.json"), "--out", str(ck),
                 "--config", str(cfg)]) == 0
    assert (ck / "manifest.json").exists() and (ck / "train_log.csv").exists()
    assert main(["eval-pairs", "--pairs", str(scene_dir / "manifest.json"), "--ckpt", str(ck),
                 "--out", str(tmp_path / "m.csv")]) == 0


def test_localize_json(scene_dir, tmp_path, capsys):
    retrieval = json.loads((scene_dir / "retrieval.json").read_text())
    q = sorted(retrieval)[0]
    out = tmp_path / "pose.json"
    rc = main(["localize", "--query", q, "--db", str(scene_dir / "db.json"), "--queries",
               str(scene_dir / "queries.json"), "--retrieval", str(scene_dir / "retrieval.json"),
               "--matcher", "argmax", "--refine", "--timing", "--out", str(out)])
    assert rc == 0
    payload = json.loads(out.read_text())
    assert payload["query_id"] == q
    assert "timing_ms" in payload or "error" in payload


def test_hilbert_dump(tmp_path):
    out = tmp_path / "h.csv"
    assert main(["hilbert-dump", "--grid", "15x20", "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 301


def test_grad_check(capsys):
    assert main(["grad-check", "--grid", "4x4", "--seed", "7"]) == 0
    assert "PASS" in capsys.readouterr().out


def test_usage_errors(capsys):
    assert main(["train", "--bogus"]) == 1
    assert main([]) == 1
    assert main(["hilbert-dump", "--grid", "axb", "--out", "x"]) == 1


def test_data_errors(tmp_path):
    assert main(["eval-pairs", "--pairs", str(tmp_path / "missing.json"), "--out", str(tmp_path / "m.csv")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["train", "--pairs", str(bad), "--out", str(tmp_path / "ck")]) == 2


def test_seed_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv("RELPOSE_SEED", "5")
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["synth-gen", "--out", str(a), "--grid", "3x3", "--views", "4", "--pairs-per-view", "1"]) == 0
    assert main(["synth-gen", "--out", str(b), "--grid", "3x3", "--views", "4", "--pairs-per-view", "1",
                 "--seed", "5"]) == 0
    assert (a / "manifest.json").read_text() == (b / "manifest.json").read_text()
    monkeypatch.setenv("RELPOSE_SEED", "x")
    assert main(["synth-gen", "--out", str(tmp_path / "c"), "--grid", "3x3", "--views", "4"]) == 1
