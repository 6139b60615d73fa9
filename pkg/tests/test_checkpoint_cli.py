import json
import subprocess
import sys

import numpy as np
import pytest

from attribroi import io
from attribroi.checkpoint import load_checkpoint, save_checkpoint
from attribroi.cli import load_dataset, main
from attribroi.exceptions import ParseError
from attribroi.model import MiniHViT

from conftest import small_config


def test_checkpoint_round_trip(tmp_path):
    model = MiniHViT(small_config(capture_stage=0))
    save_checkpoint(tmp_path / "m.json", model, extra={"note": 1})
    back = load_checkpoint(tmp_path / "m.json")
    assert back.config == model.config
    x = np.random.default_rng(0).uniform(size=(2, 1, 8, 8))
    assert np.array_equal(back.logits(x), model.logits(x))
    manifest = io.read_json(tmp_path / "m.json")
    assert manifest["schema_version"] == 1 and manifest["extra"] == {"note": 1}
    assert (tmp_path / "m.atsr").exists()


def test_checkpoint_bytes_deterministic(tmp_path):
    save_checkpoint(tmp_path / "a.json", MiniHViT(small_config()))
    save_checkpoint(tmp_path / "b.json", MiniHViT(small_config()))
    assert (tmp_path / "a.atsr").read_bytes() == (tmp_path / "b.atsr").read_bytes()


def test_checkpoint_rejects_bad_manifest(tmp_path):
    save_checkpoint(tmp_path / "m.json", MiniHViT(small_config()))
    d = io.read_json(tmp_path / "m.json")
    d["schema_version"] = 2
    io.write_json(tmp_path / "bad.json", d)
    with pytest.raises(ParseError, match="schema_version"):
        load_checkpoint(tmp_path / "bad.json")
    d["schema_version"] = 1
    d["parameters"]["head.fc.bias"]["offset"] = 10**9
    io.write_json(tmp_path / "bad.json", d)
    with pytest.raises(ParseError, match="head.fc.bias"):
        load_checkpoint(tmp_path / "bad.json")


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert run("synth", "--size", 16, "--rois", 6, "--signal", "2,5", "--n", 20,
               "--seed", 1, "--out", out) == 0
    return out


def test_synth_example_command(tmp_path):
    out = tmp_path / "d"
    assert run("synth", "--size", 64, "--rois", 16, "--signal", "3,7,11", "--n", 200,
               "--seed", 1, "--out", out) == 0
    ds = load_dataset(out)
    assert ds.images.shape == (400, 1, 64, 64)
    assert list(ds.atlas.roi_ids) == list(range(1, 17))
    assert io.read_json(out / "config.json")["synth"]["signal_rois"] == [3, 7, 11]


def test_usage_errors_exit_2(capsys):
    assert run() == 2
    assert run("frobnicate") == 2
    assert run("synth", "--size", "big", "--out", "x") == 2
    assert run("distill", "--data", "d", "--out", "o") == 2
    assert "--teacher" in capsys.readouterr().err


def test_config_errors_exit_3(tmp_path, dataset, monkeypatch):
    assert run("synth", "--rois", 1, "--out", tmp_path / "x") == 3
    assert run("train", "--data", dataset, "--out", tmp_path / "m", "--epochs", -1) == 3
    assert run("train", "--data", tmp_path / "nothing", "--out", tmp_path / "m") == 3
    monkeypatch.setenv("ATTRIBROI_THREADS", "abc")
    assert run("synth", "--out", tmp_path / "y", "--n", 1, "--size", 8, "--rois", 4,
               "--signal", "1") == 3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_abort_exit_4(tmp_path, dataset):
    # a huge learning rate drives the weights to overflow
    code = run("train", "--data", dataset, "--out", tmp_path / "m", "--patch-size", 4,
               "--epochs", 5, "--lr", 1e300, "--optimizer", "adam")
    assert code == 4


def test_thread_cap_accepted(tmp_path, monkeypatch):
    monkeypatch.setenv("ATTRIBROI_THREADS", "1")
    assert run("synth", "--out", tmp_path / "y", "--n", 1, "--size", 8, "--rois", 4,
               "--signal", "1") == 0


def pipeline(root, data):
    model = root / "model"
    assert run("train", "--data", data, "--out", model, "--patch-size", 4, "--epochs", 2,
               "--seed", 3) == 0
    assert run("explain", "--data", data, "--model", model / "model.json", "--out",
               root / "explain", "--seed", 3, "--heatmaps") == 0
    assert run("aggregate", "--data", data, "--explain", root / "explain") == 0
    assert run("consensus", "--data", data, "--explain", root / "explain",
               "--out", root / "consensus.json") == 0
    return root / "consensus.json"


def test_pipeline_artifacts(tmp_path, dataset):
    report = pipeline(tmp_path, dataset)
    d = json.loads(report.read_text())
    assert d["schema_version"] == 1 and d["methods"] == ["saliency", "gradcam", "shap"]
    for sub in ("model/metrics.json", "model/config.json", "explain/config.json",
                "explain/shap/cohort.json", "explain/saliency/tables.json"):
        assert io.read_json(tmp_path / sub)["schema_version"] == 1
    lines = (tmp_path / "model/history.jsonl").read_text().splitlines()
    assert [json.loads(x)["epoch"] for x in lines] == [1, 2]
    assert list((tmp_path / "explain/gradcam").glob("*.pgm"))
    assert run("report", "--data", dataset, "--consensus", report, "--out",
               tmp_path / "report.txt") == 0
    assert "[shap]" in (tmp_path / "report.txt").read_text()


def test_distill_runs(tmp_path, dataset):
    assert run("train", "--data", dataset, "--out", tmp_path / "t", "--patch-size", 4,
               "--epochs", 1) == 0
    assert run("distill", "--data", dataset, "--out", tmp_path / "s", "--patch-size", 4,
               "--epochs", 1, "--teacher", tmp_path / "t" / "model.json") == 0
    cfg = io.read_json(tmp_path / "s" / "config.json")
    assert cfg["train"]["distill"] == {"alpha": 0.5, "temperature": 1.0}


def test_selftest_subprocess_exit_code():
    proc = subprocess.run([sys.executable, "-m", "attribroi.cli", "selftest", "--seeds", "1"],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stdout + proc.stderr
    assert "checks passed" in proc.stdout
