import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from semfeat.cli import main
from semfeat.config import ExperimentConfig, from_dict

TINY_CONFIG = {
    "model": {"depth": 2, "base_channels": 4, "d_enc": 8, "d_task": 4, "d_attn": 4, "d_desc": 8},
    "loss": {"pairs_per_image": 32},
    "trainer": {"epochs": 1, "warmup_epochs": 0, "batch_size": 4},
    # An untrained net labels everything dynamic, so nothing is excluded here.
    "matcheval": {"threshold": 0.0, "nms_radius": 3.0, "max_count": 32, "excluded_classes": []},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY_CONFIG))
    ident = dict(TINY_CONFIG, synthgen={"transform": {"max_rotation_deg": 0.0, "max_translation_px": 0.0,
                                                      "scale_range": [1.0, 1.0], "perspective_jitter": 0.0}})
    (root / "ident.json").write_text(json.dumps(ident))
    assert main(["generate", "--config", str(cfg), "--count", "4", "--seed", "1", "--out", str(root / "corpus")]) == 0
    assert main(["generate", "--config", str(root / "ident.json"), "--count", "3", "--out", str(root / "ident")]) == 0
    assert main(["train", "--config", str(cfg), "--corpus", str(root / "corpus"), "--out", str(root / "run")]) == 0
    return root


def _run_json(d: Path) -> dict:
    return json.loads((d / "run.json").read_text())


class TestGenerate:
    def test_count(self, tmp_path):
        assert main(["generate", "--count", "10", "--out", str(tmp_path / "c")]) == 0
        assert len((tmp_path / "c" / "pairs.jsonl").read_text().splitlines()) == 10

    def test_same_seed_same_manifest(self, tmp_path):
        for name in ("a", "b"):
            assert main(["--seed", "5", "generate", "--count", "2", "--out", str(tmp_path / name)]) == 0
        assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()

    def test_empty(self, tmp_path):
        assert main(["generate", "--count", "0", "--out", str(tmp_path / "e")]) == 0
        assert json.loads((tmp_path / "e" / "manifest.json").read_text())["count"] == 0

    def test_run_json_reloads(self, workspace):
        run = _run_json(workspace / "corpus")
        assert run["command"] == "generate" and run["seed"] == 1
        assert isinstance(from_dict(ExperimentConfig, run["config"]), ExperimentConfig)


class TestTrain:
    def test_one_epoch_one_record(self, workspace):
        assert len((workspace / "run" / "metrics.jsonl").read_text().splitlines()) == 1
        run = _run_json(workspace / "run")
        assert len(run["inputs"]["corpus"]["sha256"]) == 64

    def test_missing_corpus(self, tmp_path, capsys):
        assert main(["train", "--corpus", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 1
        assert "not found" in capsys.readouterr().err

    def test_deterministic_twice(self, workspace, tmp_path):
        for name in ("x", "y"):
            args = ["train", "--config", str(workspace / "tiny.json"), "--deterministic", "--corpus", str(workspace / "corpus"),
                    "--epochs", "2", "--out", str(tmp_path / name)]
            assert main(args) == 0
        assert (tmp_path / "x" / "metrics.jsonl").read_bytes() == (tmp_path / "y" / "metrics.jsonl").read_bytes()

    def test_bad_config_is_usage_error(self, tmp_path):
        (tmp_path / "bad.json").write_text(json.dumps({"trainer": {"lr": 1}}))
        assert main(["train", "--config", str(tmp_path / "bad.json"), "--corpus", "x"]) == 1


class TestEval:
    def test_identity_pairs_finite(self, workspace):
        out = workspace / "eval_ident"
        assert main(["eval", "--config", str(workspace / "tiny.json"), "--checkpoint", str(workspace / "run" / "last.ckpt"),
                     "--corpus", str(workspace / "ident"), "--out", str(out)]) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert np.isfinite(summary["summary"]["keypoint_recall"]) and np.isfinite(summary["summary"]["inlier_ratio"])
        assert len((out / "eval.jsonl").read_text().splitlines()) == 3
        header = (out / "summary.csv").read_text().splitlines()[0]
        assert header == "Method,Keypoint Recall (%),Inlier Ratio (%)"
        assert (out / "matches" / "000000.png").exists()
        assert summary["reference_gap"]["keypoint_recall"]["reference"] == 82.5

    def test_no_semantic_filter_recorded(self, workspace):
        out = workspace / "eval_nofilter"
        assert main(["eval", "--config", str(workspace / "tiny.json"), "--checkpoint", str(workspace / "run" / "last.ckpt"),
                     "--corpus", str(workspace / "ident"), "--no-semantic-filter", "--out", str(out)]) == 0
        meta = json.loads((out / "summary.json").read_text())["metadata"]
        assert meta["semantic_filter"] is False and meta["same_class_required"] is False

    def test_empty_set(self, workspace, tmp_path):
        assert main(["generate", "--count", "0", "--out", str(tmp_path / "empty")]) == 0
        with pytest.warns(UserWarning, match="empty"):
            rc = main(["eval", "--checkpoint", str(workspace / "run" / "last.ckpt"), "--corpus", str(tmp_path / "empty"),
                       "--out", str(tmp_path / "ev")])
        assert rc == 0
        s = json.loads((tmp_path / "ev" / "summary.json").read_text())["summary"]
        assert s["keypoint_recall"] is None and s["inlier_ratio"] is None

    def test_class_mismatch(self, workspace, tmp_path):
        (tmp_path / "c4.json").write_text(json.dumps({"synthgen": {"scene": {"num_classes": 4}}}))
        assert main(["generate", "--config", str(tmp_path / "c4.json"), "--count", "1", "--out", str(tmp_path / "c4")]) == 0
        assert main(["eval", "--checkpoint", str(workspace / "run" / "last.ckpt"), "--corpus", str(tmp_path / "c4"),
                     "--out", str(tmp_path / "o")]) == 1

    def test_corrupt_checkpoint_is_runtime_failure(self, workspace, tmp_path):
        (tmp_path / "bad.ckpt").write_bytes(b"not a zip")
        assert main(["eval", "--checkpoint", str(tmp_path / "bad.ckpt"), "--corpus", str(workspace / "ident"),
                     "--out", str(tmp_path / "o")]) == 2


class TestExportRmsePlot:
    def test_export_two_images(self, workspace, tmp_path):
        imgs = tmp_path / "imgs"
        imgs.mkdir()
        for name in ("000000_a.png", "000000_b.png"):
            Image.open(workspace / "corpus" / "images" / name).save(imgs / name)
        out = tmp_path / "colmap"
        assert main(["export", "--config", str(workspace / "tiny.json"), "--checkpoint", str(workspace / "run" / "last.ckpt"),
                     "--images", str(imgs), "--out", str(out)]) == 0
        assert sorted(p.name for p in out.glob("*.txt")) == ["000000_a.png.txt", "000000_b.png.txt", "matches.txt"]
        assert (out / "matches.txt").read_text().splitlines()[0] == "000000_a.png 000000_b.png"
        assert (out / "run.json").exists()

    def test_rmse_identical(self, tmp_path, capsys):
        (tmp_path / "t.csv").write_text("x,y,z\n0,0,0\n1,0,0\n0,1,0\n0,0,1\n")
        assert main(["rmse", str(tmp_path / "t.csv"), str(tmp_path / "t.csv")]) == 0
        out = capsys.readouterr().out
        assert "RMSE (similarity): 0.000 m" in out and "RMSE (rigid): 0.000 m" in out

    def test_rmse_missing_file(self, tmp_path):
        assert main(["rmse", str(tmp_path / "a.csv"), str(tmp_path / "b.csv")]) == 1

    def test_plot_match_segments(self, tmp_path):
        rec = {"xy_a": [[i * 5.0, 10.0] for i in range(7)], "xy_b": [[i * 5.0 + 1, 12.0] for i in range(7)],
               "correct": [True] * 5 + [False] * 2, "image_a": None, "image_b": None}
        (tmp_path / "m.json").write_text(json.dumps(rec))
        assert main(["plot", "--matches", str(tmp_path / "m.json"), "--out", str(tmp_path / "p")]) == 0
        side = json.loads((tmp_path / "p" / "m.json").read_text())
        assert len(side["segments"]) == 7 and side["n_green"] == 5 and side["n_red"] == 2
        assert (tmp_path / "p" / "m.png").exists()

    def test_plot_trajectory(self, tmp_path):
        (tmp_path / "t.csv").write_text("x,y,z\n0,0,0\n1,0,0\n1,1,0\n0,1,1\n")
        assert main(["plot", "--trajectory", str(tmp_path / "t.csv"), str(tmp_path / "t.csv"), "--out", str(tmp_path / "p")]) == 0
        assert json.loads((tmp_path / "p" / "trajectory.json").read_text())["rmse"] == pytest.approx(0.0, abs=1e-9)

    def test_plot_nothing(self, tmp_path):
        assert main(["plot", "--out", str(tmp_path)]) == 1


def test_unknown_command_exit_one():
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == 1
