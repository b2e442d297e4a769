import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from objnerf.cli import EXIT_IO, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, apply_overrides, evaluate, main
from objnerf.dataset import load_dataset
from objnerf.errors import UsageError
from objnerf.field_network import load_checkpoint

TOY = ["--set", 'scene="sphere"', "--set", "n_views=12", "--set", "size=16", "--set", "focal=25.0"]
TRAIN = ["--set", "steps=150", "--set", "batch_size=256", "--seed", "1"]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "data")] + TOY) == EXIT_OK
    assert main(["train", "--data", str(root / "data"), "--out", str(root / "run")] + TRAIN) == EXIT_OK
    return root


def _pngs(path):
    return {p.name: p.read_bytes() for p in sorted(path.glob("*.png"))}


def test_synth_writes_splits(pipeline):
    splits = json.loads((pipeline / "data" / "splits.json").read_text())
    assert splits == {"train": list(range(12)), "val": [12, 13, 14, 15]}


def test_pipeline_reaches_psnr_threshold(pipeline, capsys):
    out = pipeline / "report.json"
    assert main(["eval", "--checkpoint", str(pipeline / "run" / "model.ckpt"),
                 "--data", str(pipeline / "data"), "--out", str(out)]) == EXIT_OK
    report = json.loads(out.read_text())
    assert [r["view"] for r in report["views"]] == [12, 13, 14, 15]
    assert report["mean_psnr"] >= 24.0
    assert "mean" in capsys.readouterr().out


def test_eval_psnr_matches_independent_mse(pipeline):
    model, _ = load_checkpoint(pipeline / "run" / "model.ckpt")
    data = load_dataset(pipeline / "data")
    report = evaluate(model, data, [13])
    from objnerf.evaluation import render_image

    pred = render_image(model, data.poses[13], model.bounds, "scene", 64).color
    target = data.images[13].astype(np.float64) / 255.0
    total = 0.0
    for r in range(pred.shape[0]):
        for c in range(pred.shape[1]):
            for ch in range(3):
                total += (float(pred[r, c, ch]) - float(target[r, c, ch])) ** 2
    reference = 10.0 * np.log10(1.0 / (total / pred.size))
    assert abs(report["views"][0]["psnr"] - reference) < 1e-9


def test_train_log_is_reproducible(pipeline, tmp_path):
    assert main(["train", "--data", str(pipeline / "data"), "--out", str(tmp_path / "again")] + TRAIN) == EXIT_OK
    assert (tmp_path / "again" / "train_log.jsonl").read_bytes() == (pipeline / "run" / "train_log.jsonl").read_bytes()
    assert (tmp_path / "again" / "model.ckpt").read_bytes() == (pipeline / "run" / "model.ckpt").read_bytes()


def test_render_twice_identical_bytes(pipeline, tmp_path):
    args = ["render", "--checkpoint", str(pipeline / "run" / "model.ckpt"), "--poses", str(pipeline / "data"),
            "--views", "12", "13", "--depth"]
    assert main(args + ["--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(args + ["--out", str(tmp_path / "b")]) == EXIT_OK
    a, b = _pngs(tmp_path / "a"), _pngs(tmp_path / "b")
    assert list(a) == ["0012.png", "0013.png"] and a == b
    assert (tmp_path / "a" / "0012.f32").read_bytes() == (tmp_path / "b" / "0012.f32").read_bytes()
    assert np.asarray(Image.open(tmp_path / "a" / "0012.png")).shape == (16, 16, 3)


def test_empty_edit_matches_render(pipeline, tmp_path):
    script = tmp_path / "empty.json"
    script.write_text(json.dumps({"edits": []}))
    common = ["--checkpoint", str(pipeline / "run" / "model.ckpt"), "--poses", str(pipeline / "data"),
              "--views", "12", "14"]
    assert main(["render", "--out", str(tmp_path / "r")] + common) == EXIT_OK
    assert main(["edit", "--script", str(script), "--out", str(tmp_path / "e")] + common) == EXIT_OK
    assert _pngs(tmp_path / "r") == _pngs(tmp_path / "e")


def test_edit_move_changes_image(pipeline, tmp_path):
    script = tmp_path / "move.json"
    script.write_text(json.dumps({"edits": [{"object": 1, "mode": "move", "t": [0.0, 0.0, 0.3]}]}))
    common = ["--checkpoint", str(pipeline / "run" / "model.ckpt"), "--poses", str(pipeline / "data"),
              "--views", "12"]
    assert main(["render", "--out", str(tmp_path / "r")] + common) == EXIT_OK
    assert main(["edit", "--script", str(script), "--out", str(tmp_path / "e")] + common) == EXIT_OK
    assert _pngs(tmp_path / "r") != _pngs(tmp_path / "e")


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"scene": "sphere", "n_views": 3, "size": 8, "focal": 12.0, "held_out": False}))
    assert main(["synth", "--out", str(tmp_path / "d"), "--config", str(cfg), "--set", "n_views=2"]) == EXIT_OK
    data = load_dataset(tmp_path / "d")
    assert len(data.poses) == 2 and data.images.shape[1:3] == (8, 8)


def test_apply_overrides_dotted_and_unknown():
    base = {"lr": 1.0, "loss": {"lambda1": 1.0}}
    out = apply_overrides(base, ["loss.lambda1=0.5", "lr=2e-3"])
    assert out == {"lr": 2e-3, "loss": {"lambda1": 0.5}}
    assert base["loss"]["lambda1"] == 1.0
    with pytest.raises(UsageError):
        apply_overrides(base, ["nope=1"])
    with pytest.raises(UsageError):
        apply_overrides(base, ["lr"])


def test_exit_code_usage(tmp_path, capsys):
    assert main(["synth"]) == EXIT_USAGE
    assert main([]) == EXIT_USAGE
    assert main(["synth", "--out", str(tmp_path / "x"), "--set", "scene=\"teapot\""]) == EXIT_USAGE
    assert main(["synth", "--out", str(tmp_path / "x"), "--set", "bogus=1"]) == EXIT_USAGE
    assert "usage error" in capsys.readouterr().err


def test_exit_code_io(tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.ckpt"), "--data", str(tmp_path)]) == EXIT_IO
    assert main(["train", "--data", str(tmp_path / "nothing"), "--out", str(tmp_path / "o")]) == EXIT_IO
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["synth", "--out", str(tmp_path / "d"), "--config", str(bad)]) == EXIT_IO


def test_exit_code_numeric(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "d")] + TOY) == EXIT_OK
    with np.errstate(all="ignore"):
        code = main(["train", "--data", str(tmp_path / "d"), "--out", str(tmp_path / "r"),
                     "--set", "steps=5", "--set", "lr=1e30"])
    assert code == EXIT_NUMERIC


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "objnerf", "bogus"], capture_output=True, text=True)
    assert proc.returncode == EXIT_USAGE
    proc = subprocess.run([sys.executable, "-m", "objnerf", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for name in ("synth", "train", "render", "edit", "eval"):
        assert name in proc.stdout
