import json
import math

import numpy as np
import pytest
import torch

from omnigs.geometry import VolumeSpec
from omnigs.harness import cli
from omnigs.harness.checkpoint import CheckpointError, from_bytes, load_checkpoint, to_bytes
from omnigs.harness.config import ConfigError, OptimConfig, RunConfig, TrainConfig
from omnigs.harness.dataset import generate_dataset, list_bins, load_bin
from omnigs.harness.gradsuite import TINY_MODEL
from omnigs.harness.scenes import SceneConfig
from omnigs.harness.train import NumericalAbort, Trainer, read_loss_log

SCENE = SceneConfig(width=32, height=16, volume=VolumeSpec(8, 8, 4, (-10.0, -10.0, -0.6), (10.0, 10.0, 2.4)))


def small_cfg(**train):
    t = {"steps": 4, "checkpoint_every": 2, "dtype": "float64", **train}
    return RunConfig(model=TINY_MODEL, scene=SCENE, optim=OptimConfig(warmup_steps=2), train=TrainConfig(**t))


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("bins")
    generate_dataset("2", 1, 3, d, SCENE)
    return d


@pytest.fixture(scope="module")
def trained(data, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    res = Trainer(small_cfg(), data, out).run()
    return out, res


def test_config_roundtrip_and_errors(tmp_path):
    cfg = small_cfg()
    assert RunConfig.from_json(cfg.to_json()) == cfg
    p = tmp_path / "c.json"
    p.write_text(cfg.to_json())
    assert RunConfig.load(p) == cfg
    with pytest.raises(ConfigError, match="unknown keys"):
        RunConfig.from_dict({"train": {"stepz": 3}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"train": {"steps": "many"}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"optim": {"betas": [0.9]}})
    with pytest.raises(ConfigError):
        RunConfig.from_json("{nope")
    with pytest.raises(ConfigError):
        TrainConfig(dtype="float16")
    assert cfg.replace(train={"steps": 9}).train.steps == 9


def test_dataset_bins_load(data, tmp_path):
    bins = list_bins(data)
    s = load_bin(bins[0])
    assert s.spec == SCENE.volume
    assert s.input_images.shape == (s.n_input, 16, 32, 3)
    assert s.novel_images.shape[0] == s.n_novel == len(s.novel_cams)
    assert float(s.input_images.min()) >= 0 and float(s.input_images.max()) <= 1
    with pytest.raises(FileNotFoundError):
        list_bins(tmp_path)


def test_dataset_is_deterministic(data, tmp_path):
    generate_dataset("2", 1, 3, tmp_path, SCENE)
    a, b = list_bins(data)[0], list_bins(tmp_path)[0]
    for f in sorted(p.name for p in a.iterdir()):
        assert (a / f).read_bytes() == (b / f).read_bytes(), f


def test_training_logs_and_checkpoints(trained):
    out, res = trained
    log = read_loss_log(out)
    assert [r["step"] for r in log] == [0, 1, 2, 3]
    assert all(math.isfinite(r["total"]) and r["recomposition_error"] < 1e-12 for r in log)
    assert {p.name for p in out.glob("*.omni")} == {"ckpt_000002.omni", "ckpt_000004.omni", "final.omni"}
    ck = load_checkpoint(out / "final.omni")
    assert ck.step == 4 and ck.config == small_cfg()


def test_resume_matches_uninterrupted(trained, data, tmp_path):
    out, _ = trained
    Trainer(small_cfg(), data, tmp_path, resume=out / "ckpt_000002.omni").run()
    a, b = read_loss_log(out)[2:], read_loss_log(tmp_path)
    assert [r["total"] for r in a] == [r["total"] for r in b]
    with pytest.raises(ConfigError):
        Trainer(small_cfg(steps=5), data, tmp_path / "x", resume=out / "ckpt_000002.omni")


def test_checkpoint_corruption_detected(trained):
    out, _ = trained
    raw = to_bytes(load_checkpoint(out / "final.omni"))
    assert to_bytes(from_bytes(raw)) == raw
    with pytest.raises(CheckpointError, match="magic"):
        from_bytes(b"XXXXX" + raw[5:])
    with pytest.raises(CheckpointError, match="version"):
        from_bytes(raw[:5] + (99).to_bytes(4, "little") + raw[9:])
    with pytest.raises(CheckpointError, match="truncated"):
        from_bytes(raw[:-8])
    with pytest.raises(CheckpointError, match="trailing"):
        from_bytes(raw + b"\0")


def test_nonfinite_update_aborts_with_dump(data, tmp_path):
    cfg = small_cfg().replace(optim={"lr": math.nan})
    with pytest.raises(NumericalAbort) as e:
        Trainer(cfg, data, tmp_path).run()
    assert e.value.dump_path is not None and e.value.dump_path.exists()


def test_cli_exit_codes(data, trained, tmp_path, capsys):
    out, _ = trained
    assert cli.main(["nope"]) == cli.EXIT_INVALID
    assert cli.main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == cli.EXIT_INVALID
    bad = tmp_path / "bad.json"
    bad.write_text('{"train": {"stepz": 1}}')
    assert cli.main(["train", "--config", str(bad), "--data", str(data), "--out", str(tmp_path / "o")]) == 2
    junk = tmp_path / "junk.omni"
    junk.write_bytes(b"garbage")
    assert cli.main(["eval", "--ckpt", str(junk), "--data", str(data), "--report", str(tmp_path / "r.json")]) == 2
    nan_cfg = tmp_path / "nan.json"
    nan_cfg.write_text(small_cfg().replace(optim={"lr": math.nan}).to_json())
    assert cli.main(["train", "--config", str(nan_cfg), "--data", str(data), "--out", str(tmp_path / "n")]) == 3


def test_cli_train_eval_render(data, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(small_cfg(steps=2, checkpoint_every=0).to_json())
    run = tmp_path / "run"
    assert cli.main(["train", "--config", str(cfg), "--data", str(data), "--out", str(run)]) == 0
    rep = tmp_path / "report.json"
    assert cli.main(["eval", "--ckpt", str(run / "final.omni"), "--data", str(data), "--report", str(rep),
                     "--views", "input"]) == 0
    d = json.loads(rep.read_text())
    assert d["n_views"] == load_bin(list_bins(data)[0]).n_input
    img = tmp_path / "view.ppm"
    scene = str(list_bins(data)[0])
    assert cli.main(["render", "--ckpt", str(run / "final.omni"), "--scene", scene,
                     "--pose", "0", "0", "1", "45", "0", "0", "--out", str(img)]) == 0
    assert img.read_bytes().startswith(b"P6") and img.with_suffix(".ply").exists()


def test_cli_gen_default_scene(tmp_path, capsys):
    assert cli.main(["gen", "--case", "2", "--n", "1", "--seed", "0", "--out", str(tmp_path)]) == 0
    assert len(list_bins(tmp_path)) == 1


def test_cli_gradcheck_ops(capsys):
    assert cli.main(["gradcheck", "--module", "ops"]) == 0
    assert "gradcheck: PASS" in capsys.readouterr().out


def test_pose_camera_axes():
    like = load_like()
    cam = cli.pose_camera((1.0, 2.0, 0.5, 90.0, 0.0, 0.0), like)
    assert np.allclose(cam.center, [1.0, 2.0, 0.5])
    assert np.allclose(cam.rotation[2], [0.0, 1.0, 0.0], atol=1e-12)
    up = cli.pose_camera((0, 0, 0, 0.0, 30.0, 0.0), like)
    assert up.rotation[2][2] == pytest.approx(0.5)
    rolled = cli.pose_camera((0, 0, 0, 0.0, 0.0, 90.0), like)
    assert np.allclose(rolled.rotation[2], cli.pose_camera((0, 0, 0, 0, 0, 0), like).rotation[2])


def load_like():
    from omnigs.geometry import CameraModel
    return CameraModel(20.0, 20.0, 16.0, 12.0, 32, 24)
