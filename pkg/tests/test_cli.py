import hashlib
import json
import struct

import numpy as np
import pytest

from polfuse import cli, io
from polfuse import tensor as T
from polfuse import train as TR
from polfuse.checkpoint import save_checkpoint
from polfuse.data import generate_synthetic_scene
from polfuse.runconfig import ConfigError, RunConfig

TINY = {"bsfe_channels": [4, 4, 4], "cifem_channels": 3, "sage_widths": [6, 4], "patch_size": 5, "grid_rows": 4,
        "grid_cols": 4, "per_class_count": 4, "batch_size": 20, "k_neighbors": 3, "epochs": 2}


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert cli.main(["gen", "--out", str(d / "scene.mfpc"), "--bands", "2", "--classes", "3", "--size", "40x40",
                     "--seed", "5"]) == 0
    (d / "tiny.json").write_text(json.dumps(TINY))
    assert cli.main(["train", "--data", str(d / "scene.mfpc"), "--config", str(d / "tiny.json"), "--out",
                     str(d / "run")]) == 0
    return d


# ---- gen --------------------------------------------------------------------------


def test_gen_header(tmp_path):
    out = tmp_path / "a.mfpc"
    assert cli.main(["gen", "--bands", "2", "--classes", "5", "--size", "48x40", "--seed", "7", "--out", str(out)]) == 0
    assert struct.unpack_from("<5I", out.read_bytes(), 4) == (1, 2, 48, 40, 5)


def test_gen_is_deterministic(tmp_path):
    args = ["gen", "--size", "32x32", "--seed", "9"]
    cli.main(args + ["--out", str(tmp_path / "a")])
    cli.main(args + ["--out", str(tmp_path / "b")])
    assert sha(tmp_path / "a") == sha(tmp_path / "b")


def test_gen_single_band_is_an_error(tmp_path, capsys):
    assert cli.main(["gen", "--bands", "1", "--out", str(tmp_path / "x")]) == 2
    assert "bands" in capsys.readouterr().err


def test_gen_unwritable_path(tmp_path, capsys):
    assert cli.main(["gen", "--size", "20x20", "--out", str(tmp_path / "missing" / "x.mfpc")]) == 2
    assert "error" in capsys.readouterr().err


def test_bad_arguments_exit_two():
    assert cli.main(["gen", "--size", "abc", "--out", "/tmp/never"]) == 2
    assert cli.main(["nonsense"]) == 2


# ---- config -------------------------------------------------------------------------


def test_run_config_defaults_and_schema():
    cfg = RunConfig()
    assert (cfg.train.epochs, cfg.train.lr, cfg.train.batch_size, cfg.train.lam) == (150, 0.001, 100, 0.1)
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError, match="unknown"):
        RunConfig.from_dict({"epochz": 3})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"gamma": 1.0})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"lam": -1})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"epochs": "ten"})
    assert RunConfig.from_dict({"cifem": "off", "tpc": "on"}).train.cifem is False


def test_overrides():
    cfg = RunConfig().with_overrides(["tpc=off", "fusion=max", "gamma=4"])
    assert cfg.train.tpc is False and cfg.train.fusion == "max" and cfg.train.gamma == 4.0


def test_train_rejects_bad_config(work, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"gamma": 0.5}))
    assert cli.main(["train", "--data", str(work / "scene.mfpc"), "--config", str(bad), "--out", str(tmp_path)]) == 2
    bad.write_text(json.dumps({"surprise": 1}))
    assert cli.main(["train", "--data", str(work / "scene.mfpc"), "--config", str(bad), "--out", str(tmp_path)]) == 2


# ---- train ---------------------------------------------------------------------------


def test_train_writes_both_checkpoints_and_logs(work):
    run = work / "run"
    assert sorted(p.name for p in run.iterdir()) == ["model_black.mfst", "model_white.mfst", "train_black.log",
                                                     "train_white.log"]
    for part in ("black", "white"):
        lines = (run / f"train_{part}.log").read_text().splitlines()
        assert len(lines) == 2
        for line in lines:
            alpha = [float(a) for a in line.split("alpha=")[1].split(",")]
            assert len(alpha) == 2 and abs(sum(alpha) - 1) <= 1e-9


def test_train_single_part(work, tmp_path):
    out = tmp_path / "one"
    assert cli.main(["train", "--data", str(work / "scene.mfpc"), "--config", str(work / "tiny.json"),
                     "--out", str(out), "--part", "black", "--set", "epochs=1"]) == 0
    assert sorted(p.name for p in out.glob("*.mfst")) == ["model_black.mfst"]


def test_train_repeats_offset_seeds(work, tmp_path):
    out = tmp_path / "rep"
    assert cli.main(["train", "--data", str(work / "scene.mfpc"), "--config", str(work / "tiny.json"),
                     "--out", str(out), "--part", "white", "--repeats", "2", "--set", "epochs=1"]) == 0
    assert sorted(p.name for p in out.glob("*.mfst")) == ["model_white_r0.mfst", "model_white_r1.mfst"]
    assert sha(out / "model_white_r0.mfst") != sha(out / "model_white_r1.mfst")


def test_divergence_exit_code(work, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise TR.TrainingDiverged("non-finite loss", {"epoch": 1})

    monkeypatch.setattr(TR, "train", boom)
    assert cli.main(["train", "--data", str(work / "scene.mfpc"), "--config", str(work / "tiny.json"),
                     "--out", str(tmp_path)]) == 3


# ---- predict / eval --------------------------------------------------------------------


def predict(work, out, map_path=None):
    args = ["predict", "--data", str(work / "scene.mfpc"), "--ckpt-black", str(work / "run" / "model_black.mfst"),
            "--ckpt-white", str(work / "run" / "model_white.mfst"), "--out", str(out)]
    if map_path:
        args += ["--map", str(map_path)]
    return cli.main(args)


def test_predict_raster_and_map(work, tmp_path):
    assert predict(work, tmp_path / "p1.mflb", tmp_path / "p1.ppm") == 0
    pred = io.read_labels(tmp_path / "p1.mflb")
    assert pred.shape == (40, 40) and pred.min() >= 1 and pred.max() <= 3
    assert (tmp_path / "p1.ppm").read_bytes().startswith(b"P6\n40 40\n255\n")
    assert predict(work, tmp_path / "p2.mflb") == 0
    assert sha(tmp_path / "p1.mflb") == sha(tmp_path / "p2.mflb")


def test_predict_single_band_checkpoint_mismatch(work, tmp_path, capsys):
    cube = io.read_cube(work / "scene.mfpc").select_bands((0,))
    cfg = TR.TrainConfig(**{**TINY, "cifem": False})
    models = {}
    for part in ("black", "white"):
        m = TR.FusionNet(1, 3, cfg)
        m.part, m.source_bands, m.trained = part, cube.n_bands, True
        for s in m.batchnorm_stats():
            s.initialized = True
        save_checkpoint(m, tmp_path / f"{part}.mfst")
        models[part] = m
    rc = cli.main(["predict", "--data", str(work / "scene.mfpc"), "--ckpt-black", str(tmp_path / "black.mfst"),
                   "--ckpt-white", str(tmp_path / "white.mfst"), "--out", str(tmp_path / "x.mflb")])
    assert rc == 2
    assert "band" in capsys.readouterr().err


def test_predict_swapped_checkpoints_rejected(work, tmp_path):
    rc = cli.main(["predict", "--data", str(work / "scene.mfpc"),
                   "--ckpt-black", str(work / "run" / "model_white.mfst"),
                   "--ckpt-white", str(work / "run" / "model_black.mfst"), "--out", str(tmp_path / "x.mflb")])
    assert rc == 2


def test_eval_perfect_prediction(work, tmp_path, capsys):
    cube = io.read_cube(work / "scene.mfpc")
    io.write_labels(np.where(cube.labels == 0, 1, cube.labels).astype(np.uint16), tmp_path / "perfect.mflb")
    assert cli.main(["eval", "--pred", str(tmp_path / "perfect.mflb"), "--truth", str(work / "scene.mfpc"),
                     "--json", str(tmp_path / "m.json")]) == 0
    out = capsys.readouterr().out.splitlines()
    assert "OA=1.0000" in out
    assert sum(line.startswith("class_") for line in out) == 3
    assert json.loads((tmp_path / "m.json").read_text())["OA"] == 1.0


def test_eval_pools_several_predictions(work, tmp_path, capsys):
    predict(work, tmp_path / "p.mflb")
    assert cli.main(["eval", "--pred", str(tmp_path / "p.mflb"), str(tmp_path / "p.mflb"),
                     "--truth", str(work / "scene.mfpc")]) == 0
    assert "OA=" in capsys.readouterr().out


def test_eval_dimension_mismatch(work, tmp_path):
    io.write_labels(np.ones((5, 5), dtype=np.uint16), tmp_path / "small.mflb")
    assert cli.main(["eval", "--pred", str(tmp_path / "small.mflb"), "--truth", str(work / "scene.mfpc")]) == 2


def test_eval_unlabeled_truth(tmp_path, capsys):
    io.write_labels(np.zeros((4, 4), dtype=np.uint16), tmp_path / "truth.mflb")
    io.write_labels(np.ones((4, 4), dtype=np.uint16), tmp_path / "pred.mflb")
    assert cli.main(["eval", "--pred", str(tmp_path / "pred.mflb"), "--truth", str(tmp_path / "truth.mflb"),
                     "--classes", "2"]) == 2
    assert "no labeled pixels" in capsys.readouterr().err


# ---- sweep -------------------------------------------------------------------------------


def test_default_grids():
    assert cli.GAMMA_GRID == (1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0, 5.5, 6.0, 6.5, 7.0, 7.5, 8.0)
    assert cli.LAMBDA_GRID == (0, 0.001, 0.005, 0.01, 0.05, 0.1, 0.5, 1)


def test_sweep_rejects_gamma_before_training(work, monkeypatch, capsys):
    monkeypatch.setattr(TR, "train_pair", lambda *a, **k: pytest.fail("training started"))
    assert cli.main(["sweep", "--data", str(work / "scene.mfpc"), "--param", "gamma", "--values", "3,1.0"]) == 2
    assert "gamma" in capsys.readouterr().err


def test_single_value_sweep_equals_train_then_eval(work, tmp_path, capsys):
    assert cli.main(["sweep", "--data", str(work / "scene.mfpc"), "--config", str(work / "tiny.json"),
                     "--param", "lambda", "--values", "0.1"]) == 0
    sweep_out = capsys.readouterr().out
    oa_sweep = sweep_out.splitlines()[0].split("OA=")[1].split()[0]
    predict(work, tmp_path / "p.mflb")
    cli.main(["eval", "--pred", str(tmp_path / "p.mflb"), "--truth", str(work / "scene.mfpc")])
    oa_eval = [l for l in capsys.readouterr().out.splitlines() if l.startswith("OA=")][0][3:]
    assert oa_sweep == oa_eval


# ---- gradcheck -----------------------------------------------------------------------------


def test_gradcheck_passes(capsys):
    assert cli.main(["gradcheck", "--seed", "0"]) == 0
    out = capsys.readouterr().out
    assert "PASS conv2d" in out and "PASS pipeline" in out and "max_rel_err=" in out


def test_gradcheck_catches_corrupted_backward(monkeypatch, capsys):
    real_relu = T.relu

    def bad_relu(x):
        out = real_relu(x)
        inner = out._backward

        def backward(g):
            inner(g * 1.5)

        out._backward = backward
        return out

    monkeypatch.setattr(T, "relu", bad_relu)
    assert cli.main(["gradcheck"]) == 1
    err = capsys.readouterr().err
    assert "worst op" in err and "relu" in err
