import numpy as np
import pytest

from polfuse import data as D
from polfuse import train as TR
from polfuse.fusion import AwfState, LossReport
from polfuse.tensor import Tensor, no_grad

TINY = dict(bsfe_channels=(4, 4, 4), cifem_channels=3, sage_widths=(6, 4), patch_size=5, grid_rows=4, grid_cols=4,
            per_class_count=4, batch_size=20, k_neighbors=3, epochs=3)


@pytest.fixture(scope="module")
def cube():
    return D.generate_synthetic_scene(classes=3, height=40, width=40, seed=2)


def tiny(**kw):
    return TR.TrainConfig(**{**TINY, **kw})


def test_default_config_values():
    cfg = TR.TrainConfig()
    assert (cfg.epochs, cfg.lr, cfg.batch_size, cfg.lam, cfg.gamma) == (150, 1e-3, 100, 0.1, 3.0)
    assert cfg.fusion == "awf" and cfg.cifem and cfg.tpc and cfg.augment


@pytest.mark.parametrize("bad", [dict(gamma=1.0), dict(lam=-0.1), dict(epochs=0), dict(fusion="mean"), dict(patch_size=4)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        TR.TrainConfig(**bad)


def test_training_is_deterministic_in_float64(cube):
    split = D.chessboard_partition(40, 40, 4, 4)
    a = TR.train(cube, split, "black", tiny(dtype="float64"))
    b = TR.train(cube, split, "black", tiny(dtype="float64"))
    assert a.log_text() == b.log_text()
    for (_, p), (_, q) in zip(a.model.named_parameters(), b.model.named_parameters()):
        assert p.data.tobytes() == q.data.tobytes()


def test_alpha_trajectory_stays_on_simplex(cube):
    split = D.chessboard_partition(40, 40, 4, 4)
    res = TR.train(cube, split, "white", tiny())
    traj = res.alpha_trajectory
    assert traj.shape == (3, 2)
    assert np.all(np.abs(traj.sum(axis=1) - 1) <= 1e-9) and (traj >= 0).all()
    np.testing.assert_allclose(traj[-1], res.model.awf.alpha)
    line = res.history[0].log_line()
    assert line.startswith("epoch=1 ") and "alpha=" in line and "l_consistency=" in line


def test_epoch_callback_and_trained_flag(cube):
    split = D.chessboard_partition(40, 40, 4, 4)
    seen = []
    res = TR.train(cube, split, "black", tiny(epochs=2), on_epoch=seen.append)
    assert [r.epoch for r in seen] == [1, 2]
    assert res.model.trained and res.model.part == "black"


def test_untrained_model_cannot_predict(cube):
    model = TR.FusionNet(2, 3, tiny())
    with pytest.raises(RuntimeError):
        model.predict(np.zeros((1, 2, 9, 5, 5), dtype=np.float32))


def test_divergence_raises(cube, monkeypatch):
    real = TR.compute_losses

    def poisoned(*args, **kw):
        rep = real(*args, **kw)
        nan = Tensor(np.array(np.nan))
        return LossReport(rep.sic_band, rep.tpc_band, rep.sic, rep.tpc, rep.consistency, nan, rep.lam)

    monkeypatch.setattr(TR, "compute_losses", poisoned)
    with pytest.raises(TR.TrainingDiverged) as info:
        TR.train(cube, D.chessboard_partition(40, 40, 4, 4), "black", tiny())
    assert info.value.report["epoch"] == 1


@pytest.mark.parametrize("mode", ["equal", "concat", "max", "product", "sum"])
def test_baseline_fusions_train_and_predict(cube, mode):
    split = D.chessboard_partition(40, 40, 4, 4)
    res = TR.train(cube, split, "black", tiny(epochs=1, fusion=mode))
    np.testing.assert_array_equal(res.model.awf.alpha, [0.5, 0.5])  # only awf updates alpha
    patches = D.PatchExtractor(cube, 5)([0, 10], [0, 10]).astype(np.float32)
    assert set(res.model.predict(patches)) <= {1, 2, 3}


@pytest.mark.parametrize("flags", [dict(cifem=False, tpc=False), dict(cifem=True, tpc=False), dict(cifem=False, tpc=True)])
def test_ablations_train(cube, flags):
    res = TR.train(cube, D.chessboard_partition(40, 40, 4, 4), "black", tiny(epochs=1, **flags))
    model = res.model
    assert (model.cifem is None) == (not flags["cifem"])
    assert len(model.tpc) == (2 if flags["tpc"] else 0)
    assert model.feature_width == 4 + (3 if flags["cifem"] else 0)
    if not flags["tpc"]:
        assert res.history[0].tpc == 0 and res.history[0].consistency == 0


def test_neighbor_sampling_mode_trains(cube):
    res = TR.train(cube, D.chessboard_partition(40, 40, 4, 4), "black", tiny(epochs=1, neighbor_samples=2))
    assert np.isfinite(res.history[0].total)


@pytest.fixture(scope="module")
def pair(cube):
    return TR.train_pair(cube, tiny(epochs=2))


def test_predict_image_never_uses_own_part(cube, pair):
    results, split = pair
    models = {p: r.model for p, r in results.items()}
    pred, source = TR.predict_image(cube, models, split, return_source=True)
    assert pred.shape == (40, 40)
    assert pred.min() >= 1 and pred.max() <= 3
    for part in D.PARTS:
        own = D.PARTS.index(part)
        assert not (source[split.mask(part)] == own).any()
        assert (source[split.mask(part)] == D.PARTS.index(D.other_part(part))).all()


def test_predict_image_rejects_swapped_models(cube, pair):
    results, split = pair
    swapped = {"black": results["white"].model, "white": results["black"].model}
    with pytest.raises(ValueError):
        TR.predict_image(cube, swapped, split)


def test_degenerate_alpha_follows_band_one(cube, pair):
    results, split = pair
    model = results["black"].model
    saved = model.awf
    model.awf = AwfState(np.array([1.0, 0.0]), model.awf.gamma)
    try:
        patches = D.PatchExtractor(cube, 5)(np.arange(40), np.arange(40)).astype(np.float32)
        with no_grad():
            probs, _ = model.semantic(patches, "eval")
        np.testing.assert_array_equal(model.predict(patches), np.argmax(probs[0].data, axis=1) + 1)
    finally:
        model.awf = saved


def test_band_subset_model(cube):
    res = TR.train(cube, D.chessboard_partition(40, 40, 4, 4), "black", tiny(epochs=1, bands=(1,)))
    model = res.model
    assert model.n_bands == 1 and model.cifem is None and model.source_bands == 2
    assert model.band_indices == (1,)
