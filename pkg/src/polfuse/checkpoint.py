"""Save and restore a trained :class:`~polfuse.train.FusionNet` as an MFST blob."""

import numpy as np

from . import io
from .data import PARTS
from .fusion import FUSION_MODES, AwfState
from .train import FusionNet, TrainConfig

# Layout of the "meta.arch" record.
_ARCH_FIELDS = (
    "n_bands", "n_classes", "bsfe_c1", "bsfe_c2", "bsfe_c3", "cifem", "cifem_channels", "tpc",
    "sage_w1", "sage_w2", "patch_size", "fusion", "source_bands", "part", "grid_rows", "grid_cols", "trained",
)


class CheckpointError(ValueError):
    pass


def model_records(model):
    cfg = model.config
    arch = [
        model.n_bands, model.n_classes, *cfg.bsfe_channels, int(model.cifem is not None), cfg.cifem_channels,
        int(cfg.tpc), *cfg.sage_widths, cfg.patch_size, FUSION_MODES.index(cfg.fusion), model.source_bands,
        -1 if model.part is None else PARTS.index(model.part), cfg.grid_rows, cfg.grid_cols, int(model.trained),
    ]
    records = [
        ("meta.arch", np.array(arch, dtype=np.float32)),
        ("meta.bands", np.array(model.band_indices, dtype=np.float32)),
        ("meta.hyper", np.array([cfg.lam, cfg.lr, cfg.batch_size, cfg.epochs, cfg.seed], dtype=np.float64)),
        ("awf.alpha", model.awf.alpha),
        ("awf.gamma", np.array([model.awf.gamma])),
    ]
    records += [(f"param.{name}", p.data) for name, p in model.named_parameters()]
    records += [(f"buffer.{name}", b) for name, b in model.named_buffers()]
    return records


def checkpoint_bytes(model):
    return io.records_to_bytes(model.n_bands, model.n_classes, model.bsfe.out_channels, model_records(model))


def save_checkpoint(model, path):
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(model))


def model_from_bytes(buf):
    (K, C, m), rec = io.records_from_bytes(buf)
    if "meta.arch" not in rec:
        raise CheckpointError("checkpoint has no meta.arch record")
    arch = dict(zip(_ARCH_FIELDS, (int(round(v)) for v in rec["meta.arch"])))
    if (arch["n_bands"], arch["n_classes"], arch["bsfe_c3"]) != (K, C, m):
        raise CheckpointError("checkpoint header disagrees with its architecture record")
    hyper = rec.get("meta.hyper", np.array([0.1, 1e-3, 100, 150, 0]))
    bands = tuple(int(b) for b in rec["meta.bands"])
    cfg = TrainConfig(
        bsfe_channels=(arch["bsfe_c1"], arch["bsfe_c2"], arch["bsfe_c3"]),
        cifem=bool(arch["cifem"]),
        cifem_channels=arch["cifem_channels"],
        tpc=bool(arch["tpc"]),
        sage_widths=(arch["sage_w1"], arch["sage_w2"]),
        patch_size=arch["patch_size"],
        fusion=FUSION_MODES[arch["fusion"]],
        grid_rows=arch["grid_rows"],
        grid_cols=arch["grid_cols"],
        gamma=float(rec["awf.gamma"][0]),
        lam=float(hyper[0]),
        lr=float(hyper[1]),
        batch_size=int(hyper[2]),
        epochs=int(hyper[3]),
        seed=int(hyper[4]),
        bands=None if bands == tuple(range(arch["source_bands"])) else bands,
    )
    model = FusionNet(K, C, cfg, np.random.default_rng(0))
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    for name, p in params.items():
        key = f"param.{name}"
        if key not in rec or rec[key].shape != p.shape:
            raise CheckpointError(f"checkpoint record {key} missing or mis-shaped")
        p.data[...] = rec[key]
    for name, b in buffers.items():
        key = f"buffer.{name}"
        if key not in rec or rec[key].shape != b.shape:
            raise CheckpointError(f"checkpoint record {key} missing or mis-shaped")
        b[...] = rec[key]
    for stats in model.batchnorm_stats():
        stats.initialized = bool(arch["trained"])
    alpha = rec["awf.alpha"].astype(np.float64)
    model.awf = AwfState(alpha / alpha.sum(), float(rec["awf.gamma"][0]))
    model.part = None if arch["part"] < 0 else PARTS[arch["part"]]
    model.source_bands = arch["source_bands"]
    model.trained = bool(arch["trained"])
    return model


def load_checkpoint(path):
    with open(path, "rb") as f:
        return model_from_bytes(f.read())
