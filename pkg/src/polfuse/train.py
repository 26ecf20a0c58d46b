"""Full network assembly, the training loop and chessboard-stitched prediction."""

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import data as D
from .fusion import FUSION_MODES, AwfState, compute_losses, fused_output, update_alpha
from .nn import Adam, Linear, Module
from .semantic import BsfeParams, CifemParams, SicHead, cifem_forward
from .tensor import Tensor, concat_channels, global_avg_pool, no_grad, softmax
from .topo import GraphSageParams, build_graph, sample_neighbors, tpc_forward

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Raised when a loss becomes non-finite; ``report`` carries the diagnostics."""

    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


@dataclass
class TrainConfig:
    epochs: int = 150
    lr: float = 1e-3
    batch_size: int = 100
    lam: float = 0.1
    gamma: float = 3.0
    k_neighbors: int = 10
    per_class_count: int = 200
    augment: bool = True
    seed: int = 0
    fusion: str = "awf"
    cifem: bool = True
    tpc: bool = True
    bsfe_channels: tuple = (16, 32, 64)
    cifem_channels: int = 32
    sage_widths: tuple = (64, 32)
    patch_size: int = 13
    grid_rows: int = 20
    grid_cols: int = 20
    graph_rebuild_every: int = 1
    neighbor_samples: int = 0
    bands: tuple = None
    dtype: str = "float32"

    def __post_init__(self):
        self.bsfe_channels = tuple(int(c) for c in self.bsfe_channels)
        self.sage_widths = tuple(int(c) for c in self.sage_widths)
        if self.bands is not None:
            self.bands = tuple(int(b) for b in self.bands)
        self.validate()

    def validate(self):
        positive = ("epochs", "lr", "batch_size", "k_neighbors", "per_class_count", "cifem_channels",
                    "patch_size", "grid_rows", "grid_cols", "graph_rebuild_every")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not self.gamma > 1:
            raise ValueError(f"gamma must be > 1, got {self.gamma}")
        if not self.lam >= 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        if self.patch_size % 2 == 0:
            raise ValueError("patch_size must be odd")
        if len(self.bsfe_channels) != 3 or len(self.sage_widths) != 2:
            raise ValueError("bsfe_channels needs 3 entries and sage_widths 2")
        if self.neighbor_samples < 0:
            raise ValueError("neighbor_samples must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    def to_dict(self):
        d = asdict(self)
        d["bsfe_channels"] = list(self.bsfe_channels)
        d["sage_widths"] = list(self.sage_widths)
        d["bands"] = None if self.bands is None else list(self.bands)
        return d


class FusionNet(Module):
    """Per-band BSFE + shared CIFEM + SIC heads, optional TPC heads, AWF weights."""

    def __init__(self, n_bands, n_classes, config, rng=None):
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        dtype = np.dtype(config.dtype)
        self.n_classes = n_classes
        self.config = config
        self.bsfe = BsfeParams(n_bands, rng, config.bsfe_channels, dtype)
        m = self.bsfe.out_channels
        use_cifem = config.cifem and n_bands >= 2
        self.cifem = CifemParams(m, rng, config.cifem_channels, dtype) if use_cifem else None
        self.feature_width = m + (config.cifem_channels * (n_bands - 1) if use_cifem else 0)
        self.sic = [SicHead(self.feature_width, n_classes, rng, dtype) for _ in range(n_bands)]
        self.tpc = [GraphSageParams(self.feature_width, n_classes, rng, config.sage_widths, dtype)
                    for _ in range(n_bands)] if config.tpc else []
        if config.fusion == "concat":
            self.concat_sic = Linear(n_bands * n_classes, n_classes, rng, dtype)
            self.concat_tpc = Linear(n_bands * n_classes, n_classes, rng, dtype) if config.tpc else None
        else:
            self.concat_sic = self.concat_tpc = None
        self.awf = AwfState.uniform(n_bands, config.gamma)
        self.part = None
        self.source_bands = n_bands
        self.trained = False

    @property
    def n_bands(self):
        return self.bsfe.n_bands

    @property
    def band_indices(self):
        return tuple(self.config.bands) if self.config.bands is not None else tuple(range(self.n_bands))

    # -- forward pieces ------------------------------------------------------
    def concat_features(self, patches, mode="train"):
        """X_con per band, each (B, D, n, n); ``patches`` is (B, K, 9, n, n)."""
        x = patches if isinstance(patches, np.ndarray) else patches.data
        bsfe = [self.bsfe.bands[k](Tensor(x[:, k]), mode) for k in range(self.n_bands)]
        if self.cifem is None:
            return bsfe
        return [concat_channels([bsfe[k], cifem_forward(bsfe, k, self.cifem, mode)]) for k in range(self.n_bands)]

    def semantic(self, patches, mode="train"):
        """(SIC probabilities per band, pooled X_con per band)."""
        pooled = [global_avg_pool(xc) for xc in self.concat_features(patches, mode)]
        probs = [softmax(head.fc(p)) for head, p in zip(self.sic, pooled)]
        return probs, pooled

    def topological(self, graphs, pooled):
        return [tpc_forward(g, p, params) for g, p, params in zip(graphs, pooled, self.tpc)]

    def fused_sic(self, probs):
        return fused_output(probs, self.awf, self.config.fusion, self.concat_sic)

    def predict(self, patches, batch_size=256):
        """Class labels 1..C from the SIC branch only (eval-mode batch norm)."""
        if not self.trained:
            raise RuntimeError("model has not been trained")
        out = np.empty(len(patches), dtype=np.int64)
        with no_grad():
            for s in range(0, len(patches), batch_size):
                probs, _ = self.semantic(patches[s:s + batch_size], "eval")
                y = self.fused_sic(probs).data
                out[s:s + batch_size] = np.argmax(y, axis=1) + 1
        return out

    def pooled_features(self, patches, batch_size=100):
        """Detached pooled features using batch statistics, running stats untouched."""
        chunks = []
        with no_grad():
            for s in range(0, len(patches), batch_size):
                feats = [global_avg_pool(xc).data for xc in self.concat_features(patches[s:s + batch_size], "batch")]
                chunks.append(np.stack(feats))
        return np.concatenate(chunks, axis=1)


@dataclass
class EpochRecord:
    epoch: int
    sic: float
    tpc: float
    consistency: float
    total: float
    band_losses: list
    alpha: list

    def log_line(self):
        alpha = ",".join(f"{a:.12f}" for a in self.alpha)
        return (f"epoch={self.epoch} l_sic={self.sic:.8f} l_tpc={self.tpc:.8f} "
                f"l_consistency={self.consistency:.8f} l_total={self.total:.8f} alpha={alpha}")


@dataclass
class TrainResult:
    model: FusionNet
    history: list = field(default_factory=list)

    @property
    def alpha_trajectory(self):
        return np.array([r.alpha for r in self.history])

    def log_text(self):
        return "".join(r.log_line() + "\n" for r in self.history)


def training_patches(cube, split, part, config):
    samples = D.draw_training_samples(cube, split, part, config.per_class_count, config.seed, config.patch_size)
    x = D.PatchExtractor(cube, config.patch_size)(samples.rows, samples.cols).astype(config.dtype)
    y = samples.labels - 1
    if config.augment:
        x, y = D.augment_dataset(x, y)
    return x, y, samples


def train(cube, split, part, config, on_epoch=None):
    """Train one chessboard model on ``part``; deterministic given ``config.seed``."""
    source_bands = cube.n_bands
    if config.bands is not None:
        cube = cube.select_bands(config.bands)
    x, y, _ = training_patches(cube, split, part, config)
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    model = FusionNet(cube.n_bands, cube.n_classes, config, np.random.default_rng(seeds[0]))
    model.part = part
    model.source_bands = source_bands
    shuffle_rng = np.random.default_rng(seeds[1])
    sample_seed = int(seeds[2].generate_state(1)[0])
    opt = Adam(model.parameters(), lr=config.lr)
    result = TrainResult(model)
    n, K, B = len(y), cube.n_bands, config.batch_size
    cache = None
    graphs = None
    for epoch in range(1, config.epochs + 1):
        if config.tpc and (graphs is None or (epoch - 1) % config.graph_rebuild_every == 0):
            feats = cache if cache is not None else model.pooled_features(x, B)
            graphs = [build_graph(feats[k], config.k_neighbors) for k in range(K)]
        perm = shuffle_rng.permutation(n)
        cache = np.zeros((K, n, model.feature_width), dtype=x.dtype)
        sums = np.zeros(4)
        band_sums = np.zeros((2, K))
        for bi, s in enumerate(range(0, n, B)):
            idx = perm[s:s + B]
            probs, pooled = model.semantic(x[idx], "train")
            for k in range(K):
                cache[k, idx] = pooled[k].data
            tpc_out = None
            if config.tpc:
                batch_graphs = [g.induced(idx) for g in graphs]
                if config.neighbor_samples:
                    batch_graphs = [sample_neighbors(g, config.neighbor_samples, sample_seed + 7919 * epoch + bi)
                                    for g in batch_graphs]
                tpc_out = model.topological(batch_graphs, pooled)
            report = compute_losses(probs, tpc_out, y[idx], model.awf, config.lam, config.fusion,
                                    (model.concat_sic, model.concat_tpc))
            vals = report.floats()
            if not all(np.isfinite(v) for v in vals.values()):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {bi}", {"epoch": epoch, "batch": bi, **vals})
            report.total.backward()
            opt.step()
            w = len(idx) / n
            sums += w * np.array([vals["sic"], vals["tpc"], vals["consistency"], vals["total"]])
            band_sums += w * np.stack([report.sic_band, report.tpc_band])
        if config.fusion == "awf":
            model.awf.alpha = update_alpha(band_sums.sum(axis=0), config.gamma)
        rec = EpochRecord(epoch, *sums.tolist(), band_sums.sum(axis=0).tolist(), model.awf.alpha.tolist())
        result.history.append(rec)
        logger.debug(rec.log_line())
        if on_epoch is not None:
            on_epoch(rec)
    model.trained = True
    return result


def predict_image(cube, models, split, batch_size=256, return_source=False, mask=None):
    """Stitched prediction: pixels of each part come from the model trained on the other part.

    ``models`` maps the part a model was trained on ("black"/"white") to the model.
    Every pixel, labeled or not, receives a class in 1..C. With a boolean ``mask`` only
    the selected pixels are classified and the rest stay 0.
    """
    out = np.zeros((cube.height, cube.width), dtype=np.uint16)
    source = np.full((cube.height, cube.width), -1, dtype=np.int8)
    for test_part in D.PARTS:
        train_part = D.other_part(test_part)
        model = models[train_part]
        if not model.trained:
            raise RuntimeError(f"model for the {train_part} part has not been trained")
        if model.part is not None and model.part != train_part:
            raise ValueError(f"model registered for {train_part} was trained on {model.part}")
        if model.source_bands != cube.n_bands:
            raise ValueError(f"model expects a {model.source_bands}-band cube, got {cube.n_bands} bands")
        sub = cube.select_bands(model.band_indices)
        extractor = D.PatchExtractor(sub, model.config.patch_size)
        sel = split.mask(test_part)
        if mask is not None:
            sel = sel & mask
        rr, cc = np.nonzero(sel)
        for s in range(0, len(rr), batch_size):
            patches = extractor(rr[s:s + batch_size], cc[s:s + batch_size]).astype(model.config.dtype)
            out[rr[s:s + batch_size], cc[s:s + batch_size]] = model.predict(patches, batch_size)
        source[rr, cc] = D.PARTS.index(train_part)
    if return_source:
        return out, source
    return out


def train_pair(cube, config, parts=D.PARTS, on_epoch=None):
    """Train the chessboard models for ``parts``; returns {part: TrainResult}."""
    split = D.chessboard_partition(cube.height, cube.width, config.grid_rows, config.grid_cols)
    return {p: train(cube, split, p, config, on_epoch) for p in parts}, split
