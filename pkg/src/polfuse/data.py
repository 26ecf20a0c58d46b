"""Multi-band PolSAR scenes: coherency features, synthesis, sampling and patches."""

import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.spatial import cKDTree

logger = logging.getLogger(__name__)

N_FEATURES = 9
PARTS = ("black", "white")


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# coherency matrix -> 9-vector
# ---------------------------------------------------------------------------


def _check_hermitian(T, tol=1e-10):
    T = np.asarray(T)
    if T.shape[-2:] != (3, 3):
        raise DataError(f"coherency matrix must be 3x3, got {T.shape[-2:]}")
    scale = max(1.0, float(np.abs(T).max(initial=0.0)))
    if np.abs(T - np.conj(np.swapaxes(T, -1, -2))).max(initial=0.0) > tol * scale:
        raise DataError("coherency matrix is not Hermitian")


def coherency_to_vector(T, check=True):
    """[T11, T22, T33, Re T12, Re T13, Re T23, Im T12, Im T13, Im T23].

    Accepts a single 3x3 matrix or a stack (..., 3, 3); returns (..., 9).
    """
    T = np.asarray(T)
    if check:
        _check_hermitian(T)
    return np.stack(
        [
            T[..., 0, 0].real,
            T[..., 1, 1].real,
            T[..., 2, 2].real,
            T[..., 0, 1].real,
            T[..., 0, 2].real,
            T[..., 1, 2].real,
            T[..., 0, 1].imag,
            T[..., 0, 2].imag,
            T[..., 1, 2].imag,
        ],
        axis=-1,
    )


def vector_to_coherency(v):
    v = np.asarray(v, dtype=np.float64)
    T = np.zeros(v.shape[:-1] + (3, 3), dtype=np.complex128)
    T[..., 0, 0], T[..., 1, 1], T[..., 2, 2] = v[..., 0], v[..., 1], v[..., 2]
    T[..., 0, 1] = v[..., 3] + 1j * v[..., 6]
    T[..., 0, 2] = v[..., 4] + 1j * v[..., 7]
    T[..., 1, 2] = v[..., 5] + 1j * v[..., 8]
    T[..., 1, 0] = np.conj(T[..., 0, 1])
    T[..., 2, 0] = np.conj(T[..., 0, 2])
    T[..., 2, 1] = np.conj(T[..., 1, 2])
    return T


# ---------------------------------------------------------------------------
# cube container
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PolSarCube:
    """K co-registered bands of 9-channel features plus a label raster.

    ``bands`` has shape (K, 9, H, W); ``labels`` is (H, W) with 0 = unlabeled
    and classes 1..n_classes.
    """

    bands: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        if self.bands.ndim != 4 or self.bands.shape[1] != N_FEATURES:
            raise DataError(f"bands must be (K, 9, H, W), got {self.bands.shape}")
        if self.labels.shape != self.bands.shape[2:]:
            raise DataError(f"label raster {self.labels.shape} does not match bands {self.bands.shape[2:]}")
        if (self.bands[:, :3] < 0).any():
            raise DataError("diagonal coherency channels must be non-negative")
        if self.labels.size and int(self.labels.max()) > self.n_classes:
            raise DataError(f"label {int(self.labels.max())} exceeds class count {self.n_classes}")

    @property
    def n_bands(self):
        return self.bands.shape[0]

    @property
    def height(self):
        return self.bands.shape[2]

    @property
    def width(self):
        return self.bands.shape[3]

    def select_bands(self, indices):
        return PolSarCube(self.bands[list(indices)], self.labels, self.n_classes)


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------


def _mechanisms():
    surface = np.outer([1.0, 0.3, 0.0], [1.0, 0.3, 0.0]).astype(np.complex128)
    dihedral = np.outer([0.3, 1.0, 0.0], [0.3, 1.0, 0.0]).astype(np.complex128)
    volume = np.diag([2.0, 1.0, 1.0]).astype(np.complex128)
    helix = 0.5 * np.array([[0, 0, 0], [0, 1, 1j], [0, -1j, 1]], dtype=np.complex128)
    mats = [surface, dihedral, volume, helix]
    return [m / np.trace(m).real for m in mats]


def default_signatures(n_bands, n_classes):
    """Class-band base coherency matrices, shape (K, C, 3, 3).

    Each band ranks classes by total power differently and mixes scattering
    mechanisms per class. For C >= 4 two pairs are forced to coincide:
    classes 3 and 4 share a matrix in band 1, classes 1 and 2 in band 2, so
    each of those pairs is separable only by the other band.
    """
    mech = _mechanisms()
    table = np.zeros((n_bands, n_classes, 3, 3), dtype=np.complex128)
    rng = np.random.default_rng(20230817)
    for k in range(n_bands):
        order = rng.permutation(n_classes)
        for c in range(n_classes):
            power = 0.05 * 1.8 ** order[c]
            mix = np.zeros(len(mech))
            mix[(c + k) % 3] = 0.6
            mix[(c + 2 * k + 1) % 4] += 0.3
            mix += 0.1 / len(mech)
            base = sum(w * m for w, m in zip(mix, mech))
            base = base + 0.02 * np.eye(3)
            table[k, c] = power * base / np.trace(base).real
    if n_classes >= 4:
        table[0, 3] = table[0, 2]
        if n_bands >= 2:
            table[1, 1] = table[1, 0]
    return table


def _check_psd(S, tol=1e-10):
    _check_hermitian(S)
    w = np.linalg.eigvalsh(S)
    if w.min() < -tol * max(1.0, abs(w).max()):
        raise DataError(f"base matrix is not positive semidefinite (min eigenvalue {w.min():.3g})")


def _psd_factor(S):
    w, V = np.linalg.eigh(S)
    return V * np.sqrt(np.clip(w, 0.0, None))[None, :]


def wishart_sample(S, looks, n, rng):
    """n multi-look sample coherency matrices with true covariance ``S``."""
    A = _psd_factor(S)
    z = (rng.standard_normal((n, looks, 3)) + 1j * rng.standard_normal((n, looks, 3))) / np.sqrt(2.0)
    k = z @ A.T
    return np.einsum("nli,nlj->nij", k, np.conj(k)) / looks


@dataclass(frozen=True)
class SceneConfig:
    classes: int = 5
    bands: int = 2
    height: int = 200
    width: int = 200
    seed: int = 7
    looks: int = 4
    regions: int = 0  # 0 -> automatic (about one region per 900 pixels)
    boundary_gap: bool = True
    signatures: np.ndarray = field(default=None, compare=False, repr=False)


def _voronoi_regions(cfg, rng):
    n_regions = cfg.regions or max(2 * cfg.classes, (cfg.height * cfg.width) // 900)
    centers = rng.uniform([0, 0], [cfg.height, cfg.width], size=(n_regions, 2))
    rr, cc = np.mgrid[0:cfg.height, 0:cfg.width]
    pts = np.stack([rr.ravel() + 0.5, cc.ravel() + 0.5], axis=1)
    region = cKDTree(centers).query(pts)[1].reshape(cfg.height, cfg.width)
    order = rng.permutation(n_regions)
    region_class = np.empty(n_regions, dtype=np.int64)
    region_class[order] = np.arange(n_regions) % cfg.classes + 1
    return region, region_class


def generate_synthetic_scene(config=None, **overrides):
    """Patchwork of Voronoi regions with multi-look Wishart speckle per band."""
    cfg = config or SceneConfig()
    if overrides:
        cfg = SceneConfig(**{**cfg.__dict__, **overrides})
    if cfg.classes < 2 or cfg.bands < 2:
        raise DataError(f"need at least 2 classes and 2 bands, got C={cfg.classes} K={cfg.bands}")
    if cfg.looks < 1:
        raise DataError("looks must be >= 1")
    sig = cfg.signatures if cfg.signatures is not None else default_signatures(cfg.bands, cfg.classes)
    sig = np.asarray(sig, dtype=np.complex128)
    if sig.shape != (cfg.bands, cfg.classes, 3, 3):
        raise DataError(f"signature table must be ({cfg.bands}, {cfg.classes}, 3, 3), got {sig.shape}")
    for k in range(cfg.bands):
        for c in range(cfg.classes):
            _check_psd(sig[k, c])

    rng = np.random.default_rng(cfg.seed)
    region, region_class = _voronoi_regions(cfg, rng)
    truth = region_class[region]  # class of every pixel, 1..C

    bands = np.zeros((cfg.bands, N_FEATURES, cfg.height, cfg.width), dtype=np.float32)
    flat_truth = truth.ravel()
    for k in range(cfg.bands):
        vec = np.zeros((flat_truth.size, N_FEATURES))
        for c in range(1, cfg.classes + 1):
            idx = np.flatnonzero(flat_truth == c)
            if idx.size == 0:
                continue
            T = wishart_sample(sig[k, c - 1], cfg.looks, idx.size, rng)
            vec[idx] = coherency_to_vector(T, check=False)
        bands[k] = vec.T.reshape(N_FEATURES, cfg.height, cfg.width)
    bands[:, :3] = np.maximum(bands[:, :3], 0.0)

    labels = truth.astype(np.uint16)
    if cfg.boundary_gap:
        edge = np.zeros_like(region, dtype=bool)
        edge[1:] |= region[1:] != region[:-1]
        edge[:-1] |= region[1:] != region[:-1]
        edge[:, 1:] |= region[:, 1:] != region[:, :-1]
        edge[:, :-1] |= region[:, 1:] != region[:, :-1]
        labels[edge] = 0
    return PolSarCube(bands, labels, cfg.classes)


# ---------------------------------------------------------------------------
# chessboard partition and sampling
# ---------------------------------------------------------------------------


def _edges(n, parts):
    step = n // parts
    e = np.arange(parts + 1) * step
    e[-1] = n
    return e


@dataclass(frozen=True)
class ChessboardSplit:
    """Checkerboard tiling: tile (r, c) belongs to "black" iff r + c is even."""

    height: int
    width: int
    grid_rows: int
    grid_cols: int
    row_edges: np.ndarray
    col_edges: np.ndarray

    @property
    def tile_parity(self):
        r, c = np.indices((self.grid_rows, self.grid_cols))
        return (r + c) % 2

    def tile_index(self):
        """(H, W) arrays of tile row and tile column for every pixel."""
        tr = np.searchsorted(self.row_edges, np.arange(self.height), side="right") - 1
        tc = np.searchsorted(self.col_edges, np.arange(self.width), side="right") - 1
        return np.broadcast_to(tr[:, None], (self.height, self.width)), np.broadcast_to(tc[None, :], (self.height, self.width))

    def parity_map(self):
        tr, tc = self.tile_index()
        return (tr + tc) % 2

    def mask(self, part):
        return self.parity_map() == _part_index(part)

    def tiles(self, part):
        p = self.tile_parity
        return [tuple(t) for t in np.argwhere(p == _part_index(part))]


def _part_index(part):
    if part not in PARTS:
        raise DataError(f"part must be one of {PARTS}, got {part!r}")
    return PARTS.index(part)


def other_part(part):
    return PARTS[1 - _part_index(part)]


def chessboard_partition(height, width, grid_rows=20, grid_cols=20):
    if grid_rows < 1 or grid_cols < 1:
        raise DataError("grid must have at least one tile per axis")
    if grid_rows > height or grid_cols > width:
        raise DataError(f"grid {grid_rows}x{grid_cols} larger than image {height}x{width}")
    return ChessboardSplit(height, width, grid_rows, grid_cols, _edges(height, grid_rows), _edges(width, grid_cols))


@dataclass(frozen=True)
class SampleSet:
    """Training anchors as parallel arrays; labels are 1..C."""

    rows: np.ndarray
    cols: np.ndarray
    labels: np.ndarray
    part: str
    patch_size: int = 13

    def __len__(self):
        return len(self.labels)


def draw_training_samples(cube, split, part, per_class_count=200, seed=0, patch_size=13):
    """Uniform per-class draw without replacement from one chessboard part."""
    mask = split.mask(part)
    rng = np.random.default_rng(seed)
    rows, cols, labels = [], [], []
    flat_labels = np.where(mask, cube.labels, 0).ravel()
    for c in range(1, cube.n_classes + 1):
        cand = np.flatnonzero(flat_labels == c)
        if cand.size < per_class_count:
            raise DataError(
                f"class {c} has only {cand.size} labeled pixels in the {part} part, {per_class_count} requested"
            )
        pick = np.sort(rng.choice(cand, size=per_class_count, replace=False))
        r, q = np.divmod(pick, cube.width)
        rows.append(r)
        cols.append(q)
        labels.append(np.full(per_class_count, c, dtype=np.int64))
    return SampleSet(np.concatenate(rows), np.concatenate(cols), np.concatenate(labels), part, patch_size)


# ---------------------------------------------------------------------------
# patches and augmentation
# ---------------------------------------------------------------------------


def _pad_bands(bands, n):
    p = n // 2
    return np.pad(bands, ((0, 0), (0, 0), (p, p), (p, p)), mode="reflect")


class PatchExtractor:
    """Cuts mirror-padded n x n windows around pixels, identically for all bands."""

    def __init__(self, cube, n=13):
        if n % 2 == 0:
            raise DataError("patch size must be odd")
        self.n = n
        self.padded = _pad_bands(cube.bands, n)
        self._windows = sliding_window_view(self.padded, (n, n), axis=(2, 3))  # K, 9, H, W, n, n

    def __call__(self, rows, cols):
        """(N, K, 9, n, n) patches centred on (rows[i], cols[i])."""
        w = self._windows[:, :, np.asarray(rows), np.asarray(cols)]  # K, 9, N, n, n
        return np.ascontiguousarray(w.transpose(2, 0, 1, 3, 4))


def extract_patch(cube, band, row, col, n=13):
    """Single (9, n, n) window of one band with mirror padding at the borders."""
    if n % 2 == 0:
        raise DataError("patch size must be odd")
    p = n // 2
    padded = np.pad(cube.bands[band], ((0, 0), (p, p), (p, p)), mode="reflect")
    return padded[:, row:row + n, col:col + n].copy()


AUGMENT_MODES = ("identity", "hflip", "vflip", "rot90", "rot180", "rot270")
INVERSE_MODE = {"identity": "identity", "hflip": "hflip", "vflip": "vflip", "rot90": "rot270", "rot180": "rot180", "rot270": "rot90"}


def _transform(x, mode):
    if mode == "identity":
        return x
    if mode == "hflip":
        return x[..., :, ::-1]
    if mode == "vflip":
        return x[..., ::-1, :]
    if mode == "rot90":
        return np.rot90(x, 1, axes=(-2, -1))
    if mode == "rot180":
        return np.rot90(x, 2, axes=(-2, -1))
    if mode == "rot270":
        return np.rot90(x, 3, axes=(-2, -1))
    raise DataError(f"unknown augmentation mode {mode!r}")


def augment(patches, mode):
    """Apply one spatial transform to every band's patch (tuple/list or array)."""
    if isinstance(patches, (tuple, list)):
        for p in patches:
            if p.shape[-1] != p.shape[-2]:
                raise DataError("augmentation needs square patches")
        return type(patches)(np.ascontiguousarray(_transform(p, mode)) for p in patches)
    if patches.shape[-1] != patches.shape[-2]:
        raise DataError("augmentation needs square patches")
    return np.ascontiguousarray(_transform(patches, mode))


def augment_dataset(patches, labels):
    """Offline x6 expansion: original plus the five transforms, mode-major order."""
    xs = [augment(patches, m) for m in AUGMENT_MODES]
    return np.concatenate(xs, axis=0), np.tile(np.asarray(labels), len(AUGMENT_MODES))
