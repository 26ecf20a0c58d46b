import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polfuse import data as D


@pytest.fixture(scope="module")
def scene():
    return D.generate_synthetic_scene(height=60, width=60, seed=3)


# ---- coherency vectors -------------------------------------------------------


def test_diagonal_coherency():
    np.testing.assert_array_equal(D.coherency_to_vector(np.diag([2.0, 1.0, 0.5])), [2, 1, 0.5, 0, 0, 0, 0, 0, 0])


def test_off_diagonal_readout():
    T = np.zeros((3, 3), dtype=complex)
    T[0, 1], T[1, 0] = 1 + 2j, 1 - 2j
    v = D.coherency_to_vector(T)
    assert v[3] == 1 and v[6] == 2
    assert np.count_nonzero(v) == 2


def test_zero_matrix_gives_zero_vector():
    assert not D.coherency_to_vector(np.zeros((3, 3))).any()


def test_non_hermitian_rejected():
    T = np.zeros((3, 3), dtype=complex)
    T[0, 1] = 1j
    with pytest.raises(D.DataError):
        D.coherency_to_vector(T)


def test_vector_round_trip():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((4, 3, 3)) + 1j * rng.standard_normal((4, 3, 3))
    T = A @ np.conj(np.swapaxes(A, -1, -2))
    np.testing.assert_allclose(D.vector_to_coherency(D.coherency_to_vector(T)), T, atol=1e-12)


# ---- synthetic scene ---------------------------------------------------------


def test_wishart_mean_converges_to_base():
    S = D.default_signatures(2, 5)[1, 2]
    rng = np.random.default_rng(1)
    est = D.wishart_sample(S, 10000, 4, rng).mean(axis=0)
    assert np.abs(est - S).max() <= 0.02 * np.abs(S).max()


def test_scene_is_deterministic():
    a = D.generate_synthetic_scene(height=40, width=40, seed=11)
    b = D.generate_synthetic_scene(height=40, width=40, seed=11)
    assert a.bands.tobytes() == b.bands.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()
    c = D.generate_synthetic_scene(height=40, width=40, seed=12)
    assert a.bands.tobytes() != c.bands.tobytes()


def test_default_table_forces_complementary_pairs():
    sig = D.default_signatures(2, 5)
    np.testing.assert_array_equal(sig[0, 2], sig[0, 3])  # classes 3/4 identical in band 1
    np.testing.assert_array_equal(sig[1, 0], sig[1, 1])  # classes 1/2 identical in band 2
    assert np.abs(sig[1, 2] - sig[1, 3]).max() > 1e-3
    assert np.abs(sig[0, 0] - sig[0, 1]).max() > 1e-3
    for k in range(2):
        for c in range(5):
            assert np.linalg.eigvalsh(sig[k, c]).min() > 0


def test_non_psd_signature_rejected():
    sig = D.default_signatures(2, 2)
    sig[0, 0] = np.diag([1.0, -0.5, 0.1])
    with pytest.raises(D.DataError, match="positive semidefinite"):
        D.generate_synthetic_scene(classes=2, height=20, width=20, signatures=sig)


def test_single_band_generation_rejected():
    with pytest.raises(D.DataError):
        D.generate_synthetic_scene(bands=1, height=20, width=20)


def test_scene_structure(scene):
    assert scene.bands.shape == (2, 9, 60, 60)
    assert scene.bands.dtype == np.float32
    assert set(np.unique(scene.labels)) <= set(range(6))
    assert (scene.labels == 0).any()  # region boundaries are left unlabeled


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_diagonal_channels_non_negative_for_any_seed(seed):
    cube = D.generate_synthetic_scene(height=24, width=24, seed=seed, looks=1)
    assert (cube.bands[:, :3] >= 0).all()


def test_cube_rejects_negative_power():
    bands = np.zeros((2, 9, 4, 4), dtype=np.float32)
    bands[0, 1, 0, 0] = -1
    with pytest.raises(D.DataError):
        D.PolSarCube(bands, np.zeros((4, 4), dtype=np.uint16), 3)


def test_cube_rejects_label_out_of_range():
    with pytest.raises(D.DataError):
        D.PolSarCube(np.zeros((2, 9, 4, 4), dtype=np.float32), np.full((4, 4), 4, dtype=np.uint16), 3)


# ---- chessboard --------------------------------------------------------------


def test_twenty_grid_has_two_hundred_tiles_per_part():
    split = D.chessboard_partition(200, 200)
    assert len(split.tiles("black")) == len(split.tiles("white")) == 200


def test_two_by_two_grid():
    split = D.chessboard_partition(4, 4, 2, 2)
    assert split.tiles("black") == [(0, 0), (1, 1)]
    assert split.tiles("white") == [(0, 1), (1, 0)]
    assert split.mask("black")[0, 0] and split.mask("white")[0, 3]


def test_grid_larger_than_image_rejected():
    with pytest.raises(D.DataError):
        D.chessboard_partition(10, 10, 11, 2)


def test_remainder_pixels_join_last_tiles():
    split = D.chessboard_partition(23, 10, 4, 3)
    tr, tc = split.tile_index()
    assert tr[-1, 0] == 3 and tr[20, 0] == 3  # rows 20..22 fold into the last tile row
    assert tc[0, -1] == 2 and (np.bincount(tc[0]) == [3, 3, 4]).all()


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 60), st.integers(1, 60), st.data())
def test_chessboard_parts_disjoint_and_exhaustive(h, w, data):
    gr = data.draw(st.integers(1, h))
    gc = data.draw(st.integers(1, w))
    split = D.chessboard_partition(h, w, gr, gc)
    black, white = split.mask("black"), split.mask("white")
    assert not (black & white).any()
    assert (black | white).all()
    assert black.sum() + white.sum() == h * w
    # every tile is uniform in part and neighbouring tiles alternate
    tr, tc = split.tile_index()
    np.testing.assert_array_equal(black, (tr + tc) % 2 == 0)


# ---- sampling ----------------------------------------------------------------


def test_samples_stay_in_training_part(scene):
    split = D.chessboard_partition(60, 60, 6, 6)
    s = D.draw_training_samples(scene, split, "black", per_class_count=10, seed=5)
    assert len(s) == 50
    assert split.mask("black")[s.rows, s.cols].all()
    assert not split.mask("white")[s.rows, s.cols].any()
    assert (scene.labels[s.rows, s.cols] == s.labels).all()
    assert (s.labels != 0).all()
    assert np.bincount(s.labels, minlength=6)[1:].tolist() == [10] * 5


def test_sampling_is_seeded(scene):
    split = D.chessboard_partition(60, 60, 6, 6)
    a = D.draw_training_samples(scene, split, "white", 8, seed=1)
    b = D.draw_training_samples(scene, split, "white", 8, seed=1)
    c = D.draw_training_samples(scene, split, "white", 8, seed=2)
    assert (a.rows == b.rows).all() and (a.cols == b.cols).all()
    assert not ((a.rows == c.rows).all() and (a.cols == c.cols).all())


def test_sampling_without_replacement(scene):
    split = D.chessboard_partition(60, 60, 6, 6)
    s = D.draw_training_samples(scene, split, "black", 30, seed=0)
    assert len(set(zip(s.rows.tolist(), s.cols.tolist()))) == len(s)


def test_deficient_class_named():
    labels = np.ones((10, 10), dtype=np.uint16)
    labels[0, 0] = 2
    labels[0, 2] = 2
    labels[2, 0] = 2
    cube = D.PolSarCube(np.zeros((2, 9, 10, 10), dtype=np.float32), labels, 2)
    split = D.chessboard_partition(10, 10, 1, 1)
    with pytest.raises(D.DataError, match="class 2 has only 3"):
        D.draw_training_samples(cube, split, "black", per_class_count=10)


def test_default_count_gives_thousand_anchors():
    cube = D.generate_synthetic_scene()
    split = D.chessboard_partition(200, 200)
    s = D.draw_training_samples(cube, split, "black")
    assert len(s) == 1000 and split.mask("black")[s.rows, s.cols].all()


# ---- patches -----------------------------------------------------------------


def test_interior_patch_is_raster_window(scene):
    p = D.extract_patch(scene, 1, 20, 30, 13)
    np.testing.assert_array_equal(p, scene.bands[1, :, 14:27, 24:37])


def test_corner_patch_is_mirrored(scene):
    p = D.extract_patch(scene, 0, 0, 0, 13)
    assert p.shape == (9, 13, 13)
    np.testing.assert_array_equal(p[:, 6, 6], scene.bands[0, :, 0, 0])
    np.testing.assert_array_equal(p[:, 5, 6], scene.bands[0, :, 1, 0])
    np.testing.assert_array_equal(p[:, 6, 4], scene.bands[0, :, 0, 2])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 59), st.integers(0, 59), st.sampled_from([1, 3, 5, 13]))
def test_patch_centre_equals_raster(r, c, n):
    cube = D.generate_synthetic_scene(height=60, width=60, seed=3)
    patches = D.PatchExtractor(cube, n)([r], [c])
    assert patches.shape == (1, 2, 9, n, n)
    np.testing.assert_array_equal(patches[0, :, :, n // 2, n // 2], cube.bands[:, :, r, c])
    for k in range(2):
        np.testing.assert_array_equal(patches[0, k], D.extract_patch(cube, k, r, c, n))


def test_even_patch_size_rejected(scene):
    with pytest.raises(D.DataError):
        D.PatchExtractor(scene, 12)


# ---- augmentation ------------------------------------------------------------


def test_rot90_four_times_and_hflip_twice():
    x = np.random.default_rng(2).standard_normal((2, 9, 5, 5))
    y = x
    for _ in range(4):
        y = D.augment(y, "rot90")
    np.testing.assert_array_equal(y, x)
    np.testing.assert_array_equal(D.augment(D.augment(x, "hflip"), "hflip"), x)


@pytest.mark.parametrize("mode", D.AUGMENT_MODES)
def test_mode_then_inverse_is_identity(mode):
    x = np.random.default_rng(3).standard_normal((3, 2, 9, 7, 7))
    np.testing.assert_array_equal(D.augment(D.augment(x, mode), D.INVERSE_MODE[mode]), x)


def test_same_transform_for_every_band():
    a = np.random.default_rng(4).standard_normal((9, 5, 5))
    out = D.augment((a, a.copy()), "rot270")
    np.testing.assert_array_equal(out[0], out[1])
    np.testing.assert_array_equal(out[0], np.rot90(a, 3, axes=(1, 2)))


def test_modes_are_distinct_dihedral_elements():
    x = np.arange(9.0).reshape(3, 3)
    outs = {D.augment(x, m).tobytes() for m in D.AUGMENT_MODES}
    assert len(outs) == 6


def test_dataset_expansion_times_six():
    x = np.zeros((1000, 2, 9, 13, 13), dtype=np.float32)
    y = np.arange(1000) % 5
    xa, ya = D.augment_dataset(x, y)
    assert xa.shape[0] == 6000 and ya.shape == (6000,)
    assert (ya[:1000] == y).all() and (ya[5000:] == y).all()


def test_non_square_rejected():
    with pytest.raises(D.DataError):
        D.augment(np.zeros((9, 4, 5)), "rot90")
