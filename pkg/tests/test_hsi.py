import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hypertta import io as hio
from hypertta.hsi import (
    ConfigError,
    DataError,
    HsiCube,
    LabelMap,
    PatchSource,
    extract_patch,
    extract_patches,
    normalize_bands,
    stratified_split,
)


def cube_from(values, **kw):
    return HsiCube(np.asarray(values, dtype=np.float64), **kw)


# --- normalize_bands ---------------------------------------------------------


def test_normalize_affine_endpoints():
    cube = cube_from([[[2.0, 4.0, 6.0]]])
    out, ranges = normalize_bands(cube)
    assert out.data.ravel().tolist() == [0.0, 0.5, 1.0]
    assert out.normalized
    assert ranges.tolist() == [[2.0, 6.0]]


def test_constant_band_maps_to_zero_with_warning():
    cube = cube_from([[[7.0, 7.0, 7.0]]])
    with pytest.warns(RuntimeWarning, match="constant"):
        out, _ = normalize_bands(cube)
    assert np.all(out.data == 0)
    assert out.warnings


def test_random_cube_each_band_spans_unit_interval():
    rng = np.random.default_rng(3)
    out, _ = normalize_bands(cube_from(rng.normal(size=(3, 9, 11)) * 40 + 5))
    flat = out.data.reshape(3, -1)
    assert np.all((flat >= 0) & (flat <= 1))
    assert np.all(flat.min(axis=1) == 0) and np.all(flat.max(axis=1) == 1)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=4, max_size=30).filter(lambda v: max(v) - min(v) > 1e-3))
def test_normalize_idempotent(values):
    cube = cube_from(np.array(values)[None, None, :])
    once, _ = normalize_bands(cube)
    twice, _ = normalize_bands(once)
    np.testing.assert_allclose(twice.data, once.data, atol=1e-12)


def test_normalized_flag_enforces_range():
    with pytest.raises(DataError):
        cube_from([[[1.5]]], normalized=True)


def test_wavelength_validation():
    with pytest.raises(DataError):
        cube_from(np.zeros((2, 1, 1)), wavelengths_nm=[400.0])
    with pytest.raises(DataError):
        cube_from(np.zeros((2, 1, 1)), wavelengths_nm=[400.0, -1.0])


# --- patches ---------------------------------------------------------------------


def test_interior_patch_is_literal_window():
    img = np.arange(25, dtype=float).reshape(1, 5, 5)
    p = extract_patch(cube_from(img), (2, 2), 3)
    np.testing.assert_array_equal(p.values[0], img[0, 1:4, 1:4])


def test_border_uses_reflect_without_edge_repeat():
    row = np.array([[[10.0, 20.0, 30.0, 40.0]]])
    p = extract_patch(cube_from(row), (0, 0), 1)
    assert p.values.shape == (1, 1, 1)
    img = np.tile(row, (1, 3, 1))
    p = extract_patch(cube_from(img), (1, 0), 3)
    assert p.values[0, 1].tolist() == [20.0, 10.0, 20.0]


def test_corner_patch_values_come_from_source():
    rng = np.random.default_rng(0)
    img = rng.random((2, 4, 4))
    cube = cube_from(img)
    for center in [(0, 0), (0, 3), (3, 0), (3, 3)]:
        p = extract_patch(cube, center, 5)
        for c in range(2):
            assert np.isin(p.values[c], img[c]).all()


def test_patch_argument_errors():
    cube = cube_from(np.zeros((1, 4, 4)))
    with pytest.raises(ValueError):
        extract_patch(cube, (1, 1), 4)
    with pytest.raises(ValueError):
        extract_patch(cube, (4, 0), 3)
    with pytest.raises(ValueError):
        extract_patch(cube, (0, 0), 9)


def test_batch_extraction_matches_single():
    rng = np.random.default_rng(1)
    cube = cube_from(rng.random((3, 6, 7)))
    pixels = np.arange(42)
    batch = extract_patches(cube, pixels, 5)
    src = PatchSource(cube, pixels, 5)
    for px in pixels:
        single = extract_patch(cube, divmod(int(px), 7), 5).values
        np.testing.assert_array_equal(batch[px], single)
        np.testing.assert_array_equal(src[np.array([px])][0], single)


def test_interior_extraction_idempotent():
    rng = np.random.default_rng(2)
    cube = cube_from(rng.random((2, 9, 9)))
    a = extract_patch(cube, (4, 4), 5).values
    inner = cube_from(a)
    b = extract_patch(inner, (2, 2), 5).values
    np.testing.assert_array_equal(a, b)


# --- split ----------------------------------------------------------------------------


def _labels(counts):
    flat = np.concatenate([np.full(n, k + 1) for k, n in enumerate(counts)])
    flat = np.concatenate([flat, np.zeros(3, dtype=int)])
    return LabelMap(flat.reshape(1, -1), [f"c{k}" for k in range(len(counts))])


def test_split_rounding_and_partition():
    labels = _labels([10, 7, 1])
    split = stratified_split(labels, 0.2, seed=5)
    flat = labels.labels.ravel()
    train, target = split.train_pixels(), split.target_pixels()
    assert [int((flat[train] == k).sum()) for k in (1, 2, 3)] == [2, 1, 1]
    assert set(train).isdisjoint(target)
    assert set(train) | set(target) == set(np.flatnonzero(flat > 0))


def test_split_deterministic():
    labels = _labels([30, 12])
    a = stratified_split(labels, 0.2, seed=11)
    b = stratified_split(labels, 0.2, seed=11)
    np.testing.assert_array_equal(a.assignment, b.assignment)
    c = stratified_split(labels, 0.2, seed=12)
    assert not np.array_equal(a.assignment, c.assignment)


def test_split_counts_across_seed_sweep():
    labels = _labels([50, 50])
    flat = labels.labels.ravel()
    for seed in range(1000):
        train = stratified_split(labels, 0.2, seed).train_pixels()
        assert (int((flat[train] == 1).sum()), int((flat[train] == 2).sum())) == (10, 10)


def test_split_errors():
    labels = LabelMap(np.array([[1, 1, 0]]), ["a", "b"])
    with pytest.raises(ConfigError):
        stratified_split(labels, 0.2, 0)
    with pytest.raises(ConfigError):
        stratified_split(_labels([4, 4]), 1.0, 0)


# --- file I/O ----------------------------------------------------------------------------


def test_cube_round_trip_bit_exact(tmp_path):
    data = np.array([0.1, 0.2, 0.3, 1e-8, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 0.0, 0.33], dtype=np.float32)
    cube = HsiCube(data.reshape(3, 2, 2), wavelengths_nm=[450.0, 550.0, 650.0])
    path = hio.write_cube(cube, tmp_path / "c.hsi")
    back = hio.read_cube(path)
    assert back.data.tobytes() == cube.data.astype("<f4").tobytes()
    assert back.wavelengths_nm.tolist() == [450.0, 550.0, 650.0]
    assert back.shape == (2, 2, 3)


def test_cube_length_mismatch(tmp_path):
    cube = HsiCube(np.zeros((3, 2, 2), dtype=np.float32))
    path = hio.write_cube(cube, tmp_path / "c.hsi")
    header = hio.sidecar_path(path)
    header.write_text(header.read_text().replace('"bands": 3', '"bands": 4'))
    with pytest.raises(DataError, match="expected"):
        hio.read_cube(path)


def test_cube_rejects_bip(tmp_path):
    path = hio.write_cube(HsiCube(np.zeros((1, 2, 2))), tmp_path / "c.hsi")
    header = hio.sidecar_path(path)
    header.write_text(header.read_text().replace('"bsq"', '"bip"'))
    with pytest.raises(DataError, match="interleave"):
        hio.read_cube(path)


def test_cube_rejects_unknown_dtype_and_truncation(tmp_path):
    path = hio.write_cube(HsiCube(np.zeros((1, 2, 2))), tmp_path / "c.hsi")
    path.write_bytes(path.read_bytes()[:-2])
    with pytest.raises(DataError):
        hio.read_cube(path)
    header = hio.sidecar_path(path)
    header.write_text(header.read_text().replace("f32le", "f64be"))
    with pytest.raises(DataError, match="dtype"):
        hio.read_cube(path)


def test_labels_round_trip(tmp_path):
    labels = LabelMap(np.array([[0, 1, 2], [3, 3, 0]]), ["a", "b", "c"])
    path = hio.write_labels(labels, tmp_path / "l.lbl")
    assert path.read_bytes() == np.array([0, 1, 2, 3, 3, 0], dtype="<u2").tobytes()
    back = hio.read_labels(path)
    np.testing.assert_array_equal(back.labels, labels.labels)
    assert back.class_names == ["a", "b", "c"]


def test_split_file_round_trip(tmp_path):
    split = stratified_split(_labels([9, 6]), 0.2, 3)
    back = hio.read_split(hio.write_split(split, tmp_path / "split.json"))
    np.testing.assert_array_equal(back.assignment, split.assignment)
