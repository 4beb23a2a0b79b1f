import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from klfusion.raster import (
    RasterStack,
    SceneMetadata,
    StackFormatError,
    Tile,
    flatten_slice,
    load_stack,
    stack_tiles,
    tile_iter,
    unflatten,
    write_stack,
)


def random_stack(seed, shape=(3, 4, 5), frac=0.2, band="optical-evi"):
    rng = np.random.default_rng(seed)
    vals = rng.normal(size=shape).astype(np.float32)
    miss = rng.random(shape) < frac
    return RasterStack(vals, np.cumsum(rng.integers(1, 20, shape[0])), band, miss)


def test_nan_marks_missing_and_mask_forces_nan():
    v = np.ones((2, 2, 2), dtype=np.float32)
    v[0, 0, 1] = np.nan
    mask = np.zeros_like(v, dtype=bool)
    mask[1, 1, 1] = True
    s = RasterStack(v, [0, 5], "sar-vv", mask)
    assert s.missing.sum() == 2
    assert np.isnan(s.values[1, 1, 1])
    assert np.array_equal(np.isnan(s.values), s.missing)


@pytest.mark.parametrize("days", [[0, 0, 1], [3, 2, 1]])
def test_days_must_increase(days):
    with pytest.raises(ValueError):
        RasterStack(np.zeros((3, 2, 2)), days, "sar-vv")


def test_unknown_band_rejected():
    with pytest.raises(ValueError):
        RasterStack(np.zeros((1, 2, 2)), [0], "lidar")


def test_metadata_pixel_size_positive():
    with pytest.raises(ValueError):
        SceneMetadata(pixel_size=0.0)


def test_stack_is_read_only():
    s = random_stack(0)
    with pytest.raises(ValueError):
        s.values[0, 0, 0] = 1.0


def test_single_nan_roundtrip(tmp_path):
    v = np.arange(12, dtype=np.float32).reshape(3, 2, 2)
    v[1, 0, 1] = np.nan
    write_stack(RasterStack(v, [1, 2, 3], "optical-evi"), tmp_path / "s")
    back = load_stack(tmp_path / "s")
    assert back.missing.sum() == 1
    assert back.shape == (3, 2, 2)


def test_sidecar_payload_mismatch(tmp_path):
    s = random_stack(1, shape=(3, 2, 2))
    write_stack(s, tmp_path / "s")
    meta = json.loads((tmp_path / "s.json").read_text())
    meta["slices"] = 4
    meta["days"] = meta["days"] + [meta["days"][-1] + 1]
    (tmp_path / "s.json").write_text(json.dumps(meta))
    with pytest.raises(StackFormatError, match="payload"):
        load_stack(tmp_path / "s")


def test_non_monotone_sidecar(tmp_path):
    write_stack(random_stack(1, shape=(3, 2, 2)), tmp_path / "s")
    meta = json.loads((tmp_path / "s.json").read_text())
    meta["days"] = [5, 4, 6]
    (tmp_path / "s.json").write_text(json.dumps(meta))
    with pytest.raises(StackFormatError):
        load_stack(tmp_path / "s")


def test_malformed_header(tmp_path):
    write_stack(random_stack(1, shape=(1, 2, 2)), tmp_path / "s")
    meta = json.loads((tmp_path / "s.json").read_text())
    del meta["width"]
    (tmp_path / "s.json").write_text(json.dumps(meta))
    with pytest.raises(StackFormatError):
        load_stack(tmp_path / "s")


def test_empty_mask_has_no_nan_payload(tmp_path):
    s = random_stack(2, frac=0.0)
    write_stack(s, tmp_path / "s")
    raw = np.fromfile(tmp_path / "s.bin", dtype="<f4")
    assert not np.isnan(raw).any()
    assert raw.size == 3 * 4 * 5


def test_all_missing_slice(tmp_path):
    mask = np.zeros((2, 3, 3), dtype=bool)
    mask[1] = True
    write_stack(RasterStack(np.ones((2, 3, 3)), [0, 1], "sar-vh", mask), tmp_path / "s")
    back = load_stack(tmp_path / "s.json")
    assert np.isnan(back.values[1]).all() and not back.missing[0].any()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4), st.integers(1, 6), st.integers(1, 6))
def test_write_load_roundtrip(tmp_path_factory, seed, t, h, w):
    s = random_stack(seed, (t, h, w))
    path = tmp_path_factory.mktemp("rt") / "stack"
    write_stack(s, path)
    back = load_stack(path)
    assert back == s
    assert np.array_equal(back.values.view(np.uint32)[~s.missing], s.values.view(np.uint32)[~s.missing])
    assert np.array_equal(back.days, s.days)


def test_flatten_row_major():
    s = RasterStack(np.array([[[1, 2], [3, 4]]], dtype=np.float32), [0], "optical-evi")
    vec, mask = flatten_slice(s, 0)
    assert vec.tolist() == [1, 2, 3, 4]
    assert not mask.any()


def test_flatten_mask_alignment():
    v = np.array([[[1, np.nan], [3, 4]]], dtype=np.float32)
    _, mask = flatten_slice(RasterStack(v, [0], "optical-evi"), 0)
    assert mask.tolist() == [False, True, False, False]


def test_flatten_out_of_range():
    with pytest.raises(IndexError):
        flatten_slice(random_stack(0), 3)


@given(st.integers(1, 7), st.integers(1, 7), st.integers(0, 999))
def test_unflatten_flatten_identity(h, w, seed):
    x = np.random.default_rng(seed).normal(size=h * w).astype(np.float32)
    s = RasterStack(unflatten(x, h, w)[None], [0], "optical-evi")
    assert np.array_equal(flatten_slice(s, 0)[0], x)


def test_tile_counts():
    assert len(list(tile_iter(4, 4, 2, 2))) == 4
    tiles = list(tile_iter(5, 4, 2, 2))
    assert len(tiles) == 6
    assert sum(t.rows == 1 for t in tiles) == 2


def test_tile_outside_parent():
    with pytest.raises(ValueError):
        Tile(3, 0, 2, 2, 4, 4)


def test_stack_tiles_uses_stack_dims():
    assert len(stack_tiles(random_stack(0, (1, 7, 3)), 3, 3)) == 3


@given(st.integers(1, 40), st.integers(1, 40), st.integers(1, 9), st.integers(1, 9))
def test_tiles_partition(h, w, tr, tc):
    cover = np.zeros((h, w), dtype=int)
    for t in tile_iter(h, w, tr, tc):
        cover[t.window] += 1
    assert (cover == 1).all()
