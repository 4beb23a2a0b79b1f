from dataclasses import replace

import numpy as np
import pytest

from klfusion.hmm import DateMap
from klfusion.raster import load_stack
from klfusion.synth import (
    ClearingEvent,
    GroundTruth,
    SceneSpec,
    default_scene,
    generate,
    quiet,
    rasterize,
    score_datemap,
    write_scene,
)
from klfusion.validation import compute_metrics

SQUARE = ((2.0, 2.0), (2.0, 8.0), (8.0, 8.0), (8.0, 2.0))


def small_spec(**kw):
    base = dict(height=16, width=16, training_days=tuple(range(0, 100, 10)),
                optical_days=tuple(range(100, 300, 20)), sar_days=tuple(range(100, 300, 12)), seed=4)
    base.update(kw)
    return SceneSpec(**base)


def test_quiet_scene_is_constant():
    training, optical, sar, truth = generate(quiet(small_spec()))
    assert np.all(training.values == 5.0) and np.all(optical.values == 5.0)
    assert np.all(sar.values == -4.0)
    assert not training.missing.any() and not truth.deforested.any()


def test_single_event_truth():
    ev = ClearingEvent(SQUARE, day=160)
    _, optical, sar, truth = generate(quiet(small_spec(events=(ev,))))
    inside = rasterize(SQUARE, 16, 16)
    assert inside.sum() > 0
    assert np.all(truth.event_day[inside] == 160) and np.all(truth.event_day[~inside] == -1)
    after = np.asarray(sar.days) >= 160
    assert np.allclose(sar.values[after][:, inside], -7.0)
    assert np.allclose(sar.values[~after][:, inside], -4.0)
    assert np.allclose(optical.values[np.asarray(optical.days) >= 160][:, inside], 2.0)


def test_regrowth_decays_drop():
    ev = ClearingEvent(SQUARE, day=100, evi_drop=2.0, regrowth_half_life=40.0)
    _, optical, _, _ = generate(quiet(small_spec(events=(ev,))))
    inside = rasterize(SQUARE, 16, 16)
    drop = 5.0 - optical.values[:, inside].mean(axis=1)
    expect = 2.0 * 0.5 ** ((np.asarray(optical.days) - 100) / 40.0)
    assert np.allclose(drop, expect, atol=1e-5)


def test_same_seed_bit_identical():
    spec = default_scene(seed=5, size=24, n_polygons=3, radius=(3.0, 5.0))
    a, b = generate(spec), generate(spec)
    for x, y in zip(a[:3], b[:3]):
        assert x == y
        assert np.array_equal(x.values.view(np.uint32), y.values.view(np.uint32))
    assert np.array_equal(a[3].event_day, b[3].event_day)
    other = generate(default_scene(seed=6, size=24, n_polygons=3, radius=(3.0, 5.0)))
    assert not np.array_equal(other[1].values, a[1].values)


def test_clouds_never_touch_sar():
    spec = small_spec(events=(ClearingEvent(SQUARE, day=160),))
    clear = generate(replace(spec, cloud_fraction=0.0))
    cloudy = generate(replace(spec, cloud_fraction=0.7))
    assert np.array_equal(clear[2].values, cloudy[2].values)
    assert not cloudy[2].missing.any()
    assert cloudy[1].missing.sum() > 0
    assert np.array_equal(cloudy[1].missing, cloudy[3].optical_clouds)


def test_event_day_recoverable_without_noise():
    days = tuple(range(100, 300, 20))
    events = (ClearingEvent(SQUARE, day=180),
              ClearingEvent(((10.0, 10.0), (10.0, 15.0), (15.0, 15.0), (15.0, 10.0)), day=240))
    _, optical, _, truth = generate(quiet(small_spec(optical_days=days, events=events)))
    vals = optical.values.reshape(optical.slices, -1)
    change = np.diff(np.concatenate([np.full((1, vals.shape[1]), 5.0), vals]), axis=0)
    first = np.asarray(days)[np.argmin(change, axis=0)]
    dist = truth.deforested.ravel()
    assert np.array_equal(first[dist], truth.event_day.ravel()[dist])


def test_cloud_fraction_monotone_in_expectation():
    avail = []
    for frac in (0.0, 0.2, 0.5, 0.8):
        counts = [(~generate(small_spec(cloud_fraction=frac, seed=s))[1].missing).sum() for s in range(8)]
        avail.append(np.mean(counts))
    assert all(a >= b for a, b in zip(avail, avail[1:]))


@pytest.mark.parametrize("bad", [dict(cloud_fraction=1.5), dict(height=1),
                                 dict(optical_days=(5, 3)), dict(evi_white_std=-1.0),
                                 dict(events=(ClearingEvent(SQUARE, day=999),))])
def test_invalid_specs(bad):
    with pytest.raises(ValueError):
        small_spec(**bad)


def test_spec_json_roundtrip(tmp_path):
    spec = default_scene(seed=2, size=32, n_polygons=2)
    spec.to_json(tmp_path / "s.json")
    back = SceneSpec.from_json(tmp_path / "s.json")
    assert back == spec


def test_write_scene_and_truth_csv(tmp_path):
    scene = generate(default_scene(seed=1, size=20, n_polygons=2, radius=(3.0, 4.0)))
    files = write_scene(tmp_path, scene)
    assert load_stack(files["sar"]) == scene[2]
    truth = GroundTruth.from_csv(files["truth"], 20, 20)
    assert np.array_equal(truth.event_day, scene[3].event_day)
    tm = load_stack(tmp_path / "truth_map")
    assert tm.band == "truth" and np.array_equal(tm.values[0], scene[3].event_day)


# scoring ----------------------------------------------------------------------------------

def test_perfect_detection_scores():
    truth = generate(small_spec(events=(ClearingEvent(SQUARE, day=160),)))[3]
    confirm = np.where(truth.deforested, truth.event_day + 12, -1)
    report, delay = score_datemap(DateMap(confirm, confirm), truth)
    assert report.overall == 1.0
    assert delay.median >= 0 and delay.within_tolerance == 1.0 and delay.count == truth.deforested.sum()


def test_all_stable_scores():
    truth = generate(small_spec(events=(ClearingEvent(SQUARE, day=160),)))[3]
    report, delay = score_datemap(DateMap.stable(16, 16), truth)
    assert report.producer_deforest == 0.0 and delay.count == 0


@pytest.mark.parametrize("seed", range(5))
def test_scores_agree_with_compute_metrics(seed):
    rng = np.random.default_rng(seed)
    truth = generate(default_scene(seed=seed, size=24, n_polygons=3, radius=(3.0, 6.0)))[3]
    confirm = np.where(rng.random((24, 24)) < 0.2, 400, -1)
    report, _ = score_datemap(DateMap(confirm, confirm), truth)
    want = compute_metrics(confirm.ravel() >= 0, truth.deforested.ravel())
    assert report.as_dict() == want.as_dict()


def test_score_shape_mismatch():
    truth = generate(small_spec())[3]
    with pytest.raises(ValueError):
        score_datemap(DateMap.stable(4, 4), truth)
