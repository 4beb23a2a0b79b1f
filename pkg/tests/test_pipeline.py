import numpy as np
import pytest

from klfusion.hmm import build_timeline, track_stack
from klfusion.pipeline import Features, HmmSettings, PipelineConfig, classify, detect


def test_mode_defaults():
    cfg = PipelineConfig()
    assert (cfg.thresholds("hybrid").optical, cfg.thresholds("hybrid").sar) == (1.2, -5.5)
    assert cfg.thresholds("optical-only").optical == 0.6
    assert [cfg.ftc(40, 40, m) for m in ("hybrid", "optical-only", "sar-only")] == [10, 9, 5]


def test_auto_ftc_uses_total():
    cfg = PipelineConfig(hmm=HmmSettings(ftc="auto"))
    assert cfg.ftc(40, 40) == 10
    assert cfg.ftc(1, 161) == 5
    assert cfg.override(**{"hmm.total_optical_days": 161}).ftc(1, 40) == 5


def test_config_roundtrip_and_digest():
    cfg = PipelineConfig(mode="sar-only", sar="x", hmm=HmmSettings(ftc=7, p_sar=(0.1, 0.1, 0.8, 0.8)))
    back = PipelineConfig.from_dict(cfg.to_dict())
    assert back == cfg
    assert back.digest() == cfg.digest()
    assert cfg.override(workers=8, out="elsewhere", sar="y").digest() == cfg.digest()
    assert cfg.override(**{"hmm.ftc": 6}).digest() != cfg.digest()


@pytest.mark.parametrize("raw", [{"mode": "lidar"}, {"workers": 0}, {"kl": {"fill": "mystery"}},
                                 {"extra": 1}, {"hmm": {"nope": 2}}])
def test_invalid_configs(raw):
    with pytest.raises(ValueError):
        PipelineConfig.from_dict(raw)


def test_explicit_transitions():
    P = np.full((4, 4), 0.25)
    spec = HmmSettings(transitions=tuple(map(tuple, P))).spec()
    assert np.array_equal(spec.transitions, P)


def test_hybrid_with_no_optical_is_sar_only(small_features):
    config, features, _ = small_features
    empty = classify(config, features, optical_subset=[])
    sar = classify(config.override(mode="sar-only"), features)
    assert np.array_equal(empty.confirm, sar.confirm)


def test_optical_only_with_no_optical_is_stable(small_features):
    config, features, _ = small_features
    dm = classify(config.override(mode="optical-only"), features, optical_subset=[])
    assert not dm.deforested.any()


def test_classify_consumed_days(small_features):
    config, features, _ = small_features
    used = []
    classify(config, features, optical_subset=[4, 1], consumed=used)
    assert used[0].tolist() == features.optical.days[[1, 4]].tolist()


def test_classify_equals_manual_composition(small_features):
    config, features, _ = small_features
    dm = classify(config, features)
    tl = build_timeline(features.optical, features.sar)
    ref = track_stack(tl, config.hmm.spec(), config.thresholds(), 10)
    assert np.array_equal(dm.confirm, ref.confirm)


def test_detect_end_to_end(small_scene):
    _, (training, optical, sar, truth) = small_scene
    cfg = PipelineConfig(mode="sar-only")
    dm = detect(cfg, sar=sar)
    assert dm.confirm.shape == truth.event_day.shape
    with pytest.raises(ValueError):
        detect(PipelineConfig(mode="hybrid"), sar=sar)


def test_features_mode_requirements(small_scene):
    from klfusion.pipeline import compute_features

    _, (training, optical, sar, _) = small_scene
    with pytest.raises(ValueError):
        compute_features(PipelineConfig(mode="optical-only"), None, optical, None)
    f = compute_features(PipelineConfig(mode="sar-only"), sar=sar)
    assert isinstance(f, Features) and f.optical is None and f.sar.band == "sar-filtered"
