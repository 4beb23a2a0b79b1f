"""End-to-end detection: KL anomalies and filtered SAR into per-pixel HMM tracking."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

import numpy as np

from . import hmm
from .kl import AnomalyConfig, FillStrategy, anomaly_stack
from .raster import RasterStack
from .sar_filter import FilterParams, filter_stack

MODES = ("hybrid", "optical-only", "sar-only")
MODE_DEFAULTS = {
    "hybrid": {"optical_thresh": 1.2, "sar_thresh": -5.5, "ftc": 10},
    "optical-only": {"optical_thresh": 0.6, "sar_thresh": -5.5, "ftc": 9},
    "sar-only": {"optical_thresh": 1.2, "sar_thresh": -5.5, "ftc": 5},
}


@dataclass(frozen=True)
class KlSettings:
    fill: str = "space-fill-0(k=3,extent=1)"
    energy: float = 0.95
    m: int | None = None
    alpha: float = 0.05
    tile_rows: int = 128
    tile_cols: int = 128
    raw_optical: bool = False  # feed index values to the HMM instead of |eta|


@dataclass(frozen=True)
class FilterSettings:
    smooth_weight: float = 1.0
    temporal_weight: float = 0.5
    tol: float = 1e-6
    max_iters: int = 500
    stencil: str = "5"
    raw: bool = False  # skip the MAP filter and threshold raw backscatter

    def params(self) -> FilterParams:
        return FilterParams.from_weights(self.smooth_weight, self.temporal_weight,
                                         solver_tol=self.tol, max_iters=self.max_iters)


@dataclass(frozen=True)
class HmmSettings:
    cloud_fraction: float = 0.2
    forest_fraction: float = 0.9
    p_change: float = 0.01
    transitions: tuple | None = None
    p_optical: tuple[float, ...] = hmm.DEFAULT_P_OPTICAL
    p_sar: tuple[float, ...] = hmm.DEFAULT_P_SAR
    initial: tuple[float, ...] | None = None
    optical_thresh: float | None = None
    sar_thresh: float | None = None
    ftc: int | str | None = None  # None: mode default, "auto": variable FTC
    total_optical_days: int | None = None

    def spec(self) -> hmm.HmmSpec:
        if self.transitions is not None:
            P = np.asarray(self.transitions, dtype=float)
            pi = self.initial if self.initial is not None else \
                hmm.initial_distribution(self.cloud_fraction, self.forest_fraction)
            return hmm.HmmSpec.from_bernoulli(P, self.p_optical, self.p_sar, pi)
        return hmm.default_spec(self.cloud_fraction, self.forest_fraction, self.p_change,
                                self.p_optical, self.p_sar, self.initial)


@dataclass(frozen=True)
class PipelineConfig:
    mode: str = "hybrid"
    training: str | None = None
    optical: str | None = None
    sar: str | None = None
    model: str | None = None
    kl: KlSettings = field(default_factory=KlSettings)
    filter: FilterSettings = field(default_factory=FilterSettings)
    hmm: HmmSettings = field(default_factory=HmmSettings)
    out: str = "out"
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        FillStrategy.parse(self.kl.fill)

    def thresholds(self, mode: str | None = None) -> hmm.Thresholds:
        d = MODE_DEFAULTS[mode or self.mode]
        o = self.hmm.optical_thresh if self.hmm.optical_thresh is not None else d["optical_thresh"]
        s = self.hmm.sar_thresh if self.hmm.sar_thresh is not None else d["sar_thresh"]
        return hmm.Thresholds(o, s, optical_below=self.kl.raw_optical)

    def ftc(self, n_optical: int, total_optical: int, mode: str | None = None) -> int:
        mode = mode or self.mode
        f = self.hmm.ftc
        if f is None:
            return MODE_DEFAULTS[mode]["ftc"]
        if f == "auto":
            total = self.hmm.total_optical_days or total_optical
            return hmm.variable_ftc(n_optical, mode, max(total, 1))
        return int(f)

    def anomaly_config(self) -> AnomalyConfig:
        return AnomalyConfig(fill=FillStrategy.parse(self.kl.fill), energy=self.kl.energy, m=self.kl.m,
                             tile_rows=self.kl.tile_rows, tile_cols=self.kl.tile_cols,
                             workers=self.workers)

    # serialisation -------------------------------------------------------
    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def digest(self) -> str:
        """Hash of the output-affecting settings (paths, out and workers excluded)."""
        d = self.to_dict()
        for k in ("training", "optical", "sar", "model", "out", "workers"):
            d.pop(k, None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, raw: dict) -> "PipelineConfig":
        raw = dict(raw)
        nested = {"kl": KlSettings, "filter": FilterSettings, "hmm": HmmSettings}
        for key, typ in nested.items():
            if key in raw and not is_dataclass(raw[key]):
                sub = dict(raw[key])
                unknown = set(sub) - {f.name for f in fields(typ)}
                if unknown:
                    raise ValueError(f"unknown {key} settings: {sorted(unknown)}")
                for name, value in sub.items():
                    if isinstance(value, list):
                        sub[name] = _tuplify(value)
                raw[key] = typ(**sub)
        unknown = set(raw) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)

    @classmethod
    def from_json(cls, path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def override(self, **changes) -> "PipelineConfig":
        """Apply dotted overrides such as ``{"hmm.ftc": 7}``."""
        cfg = self
        for key, value in changes.items():
            if value is None:
                continue
            if "." in key:
                section, name = key.split(".", 1)
                cfg = replace(cfg, **{section: replace(getattr(cfg, section), **{name: value})})
            else:
                cfg = replace(cfg, **{key: value})
        return cfg


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _tuplify(v):
    return tuple(_tuplify(x) for x in v) if isinstance(v, list) else v


@dataclass(frozen=True, eq=False)
class Features:
    """Inputs to the HMM stage: optical anomaly (or raw index) and filtered SAR."""

    optical: RasterStack | None
    sar: RasterStack | None


def compute_features(config: PipelineConfig, training: RasterStack | None = None,
                     optical: RasterStack | None = None, sar: RasterStack | None = None,
                     tile_models=None) -> Features:
    mode = config.mode
    opt_feat = sar_feat = None
    if mode in ("hybrid", "optical-only"):
        if optical is None:
            raise ValueError(f"{mode} mode needs an optical test stack")
        if config.kl.raw_optical:
            opt_feat = optical
        else:
            if training is None and tile_models is None:
                raise ValueError(f"{mode} mode needs a training stack or a fitted model")
            opt_feat = anomaly_stack(optical, training, config.anomaly_config(), tile_models=tile_models)
    if mode in ("hybrid", "sar-only"):
        if sar is None:
            raise ValueError(f"{mode} mode needs a SAR test stack")
        if config.filter.raw:
            sar_feat = sar
        else:
            sar_feat = filter_stack(sar, config.filter.params(), stencil=config.filter.stencil)
    return Features(opt_feat, sar_feat)


def classify(config: PipelineConfig, features: Features, optical_subset=None,
             keep_paths: bool = False, consumed: list | None = None) -> hmm.DateMap:
    """HMM stage. ``optical_subset`` picks optical slices (indices) to keep.

    When ``consumed`` is a list, the optical day numbers actually fed to the
    tracker are appended to it.
    """
    mode = config.mode
    opt = features.optical if mode != "sar-only" else None
    sar = features.sar if mode != "optical-only" else None
    total = 0 if features.optical is None else features.optical.slices
    if opt is not None and optical_subset is not None:
        idx = np.sort(np.asarray(optical_subset, dtype=np.int64))
        opt = opt.select(idx) if idx.size else None
    n_opt = 0 if opt is None else opt.slices
    if consumed is not None:
        consumed.append(np.zeros(0, dtype=np.int64) if opt is None else opt.days.copy())
    if mode == "hybrid" and opt is None:
        mode = "sar-only"  # no optical dates left: the fused model degenerates to radar only
    if mode == "optical-only" and opt is None:
        ref = features.optical if features.optical is not None else features.sar
        return hmm.DateMap.stable(ref.height, ref.width)
    timeline = hmm.build_timeline(opt, sar)
    ftc = config.ftc(n_opt, total, mode)
    return hmm.track_stack(timeline, config.hmm.spec(), config.thresholds(mode), ftc,
                           keep_paths=keep_paths, workers=config.workers)


def detect(config: PipelineConfig, training=None, optical=None, sar=None, tile_models=None,
           keep_paths: bool = False) -> hmm.DateMap:
    return classify(config, compute_features(config, training, optical, sar, tile_models),
                    keep_paths=keep_paths)
