"""Seeded synthetic optical/SAR scenes with planted clear-cuts and known truth.

Optical samples are EVI-like values around a forest baseline. Every day adds
a scene-wide offset, a spatially correlated field (separable exponential
kernel), and white noise. Clear-cut polygons lower EVI and backscatter from
their event day, optionally regrowing with a half-life. Cloud blobs mask
optical samples and a thin unmasked fringe around them darkens EVI. SAR is
never touched by clouds.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from matplotlib.path import Path as PolyPath
from scipy import ndimage

from .raster import RasterStack, SceneMetadata


@dataclass(frozen=True)
class ClearingEvent:
    polygon: tuple[tuple[float, float], ...]  # (row, col) vertices
    day: int
    evi_drop: float = 3.0
    sar_drop: float | None = None  # None: fall to the scene's bare-ground level
    regrowth_half_life: float | None = None


@dataclass(frozen=True)
class SceneSpec:
    height: int = 128
    width: int = 128
    training_days: tuple[int, ...] = tuple(range(0, 300, 10))
    optical_days: tuple[int, ...] = ()
    sar_days: tuple[int, ...] = ()
    evi_baseline: float = 5.0
    evi_spatial_std: float = 0.3
    correlation_length: float = 4.0
    evi_temporal_std: float = 0.25
    evi_white_std: float = 0.1
    evi_day_offset_std: float = 0.5
    events: tuple[ClearingEvent, ...] = ()
    cloud_fraction: float = 0.2
    cloud_blob_size: float = 6.0
    cloud_fringe_drop: float = 1.5
    sar_forest: float = -4.0
    sar_bare: float = -7.0
    sar_speckle_std: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.height < 2 or self.width < 2:
            raise ValueError("scene must be at least 2x2")
        for name in ("training_days", "optical_days", "sar_days"):
            d = np.asarray(getattr(self, name))
            if d.size and np.any(np.diff(d) <= 0):
                raise ValueError(f"{name} must be strictly increasing")
            object.__setattr__(self, name, tuple(int(x) for x in d))
        if not 0.0 <= self.cloud_fraction <= 1.0:
            raise ValueError("cloud_fraction must lie in [0, 1]")
        stds = (self.evi_spatial_std, self.evi_temporal_std, self.evi_white_std,
                self.evi_day_offset_std, self.sar_speckle_std)
        if min(stds) < 0 or self.correlation_length < 0 or self.cloud_blob_size < 0:
            raise ValueError("noise scales must be non-negative")
        events = tuple(e if isinstance(e, ClearingEvent) else
                       ClearingEvent(**{**e, "polygon": tuple(map(tuple, e["polygon"]))})
                       for e in self.events)
        object.__setattr__(self, "events", events)
        test = self.optical_days + self.sar_days
        if self.events and test:
            lo, hi = min(test), max(test)
            for ev in self.events:
                if not lo <= ev.day <= hi:
                    raise ValueError(f"event day {ev.day} outside the test range [{lo}, {hi}]")

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True))

    @classmethod
    def from_json(cls, path) -> "SceneSpec":
        raw = json.loads(Path(path).read_text())
        raw["events"] = tuple(raw.get("events", ()))
        return cls(**raw)


@dataclass(frozen=True, eq=False)
class GroundTruth:
    event_day: np.ndarray  # (H, W), -1 = stable
    optical_clouds: np.ndarray  # (optical slices, H, W)
    training_clouds: np.ndarray

    @property
    def deforested(self) -> np.ndarray:
        return self.event_day >= 0

    def to_csv(self, path) -> None:
        rows, cols = np.nonzero(self.event_day >= 0)
        with open(path, "w") as fh:
            fh.write("row,col,event_day\n")
            for r, c in zip(rows, cols):
                fh.write(f"{r},{c},{self.event_day[r, c]}\n")

    @classmethod
    def from_csv(cls, path, height: int, width: int) -> "GroundTruth":
        event = np.full((height, width), -1, dtype=np.int64)
        data = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
        if data.size:
            event[data[:, 0], data[:, 1]] = data[:, 2]
        empty = np.zeros((0, height, width), dtype=bool)
        return cls(event, empty, empty)


def _smooth_noise(rng, shape, length):
    """White noise smoothed by a separable exponential kernel, rescaled to unit variance."""
    z = rng.standard_normal(shape)
    if length <= 0:
        return z
    half = int(np.ceil(3 * length))
    x = np.arange(-half, half + 1)
    k = np.exp(-np.abs(x) / length)
    k /= np.sqrt(np.sum(k ** 2))
    out = ndimage.convolve1d(z, k, axis=-1, mode="wrap")
    return ndimage.convolve1d(out, k, axis=-2, mode="wrap")


def rasterize(polygon, height, width) -> np.ndarray:
    rr, cc = np.mgrid[0:height, 0:width]
    centres = np.column_stack([rr.ravel() + 0.5, cc.ravel() + 0.5])
    return PolyPath(np.asarray(polygon, dtype=float)).contains_points(centres).reshape(height, width)


def _cloud_masks(rng, spec: SceneSpec, n_days: int):
    H, W = spec.height, spec.width
    masks = np.zeros((n_days, H, W), dtype=bool)
    fringe = np.zeros_like(masks)
    if spec.cloud_fraction <= 0 or n_days == 0:
        return masks, fringe
    c = spec.cloud_fraction
    # per-day coverage varies around the mean (Beta with mean c)
    conc = 4.0
    fractions = rng.beta(c * conc, (1 - c) * conc, size=n_days) if c < 1 else np.ones(n_days)
    for t in range(n_days):
        field = _smooth_noise(rng, (H, W), spec.cloud_blob_size)
        if fractions[t] <= 0:
            continue
        cut = np.quantile(field, 1 - fractions[t])
        masks[t] = field > cut
        ring = ndimage.binary_dilation(masks[t]) & ~masks[t]
        fringe[t] = ring
    return masks, fringe


def _event_map(spec: SceneSpec):
    H, W = spec.height, spec.width
    day = np.full((H, W), -1, dtype=np.int64)
    owner = np.full((H, W), -1, dtype=np.int64)
    for idx, ev in enumerate(spec.events):
        inside = rasterize(ev.polygon, H, W)
        take = inside & ((day < 0) | (ev.day < day))
        day[take] = ev.day
        owner[take] = idx
    return day, owner


def _disturbance(spec: SceneSpec, owner, days, attr):
    """Per-day drop amount for each pixel (0 before its event)."""
    H, W = owner.shape
    out = np.zeros((len(days), H, W))
    for idx, ev in enumerate(spec.events):
        sel = owner == idx
        if not sel.any():
            continue
        amount = getattr(ev, attr)
        if amount is None:
            amount = spec.sar_forest - spec.sar_bare
        for t, d in enumerate(days):
            if d < ev.day:
                continue
            frac = 1.0
            if ev.regrowth_half_life:
                frac = 0.5 ** ((d - ev.day) / ev.regrowth_half_life)
            out[t][sel] = amount * frac
    return out


def _optical(rng, spec, static, days, clouds, fringe, drop):
    n = len(days)
    H, W = spec.height, spec.width
    offset = spec.evi_day_offset_std * rng.standard_normal(n)
    vals = np.empty((n, H, W))
    for t in range(n):
        vals[t] = (static + offset[t]
                   + spec.evi_temporal_std * _smooth_noise(rng, (H, W), spec.correlation_length)
                   + spec.evi_white_std * rng.standard_normal((H, W)))
    vals -= drop
    vals -= spec.cloud_fringe_drop * fringe
    return vals


def generate(spec: SceneSpec):
    """Return ``(training, optical, sar, truth)`` for a scene spec."""
    root = np.random.SeedSequence(spec.seed)
    s_static, s_train, s_opt, s_sar, s_cloud = (np.random.default_rng(s) for s in root.spawn(5))
    H, W = spec.height, spec.width
    meta = SceneMetadata(epoch="2020-01-01", pixel_size=10.0, crs="synthetic",
                         notes=f"synthetic scene seed {spec.seed}")
    static = spec.evi_baseline + spec.evi_spatial_std * _smooth_noise(s_static, (H, W), spec.correlation_length)

    event_day, owner = _event_map(spec)
    tr_clouds, tr_fringe = _cloud_masks(s_cloud, spec, len(spec.training_days))
    op_clouds, op_fringe = _cloud_masks(s_cloud, spec, len(spec.optical_days))

    tr_vals = _optical(s_train, spec, static, spec.training_days, tr_clouds, tr_fringe, 0.0)
    training = RasterStack(tr_vals.astype(np.float32), spec.training_days, "optical-evi", tr_clouds, meta)

    optical = None
    if spec.optical_days:
        drop = _disturbance(spec, owner, spec.optical_days, "evi_drop")
        op_vals = _optical(s_opt, spec, static, spec.optical_days, op_clouds, op_fringe, drop)
        optical = RasterStack(op_vals.astype(np.float32), spec.optical_days, "optical-evi", op_clouds, meta)

    sar = None
    if spec.sar_days:
        n = len(spec.sar_days)
        drop = _disturbance(spec, owner, spec.sar_days, "sar_drop")
        sar_vals = (spec.sar_forest - drop
                    + spec.sar_speckle_std * s_sar.standard_normal((n, H, W)))
        sar = RasterStack(sar_vals.astype(np.float32), spec.sar_days, "sar-vv", None, meta)

    truth = GroundTruth(event_day, op_clouds, tr_clouds)
    return training, optical, sar, truth


def random_polygon(rng, centre, radius, vertices=8):
    angles = np.sort(rng.uniform(0, 2 * np.pi, vertices))
    radii = radius * rng.uniform(0.6, 1.0, vertices)
    return tuple((float(centre[0] + r * np.sin(a)), float(centre[1] + r * np.cos(a)))
                 for a, r in zip(angles, radii))


def default_scene(seed: int = 0, size: int = 128, n_polygons: int = 12, training_slices: int = 30,
                  optical_slices: int = 40, sar_slices: int = 45, cloud_fraction: float = 0.2,
                  radius=(6.0, 12.0), regrowth: float | None = None) -> SceneSpec:
    """The desk-scale benchmark scene: clear-cuts early in a SAR-cadenced test period."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    sar_days = tuple(300 + 12 * k for k in range(sar_slices))
    start, end = sar_days[0], sar_days[-1]
    optical_days = tuple(int(d) for d in np.sort(rng.choice(np.arange(start, end + 1), optical_slices, replace=False)))
    training_days = tuple(int(x) for x in np.linspace(0, start - 10, training_slices).round())
    if size < 8:
        raise ValueError("benchmark scenes need size >= 8")
    hi = min(radius[1], size / 4)  # keep polygons inside small scenes
    radius = (min(radius[0], hi), hi)
    events = []
    margin = radius[1] + 1
    for _ in range(n_polygons):
        centre = rng.uniform(margin, size - margin, 2)
        r = rng.uniform(*radius)
        day = int(rng.integers(start, start + int(0.6 * (end - start))))
        events.append(ClearingEvent(random_polygon(rng, centre, r), day,
                                    regrowth_half_life=regrowth))
    return SceneSpec(height=size, width=size, training_days=training_days, optical_days=optical_days,
                     sar_days=sar_days, events=tuple(events), cloud_fraction=cloud_fraction, seed=seed)


def quiet(spec: SceneSpec) -> SceneSpec:
    """Same geometry with every noise and cloud source switched off."""
    return replace(spec, evi_spatial_std=0.0, evi_temporal_std=0.0, evi_white_std=0.0,
                   evi_day_offset_std=0.0, cloud_fraction=0.0, sar_speckle_std=0.0, cloud_fringe_drop=0.0)


@dataclass(frozen=True)
class DelayStats:
    count: int
    median: float
    p10: float
    p90: float
    within_tolerance: float


def score_datemap(result, truth: GroundTruth, day_tolerance: int = 60):
    """Classification metrics over every pixel plus confirmation-delay statistics.

    Delay is ``confirm_day - event_day`` over truly disturbed pixels that were
    detected; ``within_tolerance`` is the share of those with
    ``0 <= delay <= day_tolerance``.
    """
    from .validation import compute_metrics

    if result.confirm.shape != truth.event_day.shape:
        raise ValueError("date map and ground truth are not co-registered")
    pred = result.confirm.ravel() >= 0
    ref = truth.event_day.ravel() >= 0
    report = compute_metrics(pred, ref)
    both = pred & ref
    delay = (result.confirm.ravel() - truth.event_day.ravel())[both].astype(float)
    if delay.size:
        stats = DelayStats(int(delay.size), float(np.median(delay)), float(np.percentile(delay, 10)),
                           float(np.percentile(delay, 90)),
                           float(np.mean((delay >= 0) & (delay <= day_tolerance))))
    else:
        stats = DelayStats(0, float("nan"), float("nan"), float("nan"), float("nan"))
    return report, stats


def write_scene(out_dir, scene) -> dict:
    """Persist a generated scene in the native stack format plus a truth CSV."""
    from .raster import write_stack

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    training, optical, sar, truth = scene
    files = {"training": out / "training", "truth": out / "truth.csv"}
    write_stack(training, files["training"])
    if optical is not None:
        files["optical"] = out / "optical"
        write_stack(optical, files["optical"])
    if sar is not None:
        files["sar"] = out / "sar"
        write_stack(sar, files["sar"])
    truth.to_csv(files["truth"])
    write_stack(RasterStack(truth.event_day[None].astype(np.float32), [0], "truth", None, training.meta),
                out / "truth_map")
    return {k: str(v) for k, v in files.items()}
