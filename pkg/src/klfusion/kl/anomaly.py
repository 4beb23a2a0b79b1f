"""Per-slice anomaly maps from tile-wise KL models."""

from __future__ import annotations

import hashlib
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..raster import RasterStack, Tile, tile_iter
from .fill import FillStrategy, fill_values
from .model import KlModel, model_from_samples

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AnomalyConfig:
    fill: FillStrategy = field(default_factory=FillStrategy)
    energy: float = 0.95
    m: int | None = None
    tile_rows: int = 32
    tile_cols: int = 32
    signed: bool = False
    workers: int = 1


class ModelCache:
    """Restricted models keyed on (tile, availability-mask digest)."""

    def __init__(self):
        self._store: dict[tuple, KlModel] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def get(self, tile_key, available: np.ndarray, base: KlModel) -> KlModel:
        key = (tile_key, hashlib.sha1(np.packbits(available).tobytes()).hexdigest())
        with self._lock:
            hit = self._store.get(key)
            if hit is not None:
                self.hits += 1
                return hit
        model = base.restrict(available)
        with self._lock:
            self._store.setdefault(key, model)
            self.misses += 1
        return model

    def __len__(self):
        return len(self._store)


def train_tile_models(training: RasterStack, config: AnomalyConfig) -> list[tuple[Tile, KlModel]]:
    """Fill the training stack once, then fit one full-availability model per tile."""
    values, missing = fill_values(training.values, training.missing, training.days, config.fill)
    tiles = list(tile_iter(training.height, training.width, config.tile_rows, config.tile_cols))

    def fit(tile: Tile):
        rs, cs = tile.window
        x = values[:, rs, cs].reshape(training.slices, -1)
        mk = missing[:, rs, cs].reshape(training.slices, -1)
        rr, cc = np.mgrid[rs, cs]
        index = (rr * training.width + cc).reshape(-1)
        return model_from_samples(x, mk, pixel_index=index, fill_tag=config.fill.tag,
                                  energy=config.energy, m=config.m)

    models = _map(fit, tiles, config.workers)
    return list(zip(tiles, models))


def _map(fn, items, workers):
    if workers <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def anomaly_stack(test: RasterStack, training: RasterStack | None = None,
                  config: AnomalyConfig | None = None,
                  tile_models: list[tuple[Tile, KlModel]] | None = None,
                  cache: ModelCache | None = None) -> RasterStack:
    """Anomaly magnitude ``|eta|`` for every test slice.

    Each slice restricts every tile model to the pixels observed in that slice;
    identical availability patterns reuse one restricted eigendecomposition.
    """
    config = config or AnomalyConfig()
    if tile_models is None:
        if training is None:
            raise ValueError("either a training stack or fitted tile models is required")
        if (training.height, training.width) != (test.height, test.width):
            raise ValueError("training and test stacks are not co-registered")
        tile_models = train_tile_models(training, config)
    cache = cache if cache is not None else ModelCache()
    out = np.full(test.shape, np.nan)
    flat_values = test.values.reshape(test.slices, -1).astype(np.float64)
    flat_missing = test.missing.reshape(test.slices, -1)

    def run_tile(item):
        ti, (tile, base) = item
        local = np.empty((test.slices, base.n))
        for t in range(test.slices):
            avail = ~flat_missing[t, base.pixel_index]
            eta = np.full(base.n, np.nan)
            if avail.any():
                model = cache.get(ti, avail, base)
                w = flat_values[t, model.pixel_index] - model.mean
                basis = model.eigenvectors[:, : model.m]
                eta[avail] = w - basis @ (basis.T @ w)
            local[t] = eta
        return base.pixel_index, local

    results = _map(run_tile, list(enumerate(tile_models)), config.workers)
    flat_out = out.reshape(test.slices, -1)
    for index, local in results:
        flat_out[:, index] = local
    log.debug("anomaly_stack: %d restricted models, %d cache hits", cache.misses, cache.hits)
    vals = out if config.signed else np.abs(out)
    return RasterStack(vals.astype(np.float32), test.days, "optical-anomaly", test.missing, test.meta)
