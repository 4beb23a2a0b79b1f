"""Missing-data fill strategies for training stacks.

Every strategy reads only the originally observed samples, so the result is
independent of the order in which gaps are visited.

Neighbour ranking for the ``space-fill-*`` family: offsets ``(dt, dr, dc)``
inside the box ``|dt| <= 1, |dr|, |dc| <= extent`` are ordered by squared
Euclidean distance (one slice counts as one pixel), ties broken by the
lexicographic order of ``(dt, dr, dc)``. The first ``k`` observed
neighbours in that order are averaged.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..raster import RasterStack

KINDS = (
    "none",
    "fill0",
    "global-mean",
    "slice-mean",
    "cube-mean",
    "time-knn",
    "space-fill-0",
    "space-fill-nan",
    "space-fill-time-knn",
    "space-fill-global",
    "space-fill-slice",
)


@dataclass(frozen=True)
class FillStrategy:
    kind: str = "space-fill-0"
    k: int = 3
    extent: int = 1
    side: int = 5
    time_k: int = 5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown fill strategy {self.kind!r}")
        if self.kind == "cube-mean" and (self.side < 3 or self.side % 2 == 0):
            raise ValueError("cube-mean side must be odd and >= 3")
        if self.k < 1 or self.time_k < 1:
            raise ValueError("neighbour counts must be >= 1")
        if self.extent < 1:
            raise ValueError("extent must be >= 1")

    @property
    def tag(self) -> str:
        if self.kind == "cube-mean":
            return f"cube-mean(side={self.side})"
        if self.kind == "time-knn":
            return f"time-knn(k={self.k})"
        if self.kind == "space-fill-time-knn":
            return f"space-fill-time-knn(k={self.k},extent={self.extent},time_k={self.time_k})"
        if self.kind.startswith("space-fill"):
            return f"{self.kind}(k={self.k},extent={self.extent})"
        return self.kind

    @classmethod
    def parse(cls, text: str) -> "FillStrategy":
        """Parse ``name`` or ``name(a=1,b=2)``; a bare positional number is the
        cube side for ``cube-mean`` and ``k`` otherwise."""
        match = re.fullmatch(r"\s*([a-z0-9-]+)\s*(?:\((.*)\))?\s*", text)
        if not match:
            raise ValueError(f"cannot parse fill strategy {text!r}")
        kind, args = match.group(1), match.group(2)
        kwargs = {}
        for i, part in enumerate(filter(None, (a.strip() for a in (args or "").split(",")))):
            if "=" in part:
                key, val = (s.strip() for s in part.split("=", 1))
            else:
                key = ("side" if kind == "cube-mean" else "k") if i == 0 else "extent"
                val = part
            if key not in ("k", "extent", "side", "time_k"):
                raise ValueError(f"unknown fill parameter {key!r}")
            kwargs[key] = int(val)
        return cls(kind, **kwargs)


def _global_mean(values, missing):
    obs = values[~missing]
    return float(obs.mean(dtype=np.float64)) if obs.size else 0.0


def _slice_means(values, missing):
    fallback = _global_mean(values, missing)
    out = np.full(values.shape[0], fallback)
    for t in range(values.shape[0]):
        obs = values[t][~missing[t]]
        if obs.size:
            out[t] = obs.mean(dtype=np.float64)
    return out


def neighbour_offsets(extent: int, time_extent: int = 1) -> list[tuple[int, int, int]]:
    offsets = [
        (dt, dr, dc)
        for dt in range(-time_extent, time_extent + 1)
        for dr in range(-extent, extent + 1)
        for dc in range(-extent, extent + 1)
        if (dt, dr, dc) != (0, 0, 0)
    ]
    return sorted(offsets, key=lambda o: (o[0] ** 2 + o[1] ** 2 + o[2] ** 2, o))


def _space_knn(values, missing, k, extent):
    """Mean of the first ``k`` observed neighbours per missing sample; NaN when none."""
    T, H, W = values.shape
    tt, rr, cc = np.nonzero(missing)
    total = np.zeros(tt.size)
    count = np.zeros(tt.size, dtype=np.int64)
    for dt, dr, dc in neighbour_offsets(extent):
        t2, r2, c2 = tt + dt, rr + dr, cc + dc
        inside = (t2 >= 0) & (t2 < T) & (r2 >= 0) & (r2 < H) & (c2 >= 0) & (c2 < W) & (count < k)
        sel = np.flatnonzero(inside)
        ok = ~missing[t2[sel], r2[sel], c2[sel]]
        sel = sel[ok]
        total[sel] += values[t2[sel], r2[sel], c2[sel]]
        count[sel] += 1
    out = np.full(tt.size, np.nan)
    has = count > 0
    out[has] = total[has] / count[has]
    return (tt, rr, cc), out


def _time_knn(values, missing, days, k, where=None):
    """Mean of the ``k`` observed samples nearest in day number at the same pixel
    (ties toward the earlier day); 0 when the pixel is never observed."""
    T = values.shape[0]
    filled = {}
    targets = missing if where is None else (missing & where)
    rows, cols = np.nonzero(targets.any(axis=0))
    for r, c in zip(rows, cols):
        obs = np.flatnonzero(~missing[:, r, c])
        for t in np.flatnonzero(targets[:, r, c]):
            if obs.size == 0:
                filled[(t, r, c)] = 0.0
                continue
            dist = np.abs(days[obs] - days[t])
            order = np.lexsort((days[obs], dist))[:k]
            filled[(t, r, c)] = float(values[obs[order], r, c].mean(dtype=np.float64))
    return filled


def fill_values(values: np.ndarray, missing: np.ndarray, days: np.ndarray,
                strategy: FillStrategy) -> tuple[np.ndarray, np.ndarray]:
    """Array-level fill; returns float64 values and the residual missing mask."""
    values = np.where(missing, 0.0, np.asarray(values, dtype=np.float64))
    missing = np.asarray(missing, dtype=bool)
    days = np.asarray(days, dtype=np.int64)
    out = values.copy()
    kind = strategy.kind
    if kind == "none" or not missing.any():
        out[missing] = np.nan
        return out, missing.copy()

    if kind == "fill0":
        out[missing] = 0.0
    elif kind == "global-mean":
        out[missing] = _global_mean(values, missing)
    elif kind == "slice-mean":
        means = _slice_means(values, missing)
        tt = np.nonzero(missing)[0]
        out[missing] = means[tt]
    elif kind == "cube-mean":
        kernel = np.ones((strategy.side,) * 3)
        obs = (~missing).astype(np.float64)
        sums = ndimage.correlate(values, kernel, mode="constant", cval=0.0)
        counts = ndimage.correlate(obs, kernel, mode="constant", cval=0.0)
        counts = np.rint(counts)
        fills = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
        out[missing] = fills[missing]
    elif kind == "time-knn":
        for (t, r, c), v in _time_knn(values, missing, days, strategy.k).items():
            out[t, r, c] = v
    else:
        (tt, rr, cc), knn = _space_knn(values, missing, strategy.k, strategy.extent)
        empty = np.isnan(knn)
        if kind == "space-fill-0":
            knn[empty] = 0.0
        elif kind == "space-fill-global":
            knn[empty] = _global_mean(values, missing)
        elif kind == "space-fill-slice":
            knn[empty] = _slice_means(values, missing)[tt[empty]]
        elif kind == "space-fill-time-knn":
            where = np.zeros_like(missing)
            where[tt[empty], rr[empty], cc[empty]] = True
            tfill = _time_knn(values, missing, days, strategy.time_k, where=where)
            for j in np.flatnonzero(empty):
                knn[j] = tfill[(tt[j], rr[j], cc[j])]
        out[tt, rr, cc] = knn

    remaining = np.isnan(out)
    return out, remaining


def fill_missing(stack: RasterStack, strategy: FillStrategy, seed=None) -> RasterStack:
    """Fill gaps in a training stack. ``seed`` is accepted for interface
    symmetry; every strategy here is deterministic."""
    out, remaining = fill_values(stack.values, stack.missing, stack.days, strategy)
    return RasterStack(out.astype(np.float32), stack.days, stack.band, remaining, stack.meta)
