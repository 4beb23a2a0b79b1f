"""Per-pixel land-cover tracking with a four-state HMM.

Observations are pairs of bits ``(optical, sar)``, each 0, 1 or absent. A
symbol is coded ``3 * optical + sar`` with ``ABSENT = 2``, giving nine codes;
code 8 is "no observation". Emission tables hold the joint law of the two
present bits per state; an absent bit is summed out.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from math import ceil

import numpy as np

from .raster import RasterStack

FOREST, FOREST_CLOUD, BARE, BARE_CLOUD = 0, 1, 2, 3
STATE_NAMES = ("forest", "forest+cloud", "bare", "bare+cloud")
ABSENT = 2
NO_OBSERVATION = 3 * ABSENT + ABSENT
N_SYMBOLS = 9


def symbol_code(optical_bit: int, sar_bit: int) -> int:
    return 3 * optical_bit + sar_bit


def symbol_bits(code: int) -> tuple[int, int]:
    return divmod(int(code), 3)


@dataclass(frozen=True, eq=False)
class HmmSpec:
    """``transitions[i, j] = P(j | i)``; ``emissions[s, o, r] = P(optical=o, sar=r | s)``."""

    transitions: np.ndarray
    emissions: np.ndarray
    initial: np.ndarray
    states: tuple[str, ...] = STATE_NAMES

    def __post_init__(self):
        P = np.asarray(self.transitions, dtype=np.float64)
        B = np.asarray(self.emissions, dtype=np.float64)
        pi = np.asarray(self.initial, dtype=np.float64)
        n = P.shape[0]
        if P.shape != (n, n) or B.shape != (n, 2, 2) or pi.shape != (n,):
            raise ValueError("inconsistent HMM shapes")
        if np.any(P < 0) or np.any(np.abs(P.sum(axis=1) - 1) > 1e-12):
            raise ValueError("transition rows must be stochastic")
        if np.any(B < 0) or np.any(np.abs(B.sum(axis=(1, 2)) - 1) > 1e-12):
            raise ValueError("emission tables must sum to one per state")
        if np.any(pi < 0) or abs(pi.sum() - 1) > 1e-12:
            raise ValueError("initial distribution must sum to one")
        object.__setattr__(self, "transitions", P)
        object.__setattr__(self, "emissions", B)
        object.__setattr__(self, "initial", pi)
        if len(self.states) != n:
            object.__setattr__(self, "states", tuple(f"s{i}" for i in range(n)))

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    def symbol_probabilities(self) -> np.ndarray:
        """``(n_states, 9)`` table of P(symbol | state) with absent bits marginalised."""
        B = self.emissions
        table = np.empty((self.n_states, N_SYMBOLS))
        for o in range(3):
            for r in range(3):
                bo = B if o == ABSENT else B[:, o:o + 1, :]
                br = bo if r == ABSENT else bo[:, :, r:r + 1]
                if o == ABSENT and r == ABSENT:
                    table[:, 3 * o + r] = 1.0
                else:
                    table[:, 3 * o + r] = br.sum(axis=(1, 2))
        return table

    def log_tables(self):
        with np.errstate(divide="ignore"):
            return np.log(self.initial), np.log(self.transitions), np.log(self.symbol_probabilities())

    @classmethod
    def from_bernoulli(cls, transitions, p_optical, p_sar, initial) -> "HmmSpec":
        """Independent bits: ``p_optical[s] = P(optical=1 | s)``, likewise for SAR."""
        po, pr = np.asarray(p_optical, float), np.asarray(p_sar, float)
        B = np.stack([np.stack([(1 - po) * (1 - pr), (1 - po) * pr], -1),
                      np.stack([po * (1 - pr), po * pr], -1)], 1)
        return cls(np.asarray(transitions, float), B, np.asarray(initial, float))


DEFAULT_P_OPTICAL = (0.05, 0.6, 0.9, 0.6)
DEFAULT_P_SAR = (0.05, 0.05, 0.9, 0.9)


def derive_transitions(cloud_fraction: float, forest_fraction: float, p_change: float) -> np.ndarray:
    """Transition matrix from average cloud cover, forest cover and change rate.

    From any state the chance of a cloudy next frame is ``cloud_fraction``, split
    between forest+cloud and bare+cloud by ``forest_fraction``. A clear next
    frame keeps the land cover with probability ``1 - cloud_fraction - p_change``
    and switches it with ``p_change * (1 - cloud_fraction)``. Cloudy states use
    the row of their clear counterpart. Rows are renormalised.
    """
    c, f, p = cloud_fraction, forest_fraction, p_change
    if not (0 <= c < 1 and 0 <= f <= 1 and 0 <= p < 1 and c + p < 1):
        raise ValueError("infeasible transition inputs")
    forest_row = np.array([1 - c - p, c * f, p * (1 - c), c * (1 - f)])
    bare_row = np.array([p * (1 - c), c * f, 1 - c - p, c * (1 - f)])
    P = np.stack([forest_row, forest_row, bare_row, bare_row])
    return P / P.sum(axis=1, keepdims=True)


def default_spec(cloud_fraction=0.2, forest_fraction=0.9, p_change=0.01,
                 p_optical=DEFAULT_P_OPTICAL, p_sar=DEFAULT_P_SAR, initial=None) -> HmmSpec:
    P = derive_transitions(cloud_fraction, forest_fraction, p_change)
    if initial is None:
        initial = initial_distribution(cloud_fraction, forest_fraction)
    return HmmSpec.from_bernoulli(P, p_optical, p_sar, initial)


def initial_distribution(cloud_fraction: float, forest_fraction: float) -> np.ndarray:
    """First-frame prior split by cloud cover and regional forest cover,
    the same split ``derive_transitions`` applies to cloudy mass."""
    c, f = cloud_fraction, forest_fraction
    return np.array([(1 - c) * f, c * f, (1 - c) * (1 - f), c * (1 - f)])


@dataclass(frozen=True)
class Thresholds:
    optical: float = 1.2
    sar: float = -5.5
    optical_below: bool = False

    def __post_init__(self):
        if not (np.isfinite(self.optical) and np.isfinite(self.sar)):
            raise ValueError("thresholds must be finite")


def emit(anomaly, sar, th: Thresholds):
    """Symbol code(s) from an anomaly magnitude and a filtered SAR value.

    NaN (or ``None``) marks an absent observation. Both comparisons are strict.
    With ``optical_below`` the optical input is raw index data and low values
    flag change.
    """
    a = np.asarray(np.nan if anomaly is None else anomaly, dtype=np.float64)
    s = np.asarray(np.nan if sar is None else sar, dtype=np.float64)
    if th.optical_below:
        obit = np.where(np.isnan(a), ABSENT, (a < th.optical).astype(np.int64))
    else:
        obit = np.where(np.isnan(a), ABSENT, (np.abs(a) > th.optical).astype(np.int64))
    sbit = np.where(np.isnan(s), ABSENT, (s < th.sar).astype(np.int64))
    codes = 3 * obit + sbit
    return int(codes) if codes.ndim == 0 else codes


def viterbi(symbols, spec: HmmSpec) -> np.ndarray:
    """Most probable state path (log space; ties go to the lowest state index)."""
    obs = np.asarray(symbols, dtype=np.int64).reshape(-1)
    if obs.size == 0:
        raise ValueError("empty observation sequence")
    if obs.min() < 0 or obs.max() >= N_SYMBOLS:
        raise ValueError("symbol outside the alphabet")
    log_pi, log_P, log_B = spec.log_tables()
    T, N = obs.size, spec.n_states
    back = np.zeros((T, N), dtype=np.int64)
    delta = log_pi + log_B[:, obs[0]]
    for t in range(1, T):
        scores = delta[:, None] + log_P
        back[t] = np.argmax(scores, axis=0)
        delta = scores[back[t], np.arange(N)] + log_B[:, obs[t]]
    path = np.empty(T, dtype=np.int64)
    path[-1] = int(np.argmax(delta))
    for t in range(T - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path


def viterbi_batch(symbols: np.ndarray, spec: HmmSpec) -> np.ndarray:
    """``viterbi`` over columns of a ``(T, pixels)`` code array."""
    obs = np.asarray(symbols, dtype=np.int64)
    if obs.ndim != 2 or obs.shape[0] == 0:
        raise ValueError("expected a non-empty (T, pixels) array")
    if obs.min() < 0 or obs.max() >= N_SYMBOLS:
        raise ValueError("symbol outside the alphabet")
    log_pi, log_P, log_B = spec.log_tables()
    T, npx = obs.shape
    N = spec.n_states
    back = np.zeros((T, npx, N), dtype=np.int8)
    delta = log_pi[None, :] + log_B[:, obs[0]].T
    for t in range(1, T):
        scores = delta[:, :, None] + log_P[None, :, :]
        arg = np.argmax(scores, axis=1)
        back[t] = arg
        delta = np.take_along_axis(scores, arg[:, None, :], axis=1)[:, 0, :] + log_B[:, obs[t]].T
    path = np.empty((T, npx), dtype=np.int64)
    path[-1] = np.argmax(delta, axis=1)
    rows = np.arange(npx)
    for t in range(T - 1, 0, -1):
        path[t - 1] = back[t, rows, path[t]]
    return path


def path_log_probability(path, symbols, spec: HmmSpec) -> float:
    """Joint log probability of a path and observations, summed left to right."""
    log_pi, log_P, log_B = spec.log_tables()
    path = np.asarray(path)
    obs = np.asarray(symbols)
    lp = log_pi[path[0]] + log_B[path[0], obs[0]]
    for t in range(1, path.size):
        lp = lp + log_P[path[t - 1], path[t]]
        lp = lp + log_B[path[t], obs[t]]
    return float(lp)


@dataclass(frozen=True)
class Detection:
    confirm_day: int | None = None
    onset_day: int | None = None

    @property
    def deforested(self) -> bool:
        return self.confirm_day is not None


def detect_persistence(path, days, ftc: int, target: int = BARE) -> Detection:
    """First run of ``ftc`` consecutive ``target`` states.

    Confirmation is the day of the run's ``ftc``-th frame; onset is the run start.
    """
    if ftc < 1:
        raise ValueError("ftc must be >= 1")
    path = np.asarray(path)
    days = np.asarray(days)
    if path.shape != days.shape:
        raise ValueError("path and day list lengths differ")
    run = 0
    for t, s in enumerate(path):
        run = run + 1 if s == target else 0
        if run == ftc:
            return Detection(int(days[t]), int(days[t - ftc + 1]))
    return Detection()


def detect_persistence_batch(paths: np.ndarray, days, ftc: int, target: int = BARE):
    """Vectorised ``detect_persistence`` over columns; returns (confirm, onset) with -1 for stable."""
    if ftc < 1:
        raise ValueError("ftc must be >= 1")
    days = np.asarray(days, dtype=np.int64)
    T, npx = paths.shape
    run = np.zeros(npx, dtype=np.int64)
    confirm = np.full(npx, -1, dtype=np.int64)
    onset = np.full(npx, -1, dtype=np.int64)
    for t in range(T):
        run = np.where(paths[t] == target, run + 1, 0)
        hit = (run == ftc) & (confirm < 0)
        if hit.any():
            confirm[hit] = days[t]
            onset[hit] = days[t - ftc + 1]
    return confirm, onset


def variable_ftc(n_optical: int, mode: str, total_optical_days: int = 161) -> int:
    """Frames-to-classify scaled with the number of optical dates.

    hybrid: ``ceil(10 n/N + 4 (1 - n/N))``; optical-only: ``max(1, ceil(9 n/N))``;
    sar-only: 5. Evaluated in exact rational arithmetic.
    """
    if n_optical < 0:
        raise ValueError("n_optical must be non-negative")
    if n_optical > total_optical_days:
        raise ValueError("n_optical exceeds the total optical day count")
    frac = Fraction(n_optical, total_optical_days)
    if mode == "hybrid":
        return ceil(10 * frac + 4 * (1 - frac))
    if mode == "optical-only":
        return max(1, ceil(9 * frac))
    if mode == "sar-only":
        return 5
    raise ValueError(f"unknown mode {mode!r}")


@dataclass(frozen=True, eq=False)
class Timeline:
    """Merged optical/SAR dates; ``optical_index[k]`` / ``sar_index[k]`` point into
    the source stacks (-1 where that sensor has no acquisition)."""

    days: np.ndarray
    optical_index: np.ndarray
    sar_index: np.ndarray
    optical: RasterStack | None = None
    sar: RasterStack | None = None

    def __len__(self):
        return self.days.size

    @property
    def sources(self) -> list[str]:
        out = []
        for o, s in zip(self.optical_index, self.sar_index):
            out.append("both" if o >= 0 and s >= 0 else "optical" if o >= 0 else "sar")
        return out

    def observations(self, row: int, col: int) -> tuple[np.ndarray, np.ndarray]:
        """(anomaly, sar) value sequences for one pixel, NaN where absent."""
        return self.observations_flat(np.array([row * self._width + col]))

    @property
    def _width(self):
        src = self.optical if self.optical is not None else self.sar
        return src.width

    def observations_flat(self, pixels: np.ndarray):
        pixels = np.asarray(pixels, dtype=np.int64)
        T = self.days.size
        opt = np.full((T, pixels.size), np.nan)
        sar = np.full((T, pixels.size), np.nan)
        if self.optical is not None:
            flat = self.optical.values.reshape(self.optical.slices, -1)
            k = np.flatnonzero(self.optical_index >= 0)
            opt[k] = flat[self.optical_index[k]][:, pixels]
        if self.sar is not None:
            flat = self.sar.values.reshape(self.sar.slices, -1)
            k = np.flatnonzero(self.sar_index >= 0)
            sar[k] = flat[self.sar_index[k]][:, pixels]
        if pixels.size == 1:
            return opt[:, 0], sar[:, 0]
        return opt, sar


def build_timeline(optical: RasterStack | None = None, sar: RasterStack | None = None) -> Timeline:
    if optical is None and sar is None:
        raise ValueError("at least one source is required")
    if optical is not None and sar is not None and (optical.height, optical.width) != (sar.height, sar.width):
        raise ValueError("optical and SAR stacks are not co-registered")
    od = optical.days if optical is not None else np.zeros(0, dtype=np.int64)
    sd = sar.days if sar is not None else np.zeros(0, dtype=np.int64)
    days = np.union1d(od, sd)
    oi = np.full(days.size, -1, dtype=np.int64)
    si = np.full(days.size, -1, dtype=np.int64)
    oi[np.searchsorted(days, od)] = np.arange(od.size)
    si[np.searchsorted(days, sd)] = np.arange(sd.size)
    return Timeline(days, oi, si, optical, sar)


def track_pixel(timeline: Timeline, pixel: tuple[int, int], spec: HmmSpec, th: Thresholds, ftc: int,
                return_path: bool = False):
    """emit -> viterbi -> detect_persistence for one pixel."""
    opt, sar = timeline.observations(*pixel)
    codes = emit(opt, sar, th)
    path = viterbi(codes, spec)
    det = detect_persistence(path, timeline.days, ftc)
    return (det, path) if return_path else det


@dataclass(frozen=True, eq=False)
class DateMap:
    """Per-pixel confirmation and onset days (-1 = stable)."""

    confirm: np.ndarray
    onset: np.ndarray
    paths: np.ndarray | None = field(default=None, repr=False)

    @property
    def deforested(self) -> np.ndarray:
        return self.confirm >= 0

    @classmethod
    def stable(cls, height: int, width: int) -> "DateMap":
        empty = np.full((height, width), -1, dtype=np.int64)
        return cls(empty, empty.copy())

    def collapsed_states(self) -> np.ndarray | None:
        """Three-label rendering (0 forest, 1 cloud/shadow, 2 bare) of stored paths."""
        if self.paths is None:
            return None
        lut = np.array([0, 1, 2, 1])
        return lut[self.paths]

    def to_stack(self, meta=None) -> RasterStack:
        values = np.where(self.confirm >= 0, self.confirm, 0).astype(np.float32)
        kw = {} if meta is None else {"meta": meta}
        return RasterStack(values[None], [0], "datemap", **kw)

    def to_csv(self, path) -> None:
        rows, cols = np.nonzero(self.confirm >= 0)
        with open(path, "w") as fh:
            fh.write("row,col,onset_day,confirm_day\n")
            for r, c in zip(rows, cols):
                fh.write(f"{r},{c},{self.onset[r, c]},{self.confirm[r, c]}\n")

    @classmethod
    def from_stack(cls, stack: RasterStack) -> "DateMap":
        v = stack.values[0].astype(np.int64)
        confirm = np.where(v > 0, v, -1)
        return cls(confirm, confirm.copy())


def track_stack(timeline: Timeline, spec: HmmSpec, th: Thresholds, ftc: int, *, chunk: int = 8192,
                keep_paths: bool = False, workers: int = 1) -> DateMap:
    """Vectorised ``track_pixel`` over every pixel; identical per-pixel results."""
    src = timeline.optical if timeline.optical is not None else timeline.sar
    H, W = src.height, src.width
    n = H * W
    confirm = np.full(n, -1, dtype=np.int64)
    onset = np.full(n, -1, dtype=np.int64)
    paths = np.zeros((len(timeline), n), dtype=np.int8) if keep_paths else None
    blocks = [np.arange(s, min(s + chunk, n)) for s in range(0, n, chunk)]

    def run(block):
        opt, sar = timeline.observations_flat(block)
        if block.size == 1:
            opt, sar = opt[:, None], sar[:, None]
        codes = emit(opt, sar, th)
        p = viterbi_batch(codes, spec)
        c, o = detect_persistence_batch(p, timeline.days, ftc)
        return block, c, o, p

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, blocks))
    else:
        results = [run(b) for b in blocks]
    for block, c, o, p in results:
        confirm[block] = c
        onset[block] = o
        if paths is not None:
            paths[:, block] = p
    return DateMap(confirm.reshape(H, W), onset.reshape(H, W),
                   None if paths is None else paths.reshape(len(timeline), H, W))
