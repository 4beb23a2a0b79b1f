"""Accuracy assessment: stratified sampling, confusion metrics, optical-day ablation."""

from __future__ import annotations

import csv
import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

STRATA = ("stable-all", "deforest-all", "hybrid-deforest-disagree", "hybrid-stable-disagree")


@dataclass(frozen=True)
class StratifiedDesign:
    """Sample counts per agreement stratum of (hybrid, optical, sar) maps."""

    counts: tuple[int, int, int, int] = (700, 130, 100, 70)

    def __post_init__(self):
        if len(self.counts) != len(STRATA) or min(self.counts) < 0:
            raise ValueError("need four non-negative stratum counts")

    @property
    def total(self) -> int:
        return int(sum(self.counts))


def strata_labels(hybrid, optical, sar) -> np.ndarray:
    """Stratum index per pixel (order of ``STRATA``)."""
    h, o, s = (np.asarray(getattr(m, "deforested", m), dtype=bool) for m in (hybrid, optical, sar))
    if not (h.shape == o.shape == s.shape):
        raise ValueError("maps are not co-registered")
    lab = np.empty(h.shape, dtype=np.int64)
    lab[h & o & s] = 1
    lab[h & ~(o & s)] = 2
    lab[~h & ~o & ~s] = 0
    lab[~h & (o | s)] = 3
    return lab


@dataclass(frozen=True)
class SamplePoint:
    row: int
    col: int
    stratum: int


def stratified_sample(hybrid, optical, sar, design: StratifiedDesign = StratifiedDesign(),
                      seed: int = 0) -> list[SamplePoint]:
    """Uniform sampling without replacement inside each stratum."""
    lab = strata_labels(hybrid, optical, sar)
    W = lab.shape[1]
    rng = np.random.default_rng(seed)
    flat = lab.ravel()
    points = []
    for k, want in enumerate(design.counts):
        pool = np.flatnonzero(flat == k)
        if want > pool.size:
            raise ValueError(f"stratum {STRATA[k]} has {pool.size} pixels, {want} requested")
        pick = np.sort(rng.choice(pool, size=want, replace=False)) if want else pool[:0]
        points.extend(SamplePoint(int(p // W), int(p % W), k) for p in pick)
    return points


def strata_areas(hybrid, optical, sar) -> np.ndarray:
    lab = strata_labels(hybrid, optical, sar)
    return np.bincount(lab.ravel(), minlength=len(STRATA)).astype(float)


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts indexed [predicted, reference] with 0 = stable, 1 = deforest."""

    counts: np.ndarray

    @classmethod
    def from_labels(cls, pred, ref, weights=None) -> "ConfusionMatrix":
        p = np.asarray(pred).astype(bool).ravel()
        r = np.asarray(ref).astype(bool).ravel()
        if p.shape != r.shape:
            raise ValueError("pred and ref lengths differ")
        w = np.ones(p.size) if weights is None else np.asarray(weights, float).ravel()
        c = np.zeros((2, 2))
        np.add.at(c, (p.astype(int), r.astype(int)), w)
        return cls(c)

    @property
    def tp(self):
        return self.counts[1, 1]

    @property
    def fp(self):
        return self.counts[1, 0]

    @property
    def fn(self):
        return self.counts[0, 1]

    @property
    def tn(self):
        return self.counts[0, 0]


@dataclass(frozen=True)
class MetricsReport:
    overall: float
    user_deforest: float
    producer_deforest: float
    user_stable: float
    producer_stable: float
    balanced_accuracy: float
    f1_deforest: float
    undefined: tuple[str, ...] = ()
    n: float = 0.0

    def as_dict(self) -> dict:
        d = asdict(self)
        d["undefined"] = ";".join(self.undefined)
        return d


def _ratio(num, den, name, undefined):
    if den == 0:
        undefined.append(name)
        return math.nan
    return float(num / den)


def metrics_from_confusion(cm: ConfusionMatrix) -> MetricsReport:
    c = cm.counts
    und: list[str] = []
    total = c.sum()
    overall = _ratio(c[0, 0] + c[1, 1], total, "overall", und)
    ud = _ratio(c[1, 1], c[1].sum(), "user_deforest", und)
    pd = _ratio(c[1, 1], c[:, 1].sum(), "producer_deforest", und)
    us = _ratio(c[0, 0], c[0].sum(), "user_stable", und)
    ps = _ratio(c[0, 0], c[:, 0].sum(), "producer_stable", und)
    if math.isnan(pd) or math.isnan(ps):
        und.append("balanced_accuracy")
        ba = math.nan
    else:
        ba = (pd + ps) / 2
    if math.isnan(ud) or math.isnan(pd) or ud + pd == 0:
        und.append("f1_deforest")
        f1 = math.nan
    else:
        # equal to 2 ud pd / (ud + pd), written on the counts to avoid extra rounding
        f1 = float(2 * c[1, 1] / (2 * c[1, 1] + c[1, 0] + c[0, 1]))
    return MetricsReport(overall, ud, pd, us, ps, ba, f1, tuple(und), float(total))


def compute_metrics(pred, ref, weights=None, strata=None) -> MetricsReport:
    """Confusion metrics; area-weighted when per-stratum ``weights`` are given.

    With ``strata`` (stratum index per sample) and ``weights`` (area of each
    stratum) every sample counts ``area_h / n_h``, which yields the
    area-weighted estimators of the error matrix. Without strata, ``weights``
    is read as one weight per sample.
    """
    p = np.asarray(pred).ravel()
    r = np.asarray(ref).ravel()
    if p.shape != r.shape:
        raise ValueError(f"pred has {p.size} labels, ref has {r.size}")
    w = None
    if weights is not None:
        weights = np.asarray(weights, dtype=float)
        if strata is not None:
            s = np.asarray(strata, dtype=np.int64).ravel()
            n_h = np.bincount(s, minlength=weights.size).astype(float)
            per = np.divide(weights, n_h, out=np.zeros_like(weights), where=n_h > 0)
            w = per[s]
        else:
            w = weights.ravel()
            if w.shape != p.shape:
                raise ValueError("per-sample weights must match the label count")
    return metrics_from_confusion(ConfusionMatrix.from_labels(p, r, w))


REPORT_FIELDS = [f for f in MetricsReport.__dataclass_fields__]


def write_reports(path, rows: list[dict]) -> None:
    if not rows:
        raise ValueError("nothing to write")
    keys = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        wr.writeheader()
        for row in rows:
            wr.writerow({k: _fmt(v) for k, v in row.items()})


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return v


def write_samples(path, points: list[SamplePoint], labels: dict[str, np.ndarray] | None = None) -> None:
    with open(path, "w", newline="") as fh:
        names = list(labels or {})
        fh.write(",".join(["row", "col", "stratum", *names]) + "\n")
        for p in points:
            extra = [str(int(labels[n][p.row, p.col])) for n in names]
            fh.write(",".join([str(p.row), str(p.col), STRATA[p.stratum], *extra]) + "\n")


def load_samples(path):
    """Read an interpreted sample CSV with columns row, col, reference (0/1) and optionally stratum."""
    rows, cols, ref, strata = [], [], [], []
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if rd.fieldnames is None or not {"row", "col", "reference"} <= set(rd.fieldnames):
            raise ValueError("sample CSV needs row, col and reference columns")
        for rec in rd:
            rows.append(int(rec["row"]))
            cols.append(int(rec["col"]))
            ref.append(int(rec["reference"]))
            s = rec.get("stratum")
            strata.append(STRATA.index(s) if s in STRATA else int(s) if s not in (None, "") else -1)
    return np.array(rows), np.array(cols), np.array(ref, dtype=bool), np.array(strata)


def load_confusion_csv(path) -> ConfusionMatrix:
    """Two-column CSV of (predicted, reference) labels, one sample per row."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
    return ConfusionMatrix.from_labels(data[:, 0], data[:, 1])


# ablation -------------------------------------------------------------------

@dataclass(frozen=True)
class AblationResult:
    n_optical: int
    hybrid: list[MetricsReport]
    optical: list[MetricsReport]
    hybrid_hashes: list[str] = field(default_factory=list)
    optical_hashes: list[str] = field(default_factory=list)

    def summary(self, metric: str = "overall") -> dict:
        out = {"n_optical": self.n_optical, "trials": len(self.hybrid)}
        for name, reps in (("hybrid", self.hybrid), ("optical", self.optical)):
            vals = np.array([getattr(r, metric) for r in reps], dtype=float)
            ok = vals[~np.isnan(vals)]
            out[f"{name}_mean"] = float(ok.mean()) if ok.size else math.nan
            # shifting by the first trial keeps identical trials at exactly zero variance
            out[f"{name}_var"] = float((ok - ok[0]).var()) if ok.size else math.nan
            out[f"{name}_undefined"] = int(np.isnan(vals).sum())
        return out


def subset_digest(indices) -> str:
    return hashlib.sha1(np.asarray(indices, dtype=np.int64).tobytes()).hexdigest()[:16]


def draw_subsets(total: int, n: int, trials: int, seed: int) -> list[np.ndarray]:
    """Trial t draws its day subset from its own seeded stream (order independent)."""
    if not 0 <= n <= total:
        raise ValueError(f"n_optical must lie in [0, {total}], got {n}")
    out = []
    for t in range(trials):
        rng = np.random.default_rng(np.random.SeedSequence([seed, n, t]))
        out.append(np.sort(rng.choice(total, size=n, replace=False)))
    return out


def ablate_optical(config, features, reference, n_optical: int, trials: int, seed: int = 0,
                   metric_fn=None) -> AblationResult:
    """Score hybrid and optical-only runs on shared random optical-day subsets.

    ``features`` must carry both the optical anomaly stack and the filtered SAR
    (see ``pipeline.compute_features`` in hybrid mode); the per-slice features
    do not depend on which other slices are kept, so they are computed once.
    ``reference`` is a boolean deforestation map.
    """
    from .pipeline import classify

    if features.optical is None or features.sar is None:
        raise ValueError("ablation needs optical and SAR features")
    total = features.optical.slices
    subsets = draw_subsets(total, n_optical, trials, seed)
    ref = np.asarray(reference, dtype=bool).ravel()
    hyb_cfg = replace(config, mode="hybrid", workers=1)
    opt_cfg = replace(config, mode="optical-only", workers=1)
    score = metric_fn or (lambda dm: compute_metrics(dm.confirm.ravel() >= 0, ref))

    def trial(idx):
        used_h, used_o = [], []
        h = score(classify(hyb_cfg, features, optical_subset=idx, consumed=used_h))
        o = score(classify(opt_cfg, features, optical_subset=idx, consumed=used_o))
        return h, o, subset_digest(used_h[0]), subset_digest(used_o[0])

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            res = list(pool.map(trial, subsets))
    else:
        res = [trial(s) for s in subsets]
    return AblationResult(n_optical, [r[0] for r in res], [r[1] for r in res],
                          [r[2] for r in res], [r[3] for r in res])
