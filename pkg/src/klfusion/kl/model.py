"""Nominal-state covariance eigenstructure and residual-subspace projection."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..raster import RasterStack
from .fill import FillStrategy, fill_values


class CovarianceError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class KlModel:
    """Truncated KL model over ``pixel_index`` (flat indices into a parent raster).

    Only eigenpairs that were computed are stored; ``eigenvectors`` may be thin
    (``n x r`` with ``r < n``) and the omitted eigenvalues are exactly zero.
    """

    mean: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    m: int
    pixel_index: np.ndarray
    fill_tag: str = "none"
    energy: float | None = None
    clamped_mass: float = 0.0
    sparse_pairs: int = 0
    _res_var: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        n, r = self.eigenvectors.shape
        if self.mean.shape != (n,) or self.eigenvalues.shape != (r,) or self.pixel_index.shape != (n,):
            raise ValueError("inconsistent KlModel shapes")
        if not 0 <= self.m <= n:
            raise ValueError(f"truncation m={self.m} outside [0, {n}]")
        if self._res_var is None:
            mm = min(self.m, r)
            tail = self.eigenvectors[:, mm:]
            object.__setattr__(self, "_res_var", (tail**2) @ self.eigenvalues[mm:])

    @property
    def n(self) -> int:
        return self.eigenvectors.shape[0]

    @property
    def rank(self) -> int:
        return self.eigenvectors.shape[1]

    def full_eigenvalues(self) -> np.ndarray:
        out = np.zeros(self.n)
        out[: self.rank] = self.eigenvalues
        return out

    @property
    def residual_variance(self) -> np.ndarray:
        """Per-pixel ``sum_{k>m} lambda_k phi_k[i]^2``."""
        return self._res_var

    def covariance(self) -> np.ndarray:
        return (self.eigenvectors * self.eigenvalues) @ self.eigenvectors.T

    def with_truncation(self, m: int | None = None, energy: float | None = None) -> "KlModel":
        if m is None:
            m = select_truncation(self.eigenvalues, 0.95 if energy is None else energy)
        m = int(min(m, self.n))
        return replace(self, m=m, energy=energy, _res_var=None)

    def restrict(self, available: np.ndarray) -> "KlModel":
        """Model for the subset of pixels flagged ``available`` (local boolean mask).

        The restricted covariance is the principal submatrix of this model's
        covariance; its eigenpairs come from a thin SVD of the square-root factor.
        """
        available = np.asarray(available, dtype=bool)
        if available.shape != (self.n,):
            raise ValueError("availability mask length differs from model size")
        if available.all():
            return self
        factor = self.eigenvectors[available] * np.sqrt(self.eigenvalues)
        vals, vecs = _factor_eigenpairs(factor)
        m = self.m if self.energy is None else select_truncation(vals, self.energy)
        m = min(m, int(available.sum()))
        return KlModel(
            mean=self.mean[available],
            eigenvalues=vals,
            eigenvectors=vecs,
            m=int(m),
            pixel_index=self.pixel_index[available],
            fill_tag=self.fill_tag,
            energy=self.energy,
        )


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    if vecs.size == 0:
        return vecs
    pivot = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[pivot, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


def _factor_eigenpairs(factor: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigenpairs of ``F F^T`` from the thin SVD of ``F`` (sorted descending)."""
    if factor.shape[1] == 0 or factor.shape[0] == 0:
        return np.zeros(0), np.zeros((factor.shape[0], 0))
    u, s, _ = np.linalg.svd(factor, full_matrices=False)
    return s**2, _fix_signs(u)


def select_truncation(eigenvalues: np.ndarray, energy_fraction: float) -> int:
    """Smallest ``m`` whose leading eigenvalues hold ``energy_fraction`` of the total."""
    if not 0.0 < energy_fraction < 1.0:
        raise ValueError("energy_fraction must lie in (0, 1)")
    lam = np.asarray(eigenvalues, dtype=np.float64)
    total = lam.sum()
    if total <= 0.0:
        return 0
    csum = np.cumsum(lam)
    return int(np.searchsorted(csum >= energy_fraction * total, True) + 1)


MAX_DENSE_PIXELS = 8192  # dense n x n covariance and overlap counts


def pairwise_covariance(samples: np.ndarray, missing: np.ndarray | None = None):
    """Pairwise-complete mean, covariance and overlap counts.

    ``samples`` is ``(slices, pixels)``. Entry ``C[i, j]`` averages centred
    products over the slices where both pixels are observed, divided by that
    count (population convention). Pairs with fewer than two overlapping slices
    are set to zero.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.shape[1] > MAX_DENSE_PIXELS:
        raise CovarianceError(f"{x.shape[1]} pixels exceed the dense pairwise limit of "
                              f"{MAX_DENSE_PIXELS}; use smaller tiles or a fill strategy")
    if missing is None:
        missing = np.isnan(x)
    obs = (~np.asarray(missing, dtype=bool)).astype(np.float64)
    n_obs = obs.sum(axis=0)
    empty = np.flatnonzero(n_obs == 0)
    if empty.size:
        raise CovarianceError(f"pixel(s) {empty.tolist()} have no training samples")
    xz = np.where(obs > 0, x, 0.0)
    mean = xz.sum(axis=0) / n_obs
    centred = (xz - mean) * obs
    counts = obs.T @ obs
    cov = (centred.T @ centred) / np.maximum(counts, 1.0)
    sparse = counts < 2
    cov[sparse] = 0.0
    cov = 0.5 * (cov + cov.T)
    return mean, cov, counts


def model_from_samples(samples: np.ndarray, missing: np.ndarray | None = None, *,
                       pixel_index: np.ndarray | None = None, fill_tag: str = "none",
                       energy: float | None = 0.95, m: int | None = None) -> KlModel:
    """Eigenstructure of ``(slices, pixels)`` samples.

    Complete data goes through a thin SVD of the centred sample matrix, which
    gives the nonzero eigenpairs of the population covariance exactly. Data with
    gaps uses the pairwise-complete covariance and a dense symmetric solver.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise CovarianceError("need at least two training slices")
    if missing is None:
        missing = np.isnan(x)
    missing = np.asarray(missing, dtype=bool)
    n = x.shape[1]
    if pixel_index is None:
        pixel_index = np.arange(n)
    clamped, sparse_pairs = 0.0, 0
    if not missing.any():
        mean = x.mean(axis=0)
        vals, vecs = _factor_eigenpairs(((x - mean) / np.sqrt(x.shape[0])).T)
        keep = min(vals.size, n)
        vals, vecs = vals[:keep], vecs[:, :keep]
    else:
        mean, cov, counts = pairwise_covariance(x, missing)
        sparse_pairs = int(np.count_nonzero(np.triu(counts < 2)))
        vals, vecs = np.linalg.eigh(cov)
        vals, vecs = vals[::-1], vecs[:, ::-1]
        neg = vals < 0
        clamped = float(-vals[neg].sum())
        vals = np.where(neg, 0.0, vals)
        vecs = _fix_signs(np.ascontiguousarray(vecs))
    if m is None:
        m = select_truncation(vals, energy if energy is not None else 0.95)
    else:
        energy = None
    return KlModel(mean, vals, vecs, int(min(m, n)), np.asarray(pixel_index), fill_tag, energy,
                   clamped, sparse_pairs)


def model_from_covariance(cov: np.ndarray, mean: np.ndarray | None = None, m: int = 0) -> KlModel:
    cov = np.asarray(cov, dtype=np.float64)
    vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
    vals, vecs = np.clip(vals[::-1], 0.0, None), _fix_signs(np.ascontiguousarray(vecs[:, ::-1]))
    n = cov.shape[0]
    return KlModel(np.zeros(n) if mean is None else np.asarray(mean, float), vals, vecs, m, np.arange(n))


def estimate_covariance(training: RasterStack, available: np.ndarray | None = None,
                        strategy: FillStrategy | None = None, *, energy: float | None = 0.95,
                        m: int | None = None) -> KlModel:
    """Model over the ``available`` pixels (2-D mask, default all) of a training stack.

    The fill strategy is applied to the whole stack before restriction.
    """
    strategy = strategy or FillStrategy("none")
    if training.slices < 2:
        raise CovarianceError("need at least two training slices")
    values, missing = fill_values(training.values, training.missing, training.days, strategy)
    x = values.reshape(training.slices, -1)
    mk = missing.reshape(training.slices, -1)
    if available is None:
        idx = np.arange(x.shape[1])
    else:
        idx = np.flatnonzero(np.asarray(available, dtype=bool).reshape(-1))
    return model_from_samples(x[:, idx], mk[:, idx], pixel_index=idx, fill_tag=strategy.tag,
                              energy=energy, m=m)


def project_residual(u: np.ndarray, model: KlModel, mask: np.ndarray | None = None) -> np.ndarray:
    """Residual ``w - Phi_m Phi_m^T w`` with ``w = u - mean``.

    ``mask`` flags missing entries of ``u``; those come back NaN and the model
    is restricted to the observed pixels first.
    """
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (model.n,):
        raise ValueError(f"observation of length {u.size} for a model over {model.n} pixels")
    if mask is None:
        mask = np.isnan(u)
    mask = np.asarray(mask, dtype=bool)
    out = np.full(model.n, np.nan)
    if mask.all():
        return out
    sub = model.restrict(~mask) if mask.any() else model
    w = u[~mask] - sub.mean
    basis = sub.eigenvectors[:, : sub.m]
    out[~mask] = w - basis @ (basis.T @ w)
    return out


def concentration_threshold(model: KlModel, pixel: int | None, alpha: float):
    """Chebyshev level ``alpha^{-1/2} sqrt(sum_{k>m} lambda_k phi_k[i]^2)``.

    ``pixel=None`` returns the vector over all model pixels.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    rv = np.clip(model.residual_variance, 0.0, None)
    level = np.sqrt(rv / alpha)
    return level if pixel is None else float(level[pixel])


# Model bundle: JSON header + little-endian float64 payload.

def save_models(path, models: list[KlModel], extra: dict | None = None) -> None:
    path = Path(path).with_suffix("")
    header = {"format": "kl-model-bundle", "version": 1, "models": [], **(extra or {})}
    chunks, offset = [], 0
    for mdl in models:
        arrays = [mdl.mean, mdl.eigenvalues, mdl.eigenvectors.reshape(-1), mdl.pixel_index.astype(np.float64)]
        size = sum(a.size for a in arrays)
        header["models"].append({
            "n": mdl.n, "rank": mdl.rank, "m": mdl.m, "energy": mdl.energy, "fill": mdl.fill_tag,
            "clamped_mass": mdl.clamped_mass, "sparse_pairs": mdl.sparse_pairs, "offset": offset,
        })
        chunks.extend(np.asarray(a, dtype="<f8") for a in arrays)
        offset += size
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path.with_suffix(".bin"), "wb") as fh:
        for c in chunks:
            fh.write(np.ascontiguousarray(c).tobytes())
    with open(path.with_suffix(".json"), "w") as fh:
        json.dump(header, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_models(path) -> tuple[list[KlModel], dict]:
    path = Path(path).with_suffix("")
    with open(path.with_suffix(".json")) as fh:
        header = json.load(fh)
    if header.get("format") != "kl-model-bundle":
        raise ValueError(f"{path}: not a KL model bundle")
    payload = np.fromfile(path.with_suffix(".bin"), dtype="<f8")
    models = []
    for h in header["models"]:
        n, r, o = h["n"], h["rank"], h["offset"]
        mean = payload[o:o + n]
        vals = payload[o + n:o + n + r]
        vecs = payload[o + n + r:o + n + r + n * r].reshape(n, r)
        idx = payload[o + n + r + n * r:o + 2 * n + r + n * r].astype(np.int64)
        models.append(KlModel(mean.copy(), vals.copy(), vecs.copy(), h["m"], idx, h["fill"], h["energy"],
                              h["clamped_mass"], h["sparse_pairs"]))
    return models, header
