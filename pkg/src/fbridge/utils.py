"""Small numeric helpers used across modules."""
from __future__ import annotations

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import NumericError

LOG_2PI = float(np.log(2.0 * np.pi))


def as_vector(x, dim: int | None = None, name: str = "x") -> np.ndarray:
    """Coerce to a 1-d float array, optionally checking its length."""
    v = np.atleast_1d(np.asarray(x, dtype=float))
    if v.ndim != 1:
        raise ValueError(f"{name} must be one dimensional, got shape {v.shape}")
    if dim is not None and v.shape[0] != dim:
        raise ValueError(f"{name} must have length {dim}, got {v.shape[0]}")
    return v


def as_matrix(x, shape: tuple[int, int] | None = None, name: str = "x") -> np.ndarray:
    """Coerce to a 2-d float array, optionally checking its shape."""
    m = np.atleast_2d(np.asarray(x, dtype=float))
    if shape is not None and m.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {m.shape}")
    return m


def gauss_logpdf(resid: np.ndarray, cov: np.ndarray) -> float:
    """Log density of N(0, cov) at ``resid`` for a positive definite ``cov``."""
    resid = np.atleast_1d(resid)
    cov = np.atleast_2d(cov)
    try:
        factor = cho_factor(cov, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"covariance not positive definite: {exc}") from exc
    alpha = cho_solve(factor, resid)
    logdet = 2.0 * np.sum(np.log(np.diag(factor[0])))
    k = resid.shape[0]
    return float(-0.5 * (k * LOG_2PI + logdet + resid @ alpha))


def sample_gaussian(rng: np.random.Generator, mean: np.ndarray,
                    cov: np.ndarray) -> np.ndarray:
    """Draw from N(mean, cov), tolerating a singular covariance.

    Uses a symmetric eigendecomposition so point masses and rank
    deficient covariances (noiseless observation limits) are handled.
    """
    mean = np.atleast_1d(mean)
    cov = np.atleast_2d(cov)
    w, v = np.linalg.eigh(0.5 * (cov + cov.T))
    w = np.clip(w, 0.0, None)
    z = rng.standard_normal(mean.shape[0])
    return mean + v @ (np.sqrt(w) * z)


def min_norm_preimage(lmat: np.ndarray, value: np.ndarray) -> np.ndarray:
    """Minimum norm solution u of L u = value for full row rank L."""
    lmat = np.atleast_2d(lmat)
    value = np.atleast_1d(value)
    sol, *_ = np.linalg.lstsq(lmat, value, rcond=None)
    return sol


def spawn_rng(seed: int, *path: int) -> np.random.Generator:
    """Deterministic counter-based stream keyed by (seed, path).

    Streams for distinct paths are statistically independent and do not
    depend on how many draws other streams have consumed, which keeps
    chain traces reproducible regardless of update scheduling.
    """
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(seq))


def check_finite(arr: np.ndarray, context: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values encountered in {context}")
