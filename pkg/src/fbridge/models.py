"""Diffusion models, linear auxiliaries, and observation schemes.

A diffusion is described by a drift b(theta, t, x) and a dispersion
sigma(theta, t, x).  Conditioning machinery elsewhere in the package only
needs these two callables plus the derived diffusivity a = sigma sigma'.
Observation schemes attach noisy linear readouts V_i = L_i X_{t_i} + eta_i
with eta_i ~ N(0, Sigma_i) to an increasing set of times.

Drift and dispersion callables must broadcast over leading axes of x:
x with shape (..., d) maps to drift (..., d) and dispersion (..., d, d').
The time argument is either a scalar or an array matching those leading
axes (models that ignore t, the common case, get this for free).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, NumericError
from .utils import as_matrix, as_vector


@dataclass(frozen=True)
class DiffusionModel:
    """A diffusion dX = b(theta, t, X) dt + sigma(theta, t, X) dW.

    Inputs
    ------
    name : short identifier used in configs and traces.
    dim_state, dim_noise : dimensions d and d' of X and W.
    parameter_dim : length of the parameter vector theta.
    drift : callable (theta, t, x) -> (..., d) array.
    dispersion : callable (theta, t, x) -> (..., d, d') array.
    additive_noise : set when sigma does not depend on x, which lets the
        simulation loops evaluate it once per grid instead of per step.
    """

    name: str
    dim_state: int
    dim_noise: int
    parameter_dim: int
    drift: Callable[[np.ndarray, float, np.ndarray], np.ndarray]
    dispersion: Callable[[np.ndarray, float, np.ndarray], np.ndarray]
    additive_noise: bool = False

    def diffusivity(self, theta: np.ndarray, t, x: np.ndarray) -> np.ndarray:
        """a = sigma sigma', batched over leading axes of x."""
        s = self.dispersion(theta, t, x)
        return np.einsum("...ij,...kj->...ik", s, s)


class LinearAuxiliary:
    """A linear process dX = (beta(t) + B(t) X) dt + sigma(t) dW.

    Plays the role of the tractable stand-in whose conditional kernels are
    Gaussian and available in closed form.  ``is_constant`` is true when
    beta and sigma are time independent and B is identically zero; that
    regime has fully explicit conditioning formulas and a fast path in the
    kernel builder.
    """

    def __init__(self, dim_state: int, dim_noise: int,
                 beta: Callable[[float], np.ndarray],
                 bmat: Callable[[float], np.ndarray],
                 sigma: Callable[[float], np.ndarray],
                 is_constant: bool = False,
                 is_homogeneous: bool = False):
        self.dim_state = int(dim_state)
        self.dim_noise = int(dim_noise)
        self._beta = beta
        self._bmat = bmat
        self._sigma = sigma
        self.is_constant = bool(is_constant)
        # constant coefficients but possibly nonzero B: exponential flow
        self.is_homogeneous = bool(is_homogeneous or is_constant)

    @classmethod
    def constant(cls, beta, sigma) -> "LinearAuxiliary":
        """Auxiliary with constant beta and sigma and B identically zero."""
        beta_v = as_vector(beta, name="beta")
        sigma_m = as_matrix(sigma, name="sigma")
        d = beta_v.shape[0]
        if sigma_m.shape[0] != d:
            raise ConfigError("beta and sigma disagree on the state dimension")
        zero = np.zeros((d, d))
        return cls(d, sigma_m.shape[1],
                   beta=lambda t: beta_v, bmat=lambda t: zero,
                   sigma=lambda t: sigma_m, is_constant=True)

    @classmethod
    def time_homogeneous(cls, beta, bmat, sigma) -> "LinearAuxiliary":
        """Auxiliary with constant coefficients, B possibly nonzero."""
        beta_v = as_vector(beta, name="beta")
        d = beta_v.shape[0]
        bmat_m = as_matrix(bmat, shape=(d, d), name="bmat")
        sigma_m = as_matrix(sigma, name="sigma")
        const = bool(np.all(bmat_m == 0.0))
        return cls(d, sigma_m.shape[1],
                   beta=lambda t: beta_v, bmat=lambda t: bmat_m,
                   sigma=lambda t: sigma_m,
                   is_constant=const, is_homogeneous=True)

    def beta(self, t: float) -> np.ndarray:
        return np.asarray(self._beta(t), dtype=float)

    def bmat(self, t: float) -> np.ndarray:
        return np.asarray(self._bmat(t), dtype=float)

    def sigma(self, t: float) -> np.ndarray:
        return np.asarray(self._sigma(t), dtype=float)

    def a(self, t: float) -> np.ndarray:
        s = self.sigma(t)
        return s @ s.T

    def drift(self, t: float, x: np.ndarray) -> np.ndarray:
        return self.beta(t) + x @ self.bmat(t).T


@dataclass(frozen=True)
class Observation:
    """One noisy linear readout v = L x + eta at a fixed time."""

    time: float
    lmat: np.ndarray
    cov: np.ndarray
    value: np.ndarray

    @property
    def dim(self) -> int:
        return self.lmat.shape[0]


class ObservationScheme:
    """Times t_0 < ... < t_n with per-time readout matrices and noise.

    Inputs
    ------
    times : increasing sequence of observation times, length n + 1.
    lmats : per-time readout matrices L_i, each m_i x d with full row rank.
    covs : per-time noise covariances Sigma_i, each m_i x m_i, symmetric
        positive semidefinite (zero means a noiseless readout).
    values : optional per-time observed vectors V_i.
    """

    def __init__(self, times: Sequence[float], lmats: Sequence[np.ndarray],
                 covs: Sequence[np.ndarray], values: Sequence[np.ndarray] | None = None):
        self.times = np.asarray(times, dtype=float)
        if self.times.ndim != 1 or self.times.shape[0] < 2:
            raise ConfigError("need at least two observation times")
        if not np.all(np.diff(self.times) > 0):
            raise ConfigError("observation times must be strictly increasing")
        n1 = self.times.shape[0]
        if len(lmats) != n1 or len(covs) != n1:
            raise ConfigError("lmats and covs must match the number of times")
        self.lmats = [as_matrix(L, name=f"L[{i}]") for i, L in enumerate(lmats)]
        d = self.lmats[0].shape[1]
        self.dim_state = d
        self.covs = []
        for i, (L, S) in enumerate(zip(self.lmats, covs)):
            m = L.shape[0]
            if L.shape[1] != d:
                raise ConfigError(f"L[{i}] disagrees on the state dimension")
            if m > d or np.linalg.matrix_rank(L) < m:
                raise ConfigError(f"L[{i}] must have full row rank m <= d")
            S = as_matrix(S, shape=(m, m), name=f"Sigma[{i}]")
            if not np.allclose(S, S.T):
                raise ConfigError(f"Sigma[{i}] must be symmetric")
            if np.any(np.linalg.eigvalsh(S) < -1e-12):
                raise ConfigError(f"Sigma[{i}] must be positive semidefinite")
            self.covs.append(S)
        self.values: list[np.ndarray] | None
        if values is None:
            self.values = None
        else:
            if len(values) != n1:
                raise ConfigError("values must match the number of times")
            self.values = [as_vector(v, dim=self.lmats[i].shape[0], name=f"V[{i}]")
                           for i, v in enumerate(values)]

    @property
    def n_intervals(self) -> int:
        return self.times.shape[0] - 1

    def observation(self, i: int) -> Observation:
        if self.values is None:
            raise ConfigError("observation scheme carries no values")
        return Observation(time=float(self.times[i]), lmat=self.lmats[i],
                           cov=self.covs[i], value=self.values[i])

    def with_values(self, values: Sequence[np.ndarray]) -> "ObservationScheme":
        return ObservationScheme(self.times, self.lmats, self.covs, values)

    def with_covs(self, covs: Sequence[np.ndarray]) -> "ObservationScheme":
        return ObservationScheme(self.times, self.lmats, covs, self.values)


@dataclass(frozen=True)
class StartPrior:
    """Gaussian prior N(mean, cov) on the initial state."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", as_vector(self.mean, name="mean"))
        d = self.mean.shape[0]
        object.__setattr__(self, "cov", as_matrix(self.cov, shape=(d, d), name="cov"))


@dataclass
class PathSegment:
    """States on one time grid: values[k] is the state at grid[k]."""

    grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if self.values.shape[0] != self.grid.shape[0]:
            raise ConfigError("grid and values disagree on the number of nodes")

    def copy(self) -> "PathSegment":
        return PathSegment(self.grid.copy(), self.values.copy())


def make_grid(t0: float, t1: float, steps: int) -> np.ndarray:
    """Uniform grid with ``steps`` cells from t0 to t1 inclusive."""
    if not t1 > t0:
        raise ConfigError("grid endpoints must satisfy t1 > t0")
    if steps < 1:
        raise ConfigError("need at least one step")
    return np.linspace(t0, t1, steps + 1)


def join_grids(left: np.ndarray, right: np.ndarray) -> np.ndarray:
    """Concatenate two grids sharing one node at the junction."""
    if abs(left[-1] - right[0]) > 1e-12:
        raise ConfigError("grids do not share their junction node")
    return np.concatenate([left, right[1:]])


def simulate_euler(model: DiffusionModel, theta: np.ndarray, x0: np.ndarray,
                   grid: np.ndarray, rng: np.random.Generator | None = None,
                   noise: np.ndarray | None = None) -> PathSegment:
    """Forward Euler simulation of the unconditioned diffusion on a grid.

    Either ``rng`` (increments drawn as N(0, dt I)) or ``noise`` (an array
    of shape (len(grid) - 1, dim_noise) of Brownian increments) must be
    supplied.
    """
    grid = np.asarray(grid, dtype=float)
    theta = as_vector(theta, name="theta")
    x = as_vector(x0, dim=model.dim_state, name="x0").copy()
    n_cells = grid.shape[0] - 1
    if noise is None:
        if rng is None:
            raise ConfigError("simulate_euler needs an rng or explicit noise")
        dts = np.diff(grid)
        noise = rng.standard_normal((n_cells, model.dim_noise)) * np.sqrt(dts)[:, None]
    else:
        noise = np.asarray(noise, dtype=float)
        if noise.shape != (n_cells, model.dim_noise):
            raise ConfigError("noise must have shape (len(grid) - 1, dim_noise)")
    out = np.empty((n_cells + 1, model.dim_state))
    out[0] = x
    for k in range(n_cells):
        t = grid[k]
        dt = grid[k + 1] - grid[k]
        b = model.drift(theta, t, x)
        s = model.dispersion(theta, t, x)
        x = x + b * dt + s @ noise[k]
        if not np.all(np.isfinite(x)):
            raise NumericError(f"euler state became non-finite at time {grid[k + 1]:g}")
        out[k + 1] = x
    return PathSegment(grid, out)


def sample_observations(path: PathSegment, scheme: ObservationScheme,
                        rng: np.random.Generator) -> ObservationScheme:
    """Attach simulated values V_i = L_i X_{t_i} + eta_i to a scheme.

    The path must contain every observation time as a grid node.
    """
    values = []
    for i, t in enumerate(scheme.times):
        idx = int(np.argmin(np.abs(path.grid - t)))
        if abs(path.grid[idx] - t) > 1e-9:
            raise ConfigError(f"path grid has no node at observation time {t:g}")
        x = path.values[idx]
        L, S = scheme.lmats[i], scheme.covs[i]
        eta = np.zeros(L.shape[0])
        if np.any(S):
            w, v = np.linalg.eigh(S)
            eta = v @ (np.sqrt(np.clip(w, 0.0, None)) * rng.standard_normal(L.shape[0]))
        values.append(L @ x + eta)
    return scheme.with_values(values)


# ---------------------------------------------------------------------------
# model registry


_REGISTRY: dict[str, Callable[..., DiffusionModel]] = {}


def register_model(name: str, factory: Callable[..., DiffusionModel]) -> None:
    """Register a model factory under a string key."""
    _REGISTRY[name] = factory


def make_model(name: str, **kwargs) -> DiffusionModel:
    """Instantiate a registered model by name."""
    try:
        factory = _REGISTRY[name]
    except KeyError:
        known = ", ".join(sorted(_REGISTRY))
        raise ConfigError(f"unknown model '{name}' (known: {known})") from None
    return factory(**kwargs)


def _make_bm(dim: int = 1) -> DiffusionModel:
    """Brownian motion with constant drift theta and unit dispersion."""
    d = int(dim)
    eye = np.eye(d)

    def drift(theta, t, x):
        return np.broadcast_to(theta, x.shape if x.ndim else (d,))

    def dispersion(theta, t, x):
        shape = np.shape(x)[:-1] + (d, d)
        return np.broadcast_to(eye, shape)

    return DiffusionModel("bm", d, d, d, drift, dispersion,
                          additive_noise=True)


def _make_ou() -> DiffusionModel:
    """Scalar mean-reverting model dX = th1 (th2 - X) dt + th3 dW."""

    def drift(theta, t, x):
        return theta[0] * (theta[1] - x)

    def dispersion(theta, t, x):
        shape = np.shape(x)[:-1] + (1, 1)
        return np.broadcast_to(np.array([[1.0]]) * theta[2], shape)

    return DiffusionModel("ou", 1, 1, 3, drift, dispersion,
                          additive_noise=True)


def _make_2d_bm() -> DiffusionModel:
    """Planar Brownian motion with drift theta, unit dispersion."""
    return DiffusionModel("2d-bm", 2, 2, 2, _make_bm(2).drift,
                          _make_bm(2).dispersion, additive_noise=True)


register_model("bm", _make_bm)
register_model("ou", _make_ou)
register_model("2d-bm", _make_2d_bm)


def auto_auxiliary(model: DiffusionModel, theta: np.ndarray, t_match: float,
                   x_match: np.ndarray) -> LinearAuxiliary:
    """Default auxiliary: driftless, dispersion frozen at a matching point.

    Freezing sigma at the anchor the proposal is steered toward keeps the
    absolute continuity requirement (matching diffusivity at the pinned
    endpoint) satisfied automatically.
    """
    s = np.atleast_2d(model.dispersion(np.asarray(theta, float), t_match,
                                       np.asarray(x_match, float)))
    return LinearAuxiliary.constant(np.zeros(model.dim_state), s)


_LINEARIZERS: dict[str, Callable[[np.ndarray], LinearAuxiliary]] = {}


def register_linearizer(name: str,
                        fn: Callable[[np.ndarray], LinearAuxiliary]) -> None:
    """Register the exact linear form of a (linear) model, keyed by name."""
    _LINEARIZERS[name] = fn


def model_linear_auxiliary(model: DiffusionModel, theta: np.ndarray,
                           t_match: float, x_match: np.ndarray) -> LinearAuxiliary:
    """Auxiliary equal to the model itself, for models that are linear.

    With this choice the guided proposal is exact (its path weight
    vanishes identically), which makes it the right default for linear
    models and a sharp self-test elsewhere.
    """
    try:
        fn = _LINEARIZERS[model.name]
    except KeyError:
        raise ConfigError(f"no linear form registered for model '{model.name}'") \
            from None
    return fn(as_vector(theta))


register_linearizer("bm", lambda th: LinearAuxiliary.constant(th, np.eye(th.shape[0])))
register_linearizer("2d-bm",
                    lambda th: LinearAuxiliary.constant(th, np.eye(2)))
register_linearizer("ou", lambda th: LinearAuxiliary.time_homogeneous(
    [th[0] * th[1]], [[-th[0]]], [[th[2]]]))
