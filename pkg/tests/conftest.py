"""Shared helpers for the test suite."""
import numpy as np
import pytest

import fbridge as fb


def spd(rng, n, base=0.4):
    """Random symmetric positive definite matrix with O(1) eigenvalues."""
    a = rng.standard_normal((n, n))
    return a @ a.T / n + base * np.eye(n)


def full_rank_rows(rng, m, d):
    """Random m x d readout matrix with full row rank."""
    while True:
        L = rng.standard_normal((m, d))
        if np.linalg.matrix_rank(L) == m:
            return L


def cubic_model():
    """Scalar nonlinear test model with state dependent dispersion.

    dX = (th0 X - th1 X^3) dt + th2 (1 + 0.25 cos X) dW.  Nothing about it
    is linear, so guided proposals under any linear auxiliary carry a
    genuinely nonzero path weight.
    """

    def drift(theta, t, x):
        return theta[0] * x - theta[1] * x ** 3

    def dispersion(theta, t, x):
        s = theta[2] * (1.0 + 0.25 * np.cos(x))
        return s[..., None]

    return fb.DiffusionModel("cubic-test", 1, 1, 3, drift, dispersion)


def position_velocity_model():
    """Smooth 2d linear model: position integrates velocity.

    dX1 = X2 dt + th0 dW1, dX2 = th1 dW2.  Observing the position
    component alone is strongly informative about the hidden velocity.
    """

    def drift(theta, t, x):
        out = np.zeros_like(x)
        out[..., 0] = x[..., 1]
        return out

    def dispersion(theta, t, x):
        s = np.diag([theta[0], theta[1]])
        shape = np.shape(x)[:-1] + (2, 2)
        return np.broadcast_to(s, shape)

    return fb.DiffusionModel("pv-test", 2, 2, 2, drift, dispersion,
                             additive_noise=True)


def pv_linear_aux(model, theta, t_match, x_match):
    """Exact linear form of the position-velocity model."""
    return fb.LinearAuxiliary.time_homogeneous(
        [0.0, 0.0], [[0.0, 1.0], [0.0, 0.0]],
        np.diag([theta[0], theta[1]]))


def random_interior_setup(rng, force_constant=None):
    """Random interior segment: dimensions, auxiliary, readout, anchors.

    Returns (spec, aux).  Half the draws use a driftless constant
    auxiliary, half a homogeneous one with a nonzero drift matrix, unless
    force_constant pins the choice.
    """
    d = int(rng.integers(1, 5))
    m = int(rng.integers(1, d + 1))
    t0 = float(rng.uniform(-0.5, 0.5))
    s = t0 + float(rng.uniform(0.4, 1.2))
    t1 = s + float(rng.uniform(0.4, 1.2))
    grid = np.sort(np.concatenate([
        [t0, s, t1],
        rng.uniform(t0, s, size=4),
        rng.uniform(s, t1, size=4),
    ]))
    beta = rng.standard_normal(d)
    sigma = np.linalg.cholesky(spd(rng, d))
    constant = bool(rng.integers(0, 2)) if force_constant is None else force_constant
    if constant:
        aux = fb.LinearAuxiliary.constant(beta, sigma)
    else:
        bmat = rng.standard_normal((d, d)) * 0.7
        aux = fb.LinearAuxiliary.time_homogeneous(beta, bmat, sigma)
    obs = fb.Observation(time=s, lmat=full_rank_rows(rng, m, d),
                         cov=spd(rng, m, base=0.3), value=rng.standard_normal(m))
    spec = fb.SegmentSpec("interior", grid, left_anchor=rng.standard_normal(d),
                          right_anchor=rng.standard_normal(d), obs=obs)
    return spec, aux


def random_end_setup(rng):
    """Random end segment spec and auxiliary."""
    d = int(rng.integers(1, 5))
    m = int(rng.integers(1, d + 1))
    t0 = float(rng.uniform(-0.5, 0.5))
    s = t0 + float(rng.uniform(0.5, 1.5))
    grid = np.sort(np.concatenate([[t0, s], rng.uniform(t0, s, size=6)]))
    beta = rng.standard_normal(d)
    sigma = np.linalg.cholesky(spd(rng, d))
    if rng.integers(0, 2):
        aux = fb.LinearAuxiliary.constant(beta, sigma)
    else:
        aux = fb.LinearAuxiliary.time_homogeneous(
            beta, rng.standard_normal((d, d)) * 0.7, sigma)
    obs = fb.Observation(time=s, lmat=full_rank_rows(rng, m, d),
                         cov=spd(rng, m, base=0.3), value=rng.standard_normal(m))
    spec = fb.SegmentSpec("end", grid, left_anchor=rng.standard_normal(d),
                          right_anchor=None, obs=obs)
    return spec, aux


def autocorr_time(x, max_lag=None):
    """Integrated autocorrelation time by the initial positive sequence."""
    x = np.asarray(x, float)
    n = x.shape[0]
    if max_lag is None:
        max_lag = min(n // 3, 2000)
    xc = x - x.mean()
    var = np.mean(xc * xc)
    if var == 0.0:
        return 1.0
    tau = 1.0
    for lag in range(1, max_lag):
        rho = np.mean(xc[:-lag] * xc[lag:]) / var
        if rho <= 0.0:
            break
        tau += 2.0 * rho
    return tau


def mc_se(x):
    """Autocorrelation-adjusted standard error of a chain mean."""
    x = np.asarray(x, float)
    tau = autocorr_time(x)
    return float(np.std(x) * np.sqrt(tau / x.shape[0]))


@pytest.fixture
def rng():
    return np.random.default_rng(20260814)
