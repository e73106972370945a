"""Reference computations used to validate the main machinery.

Everything here is deliberately independent of the kernel module: linear
transition moments come from matrix exponentials plus Gauss-Legendre
quadrature rather than the flow integrator, conditional moments come from
dense joint-Gaussian conditioning, and likelihoods come from a Kalman
filter.  Agreement between these routes and the guided machinery is what
the test suite leans on.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import expm

from .errors import ConfigError, NumericError
from .utils import as_matrix, as_vector, gauss_logpdf


def linear_transition_moments(bmat: np.ndarray, beta: np.ndarray,
                              amat: np.ndarray, dt: float, order: int = 24):
    """Exact moments of a constant-coefficient linear SDE over a lag dt.

    X_{t+dt} | X_t = x is Gaussian with mean Phi x + g and covariance K:

        Phi = expm(B dt),  g = int_0^dt expm(B s) beta ds,
        K = int_0^dt expm(B s) a expm(B' s) ds,

    with the integrals evaluated by Gauss-Legendre quadrature.
    """
    bmat = as_matrix(bmat)
    beta = as_vector(beta)
    amat = as_matrix(amat)
    d = beta.shape[0]
    phi = expm(bmat * dt)
    nodes, weights = np.polynomial.legendre.leggauss(order)
    s = 0.5 * dt * (nodes + 1.0)
    w = 0.5 * dt * weights
    g = np.zeros(d)
    k = np.zeros((d, d))
    for si, wi in zip(s, w):
        e = expm(bmat * si)
        g += wi * (e @ beta)
        k += wi * (e @ amat @ e.T)
    return phi, g, 0.5 * (k + k.T)


@dataclass
class LinearStateSpace:
    """Discrete-time linear Gaussian system aligned with observation times.

    trans_phis[i], trans_gains[i], trans_covs[i] describe the state
    transition from time i to i + 1; obs_lmats[i], obs_covs[i] the readout
    at time i.  There is one more readout than transitions.
    """

    trans_phis: list
    trans_gains: list
    trans_covs: list
    obs_lmats: list
    obs_covs: list

    def __post_init__(self):
        if len(self.obs_lmats) != len(self.trans_phis) + 1:
            raise ConfigError("need one more readout than transitions")
        if len(self.obs_covs) != len(self.obs_lmats):
            raise ConfigError("obs_lmats and obs_covs lengths differ")

    @property
    def n_intervals(self) -> int:
        return len(self.trans_phis)


def linear_ssm(bmat, beta, sigma, times: Sequence[float], lmats, covs,
               order: int = 24) -> LinearStateSpace:
    """State space form of a constant-coefficient linear SDE at given times."""
    bmat = as_matrix(bmat)
    beta = as_vector(beta)
    sigma = as_matrix(sigma)
    amat = sigma @ sigma.T
    times = np.asarray(times, dtype=float)
    phis, gains, kcovs = [], [], []
    for i in range(times.shape[0] - 1):
        p, g, k = linear_transition_moments(bmat, beta, amat,
                                            float(times[i + 1] - times[i]), order)
        phis.append(p)
        gains.append(g)
        kcovs.append(k)
    return LinearStateSpace(phis, gains, kcovs,
                            [as_matrix(L) for L in lmats],
                            [as_matrix(S) for S in covs])


def kalman_loglik(ssm: LinearStateSpace, values: Sequence[np.ndarray],
                  prior_mean, prior_cov) -> float:
    """Marginal log likelihood of the readout values under the system.

    Standard predict/update recursion with Joseph-form covariance updates
    for numerical symmetry.  An empty value list gives 0.
    """
    values = [as_vector(v) for v in values]
    if not values:
        return 0.0
    if len(values) != len(ssm.obs_lmats):
        raise ConfigError("value count does not match the readout count")
    mean = as_vector(prior_mean).copy()
    cov = as_matrix(prior_cov).copy()
    d = mean.shape[0]
    ll = 0.0
    for i, v in enumerate(values):
        L, S = ssm.obs_lmats[i], ssm.obs_covs[i]
        innov_cov = L @ cov @ L.T + S
        resid = v - L @ mean
        ll += gauss_logpdf(resid, innov_cov)
        gain = np.linalg.solve(innov_cov, L @ cov).T
        mean = mean + gain @ resid
        imkl = np.eye(d) - gain @ L
        cov = imkl @ cov @ imkl.T + gain @ S @ gain.T
        cov = 0.5 * (cov + cov.T)
        if i < ssm.n_intervals:
            phi, g, k = ssm.trans_phis[i], ssm.trans_gains[i], ssm.trans_covs[i]
            mean = phi @ mean + g
            cov = phi @ cov @ phi.T + k
            cov = 0.5 * (cov + cov.T)
    return float(ll)


def linear_smoother(ssm: LinearStateSpace, values: Sequence[np.ndarray],
                    prior_mean, prior_cov):
    """Exact posterior of the states at all times given all readouts.

    Assembles the dense joint Gaussian of the state stack and conditions
    on the stacked readouts.  Meant for desk-scale problems; returns
    per-time marginal means (n + 1, d) and covariances (n + 1, d, d).
    """
    values = [as_vector(v) for v in values]
    n = ssm.n_intervals
    if len(values) != n + 1:
        raise ConfigError("value count does not match the readout count")
    mean0 = as_vector(prior_mean)
    d = mean0.shape[0]
    nn = (n + 1) * d
    mean = np.zeros(nn)
    cov = np.zeros((nn, nn))
    mean[:d] = mean0
    cov[:d, :d] = as_matrix(prior_cov)
    for i in range(n):
        phi, g, k = ssm.trans_phis[i], ssm.trans_gains[i], ssm.trans_covs[i]
        lo, hi = i * d, (i + 1) * d
        mean[hi:hi + d] = phi @ mean[lo:hi] + g
        cov[hi:hi + d, :hi] = phi @ cov[lo:hi, :hi]
        cov[:hi, hi:hi + d] = cov[hi:hi + d, :hi].T
        cov[hi:hi + d, hi:hi + d] = phi @ cov[lo:hi, lo:hi] @ phi.T + k
    m_total = sum(L.shape[0] for L in ssm.obs_lmats)
    lbig = np.zeros((m_total, nn))
    sbig = np.zeros((m_total, m_total))
    vbig = np.zeros(m_total)
    row = 0
    for i, (L, S, v) in enumerate(zip(ssm.obs_lmats, ssm.obs_covs, values)):
        m = L.shape[0]
        lbig[row:row + m, i * d:(i + 1) * d] = L
        sbig[row:row + m, row:row + m] = S
        vbig[row:row + m] = v
        row += m
    obs_cov = lbig @ cov @ lbig.T + sbig
    cross = cov @ lbig.T
    try:
        gain = np.linalg.solve(obs_cov, cross.T).T
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"readout covariance singular in the smoother: {exc}") \
            from exc
    post_mean = mean + gain @ (vbig - lbig @ mean)
    post_cov = cov - gain @ cross.T
    means = post_mean.reshape(n + 1, d)
    covs = np.empty((n + 1, d, d))
    for i in range(n + 1):
        blk = post_cov[i * d:(i + 1) * d, i * d:(i + 1) * d]
        covs[i] = 0.5 * (blk + blk.T)
    return means, covs


def dense_obs_loglik(ssm: LinearStateSpace, values: Sequence[np.ndarray],
                     prior_mean, prior_cov) -> float:
    """Readout log likelihood by one dense joint-Gaussian evaluation.

    Same quantity as :func:`kalman_loglik`, computed without any
    recursion: the stacked readouts are jointly Gaussian with moments
    assembled from the state stack.
    """
    values = [as_vector(v) for v in values]
    n = ssm.n_intervals
    if len(values) != n + 1:
        raise ConfigError("value count does not match the readout count")
    mean0 = as_vector(prior_mean)
    d = mean0.shape[0]
    nn = (n + 1) * d
    mean = np.zeros(nn)
    cov = np.zeros((nn, nn))
    mean[:d] = mean0
    cov[:d, :d] = as_matrix(prior_cov)
    for i in range(n):
        phi, g, k = ssm.trans_phis[i], ssm.trans_gains[i], ssm.trans_covs[i]
        lo, hi = i * d, (i + 1) * d
        mean[hi:hi + d] = phi @ mean[lo:hi] + g
        cov[hi:hi + d, :hi] = phi @ cov[lo:hi, :hi]
        cov[:hi, hi:hi + d] = cov[hi:hi + d, :hi].T
        cov[hi:hi + d, hi:hi + d] = phi @ cov[lo:hi, lo:hi] @ phi.T + k
    m_total = sum(L.shape[0] for L in ssm.obs_lmats)
    lbig = np.zeros((m_total, nn))
    sbig = np.zeros((m_total, m_total))
    vbig = np.zeros(m_total)
    row = 0
    for i, (L, S, v) in enumerate(zip(ssm.obs_lmats, ssm.obs_covs, values)):
        m = L.shape[0]
        lbig[row:row + m, i * d:(i + 1) * d] = L
        sbig[row:row + m, row:row + m] = S
        vbig[row:row + m] = v
        row += m
    return gauss_logpdf(vbig - lbig @ mean, lbig @ cov @ lbig.T + sbig)


def conditioned_mid_moments(bmat, beta, sigma, x0, t0: float, s: float,
                            t_end: float, lmat, obs_cov, v, x_end,
                            order: int = 24):
    """Gaussian law of X_s given X_{t0} = x0, a noisy readout at s, and
    X_{t_end} = x_end, for a constant-coefficient linear SDE.

    Derived by conditioning the joint Gaussian of (X_s, readout, X_end);
    an independent check of what the guided kernels encode.
    """
    bmat, sigma = as_matrix(bmat), as_matrix(sigma)
    beta, x0 = as_vector(beta), as_vector(x0)
    lmat = as_matrix(lmat)
    obs_cov = as_matrix(obs_cov)
    v, x_end = as_vector(v), as_vector(x_end)
    amat = sigma @ sigma.T
    p1, g1, k1 = linear_transition_moments(bmat, beta, amat, s - t0, order)
    p2, g2, k2 = linear_transition_moments(bmat, beta, amat, t_end - s, order)
    m1 = p1 @ x0 + g1
    d = m1.shape[0]
    m = lmat.shape[0]
    obs_mean = np.concatenate([lmat @ m1, p2 @ m1 + g2])
    cross = np.hstack([k1 @ lmat.T, k1 @ p2.T])
    oo = np.empty((m + d, m + d))
    oo[:m, :m] = lmat @ k1 @ lmat.T + obs_cov
    oo[:m, m:] = lmat @ k1 @ p2.T
    oo[m:, :m] = oo[:m, m:].T
    oo[m:, m:] = p2 @ k1 @ p2.T + k2
    gain = np.linalg.solve(oo, cross.T).T
    resid = np.concatenate([v, x_end]) - obs_mean
    mean = m1 + gain @ resid
    cov = k1 - gain @ cross.T
    return mean, 0.5 * (cov + cov.T)


def rejection_bridge_sampler(bmat, beta, sigma, x0, t0: float, s: float,
                             t_end: float, lmat, obs_cov, v, x_end,
                             n_samples: int, rng: np.random.Generator,
                             batch: int = 4096, max_batches: int = 10000):
    """Draws of X_s given endpoint and mid readout, by forward rejection.

    Proposes X_s from the unconditioned transition law and accepts with
    probability proportional to the readout density at v times the
    transition density to x_end.  Needs a positive definite readout
    noise.  Returns (samples, acceptance_rate).
    """
    bmat, sigma = as_matrix(bmat), as_matrix(sigma)
    beta, x0 = as_vector(beta), as_vector(x0)
    lmat, obs_cov = as_matrix(lmat), as_matrix(obs_cov)
    v, x_end = as_vector(v), as_vector(x_end)
    amat = sigma @ sigma.T
    p1, g1, k1 = linear_transition_moments(bmat, beta, amat, s - t0)
    p2, g2, k2 = linear_transition_moments(bmat, beta, amat, t_end - s)
    m1 = p1 @ x0 + g1
    d = m1.shape[0]
    try:
        c1 = np.linalg.cholesky(k1)
        ci_obs = np.linalg.cholesky(obs_cov)
        ci_end = np.linalg.cholesky(k2)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"rejection sampler needs positive definite "
                           f"covariances: {exc}") from exc
    def logpdf_many(resid, chol):
        alpha = np.linalg.solve(chol, resid.T).T
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        k = resid.shape[1]
        return -0.5 * (k * np.log(2 * np.pi) + logdet + np.sum(alpha ** 2, axis=1))
    log_bound = (-0.5 * lmat.shape[0] * np.log(2 * np.pi)
                 - np.sum(np.log(np.diag(ci_obs)))
                 - 0.5 * d * np.log(2 * np.pi)
                 - np.sum(np.log(np.diag(ci_end))))
    out = []
    n_kept = 0
    n_tried = 0
    for _ in range(max_batches):
        z = rng.standard_normal((batch, d))
        xs = m1[None] + z @ c1.T
        lw = logpdf_many(v[None] - xs @ lmat.T, ci_obs)
        lw = lw + logpdf_many(x_end[None] - (xs @ p2.T + g2[None]), ci_end)
        u = rng.uniform(size=batch)
        keep = np.log(u) < lw - log_bound
        out.append(xs[keep])
        n_kept += int(keep.sum())
        n_tried += batch
        if n_kept >= n_samples:
            break
        if n_tried >= 50 * batch and n_kept / n_tried < 1e-6:
            raise NumericError("rejection sampler acceptance rate below 1e-6")
    if n_kept < n_samples:
        raise NumericError(f"rejection sampler got only {n_kept} of "
                           f"{n_samples} draws")
    samples = np.concatenate(out, axis=0)[:n_samples]
    return samples, n_kept / n_tried


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray,
                     h: float = 1e-5) -> np.ndarray:
    """Central difference gradient of a scalar function."""
    x = as_vector(x).copy()
    g = np.empty_like(x)
    for i in range(x.shape[0]):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2.0 * h)
    return g


def finite_diff_hess(f: Callable[[np.ndarray], float], x: np.ndarray,
                     h: float = 1e-4) -> np.ndarray:
    """Central difference Hessian of a scalar function, symmetrized."""
    x = as_vector(x).copy()
    n = x.shape[0]
    hess = np.empty((n, n))
    f0 = f(x)
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = h
        hess[i, i] = (f(x + ei) - 2.0 * f0 + f(x - ei)) / h ** 2
        for j in range(i + 1, n):
            ej = np.zeros(n)
            ej[j] = h
            hess[i, j] = (f(x + ei + ej) - f(x + ei - ej)
                          - f(x - ei + ej) + f(x - ei - ej)) / (4.0 * h ** 2)
            hess[j, i] = hess[i, j]
    return 0.5 * (hess + hess.T)
