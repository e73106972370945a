"""Guided forward simulation, innovation maps, and path weights.

A proposal path on a segment is a deterministic function of its driving
Brownian increments (the innovations) once the kernel is fixed:

    X_{k+1} = X_k + [b(theta, s_k, X_k) + a(theta, s_k, X_k) r(s_k, X_k)] dt_k
              + sigma(theta, s_k, X_k) dZ_k,

with the right edge overwritten by the segment anchor where one exists.
The innovations can be recovered from a stored path by inverting each
Euler cell, which is what lets parameter updates move the path and the
parameter jointly while keeping the innovations fixed.

The weight of a path against the target bridge is exp(log_psi) with
log_psi a left-point Riemann sum of

    G(s, x) = (b - b_aux)' r - tr((a - a_aux) (H - r r')) / 2

over the segment, the right edge excluded.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ProposalFailure
from .kernels import GuidedKernel
from .models import DiffusionModel, PathSegment, StartPrior
from .utils import as_vector, gauss_logpdf

_GRID_ATOL = 1e-12


@dataclass
class InnovationSegment:
    """Brownian increments driving one segment: increments[k] covers
    the cell from grid[k] to grid[k + 1]."""

    grid: np.ndarray
    increments: np.ndarray

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        self.increments = np.atleast_2d(np.asarray(self.increments, dtype=float))
        if self.increments.shape[0] != self.grid.shape[0] - 1:
            raise ConfigError("need one increment per grid cell")


def fresh_innovations(grid: np.ndarray, dim_noise: int,
                      rng: np.random.Generator) -> InnovationSegment:
    """Draw increments with the Brownian scaling N(0, dt I) per cell."""
    grid = np.asarray(grid, dtype=float)
    dts = np.diff(grid)
    inc = rng.standard_normal((dts.shape[0], dim_noise)) * np.sqrt(dts)[:, None]
    return InnovationSegment(grid, inc)


def pcn_refresh(z: InnovationSegment, rho: float,
                rng: np.random.Generator) -> InnovationSegment:
    """Crank-Nicolson style refresh sqrt(rho) z + sqrt(1 - rho) w.

    rho = 0 redraws the innovations outright; values near 1 make small
    moves.  The Brownian increment law is preserved for any rho in [0, 1).
    """
    if not 0.0 <= rho < 1.0:
        raise ConfigError("rho must lie in [0, 1)")
    fresh = fresh_innovations(z.grid, z.increments.shape[1], rng)
    inc = np.sqrt(rho) * z.increments + np.sqrt(1.0 - rho) * fresh.increments
    return InnovationSegment(z.grid, inc)


def _check_grids(a: np.ndarray, b: np.ndarray):
    if a is b:
        return
    if a.shape != b.shape or not np.allclose(a, b, rtol=0.0, atol=_GRID_ATOL):
        raise ConfigError("innovation grid does not match the kernel grid")


def forward_guided(model: DiffusionModel, theta: np.ndarray,
                   kernel: GuidedKernel, z: InnovationSegment,
                   x0: np.ndarray | None = None) -> PathSegment:
    """Map innovations to a guided path on the kernel's grid.

    ``x0`` must be given for start segments (their spec holds a prior,
    not a state); elsewhere it defaults to the segment's left anchor.
    Pinned edges are written exactly: the right anchor for interior and
    start segments, the readout preimage for end segments with an exact
    square readout, and likewise the mid readout node of interior
    segments when the mid readout is exact.

    Raises ProposalFailure if the state leaves the finite range.
    """
    _check_grids(z.grid, kernel.grid)
    theta = as_vector(theta, name="theta")
    if x0 is None:
        la = kernel.spec.left_anchor
        if la is None or isinstance(la, StartPrior):
            raise ConfigError("this segment kind needs an explicit x0")
        x0 = la
    x = as_vector(x0, dim=model.dim_state, name="x0").copy()
    grid = kernel.grid
    n_cells = grid.shape[0] - 1
    out = np.empty((n_cells + 1, model.dim_state))
    out[0] = x
    pull_f, pull_h = kernel.pull_f, kernel.pull_H
    hard_mid = kernel.hard_mid_state
    mid_idx = kernel.s_idx if kernel.kind == "interior" else None
    dts = np.diff(grid)
    if model.additive_noise:
        lefts = np.broadcast_to(x, (n_cells, x.shape[0]))
        s_nodes = model.dispersion(theta, grid[:-1], lefts)
        a_nodes = np.einsum("nij,nkj->nik", s_nodes, s_nodes)
        noise = np.einsum("nij,nj->ni", s_nodes, z.increments)
    else:
        a_nodes = noise = None
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n_cells):
            t = grid[k]
            b = model.drift(theta, t, x)
            if a_nodes is None:
                s = model.dispersion(theta, t, x)
                a = s @ s.T
                dn = s @ z.increments[k]
            else:
                a = a_nodes[k]
                dn = noise[k]
            r = pull_f[k] - pull_h[k] @ x
            x = x + (b + a @ r) * dts[k] + dn
            if hard_mid is not None and k + 1 == mid_idx:
                x = hard_mid.copy()
            out[k + 1] = x
    if kernel.spec.right_anchor is not None:
        out[-1] = kernel.spec.right_anchor
    elif kernel.hard_right_state is not None:
        out[-1] = kernel.hard_right_state
    if not np.all(np.isfinite(out)):
        bad = int(np.argmin(np.all(np.isfinite(out), axis=1)))
        raise ProposalFailure(
            f"guided state became non-finite at time {grid[bad]:g}")
    return PathSegment(grid, out)


def inverse_innovation(model: DiffusionModel, theta: np.ndarray,
                       kernel: GuidedKernel, path: PathSegment) -> InnovationSegment:
    """Recover the innovations that reproduce a stored path.

    Inverts each Euler cell; this is exact in the sense that feeding the
    result back through :func:`forward_guided` restores the path to
    machine precision.  Cells whose right node was overwritten by an
    anchor yield increments that regenerate the anchored node rather than
    the free Euler value.  Requires a square invertible dispersion.
    """
    _check_grids(path.grid, kernel.grid)
    if model.dim_state != model.dim_noise:
        raise ConfigError("innovation inversion needs dim_noise == dim_state")
    theta = as_vector(theta, name="theta")
    grid = path.grid
    lefts = path.values[:-1]
    dts = np.diff(grid)[:, None]
    b = model.drift(theta, grid[:-1], lefts)
    s = model.dispersion(theta, grid[:-1], lefts)
    a = np.einsum("nij,nkj->nik", s, s)
    r = kernel.pull_f - np.einsum("nij,nj->ni", kernel.pull_H, lefts)
    mean_step = (b + np.einsum("nij,nj->ni", a, r)) * dts
    resid = path.values[1:] - lefts - mean_step
    try:
        inc = np.linalg.solve(s, resid[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise ConfigError(f"dispersion not invertible along the path: {exc}") from exc
    return InnovationSegment(grid.copy(), inc)


def log_psi(model: DiffusionModel, theta: np.ndarray, kernel: GuidedKernel,
            path: PathSegment) -> float:
    """Log weight of a path: left-point Riemann sum of G over the segment.

    The right edge never enters the sum, so free and anchored edges are
    treated alike.  Vanishes identically when the model coincides with
    the kernel's auxiliary process.
    """
    _check_grids(path.grid, kernel.grid)
    theta = as_vector(theta, name="theta")
    grid = path.grid
    lefts = path.values[:-1]
    dts = np.diff(grid)
    b = model.drift(theta, grid[:-1], lefts)
    s = model.dispersion(theta, grid[:-1], lefts)
    a = np.einsum("nij,nkj->nik", s, s)
    b_aux = kernel.aux_beta_left + np.einsum("nij,nj->ni", kernel.aux_bmat_left,
                                             lefts)
    r = kernel.pull_f - np.einsum("nij,nj->ni", kernel.pull_H, lefts)
    da = a - kernel.aux_a_left
    hh = kernel.pull_H - np.einsum("ni,nj->nij", r, r)
    g = np.einsum("ni,ni->n", b - b_aux, r) - 0.5 * np.einsum("nij,nji->n", da, hh)
    return float(np.sum(g * dts))


@dataclass(frozen=True)
class AcceptanceFactors:
    """Per-segment pieces of the acceptance ratios.

    log_anchor : log density of the kernel's conditioning data given the
        left state (interior: joint of mid readout and right anchor; end:
        the readout; start: the right anchor given x0).
    log_obs, log_obs_tilde : log readout noise densities at the path's
        readout node under the true and the surrogate noise law.  Both are
        reported as 0 when the two laws coincide (only their difference
        ever enters an acceptance ratio) and for start segments, whose
        left readout is handled by the start posterior instead.
    """

    log_anchor: float
    log_obs: float
    log_obs_tilde: float

    @property
    def log_obs_ratio(self) -> float:
        return self.log_obs - self.log_obs_tilde


def acceptance_factors(kernel: GuidedKernel, path: PathSegment) -> AcceptanceFactors:
    """Evaluate the anchor density and readout noise factors for a path."""
    _check_grids(path.grid, kernel.grid)
    log_anchor = kernel.log_ptilde(float(kernel.grid[0]), path.values[0])
    if kernel.kind == "start" or kernel.obs is None:
        return AcceptanceFactors(log_anchor, 0.0, 0.0)
    idx = kernel.obs_node_index
    resid = kernel.obs.value - kernel.obs.lmat @ path.values[idx]
    cov, cov_t = kernel.obs.cov, kernel.obs_cov_tilde
    if np.array_equal(cov, cov_t):
        return AcceptanceFactors(log_anchor, 0.0, 0.0)
    return AcceptanceFactors(log_anchor, gauss_logpdf(resid, cov),
                             gauss_logpdf(resid, cov_t))


@dataclass(frozen=True)
class WeightedPath:
    """A path with its log weight and readout correction attached."""

    path: PathSegment
    log_psi: float
    log_obs_ratio: float

    @property
    def log_weight(self) -> float:
        return self.log_psi + self.log_obs_ratio


def weigh_path(model: DiffusionModel, theta: np.ndarray, kernel: GuidedKernel,
               path: PathSegment) -> WeightedPath:
    """Bundle a path with its log weight pieces under one kernel."""
    lp = log_psi(model, theta, kernel, path)
    fac = acceptance_factors(kernel, path)
    return WeightedPath(path, lp, fac.log_obs_ratio)
