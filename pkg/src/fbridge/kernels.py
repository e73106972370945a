"""Conditioning kernels for guided bridge proposals.

A guided proposal steers a diffusion with the gradient of the log
conditional density of a tractable linear stand-in process.  For a linear
process dX = (beta(t) + B(t) X) dt + sigma_aux(t) dW conditioned on

* a noisy linear readout v = L X_S + eta, eta ~ N(0, Sigma_tilde), at an
  interior time S, and
* a full endpoint x_b at the right edge T,

the conditional law of (v, X_T) given X_t = x is Gaussian, so the log
density gradient r(t, x) and its negative Jacobian H(t) are affine in x:

    r(t, x) = f(t) - H(t) x.

This module assembles f and H on a time grid for three segment kinds:

* ``interior``: both the mid readout and the right endpoint condition the
  kernel; strictly left of S the pull stacks both constraints, from S on
  only the endpoint constraint remains.
* ``end``: only the (final time) readout conditions the kernel and the
  right edge is free.
* ``start``: only the right endpoint conditions the kernel; any readout
  at the left edge is handled outside via the conjugate start posterior.

Flow quantities Phi(h, t) (fundamental matrix toward a horizon h),
g_h(t) (accumulated drift) and K_h(t) (accumulated noise covariance) are
computed in closed form for constant coefficients, through matrix
exponentials for time homogeneous coefficients, and by backward fourth
order Runge-Kutta integration otherwise.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.linalg import cho_factor, cho_solve, expm

from .errors import ConfigError, KernelBuildError, NumericError
from .models import LinearAuxiliary, Observation, StartPrior
from .utils import LOG_2PI, as_matrix, as_vector, gauss_logpdf, min_norm_preimage

DEFAULT_ODE_SUBSTEP = 2e-3


# ---------------------------------------------------------------------------
# flow quantities toward a horizon


def _flow_rhs(aux, t, phi, g, kmat):
    """Backward derivatives of (Phi(h, t), g(t), K(t)) in t."""
    bm = aux.bmat(t)
    dphi = -phi @ bm
    dg = -phi @ aux.beta(t)
    dk = -phi @ aux.a(t) @ phi.T
    return dphi, dg, dk


def _flow_continue(aux, t_from, t_to, phi, g, kmat, substep):
    """Integrate the backward flow system from t_from down to t_to."""
    span = t_from - t_to
    if span <= 0:
        return phi, g, kmat
    n_sub = max(1, int(np.ceil(span / substep)))
    h = -span / n_sub
    t = t_from
    for _ in range(n_sub):
        k1 = _flow_rhs(aux, t, phi, g, kmat)
        k2 = _flow_rhs(aux, t + 0.5 * h, phi + 0.5 * h * k1[0], g + 0.5 * h * k1[1],
                       kmat + 0.5 * h * k1[2])
        k3 = _flow_rhs(aux, t + 0.5 * h, phi + 0.5 * h * k2[0], g + 0.5 * h * k2[1],
                       kmat + 0.5 * h * k2[2])
        k4 = _flow_rhs(aux, t + h, phi + h * k3[0], g + h * k3[1], kmat + h * k3[2])
        phi = phi + (h / 6.0) * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        g = g + (h / 6.0) * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        kmat = kmat + (h / 6.0) * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        t += h
    kmat = 0.5 * (kmat + kmat.T)
    return phi, g, kmat


def _flow_homogeneous_single(bmat, beta, amat, delta):
    """Exact flow over a lag ``delta`` for constant coefficients.

    Phi and g come from one augmented matrix exponential; K comes from the
    standard block exponential trick for controllability Gramians.
    """
    d = beta.shape[0]
    aug = np.zeros((d + 1, d + 1))
    aug[:d, :d] = bmat * delta
    aug[:d, d] = beta * delta
    e1 = expm(aug)
    phi = e1[:d, :d]
    g = e1[:d, d]
    blk = np.zeros((2 * d, 2 * d))
    blk[:d, :d] = -bmat * delta
    blk[:d, d:] = amat * delta
    blk[d:, d:] = bmat.T * delta
    e2 = expm(blk)
    kmat = e2[d:, d:].T @ e2[:d, d:]
    return phi, g, 0.5 * (kmat + kmat.T)


def flow_quantities(aux: LinearAuxiliary, horizon: float, times: np.ndarray,
                    substep: float = DEFAULT_ODE_SUBSTEP):
    """Phi(horizon, t), g(t), K(t) for each t in ``times``.

    Inputs
    ------
    aux : the linear process.
    horizon : terminal time h, must satisfy h >= max(times).
    times : increasing array of evaluation times.

    Returns
    -------
    (phi, g, kmat) with shapes (n, d, d), (n, d), (n, d, d).
    """
    times = np.asarray(times, dtype=float)
    d = aux.dim_state
    n = times.shape[0]
    if n and times[-1] > horizon + 1e-12:
        raise ConfigError("flow times must not exceed the horizon")
    phi = np.empty((n, d, d))
    g = np.empty((n, d))
    kmat = np.empty((n, d, d))
    if aux.is_constant:
        delta = horizon - times
        beta = aux.beta(horizon)
        amat = aux.a(horizon)
        phi[:] = np.eye(d)
        g[:] = delta[:, None] * beta
        kmat[:] = delta[:, None, None] * amat
        return phi, g, kmat
    if aux.is_homogeneous:
        bmat = aux.bmat(horizon)
        beta = aux.beta(horizon)
        amat = aux.a(horizon)
        if d == 1:
            # Scalar closed forms, vectorised over the nodes.
            b = bmat[0, 0]
            delta = horizon - times
            if abs(b) < 1e-14:
                phi[:, 0, 0] = 1.0
                g[:, 0] = beta[0] * delta
                kmat[:, 0, 0] = amat[0, 0] * delta
            else:
                phi[:, 0, 0] = np.exp(b * delta)
                g[:, 0] = beta[0] * np.expm1(b * delta) / b
                kmat[:, 0, 0] = amat[0, 0] * np.expm1(2.0 * b * delta) / (2.0 * b)
            return phi, g, kmat
        # One matrix-exponential pair per distinct gap, then exact
        # composition backward from the horizon.  Grids are usually
        # (near) uniform, so this costs a handful of expm calls instead
        # of two per node.
        gaps = np.empty(n)
        gaps[:-1] = np.diff(times)
        gaps[-1] = horizon - times[-1]
        steps = {}
        for delta in np.unique(gaps):
            if delta <= 0.0:
                steps[delta] = (np.eye(d), np.zeros(d), np.zeros((d, d)))
            else:
                steps[delta] = _flow_homogeneous_single(bmat, beta, amat, delta)
        cur_phi = np.eye(d)
        cur_g = np.zeros(d)
        cur_k = np.zeros((d, d))
        for i in range(n - 1, -1, -1):
            p1, g1, k1 = steps[gaps[i]]
            cur_g = cur_g + cur_phi @ g1
            cur_k = cur_k + cur_phi @ k1 @ cur_phi.T
            cur_phi = cur_phi @ p1
            phi[i], g[i], kmat[i] = cur_phi, cur_g, cur_k
        return phi, g, kmat
    cur = (np.eye(d), np.zeros(d), np.zeros((d, d)))
    t_cur = horizon
    for i in range(n - 1, -1, -1):
        cur = _flow_continue(aux, t_cur, times[i], *cur, substep=substep)
        t_cur = times[i]
        phi[i], g[i], kmat[i] = cur
    return phi, g, kmat


def fundamental_matrix(aux: LinearAuxiliary, grid: np.ndarray,
                       horizon: float | None = None,
                       substep: float = DEFAULT_ODE_SUBSTEP) -> np.ndarray:
    """Phi(horizon, t) at each grid node; horizon defaults to grid[-1]."""
    grid = np.asarray(grid, dtype=float)
    h = grid[-1] if horizon is None else float(horizon)
    return flow_quantities(aux, h, grid, substep=substep)[0]


def gain_and_covariance(aux: LinearAuxiliary, horizon: float, grid: np.ndarray,
                        substep: float = DEFAULT_ODE_SUBSTEP):
    """Accumulated drift g(t) and noise covariance K(t) toward a horizon."""
    _, g, kmat = flow_quantities(aux, float(horizon), np.asarray(grid, float),
                                 substep=substep)
    return g, kmat


# ---------------------------------------------------------------------------
# segment specification


@dataclass(frozen=True)
class SegmentSpec:
    """What a kernel conditions on, for one grid segment.

    Inputs
    ------
    kind : "interior", "end" or "start".
    grid : node times, strictly increasing.
    left_anchor : state at grid[0] (interior and end kinds), or the
        Gaussian StartPrior for start kinds.
    right_anchor : state at grid[-1] (interior and start kinds), None for
        end kinds whose right edge is free.
    obs : conditioning readout; must sit strictly inside the grid for
        interior kinds, at grid[-1] for end kinds, and is None or at
        grid[0] for start kinds (where it only tags the segment, the
        conditioning happens through the start posterior).
    obs_cov_tilde : surrogate readout noise covariance used by the kernel;
        defaults to obs.cov.
    """

    kind: str
    grid: np.ndarray
    left_anchor: Union[np.ndarray, StartPrior, None]
    right_anchor: np.ndarray | None
    obs: Observation | None = None
    obs_cov_tilde: np.ndarray | None = None

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        if grid.ndim != 1 or grid.shape[0] < 2 or not np.all(np.diff(grid) > 0):
            raise ConfigError("segment grid must be increasing with >= 2 nodes")
        object.__setattr__(self, "grid", grid)
        if self.kind not in ("interior", "end", "start"):
            raise ConfigError(f"unknown segment kind '{self.kind}'")
        if self.kind == "interior":
            if self.obs is None or self.right_anchor is None:
                raise ConfigError("interior segments need an obs and a right anchor")
            if not (grid[0] + 1e-12 < self.obs.time < grid[-1] - 1e-12):
                raise ConfigError("interior obs time must lie strictly inside the grid")
        elif self.kind == "end":
            if self.obs is None:
                raise ConfigError("end segments need an obs")
            if abs(self.obs.time - grid[-1]) > 1e-9:
                raise ConfigError("end segment obs must sit at the right edge")
            if self.right_anchor is not None:
                raise ConfigError("end segments have a free right edge")
        else:
            if self.right_anchor is None:
                raise ConfigError("start segments need a right anchor")
            if self.obs is not None and abs(self.obs.time - grid[0]) > 1e-9:
                raise ConfigError("start segment obs must sit at the left edge")
        if self.right_anchor is not None:
            object.__setattr__(self, "right_anchor",
                               as_vector(self.right_anchor, name="right_anchor"))
        if self.kind != "start" and self.left_anchor is not None:
            object.__setattr__(self, "left_anchor",
                               as_vector(self.left_anchor, name="left_anchor"))

    @property
    def t_left(self) -> float:
        return float(self.grid[0])

    @property
    def t_right(self) -> float:
        return float(self.grid[-1])

    @property
    def s_mid(self) -> float | None:
        return None if self.obs is None else float(self.obs.time)


def _node_index(grid: np.ndarray, t: float,
                tol_scale: float = 1e-13) -> int | None:
    """Index of the grid node equal to t, or None.

    The default tolerance is tight on purpose: evaluation just left of a
    node (for instance at S - 1e-10) must not snap to the node, because
    the two sides of a readout time use different formulas.
    """
    idx = int(np.searchsorted(grid, t))
    tol = tol_scale * max(1.0, abs(grid[-1] - grid[0]))
    for j in (idx - 1, idx, idx + 1):
        if 0 <= j < grid.shape[0] and abs(grid[j] - t) <= tol:
            return j
    return None


class GuidedKernel:
    """Per-node pull coefficients and Gaussian surrogate densities.

    Use :func:`build_kernel` to construct one.  The pull is affine,
    r(t, x) = pull_f[k] - pull_H[k] @ x at grid node k (left nodes only;
    the right edge is outside the kernel domain).
    """

    def __init__(self, spec: SegmentSpec, aux: LinearAuxiliary,
                 method: str = "auto", ode_substep: float = DEFAULT_ODE_SUBSTEP):
        if aux.dim_state != (spec.right_anchor.shape[0] if spec.right_anchor is not None
                             else spec.obs.lmat.shape[1]):
            raise ConfigError("auxiliary state dimension disagrees with the segment")
        self.spec = spec
        self.aux = aux
        self.grid = spec.grid
        self.d = aux.dim_state
        self.substep = float(ode_substep)
        if method == "auto":
            method = "schur" if (aux.is_constant and spec.kind != "end") else "generic"
        if method == "schur" and not aux.is_constant:
            raise ConfigError("the schur route needs constant auxiliary coefficients")
        if method == "schur" and spec.kind == "end":
            raise ConfigError("the schur route does not cover end segments")
        self.method = method
        self.obs = spec.obs
        self.obs_cov_tilde = None
        if spec.obs is not None:
            ct = spec.obs.cov if spec.obs_cov_tilde is None else \
                as_matrix(spec.obs_cov_tilde, shape=spec.obs.cov.shape,
                          name="obs_cov_tilde")
            if bool(np.any(spec.obs.cov)) != bool(np.any(ct)):
                raise ConfigError("readout noise and its surrogate must be "
                                  "zero together or positive together")
            self.obs_cov_tilde = ct
        self._assemble()

    # -- construction -------------------------------------------------

    def _assemble(self):
        spec, grid = self.spec, self.grid
        n_nodes = grid.shape[0]
        if spec.kind == "interior":
            s_idx = _node_index(grid, spec.obs.time, tol_scale=1e-9)
            if s_idx is None:
                raise ConfigError("interior obs time must be a grid node")
            self.s_idx = s_idx
            phi_s, g_s, k_s = flow_quantities(self.aux, spec.obs.time,
                                              grid[:s_idx + 1], self.substep)
            phi_t, g_t, k_t = flow_quantities(self.aux, spec.t_right,
                                              grid[s_idx:], self.substep)
            self._flow_pre = (phi_s, g_s, k_s)
            self._flow_post = (phi_t, g_t, k_t)
            self._bridge_pre = (phi_t[0], g_t[0], k_t[0])
            pre = self._stacked_phase(phi_s[:-1], g_s[:-1], k_s[:-1],
                                      grid[:s_idx])
            post = self._endpoint_phase(phi_t, g_t, k_t, grid[s_idx:])
        elif spec.kind == "end":
            self.s_idx = n_nodes - 1
            phi_s, g_s, k_s = flow_quantities(self.aux, spec.t_right, grid,
                                              self.substep)
            self._flow_pre = (phi_s, g_s, k_s)
            self._flow_post = None
            self._bridge_pre = None
            pre = self._readout_phase(phi_s, g_s, k_s, grid)
            post = None
        else:
            self.s_idx = None
            phi_t, g_t, k_t = flow_quantities(self.aux, spec.t_right, grid,
                                              self.substep)
            self._flow_pre = None
            self._flow_post = (phi_t, g_t, k_t)
            self._bridge_pre = None
            pre = None
            post = self._endpoint_phase(phi_t, g_t, k_t, grid)
        self._pre = pre
        self._post = post
        self._build_pull()
        self._cache_aux_nodes()

    def _cache_aux_nodes(self):
        """Auxiliary coefficients at the left grid nodes, for path weights."""
        lefts = self.grid[:-1]
        n, d = lefts.shape[0], self.d
        if self.aux.is_homogeneous:
            t0 = float(self.grid[0])
            self.aux_beta_left = np.broadcast_to(self.aux.beta(t0), (n, d))
            self.aux_bmat_left = np.broadcast_to(self.aux.bmat(t0), (n, d, d))
            self.aux_a_left = np.broadcast_to(self.aux.a(t0), (n, d, d))
        else:
            self.aux_beta_left = np.stack([self.aux.beta(t) for t in lefts])
            self.aux_bmat_left = np.stack([self.aux.bmat(t) for t in lefts])
            self.aux_a_left = np.stack([self.aux.a(t) for t in lefts])

    def _stacked_phase(self, phi_s, g_s, k_s, times):
        """Constraint triples left of the readout time (interior kind)."""
        L = self.obs.lmat
        v = self.obs.value
        xb = self.spec.right_anchor
        phi_ts, g_ts, k_ts = self._bridge_pre
        m, d = L.shape
        n = times.shape[0]
        lk = L[None] @ k_s
        stack = np.concatenate([L[None] @ phi_s, phi_ts[None] @ phi_s], axis=1)
        off = np.empty((n, m + d))
        off[:, :m] = v[None] - g_s @ L.T
        off[:, m:] = (xb - g_ts)[None] - g_s @ phi_ts.T
        cov = np.empty((n, m + d, m + d))
        cov[:, :m, :m] = lk @ L.T + self.obs_cov_tilde
        cov[:, :m, m:] = lk @ phi_ts.T
        cov[:, m:, :m] = np.swapaxes(cov[:, :m, m:], 1, 2)
        cov[:, m:, m:] = k_ts + phi_ts[None] @ k_s @ phi_ts.T
        cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
        chol = self._factor(cov, times, n)
        return {"stack": stack, "off": off, "cov": cov, "chol": chol,
                "n_chol": n, "times": times}

    def _readout_phase(self, phi_s, g_s, k_s, times):
        """Constraint triples toward a terminal readout (end kind)."""
        L = self.obs.lmat
        v = self.obs.value
        n = times.shape[0]
        stack = L[None] @ phi_s
        off = v[None] - g_s @ L.T
        cov = L[None] @ k_s @ L.T + self.obs_cov_tilde
        cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
        n_chol = n - 1  # the node at the readout time may be degenerate
        chol = self._factor(cov[:n_chol], times[:n_chol], n_chol)
        return {"stack": stack, "off": off, "cov": cov, "chol": chol,
                "n_chol": n_chol, "times": times}

    def _endpoint_phase(self, phi_t, g_t, k_t, times):
        """Constraint triples toward the pinned right endpoint."""
        xb = self.spec.right_anchor
        n = times.shape[0]
        off = xb[None] - g_t
        n_chol = n - 1  # K vanishes at the horizon itself
        chol = self._factor(k_t[:n_chol], times[:n_chol], n_chol)
        return {"stack": phi_t, "off": off, "cov": k_t, "chol": chol,
                "n_chol": n_chol, "times": times}

    @staticmethod
    def _factor(cov, times, n):
        if n == 0:
            return np.empty((0,) + cov.shape[1:])
        try:
            return np.linalg.cholesky(cov[:n])
        except np.linalg.LinAlgError:
            for c, t in zip(cov[:n], times[:n]):
                try:
                    np.linalg.cholesky(c)
                except np.linalg.LinAlgError:
                    raise KernelBuildError(
                        f"conditioning covariance not positive definite at "
                        f"time {t:g}") from None
            raise

    def _build_pull(self):
        n_left = self.grid.shape[0] - 1
        d = self.d
        self.pull_f = np.empty((n_left, d))
        self.pull_H = np.empty((n_left, d, d))
        if self.method == "schur":
            self._build_pull_schur()
            return
        if self._pre is not None:
            n_pre = self._pre["times"].shape[0] if self.spec.kind == "interior" \
                else n_left
            f, h = _pull_from_triples(self._pre["stack"][:n_pre],
                                      self._pre["off"][:n_pre],
                                      self._pre["cov"][:n_pre])
            self.pull_f[:n_pre] = f
            self.pull_H[:n_pre] = h
        if self._post is not None:
            k0 = 0 if self.spec.kind == "start" else self.s_idx
            n_post = n_left - k0
            f, h = _pull_from_triples(self._post["stack"][:n_post],
                                      self._post["off"][:n_post],
                                      self._post["cov"][:n_post])
            self.pull_f[k0:] = f
            self.pull_H[k0:] = h

    def _build_pull_schur(self):
        """Closed-form pull for constant coefficients with zero drift matrix.

        Left of the readout the pull splits into a readout term and an
        endpoint term through the matrix N(t); the result does not depend
        on which preimage u of L u = v is used because N only enters as
        L' N L u = L' N v.
        """
        aux, spec, grid = self.aux, self.spec, self.grid
        d = self.d
        beta = aux.beta(grid[0])
        amat = aux.a(grid[0])
        ainv = np.linalg.inv(amat)
        t_right = spec.t_right
        n_left = grid.shape[0] - 1
        if spec.kind == "interior":
            s = spec.obs.time
            L = self.obs.lmat
            u = min_norm_preimage(L, self.obs.value)
            xb = spec.right_anchor
            pre_t = grid[:self.s_idx]
            ds = s - pre_t
            dt = t_right - pre_t
            span = t_right - s
            mid = (L @ amat @ L.T)[None] + \
                (dt / (ds * span))[:, None, None] * self.obs_cov_tilde[None]
            nmat = np.linalg.inv(mid)
            qmat = np.einsum("ji,njk,kl->nil", L, nmat, L)
            self.pull_H[:self.s_idx] = qmat / ds[:, None, None] + \
                (ainv[None] - qmat) / dt[:, None, None]
            u_eff = u[None] - ds[:, None] * beta[None]
            xb_eff = xb[None] - dt[:, None] * beta[None]
            self.pull_f[:self.s_idx] = (
                np.einsum("nij,nj->ni", qmat, u_eff) / ds[:, None]
                + np.einsum("nij,nj->ni", ainv[None] - qmat, xb_eff) / dt[:, None])
            post_t = grid[self.s_idx:n_left]
            k0 = self.s_idx
        else:
            xb = spec.right_anchor
            post_t = grid[:n_left]
            k0 = 0
        dt = t_right - post_t
        self.pull_H[k0:] = ainv[None] / dt[:, None, None]
        xb_eff = xb[None] - dt[:, None] * beta[None]
        self.pull_f[k0:] = np.einsum("ij,nj->ni", ainv, xb_eff) / dt[:, None]

    # -- evaluation ----------------------------------------------------

    @property
    def kind(self) -> str:
        return self.spec.kind

    @property
    def obs_node_index(self) -> int | None:
        """Grid node carrying the conditioning readout, if any."""
        if self.spec.kind == "interior":
            return self.s_idx
        if self.spec.kind == "end":
            return self.grid.shape[0] - 1
        return 0 if self.spec.obs is not None else None

    @property
    def hard_right_state(self) -> np.ndarray | None:
        """State the free right edge must take when the readout is exact.

        Only end kernels with a square readout matrix and zero surrogate
        noise pin their right edge.
        """
        if self.spec.kind != "end":
            return None
        L = self.obs.lmat
        if L.shape[0] == L.shape[1] and not np.any(self.obs_cov_tilde):
            return np.linalg.solve(L, self.obs.value)
        return None

    @property
    def hard_mid_state(self) -> np.ndarray | None:
        """State the readout node must take when the mid readout is exact."""
        if self.spec.kind != "interior":
            return None
        L = self.obs.lmat
        if L.shape[0] == L.shape[1] and not np.any(self.obs_cov_tilde):
            return np.linalg.solve(L, self.obs.value)
        return None

    def _locate(self, t: float):
        """Phase name and triple data for an arbitrary in-domain time."""
        grid = self.grid
        if not (grid[0] - 1e-12 <= t < grid[-1]):
            raise ValueError(f"time {t:g} outside the kernel domain "
                             f"[{grid[0]:g}, {grid[-1]:g})")
        if self.spec.kind == "interior":
            phase = "pre" if t < self.spec.obs.time - 1e-12 else "post"
        elif self.spec.kind == "end":
            phase = "pre"
        else:
            phase = "post"
        return phase

    def _triple_at(self, t: float, phase: str):
        """(stack, off, cov, chol_or_None) at time t in the given phase."""
        data = self._pre if phase == "pre" else self._post
        times = data["times"]
        k = _node_index(times, t)
        if k is not None and k < data["stack"].shape[0]:
            chol = data["chol"][k] if k < data["n_chol"] else None
            return data["stack"][k], data["off"][k], data["cov"][k], chol
        flow = self._flow_pre if phase == "pre" else self._flow_post
        phi, g, kk = self._flow_at(t, phase, flow)
        if self.spec.kind == "interior" and phase == "pre":
            L = self.obs.lmat
            phi_ts, g_ts, k_ts = self._bridge_pre
            m, d = L.shape
            stack = np.concatenate([L @ phi, phi_ts @ phi], axis=0)
            off = np.concatenate([self.obs.value - L @ g,
                                  self.spec.right_anchor - g_ts - phi_ts @ g])
            cov = np.empty((m + d, m + d))
            cov[:m, :m] = L @ kk @ L.T + self.obs_cov_tilde
            cov[:m, m:] = L @ kk @ phi_ts.T
            cov[m:, :m] = cov[:m, m:].T
            cov[m:, m:] = k_ts + phi_ts @ kk @ phi_ts.T
        elif phase == "pre":
            L = self.obs.lmat
            stack = L @ phi
            off = self.obs.value - L @ g
            cov = L @ kk @ L.T + self.obs_cov_tilde
        else:
            stack = phi
            off = self.spec.right_anchor - g
            cov = kk
        return stack, off, 0.5 * (cov + cov.T), None

    def _flow_at(self, t, phase, flow):
        """Flow quantities at an off-node time by the cheapest exact route."""
        horizon = self.spec.obs.time if (phase == "pre") else self.spec.t_right
        if self.aux.is_homogeneous:
            return _flow_homogeneous_single(self.aux.bmat(t), self.aux.beta(t),
                                            self.aux.a(t), horizon - t)
        grid = self.grid
        if phase == "pre":
            part = grid[:self.s_idx + 1]
        else:
            part = grid if self.spec.kind == "start" else grid[self.s_idx:]
        j = int(np.searchsorted(part, t, side="left"))
        j = min(j, part.shape[0] - 1)
        phi0, g0, k0 = (flow[0][j], flow[1][j], flow[2][j])
        return _flow_continue(self.aux, part[j], t, phi0, g0, k0, self.substep)

    def guiding_r(self, t: float, x: np.ndarray) -> np.ndarray:
        """Pull vector r(t, x), the log density gradient of the surrogate."""
        x = as_vector(x, dim=self.d, name="x")
        phase = self._locate(t)
        k = _node_index(self.grid, t)
        if k is not None and k < self.pull_f.shape[0]:
            return self.pull_f[k] - self.pull_H[k] @ x
        if self.method == "schur":
            f, h = self._schur_single(t, phase)
            return f - h @ x
        stack, off, cov, chol = self._triple_at(t, phase)
        resid = off - stack @ x
        alpha = cho_solve((chol, True), resid) if chol is not None else \
            np.linalg.solve(cov, resid)
        return stack.T @ alpha

    def guiding_H(self, t: float) -> np.ndarray:
        """Negative Jacobian of the pull, symmetric positive semidefinite."""
        phase = self._locate(t)
        k = _node_index(self.grid, t)
        if k is not None and k < self.pull_H.shape[0]:
            h = self.pull_H[k]
        elif self.method == "schur":
            h = self._schur_single(t, phase)[1]
        else:
            stack, _, cov, chol = self._triple_at(t, phase)
            sol = cho_solve((chol, True), stack) if chol is not None else \
                np.linalg.solve(cov, stack)
            h = stack.T @ sol
        return 0.5 * (h + h.T)

    def _schur_single(self, t, phase):
        aux, spec = self.aux, self.spec
        beta = aux.beta(t)
        amat = aux.a(t)
        ainv = np.linalg.inv(amat)
        t_right = spec.t_right
        dt = t_right - t
        if phase == "post" or spec.kind != "interior":
            xb_eff = spec.right_anchor - dt * beta
            return ainv @ xb_eff / dt, ainv / dt
        s = spec.obs.time
        L = self.obs.lmat
        u = min_norm_preimage(L, self.obs.value)
        ds = s - t
        span = t_right - s
        mid = L @ amat @ L.T + (dt / (ds * span)) * self.obs_cov_tilde
        nmat = np.linalg.inv(mid)
        qmat = L.T @ nmat @ L
        h = qmat / ds + (ainv - qmat) / dt
        f = qmat @ (u - ds * beta) / ds + \
            (ainv - qmat) @ (spec.right_anchor - dt * beta) / dt
        return f, h

    def log_ptilde(self, t: float, x: np.ndarray) -> float:
        """Log density of the surrogate's conditioning data given X_t = x.

        Interior kind, t < S: joint Gaussian density of (v, x_b); from S
        on: density of x_b alone.  End kind: density of v.  Start kind:
        density of x_b.
        """
        x = as_vector(x, dim=self.d, name="x")
        phase = self._locate(t)
        k = _node_index(self.grid, t)
        if k is not None:
            data = self._pre if phase == "pre" else self._post
            times = data["times"]
            kk = _node_index(times, t)
            if kk is not None and kk < data["n_chol"]:
                resid = data["off"][kk] - data["stack"][kk] @ x
                chol = data["chol"][kk]
                alpha = cho_solve((chol, True), resid)
                logdet = 2.0 * np.sum(np.log(np.diag(chol)))
                return float(-0.5 * (resid.shape[0] * LOG_2PI + logdet
                                     + resid @ alpha))
        stack, off, cov, _ = self._triple_at(t, phase)
        return gauss_logpdf(off - stack @ x, cov)

    def precision_U(self, t: float) -> np.ndarray:
        """Precision of the conditioning data given X_t.

        Interior kind, t < S: the (m + d) x (m + d) precision of (v, x_b).
        From S on (and for start kinds): the d x d endpoint precision.
        End kinds: the m x m readout precision.
        """
        phase = self._locate(t)
        _, _, cov, chol = self._triple_at(t, phase)
        if chol is None:
            chol = cho_factor(cov, lower=True)[0]
        eye = np.eye(cov.shape[0])
        u = cho_solve((chol, True), eye)
        return 0.5 * (u + u.T)

    def limit_r_at_S(self, x: np.ndarray) -> np.ndarray:
        """Left limit of the pull at the readout time (constant coefficients).

        Only defined for interior kernels with constant auxiliary
        coefficients and a positive definite surrogate readout noise.
        """
        if self.spec.kind != "interior":
            raise ValueError("the readout-time limit needs an interior kernel")
        if not self.aux.is_constant:
            raise ValueError("the readout-time limit needs constant coefficients")
        x = as_vector(x, dim=self.d, name="x")
        L = self.obs.lmat
        sig = self.obs_cov_tilde
        try:
            factor = cho_factor(sig, lower=True)
        except np.linalg.LinAlgError as exc:
            raise ValueError("the readout-time limit needs positive definite "
                             "surrogate noise") from exc
        s = self.spec.obs.time
        span = self.spec.t_right - s
        u = min_norm_preimage(L, self.obs.value)
        beta = self.aux.beta(s)
        amat = self.aux.a(s)
        term1 = L.T @ cho_solve(factor, L @ (u - x))
        h_t = self.spec.right_anchor - span * beta - x
        term2 = np.linalg.solve(amat, h_t) / span
        return term1 + term2


def _pull_from_triples(stack, off, cov):
    """Batched f = S' C^{-1} c and H = S' C^{-1} S."""
    if stack.shape[0] == 0:
        d = stack.shape[2]
        return np.empty((0, d)), np.empty((0, d, d))
    sol = np.linalg.solve(cov, stack)
    h = np.swapaxes(stack, 1, 2) @ sol
    alpha = np.linalg.solve(cov, off[..., None])
    f = (np.swapaxes(stack, 1, 2) @ alpha)[..., 0]
    return f, 0.5 * (h + np.swapaxes(h, 1, 2))


def build_kernel(spec: SegmentSpec, aux: LinearAuxiliary, method: str = "auto",
                 ode_substep: float = DEFAULT_ODE_SUBSTEP) -> GuidedKernel:
    """Assemble the guiding kernel for one segment.

    ``method`` selects how the pull coefficients are computed: "generic"
    factorizes the conditioning covariance, "schur" uses the closed-form
    constant-coefficient expressions, "auto" picks "schur" whenever it
    applies.  Both routes produce the same kernel and are cross-checked in
    the test suite.
    """
    return GuidedKernel(spec, aux, method=method, ode_substep=ode_substep)


def boundary_kernel_end(grid: np.ndarray, left_anchor: np.ndarray,
                        obs: Observation, aux: LinearAuxiliary,
                        obs_cov_tilde: np.ndarray | None = None,
                        method: str = "auto",
                        ode_substep: float = DEFAULT_ODE_SUBSTEP) -> GuidedKernel:
    """Kernel for a final segment ending in a noisy readout, free right edge."""
    spec = SegmentSpec(kind="end", grid=grid, left_anchor=left_anchor,
                       right_anchor=None, obs=obs, obs_cov_tilde=obs_cov_tilde)
    return GuidedKernel(spec, aux, method=method, ode_substep=ode_substep)


def guiding_r(kernel: GuidedKernel, t: float, x: np.ndarray) -> np.ndarray:
    """Module-level alias for :meth:`GuidedKernel.guiding_r`."""
    return kernel.guiding_r(t, x)


def guiding_H(kernel: GuidedKernel, t: float) -> np.ndarray:
    """Module-level alias for :meth:`GuidedKernel.guiding_H`."""
    return kernel.guiding_H(t)


def precision_U(kernel: GuidedKernel, t: float) -> np.ndarray:
    """Module-level alias for :meth:`GuidedKernel.precision_U`."""
    return kernel.precision_U(t)


def limit_r_at_S(kernel: GuidedKernel, x: np.ndarray) -> np.ndarray:
    """Module-level alias for :meth:`GuidedKernel.limit_r_at_S`."""
    return kernel.limit_r_at_S(x)


def start_posterior(prior: StartPrior, obs: Observation):
    """Gaussian conditional of the initial state given its noisy readout.

    Returns (mean, cov) of X_0 | v_0 for X_0 ~ N(mu, C) and
    v_0 = L X_0 + eta, eta ~ N(0, Sigma).  Sigma may be singular as long
    as L C L' + Sigma is invertible; with L = I and Sigma = 0 the
    posterior degenerates to a point mass at v_0.
    """
    mu, cc = prior.mean, prior.cov
    L, sig, v = obs.lmat, obs.cov, obs.value
    s = L @ cc @ L.T + sig
    try:
        factor = cho_factor(0.5 * (s + s.T), lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericError("readout covariance L C L' + Sigma is singular") from exc
    gain = cho_solve(factor, L @ cc).T
    mean = mu + gain @ (v - L @ mu)
    cov = cc - gain @ L @ cc
    return mean, 0.5 * (cov + cov.T)
