"""Block sampler for partially observed diffusions.

The latent path between observation times is updated blockwise on two
overlapping partitions so that every state, including both boundary
states, gets refreshed each sweep:

* the even pass spans pairs of intervals anchored at even-indexed states
  and refreshes the odd-indexed state in the middle of each block (plus
  the final state through an end block when the number of intervals is
  odd);
* the odd pass does the mirror image, with a start block that also
  redraws the initial state from its conjugate readout posterior and an
  end block when the number of intervals is even.

Path proposals are guided bridges driven by Crank-Nicolson refreshed
innovations; their acceptance ratio is the path weight ratio (times a
readout noise correction when the surrogate noise law differs from the
true one).  Parameter moves are random walk proposals accepted against
prior, anchor density, readout correction, and path weight ratios, with
the innovations of the active partition held fixed so the paths deform
together with the parameter.  An optional scalar readout noise parameter
gets its own conditionally conjugate-free Metropolis step.

Every random draw comes from a counter-based stream keyed by
(seed, phase, sweep, block), which makes traces reproducible bit for bit.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .bridges import (InnovationSegment, fresh_innovations, forward_guided,
                      inverse_innovation, log_psi, pcn_refresh, weigh_path)
from .errors import ConfigError, KernelBuildError, NumericError, ProposalFailure
from .kernels import (DEFAULT_ODE_SUBSTEP, GuidedKernel, SegmentSpec,
                      build_kernel, start_posterior)
from .models import (DiffusionModel, Observation, ObservationScheme,
                     PathSegment, StartPrior, auto_auxiliary, join_grids,
                     make_grid)
from .utils import as_vector, gauss_logpdf, sample_gaussian, spawn_rng

_PHASE_INIT = 0
_PHASE_EVEN = 1
_PHASE_THETA_EVEN = 2
_PHASE_ODD = 3
_PHASE_THETA_ODD = 4
_PHASE_NOISE = 5


@dataclass
class NoiseParamSpec:
    """Random walk update for a scalar readout noise parameter.

    ``cov_builder(eps, i)`` maps the parameter to the noise covariance of
    readout i; by default Sigma_i = eps I.  The prior logpdf should
    return -inf outside the admissible range (negative proposals are then
    rejected before any likelihood work).
    """

    init: float
    prior_logpdf: Callable[[float], float]
    proposal_scale: float
    cov_builder: Callable[[float, int], np.ndarray] | None = None


@dataclass
class ChainConfig:
    theta_init: np.ndarray
    prior_logpdf: Callable[[np.ndarray], float]
    n_sweeps: int = 1000
    steps_per_segment: int = 50
    rho: float = 0.0
    seed: int = 0
    theta_step: float | np.ndarray = 0.1
    update_theta_in: tuple[str, ...] = ("even",)
    aux_builder: Callable | None = None
    noise: NoiseParamSpec | None = None
    snapshot_every: int = 0
    max_init_tries: int = 20
    kernel_method: str = "auto"
    ode_substep: float = DEFAULT_ODE_SUBSTEP

    def __post_init__(self):
        self.theta_init = as_vector(self.theta_init, name="theta_init")
        if not 0.0 <= self.rho < 1.0:
            raise ConfigError("rho must lie in [0, 1)")
        if self.n_sweeps < 0 or self.steps_per_segment < 1:
            raise ConfigError("n_sweeps must be >= 0 and steps_per_segment >= 1")
        for parity in self.update_theta_in:
            if parity not in ("even", "odd"):
                raise ConfigError("update_theta_in entries must be 'even' or 'odd'")


@dataclass
class ChainState:
    """Everything the sampler conditions on: parameter, noise parameter,
    latent states at the observation times, and the path segments
    connecting them.  segments[i].values[0] equals states[i] and
    segments[i].values[-1] equals states[i + 1] at all times."""

    theta: np.ndarray
    eps: float | None
    states: np.ndarray
    segments: list[PathSegment]
    sweep: int = 0
    logpsi_even: dict = field(default_factory=dict)


@dataclass
class Trace:
    theta: np.ndarray
    eps: np.ndarray
    acc_even: np.ndarray
    acc_odd: np.ndarray
    acc_theta: np.ndarray
    logpsi_total: np.ndarray
    snapshots: list

    @property
    def n_sweeps(self) -> int:
        return self.theta.shape[0]

    def records(self):
        """Yield one plain dict per sweep, suitable for JSON lines."""
        for k in range(self.n_sweeps):
            acc_t = self.acc_theta[k]
            eps = self.eps[k]
            yield {
                "sweep": k,
                "theta": [float(v) for v in self.theta[k]],
                "eps": None if np.isnan(eps) else float(eps),
                "acc_even": float(self.acc_even[k]),
                "acc_odd": float(self.acc_odd[k]),
                "acc_theta": None if np.isnan(acc_t) else float(acc_t),
                "logpsi_total": float(self.logpsi_total[k]),
            }


def blocks_for_parity(n: int, parity: str) -> list[tuple[str, int, int]]:
    """Block layout (kind, left interval index, right state index).

    Even parity anchors even-indexed states and refreshes odd ones; odd
    parity does the opposite and carries the start block.  Whichever
    parity leaves the final state unanchored gets the end block.
    """
    blocks: list[tuple[str, int, int]] = []
    if parity == "even":
        for i in range(1, n // 2 + 1):
            blocks.append(("interior", 2 * i - 2, 2 * i))
        if n % 2 == 1:
            blocks.append(("end", n - 1, n))
    elif parity == "odd":
        blocks.append(("start", 0, 1))
        for i in range(1, (n - 1) // 2 + 1):
            blocks.append(("interior", 2 * i - 1, 2 * i + 1))
        if n % 2 == 0:
            blocks.append(("end", n - 1, n))
    else:
        raise ConfigError("parity must be 'even' or 'odd'")
    return blocks


class Sampler:
    """Holds the problem (model, observations, start prior) and the
    configuration; states move through it via the update functions."""

    def __init__(self, model: DiffusionModel, scheme: ObservationScheme,
                 prior_x0: StartPrior, config: ChainConfig):
        if scheme.values is None:
            raise ConfigError("the observation scheme must carry values")
        if scheme.dim_state != model.dim_state:
            raise ConfigError("model and observation scheme disagree on d")
        if model.dim_noise != model.dim_state:
            raise ConfigError("the innovation scheme needs dim_noise == dim_state")
        if prior_x0.mean.shape[0] != model.dim_state:
            raise ConfigError("start prior dimension mismatch")
        if config.theta_init.shape[0] != model.parameter_dim:
            raise ConfigError("theta_init length does not match the model")
        self.model = model
        self.scheme = scheme
        self.prior_x0 = prior_x0
        self.config = config
        self.n = scheme.n_intervals
        step = np.asarray(config.theta_step, dtype=float)
        if step.ndim == 0:
            step = np.full(model.parameter_dim, float(step))
        if step.shape[0] != model.parameter_dim:
            raise ConfigError("theta_step length does not match the model")
        if np.any(step < 0):
            raise ConfigError("theta_step entries must be nonnegative")
        self.theta_step = step
        self.theta_active = bool(np.any(step > 0)) and bool(config.update_theta_in)
        self._pass_cache: tuple | None = None
        # Canonical grid objects, one per interval plus the two-interval
        # joins used by interior blocks.  Sharing these arrays everywhere
        # keeps grid checks on the cheap identity path.
        times = scheme.times
        self._seg_grids = [make_grid(times[i], times[i + 1],
                                     config.steps_per_segment)
                           for i in range(self.n)]
        self._joined_grids = {a: join_grids(self._seg_grids[a],
                                            self._seg_grids[a + 1])
                              for a in range(self.n - 1)}

    # -- problem pieces -------------------------------------------------

    def _obs(self, i: int, eps: float | None) -> Observation:
        base = self.scheme.observation(i)
        spec = self.config.noise
        if spec is None or eps is None:
            return base
        builder = spec.cov_builder
        m = base.lmat.shape[0]
        cov = eps * np.eye(m) if builder is None else np.asarray(builder(eps, i),
                                                                 dtype=float)
        if cov.shape != (m, m):
            raise ConfigError(f"noise cov_builder returned shape {cov.shape} "
                              f"for readout {i}, expected {(m, m)}")
        return Observation(base.time, base.lmat, cov, base.value)

    def _aux(self, theta, t_match, x_match):
        builder = self.config.aux_builder
        if builder is None:
            return auto_auxiliary(self.model, theta, t_match, x_match)
        return builder(self.model, theta, float(t_match), np.asarray(x_match))

    def _block_kernel(self, state: ChainState, kind: str, a: int, b: int,
                      theta: np.ndarray) -> GuidedKernel:
        segs = state.segments
        if kind == "interior":
            grid = self._joined_grids[a]
            spec = SegmentSpec("interior", grid, left_anchor=state.states[a],
                               right_anchor=state.states[b],
                               obs=self._obs(a + 1, state.eps))
            aux = self._aux(theta, grid[-1], state.states[b])
        elif kind == "end":
            spec = SegmentSpec("end", segs[a].grid, left_anchor=state.states[a],
                               right_anchor=None, obs=self._obs(b, state.eps))
            aux = self._aux(theta, segs[a].grid[0], state.states[a])
        else:
            spec = SegmentSpec("start", segs[0].grid, left_anchor=self.prior_x0,
                               right_anchor=state.states[1],
                               obs=self._obs(0, state.eps))
            aux = self._aux(theta, segs[0].grid[-1], state.states[1])
        return build_kernel(spec, aux, method=self.config.kernel_method,
                            ode_substep=self.config.ode_substep)

    def _block_path(self, state: ChainState, kind: str, a: int) -> PathSegment:
        if kind == "interior":
            segs = state.segments
            vals = np.concatenate([segs[a].values, segs[a + 1].values[1:]], axis=0)
            return PathSegment(self._joined_grids[a], vals)
        return state.segments[a]

    def _commit_block(self, state: ChainState, kind: str, a: int,
                      path: PathSegment) -> None:
        if kind == "interior":
            mid = self._seg_grids[a].shape[0] - 1
            state.segments[a] = PathSegment(self._seg_grids[a],
                                            path.values[:mid + 1].copy())
            state.segments[a + 1] = PathSegment(self._seg_grids[a + 1],
                                                path.values[mid:].copy())
            state.states[a + 1] = path.values[mid]
        elif kind == "end":
            state.segments[a] = path
            state.states[a + 1] = path.values[-1]
        else:
            state.segments[0] = path
            state.states[0] = path.values[0]

    # -- initialization --------------------------------------------------

    def init_chain(self) -> ChainState:
        """Draw a starting state and thread proposals interval by interval.

        Each interval is bridged toward its readout with an end-style
        kernel, so exact readouts (square L, zero noise) pin the interval
        endpoints to their observed values from the very first state.
        """
        cfg = self.config
        last_err: Exception | None = None
        for attempt in range(cfg.max_init_tries):
            rng = spawn_rng(cfg.seed, _PHASE_INIT, attempt)
            try:
                return self._init_once(rng)
            except (ProposalFailure, KernelBuildError) as err:
                last_err = err
        raise NumericError(
            f"initialization failed after {cfg.max_init_tries} attempts: {last_err}")

    def _init_once(self, rng: np.random.Generator) -> ChainState:
        cfg = self.config
        theta = cfg.theta_init.copy()
        eps = cfg.noise.init if cfg.noise is not None else None
        mean, cov = start_posterior(self.prior_x0, self._obs(0, eps))
        x = sample_gaussian(rng, mean, cov)
        states = [x]
        segments: list[PathSegment] = []
        for i in range(self.n):
            grid = self._seg_grids[i]
            spec = SegmentSpec("end", grid, left_anchor=states[-1],
                               right_anchor=None, obs=self._obs(i + 1, eps))
            aux = self._aux(theta, grid[0], states[-1])
            kernel = build_kernel(spec, aux, method=cfg.kernel_method,
                                  ode_substep=cfg.ode_substep)
            z = fresh_innovations(grid, self.model.dim_noise, rng)
            path = forward_guided(self.model, theta, kernel, z)
            segments.append(path)
            states.append(path.values[-1].copy())
        return ChainState(theta=theta, eps=eps, states=np.array(states),
                          segments=segments)

    # -- block passes ----------------------------------------------------

    def _update_block(self, state: ChainState, kind: str, a: int, b: int,
                      rng: np.random.Generator, kernel: GuidedKernel):
        theta = state.theta
        path_cur = self._block_path(state, kind, a)
        z = inverse_innovation(self.model, theta, kernel, path_cur)
        z_new = pcn_refresh(z, self.config.rho, rng)
        loga = 0.0
        kwargs = {}
        if kind == "start":
            mean, cov = start_posterior(self.prior_x0, self._obs(0, state.eps))
            x0_new = sample_gaussian(rng, mean, cov)
            kwargs["x0"] = x0_new
            t0 = float(kernel.grid[0])
            loga += kernel.log_ptilde(t0, x0_new) \
                - kernel.log_ptilde(t0, path_cur.values[0])
        try:
            path_new = forward_guided(self.model, theta, kernel, z_new, **kwargs)
        except ProposalFailure:
            w_cur = weigh_path(self.model, theta, kernel, path_cur)
            return False, w_cur.log_psi
        w_cur = weigh_path(self.model, theta, kernel, path_cur)
        w_new = weigh_path(self.model, theta, kernel, path_new)
        loga += w_new.log_weight - w_cur.log_weight
        if np.log(rng.uniform()) < loga:
            self._commit_block(state, kind, a, path_new)
            return True, w_new.log_psi
        return False, w_cur.log_psi

    def update_pass(self, state: ChainState, sweep: int, parity: str) -> float:
        phase = _PHASE_EVEN if parity == "even" else _PHASE_ODD
        blocks = blocks_for_parity(self.n, parity)
        kernels: dict[int, GuidedKernel] = {}
        n_acc = 0
        for bi, (kind, a, b) in enumerate(blocks):
            rng = spawn_rng(self.config.seed, phase, sweep, bi)
            kernel = self._block_kernel(state, kind, a, b, state.theta)
            kernels[bi] = kernel
            accepted, lpsi = self._update_block(state, kind, a, b, rng, kernel)
            n_acc += accepted
            if parity == "even":
                state.logpsi_even[bi] = lpsi
        # Kernels stay valid through the theta update that follows this
        # pass: block edge states are untouched by the pass itself.
        self._pass_cache = ((sweep, parity), kernels)
        return n_acc / len(blocks)

    # -- parameter updates -------------------------------------------------

    def update_theta(self, state: ChainState, sweep: int, parity: str) -> bool:
        """Innovation-coupled random walk move on theta.

        The innovations of the given parity's blocks are held fixed while
        theta moves, so each block path is re-threaded under the proposed
        parameter.  On acceptance the re-threaded paths replace the
        current ones (free mid and edge states move with them).
        """
        cfg = self.config
        phase = _PHASE_THETA_EVEN if parity == "even" else _PHASE_THETA_ODD
        rng = spawn_rng(cfg.seed, phase, sweep, 0)
        theta = state.theta
        theta_new = theta + self.theta_step * rng.standard_normal(theta.shape[0])
        lp_new = cfg.prior_logpdf(theta_new)
        if not np.isfinite(lp_new):
            return False
        loga = lp_new - cfg.prior_logpdf(theta)
        blocks = blocks_for_parity(self.n, parity)
        cache = getattr(self, "_pass_cache", None)
        cached = cache[1] if cache is not None and cache[0] == (sweep, parity) else {}
        commits = []
        try:
            for bi, (kind, a, b) in enumerate(blocks):
                k_cur = cached.get(bi)
                if k_cur is None:
                    k_cur = self._block_kernel(state, kind, a, b, theta)
                path_cur = self._block_path(state, kind, a)
                z = inverse_innovation(self.model, theta, k_cur, path_cur)
                k_new = self._block_kernel(state, kind, a, b, theta_new)
                kwargs = {"x0": path_cur.values[0]} if kind == "start" else {}
                path_new = forward_guided(self.model, theta_new, k_new, z, **kwargs)
                w_cur = weigh_path(self.model, theta, k_cur, path_cur)
                w_new = weigh_path(self.model, theta_new, k_new, path_new)
                t0 = float(path_cur.grid[0])
                x_left = path_cur.values[0]
                loga += w_new.log_weight - w_cur.log_weight
                loga += k_new.log_ptilde(t0, x_left) - k_cur.log_ptilde(t0, x_left)
                commits.append((kind, a, bi, path_new, w_new.log_psi))
        except (ProposalFailure, KernelBuildError, NumericError):
            return False
        if np.log(rng.uniform()) < loga:
            state.theta = theta_new
            self._pass_cache = None
            for kind, a, bi, path_new, lpsi in commits:
                self._commit_block(state, kind, a, path_new)
                if parity == "even":
                    state.logpsi_even[bi] = lpsi
            return True
        return False

    def update_noise_param(self, state: ChainState, sweep: int) -> bool:
        """Metropolis step on the readout noise parameter.

        The conditional target given the latent states is the prior times
        the readout noise densities at every observation time, including
        the initial one.
        """
        spec = self.config.noise
        if spec is None or state.eps is None:
            return False
        rng = spawn_rng(self.config.seed, _PHASE_NOISE, sweep, 0)
        eps = state.eps
        eps_new = eps + spec.proposal_scale * rng.standard_normal()
        lp_new = spec.prior_logpdf(eps_new)
        if not np.isfinite(lp_new):
            return False
        loga = lp_new - spec.prior_logpdf(eps)
        try:
            for i in range(self.n + 1):
                obs_cur = self._obs(i, eps)
                obs_new = self._obs(i, eps_new)
                resid = obs_cur.value - obs_cur.lmat @ state.states[i]
                loga += gauss_logpdf(resid, obs_new.cov) \
                    - gauss_logpdf(resid, obs_cur.cov)
        except NumericError:
            return False
        if np.log(rng.uniform()) < loga:
            state.eps = float(eps_new)
            return True
        return False

    # -- full runs ---------------------------------------------------------

    def full_path(self, state: ChainState) -> PathSegment:
        grid = state.segments[0].grid
        vals = state.segments[0].values
        for seg in state.segments[1:]:
            grid = join_grids(grid, seg.grid)
            vals = np.concatenate([vals, seg.values[1:]], axis=0)
        return PathSegment(grid, vals.copy())

    def run_chain(self) -> Trace:
        cfg = self.config
        state = self.init_chain()
        ns = cfg.n_sweeps
        p = state.theta.shape[0]
        theta_tr = np.empty((ns, p))
        eps_tr = np.full(ns, np.nan)
        acc_even = np.empty(ns)
        acc_odd = np.empty(ns)
        acc_theta = np.full(ns, np.nan)
        logpsi_tr = np.empty(ns)
        snapshots = []
        for sweep in range(ns):
            acc_even[sweep] = self.update_pass(state, sweep, "even")
            acc_t = []
            if self.theta_active and "even" in cfg.update_theta_in:
                acc_t.append(self.update_theta(state, sweep, "even"))
            acc_odd[sweep] = self.update_pass(state, sweep, "odd")
            if self.theta_active and "odd" in cfg.update_theta_in:
                acc_t.append(self.update_theta(state, sweep, "odd"))
            if cfg.noise is not None:
                self.update_noise_param(state, sweep)
            state.sweep = sweep + 1
            theta_tr[sweep] = state.theta
            if state.eps is not None:
                eps_tr[sweep] = state.eps
            if acc_t:
                acc_theta[sweep] = np.mean(acc_t)
            logpsi_tr[sweep] = sum(state.logpsi_even.values())
            if cfg.snapshot_every and (sweep + 1) % cfg.snapshot_every == 0:
                snapshots.append((sweep, self.full_path(state)))
        self.final_state = state
        return Trace(theta=theta_tr, eps=eps_tr, acc_even=acc_even,
                     acc_odd=acc_odd, acc_theta=acc_theta,
                     logpsi_total=logpsi_tr, snapshots=snapshots)


def init_chain(sampler: Sampler) -> ChainState:
    """Module-level alias for :meth:`Sampler.init_chain`."""
    return sampler.init_chain()


def update_even_blocks(sampler: Sampler, state: ChainState, sweep: int) -> float:
    """Refresh the odd-indexed states; returns the acceptance fraction."""
    return sampler.update_pass(state, sweep, "even")


def update_odd_blocks(sampler: Sampler, state: ChainState, sweep: int) -> float:
    """Refresh the even-indexed states (boundaries included)."""
    return sampler.update_pass(state, sweep, "odd")


def update_theta(sampler: Sampler, state: ChainState, sweep: int,
                 parity: str = "even") -> bool:
    """Module-level alias for :meth:`Sampler.update_theta`."""
    return sampler.update_theta(state, sweep, parity)


def update_noise_param(sampler: Sampler, state: ChainState, sweep: int) -> bool:
    """Module-level alias for :meth:`Sampler.update_noise_param`."""
    return sampler.update_noise_param(state, sweep)


def run_chain(sampler: Sampler) -> Trace:
    """Module-level alias for :meth:`Sampler.run_chain`."""
    return sampler.run_chain()
