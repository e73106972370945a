"""Command line entry points.

Subcommands:

* ``simulate``: draw a path of a registered model, read it out at the
  configured times, and write the observation CSV, its JSON sidecar, and
  the fine truth path.
* ``infer``: run the block sampler on an observation file and write a
  JSON-lines trace plus a summary.
* ``smooth``: run the sampler with the parameter held fixed and write
  posterior bands for the latent path.
* ``validate``: run a battery of internal cross-checks and report one
  line per check.

Exit codes: 0 on success, 2 for configuration problems, 3 for numeric
failures (including failed validation checks).
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import fileio
from .errors import ConfigError, FbridgeError, NumericError
from .bridges import (forward_guided, fresh_innovations, inverse_innovation,
                      log_psi)
from .kernels import SegmentSpec, build_kernel, start_posterior
from .mcmc import ChainConfig, NoiseParamSpec, Sampler
from .models import (LinearAuxiliary, Observation, ObservationScheme,
                     StartPrior, auto_auxiliary, make_grid, make_model,
                     model_linear_auxiliary, sample_observations,
                     simulate_euler)
from .oracles import (dense_obs_loglik, finite_diff_grad, kalman_loglik,
                      linear_ssm)
from .utils import spawn_rng


def _require(cfg: dict, key: str) -> str:
    if key not in cfg:
        raise ConfigError(f"config key '{key}' is required")
    return cfg[key]


def _build_model(cfg: dict):
    name = _require(cfg, "model")
    kwargs = {}
    if name == "bm" and "dim" in cfg:
        kwargs["dim"] = int(cfg["dim"])
    return make_model(name, **kwargs)


def _prior_vector(spec: str, dim: int):
    """Parse a prior spec for the parameter vector.

    'flat' is improper uniform, 'flat-pos' restricts to positive
    components, 'normal:m,s' is iid Gaussian, and per-component Gaussian
    specs are separated by ';' ('normal:1,1;0,10;0.5,0.5').
    """
    spec = spec.strip()
    if spec == "flat":
        return lambda th: 0.0
    if spec == "flat-pos":
        return lambda th: 0.0 if np.all(th > 0) else -np.inf
    if spec.startswith("normal:"):
        parts = spec[len("normal:"):].split(";")
        if len(parts) == 1:
            m, s = (float(v) for v in parts[0].split(","))
            means = np.full(dim, m)
            sds = np.full(dim, s)
        elif len(parts) == dim:
            means = np.array([float(p.split(",")[0]) for p in parts])
            sds = np.array([float(p.split(",")[1]) for p in parts])
        else:
            raise ConfigError("per-component prior spec count must equal the "
                              "parameter dimension")
        if np.any(sds <= 0):
            raise ConfigError("prior standard deviations must be positive")

        def logpdf(th):
            return float(-0.5 * np.sum(((th - means) / sds) ** 2))

        return logpdf
    raise ConfigError(f"cannot parse prior spec '{spec}'")


def _prior_scalar(spec: str):
    spec = spec.strip()
    if spec == "flat-pos":
        return lambda e: 0.0 if e > 0 else -np.inf
    if spec.startswith("invgamma:"):
        a, b = (float(v) for v in spec[len("invgamma:"):].split(","))
        if a <= 0 or b <= 0:
            raise ConfigError("inverse gamma parameters must be positive")

        def logpdf(e):
            if e <= 0:
                return -np.inf
            return float(-(a + 1.0) * np.log(e) - b / e)

        return logpdf
    if spec.startswith("normal:"):
        m, s = (float(v) for v in spec[len("normal:"):].split(","))
        return lambda e: float(-0.5 * ((e - m) / s) ** 2)
    raise ConfigError(f"cannot parse noise prior spec '{spec}'")


def _aux_builder(cfg: dict):
    choice = cfg.get("aux", "auto")
    if choice == "auto":
        return None
    if choice == "model":
        return model_linear_auxiliary
    raise ConfigError(f"aux must be 'auto' or 'model', got '{choice}'")


def _chain_config(cfg: dict, args, model) -> ChainConfig:
    theta_init = fileio.parse_vector(_require(cfg, "theta"))
    sweeps = args.sweeps if args.sweeps is not None else int(cfg.get("sweeps", 1000))
    steps = args.steps_per_segment if args.steps_per_segment is not None else \
        int(cfg.get("steps_per_segment", 50))
    rho = args.rho if args.rho is not None else float(cfg.get("rho", 0.0))
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    step_txt = cfg.get("theta_step", "0.1")
    theta_step = fileio.parse_vector(step_txt)
    if theta_step.shape[0] == 1:
        theta_step = np.full(model.parameter_dim, theta_step[0])
    prior = _prior_vector(cfg.get("prior", "flat"), model.parameter_dim)
    parities = tuple(p.strip() for p in cfg.get("theta_in", "even").split(",")
                     if p.strip())
    noise = None
    if "noise_prior" in cfg:
        noise = NoiseParamSpec(init=float(cfg.get("noise_init", "1.0")),
                               prior_logpdf=_prior_scalar(cfg["noise_prior"]),
                               proposal_scale=float(cfg.get("noise_step", "0.1")))
    return ChainConfig(theta_init=theta_init, prior_logpdf=prior,
                       n_sweeps=sweeps, steps_per_segment=steps, rho=rho,
                       seed=seed, theta_step=theta_step,
                       update_theta_in=parities, aux_builder=_aux_builder(cfg),
                       noise=noise,
                       snapshot_every=int(cfg.get("snapshot_every", "0")))


def _start_prior(cfg: dict, dim: int) -> StartPrior:
    mean = fileio.parse_vector(cfg.get("prior_x0_mean", "0")) if "prior_x0_mean" \
        in cfg else np.zeros(dim)
    if mean.shape[0] == 1 and dim > 1:
        mean = np.full(dim, mean[0])
    var = float(cfg.get("prior_x0_var", "100"))
    return StartPrior(mean, var * np.eye(dim))


def _summary(trace, burn_in: int) -> dict:
    keep = slice(burn_in, None)
    theta = trace.theta[keep]
    # components that never moved get an exact zero spread, not the
    # rounding residue of np.std over identical values
    sd = np.where(np.ptp(theta, axis=0) == 0.0, 0.0, theta.std(axis=0))
    out = {
        "n_sweeps": int(trace.n_sweeps),
        "burn_in": int(burn_in),
        "theta_mean": [float(v) for v in theta.mean(axis=0)],
        "theta_sd": [float(v) for v in sd],
        "acc_even_mean": float(np.mean(trace.acc_even[keep])),
        "acc_odd_mean": float(np.mean(trace.acc_odd[keep])),
    }
    acc_t = trace.acc_theta[keep]
    if np.any(np.isfinite(acc_t)):
        out["acc_theta_mean"] = float(np.nanmean(acc_t))
    eps = trace.eps[keep]
    if np.any(np.isfinite(eps)):
        out["eps_mean"] = float(np.nanmean(eps))
        out["eps_sd"] = float(np.nanstd(eps))
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    cfg = fileio.parse_config(args.config)
    model = _build_model(cfg)
    theta = fileio.parse_vector(_require(cfg, "theta"))
    x0 = fileio.parse_vector(_require(cfg, "x0"))
    t0 = float(cfg.get("t0", "0"))
    dt = float(_require(cfg, "dt"))
    n_obs = int(_require(cfg, "n_obs"))
    sim_steps = int(cfg.get("sim_steps", "100"))
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    if "lmat" in cfg and cfg["lmat"] != "auto":
        lmat = fileio.parse_matrix(cfg["lmat"])
    else:
        lmat = np.eye(model.dim_state)
    obs_var = float(cfg.get("obs_var", "0"))
    m = lmat.shape[0]
    times = t0 + dt * np.arange(n_obs + 1)
    scheme = ObservationScheme(times, [lmat] * (n_obs + 1),
                               [obs_var * np.eye(m)] * (n_obs + 1))
    rng = spawn_rng(seed, 0)
    grid = make_grid(t0, t0 + n_obs * dt, n_obs * sim_steps)
    path = simulate_euler(model, theta, x0, grid, rng=rng)
    scheme = sample_observations(path, scheme, rng)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fileio.write_observations(out / "obs.csv", out / "obs.json", scheme)
    fileio.write_path_csv(out / "truth.csv", path)
    print(f"wrote {out / 'obs.csv'}, {out / 'obs.json'}, {out / 'truth.csv'}")
    return 0


def _run_sampler(args, fixed_theta: bool):
    cfg = fileio.parse_config(args.config)
    model = _build_model(cfg)
    obs_path = Path(_require(cfg, "obs"))
    scheme = fileio.read_observations(obs_path,
                                      cfg.get("obs_schema"))
    chain_cfg = _chain_config(cfg, args, model)
    if fixed_theta:
        chain_cfg.theta_step = 0.0
        chain_cfg.update_theta_in = ()
        if chain_cfg.snapshot_every == 0:
            chain_cfg.snapshot_every = max(1, chain_cfg.n_sweeps // 400)
    prior_x0 = _start_prior(cfg, model.dim_state)
    sampler = Sampler(model, scheme, prior_x0, chain_cfg)
    trace = sampler.run_chain()
    burn_in = int(cfg.get("burn_in", max(1, chain_cfg.n_sweeps // 5)))
    return cfg, sampler, trace, burn_in


def cmd_infer(args) -> int:
    cfg, sampler, trace, burn_in = _run_sampler(args, fixed_theta=False)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fileio.write_trace_jsonl(out / "trace.jsonl", trace)
    summary = _summary(trace, burn_in)
    fileio.write_summary_json(out / "summary.json", summary)
    mean_txt = ", ".join(f"{v:.4g}" for v in summary["theta_mean"])
    print(f"theta posterior mean [{mean_txt}] "
          f"(acc even {summary['acc_even_mean']:.2f}, "
          f"odd {summary['acc_odd_mean']:.2f})")
    print(f"wrote {out / 'trace.jsonl'}, {out / 'summary.json'}")
    return 0


def cmd_smooth(args) -> int:
    cfg, sampler, trace, burn_in = _run_sampler(args, fixed_theta=True)
    snaps = [seg for sweep, seg in trace.snapshots if sweep >= burn_in]
    if not snaps:
        raise ConfigError("no path snapshots after burn-in; raise sweeps or "
                          "lower snapshot_every")
    stack = np.stack([seg.values for seg in snaps])
    grid = snaps[0].grid
    mean = stack.mean(axis=0)
    lo = np.quantile(stack, 0.025, axis=0)
    hi = np.quantile(stack, 0.975, axis=0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fileio.write_band_csv(out / "smooth.csv", grid, mean, lo, hi)
    fileio.write_trace_jsonl(out / "trace.jsonl", trace)
    fileio.write_summary_json(out / "summary.json", _summary(trace, burn_in))
    print(f"wrote {out / 'smooth.csv'} from {len(snaps)} path draws")
    return 0


# ---------------------------------------------------------------------------
# validation battery


def _check_pull_gradient(rng, bias: float):
    """Pull equals the log density gradient of the surrogate (by FD)."""
    worst = 0.0
    for _ in range(20):
        d = int(rng.integers(1, 4))
        m = int(rng.integers(1, d + 1))
        beta = rng.normal(size=d)
        smat = rng.normal(size=(d, d)) * 0.3 + np.eye(d)
        aux = LinearAuxiliary.constant(beta, smat)
        lmat = rng.normal(size=(m, d))
        sig = 0.2 * np.eye(m)
        t_grid = make_grid(0.0, 1.0, 20)
        obs = Observation(0.5, lmat, sig, rng.normal(size=m))
        spec = SegmentSpec("interior", t_grid, left_anchor=rng.normal(size=d),
                           right_anchor=rng.normal(size=d), obs=obs)
        kernel = build_kernel(spec, aux)
        for t in (0.23, 0.77):
            x = rng.normal(size=d)
            grad = kernel.guiding_r(t, x) + bias
            fd = finite_diff_grad(lambda y: kernel.log_ptilde(t, y), x, h=1e-5)
            err = np.max(np.abs(grad - fd) / (1.0 + np.abs(fd)))
            worst = max(worst, float(err))
    return worst, 1e-6


def _check_route_agreement(rng, bias: float):
    """Generic and closed-form constant-coefficient routes agree."""
    worst = 0.0
    for _ in range(10):
        d = int(rng.integers(1, 4))
        m = int(rng.integers(1, d + 1))
        aux = LinearAuxiliary.constant(rng.normal(size=d),
                                       rng.normal(size=(d, d)) * 0.2 + np.eye(d))
        obs = Observation(0.6, rng.normal(size=(m, d)), 0.3 * np.eye(m),
                          rng.normal(size=m))
        spec = SegmentSpec("interior", make_grid(0.0, 1.0, 10),
                           left_anchor=rng.normal(size=d),
                           right_anchor=rng.normal(size=d), obs=obs)
        k1 = build_kernel(spec, aux, method="generic")
        k2 = build_kernel(spec, aux, method="schur")
        for t in (0.15, 0.45, 0.8):
            x = rng.normal(size=d)
            err = np.max(np.abs(k1.guiding_r(t, x) - k2.guiding_r(t, x)))
            worst = max(worst, float(err))
    return worst, 1e-9


def _check_round_trip(rng, bias: float):
    """Innovations invert the forward map."""
    model = make_model("ou")
    theta = np.array([1.2, 0.4, 0.7])
    worst = 0.0
    for _ in range(10):
        grid = make_grid(0.0, 1.0, 30)
        obs = Observation(1.0, np.eye(1), 0.1 * np.eye(1), rng.normal(size=1))
        spec = SegmentSpec("end", grid, left_anchor=rng.normal(size=1),
                           right_anchor=None, obs=obs)
        aux = auto_auxiliary(model, theta, 0.0, spec.left_anchor)
        kernel = build_kernel(spec, aux)
        z = fresh_innovations(grid, 1, rng)
        path = forward_guided(model, theta, kernel, z)
        z_back = inverse_innovation(model, theta, kernel, path)
        path_back = forward_guided(model, theta, kernel, z_back)
        worst = max(worst, float(np.max(np.abs(path_back.values - path.values))))
    return worst, 1e-10


def _check_exact_weight(rng, bias: float):
    """Path weight vanishes when the model equals its auxiliary."""
    model = make_model("bm", dim=2)
    theta = np.array([0.3, -0.5])
    worst = 0.0
    for _ in range(10):
        grid = make_grid(0.0, 2.0, 40)
        obs = Observation(1.0, np.array([[1.0, 0.0]]), 0.2 * np.eye(1),
                          rng.normal(size=1))
        spec = SegmentSpec("interior", grid, left_anchor=rng.normal(size=2),
                           right_anchor=rng.normal(size=2), obs=obs)
        aux = model_linear_auxiliary(model, theta, 2.0, spec.right_anchor)
        kernel = build_kernel(spec, aux)
        path = forward_guided(model, theta, kernel,
                              fresh_innovations(grid, 2, rng))
        worst = max(worst, abs(log_psi(model, theta, kernel, path)))
    return worst, 1e-10


def _check_filter_consistency(rng, bias: float):
    """Kalman recursion matches one dense joint-Gaussian evaluation."""
    times = np.array([0.0, 0.5, 1.0, 1.5])
    ssm = linear_ssm([[-0.8]], [0.4], [[0.6]], times,
                     [np.eye(1)] * 4, [0.1 * np.eye(1)] * 4)
    values = [rng.normal(size=1) for _ in range(4)]
    mu, cc = np.zeros(1), np.eye(1)
    err = abs(kalman_loglik(ssm, values, mu, cc)
              - dense_obs_loglik(ssm, values, mu, cc))
    return float(err), 1e-10


def cmd_validate(args) -> int:
    rng = spawn_rng(int(args.seed or 0), 99)
    bias = float(args.inject_pull_bias)
    checks = [
        ("pull-gradient-consistency", _check_pull_gradient),
        ("constant-route-agreement", _check_route_agreement),
        ("innovation-round-trip", _check_round_trip),
        ("exact-model-weight", _check_exact_weight),
        ("filter-consistency", _check_filter_consistency),
    ]
    failed = False
    for name, fn in checks:
        err, tol = fn(rng, bias)
        ok = err <= tol
        failed = failed or not ok
        tag = "ok  " if ok else "FAIL"
        print(f"{tag} {name:32s} max_err={err:.3e} tol={tol:.0e}")
    if failed:
        print("validation failed")
        return 3
    print("all checks passed")
    return 0


# ---------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fbridge",
        description="Guided bridge proposals and block sampling for "
                    "partially observed diffusions.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        p.add_argument("--config", required=needs_config,
                       help="flat key = value run configuration")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--sweeps", type=int, default=None)
        p.add_argument("--rho", type=float, default=None)
        p.add_argument("--steps-per-segment", type=int, default=None)

    p_sim = sub.add_parser("simulate", help="simulate a path and observations")
    common(p_sim)
    p_sim.set_defaults(func=cmd_simulate)

    p_inf = sub.add_parser("infer", help="sample parameters and paths")
    common(p_inf)
    p_inf.set_defaults(func=cmd_infer)

    p_smo = sub.add_parser("smooth", help="posterior bands for the latent path")
    common(p_smo)
    p_smo.set_defaults(func=cmd_smooth)

    p_val = sub.add_parser("validate", help="run internal cross-checks")
    common(p_val, needs_config=False)
    p_val.add_argument("--inject-pull-bias", type=float, default=0.0,
                       help="debug: add a bias to the pull to show the "
                            "gradient check fails")
    p_val.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return 2
    except ValueError as err:
        print(f"invalid value: {err}", file=sys.stderr)
        return 2
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return 3
    except FbridgeError as err:
        print(f"error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
