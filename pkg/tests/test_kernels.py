"""Flow quantities, guiding kernels, pulls, and the start posterior."""
import numpy as np
import pytest

import fbridge as fb
from fbridge.oracles import finite_diff_grad, finite_diff_hess
from conftest import spd, full_rank_rows, random_interior_setup, random_end_setup


def generic_copy(aux):
    """Same coefficients, but forced through the ODE-integration route."""
    return fb.LinearAuxiliary(aux.dim_state, aux.dim_noise,
                              beta=aux.beta, bmat=aux.bmat, sigma=aux.sigma)


# -- flow quantities -------------------------------------------------------


def test_flow_routes_agree_for_constant_coefficients(rng):
    beta = rng.standard_normal(3)
    sigma = np.linalg.cholesky(spd(rng, 3))
    by_formula = fb.LinearAuxiliary.constant(beta, sigma)
    by_expm = fb.LinearAuxiliary.time_homogeneous(beta, np.zeros((3, 3)), sigma)
    assert by_formula.is_constant and by_expm.is_constant
    by_ode = generic_copy(by_formula)
    times = np.array([0.1, 0.34, 0.52, 0.9, 1.3])
    ref = fb.flow_quantities(by_formula, 1.5, times)
    for other in (by_expm, by_ode):
        got = fb.flow_quantities(other, 1.5, times, substep=1e-3)
        for a, b in zip(ref, got):
            assert np.allclose(a, b, atol=1e-10)


def test_flow_composition_matches_single_interval_calls(rng):
    d = 3
    bmat = rng.standard_normal((d, d)) * 0.8
    beta = rng.standard_normal(d)
    sigma = np.linalg.cholesky(spd(rng, d))
    aux = fb.LinearAuxiliary.time_homogeneous(beta, bmat, sigma)
    times = np.sort(rng.uniform(0.0, 1.8, size=9))
    horizon = 2.0
    phi, g, kk = fb.flow_quantities(aux, horizon, times)
    for i in range(times.shape[0]):
        p1, g1, k1 = fb.flow_quantities(aux, horizon, times[i:i + 1])
        assert np.allclose(phi[i], p1[0], atol=1e-12)
        assert np.allclose(g[i], g1[0], atol=1e-12)
        assert np.allclose(kk[i], k1[0], atol=1e-12)


def test_flow_rotation_has_trigonometric_transition(rng):
    om = 1.3
    aux = fb.LinearAuxiliary.time_homogeneous(
        np.zeros(2), [[0.0, om], [-om, 0.0]], np.eye(2))
    times = np.linspace(0.0, 1.5, 7)
    horizon = 2.0
    phi, _, kk = fb.flow_quantities(aux, horizon, times)
    for i, t in enumerate(times):
        ang = om * (horizon - t)
        expect = np.array([[np.cos(ang), np.sin(ang)],
                           [-np.sin(ang), np.cos(ang)]])
        assert np.allclose(phi[i], expect, atol=1e-12)
        # rotations preserve the identity diffusivity, so the accumulated
        # noise covariance is just elapsed time.
        assert np.allclose(kk[i], (horizon - t) * np.eye(2), atol=1e-12)


def test_flow_scalar_closed_forms(rng):
    b, beta, s = -1.7, 0.8, 0.6
    aux = fb.LinearAuxiliary.time_homogeneous([beta], [[b]], [[s]])
    times = np.array([0.0, 0.3, 0.95])
    phi, g, kk = fb.flow_quantities(aux, 1.0, times)
    for i, t in enumerate(times):
        dt = 1.0 - t
        assert phi[i, 0, 0] == pytest.approx(np.exp(b * dt), rel=1e-13)
        assert g[i, 0] == pytest.approx(beta * np.expm1(b * dt) / b, rel=1e-13)
        assert kk[i, 0, 0] == pytest.approx(
            s * s * np.expm1(2 * b * dt) / (2 * b), rel=1e-13)
    tiny = fb.LinearAuxiliary.time_homogeneous([beta], [[1e-16]], [[s]])
    phi, g, kk = fb.flow_quantities(tiny, 1.0, times)
    assert np.allclose(phi[:, 0, 0], 1.0, atol=1e-12)
    assert np.allclose(g[:, 0], beta * (1.0 - times), atol=1e-12)
    assert np.allclose(kk[:, 0, 0], s * s * (1.0 - times), atol=1e-12)


def test_flow_semigroup_identity_nonhomogeneous():
    def bmat(t):
        return np.array([[0.0, 1.0 + 0.3 * np.sin(t)], [-1.0, 0.1 * t]])

    def beta(t):
        return np.array([np.cos(t), 0.2])

    def sigma(t):
        return np.array([[0.5 + 0.1 * t, 0.0], [0.1, 0.4]])

    aux = fb.LinearAuxiliary(2, 2, beta=beta, bmat=bmat, sigma=sigma)
    t, s, h = 0.2, 0.9, 1.7
    sub = 1e-3
    phi_ht, g_ht, k_ht = (q[0] for q in fb.flow_quantities(
        aux, h, np.array([t]), substep=sub))
    phi_hs, g_hs, k_hs = (q[0] for q in fb.flow_quantities(
        aux, h, np.array([s]), substep=sub))
    phi_st, g_st, k_st = (q[0] for q in fb.flow_quantities(
        aux, s, np.array([t]), substep=sub))
    assert np.allclose(phi_ht, phi_hs @ phi_st, atol=1e-9)
    assert np.allclose(g_ht, g_hs + phi_hs @ g_st, atol=1e-9)
    assert np.allclose(k_ht, k_hs + phi_hs @ k_st @ phi_hs.T, atol=1e-9)


def test_gain_and_covariance_matches_flow(rng):
    aux = fb.LinearAuxiliary.time_homogeneous(
        rng.standard_normal(2), rng.standard_normal((2, 2)) * 0.5,
        np.linalg.cholesky(spd(rng, 2)))
    grid = np.linspace(0.0, 1.0, 5)
    g, kk = fb.gain_and_covariance(aux, 1.4, grid)
    _, g2, k2 = fb.flow_quantities(aux, 1.4, grid)
    assert np.array_equal(g, g2) and np.array_equal(kk, k2)
    phi = fb.fundamental_matrix(aux, grid, horizon=1.4)
    assert np.array_equal(phi, fb.flow_quantities(aux, 1.4, grid)[0])


# -- pulls against finite differences --------------------------------------


def test_guiding_r_is_gradient_of_log_density_spot_checks(rng):
    for _ in range(6):
        spec, aux = random_interior_setup(rng)
        kernel = fb.build_kernel(spec, aux)
        d = aux.dim_state
        s = spec.obs.time
        for t in (float(spec.grid[0]),
                  s - 0.31 * (s - spec.grid[0]),
                  s,
                  s + 0.47 * (spec.grid[-1] - s)):
            x = rng.standard_normal(d)
            grad = finite_diff_grad(lambda y: kernel.log_ptilde(t, y), x)
            r = kernel.guiding_r(t, x)
            assert np.allclose(r, grad, atol=1e-6 * max(1.0, np.max(np.abs(r))))
            hess = finite_diff_hess(lambda y: kernel.log_ptilde(t, y), x, h=1e-4)
            assert np.allclose(kernel.guiding_H(t), -hess, atol=1e-5)


def test_pull_branches_differ_by_readout_score(rng):
    spec, aux = random_interior_setup(rng, force_constant=True)
    kernel = fb.build_kernel(spec, aux)
    s = spec.obs.time
    L, sig = spec.obs.lmat, spec.obs.cov
    x = rng.standard_normal(aux.dim_state)
    jump = L.T @ np.linalg.solve(sig, spec.obs.value - L @ x)
    left_limit = kernel.limit_r_at_S(x)
    assert np.allclose(left_limit, kernel.guiding_r(s, x) + jump, atol=1e-10)
    # approaching from the left reproduces the limit
    approach = kernel.guiding_r(s - 1e-9, x)
    assert np.allclose(approach, left_limit, atol=1e-5)


def test_limit_r_guards():
    grid = np.linspace(0.0, 1.0, 5)
    aux = fb.LinearAuxiliary.constant(np.zeros(1), np.eye(1))
    obs = fb.Observation(1.0, np.eye(1), np.eye(1) * 0.1, np.zeros(1))
    end = fb.boundary_kernel_end(grid, np.zeros(1), obs, aux)
    with pytest.raises(ValueError):
        end.limit_r_at_S(np.zeros(1))
    mid_obs = fb.Observation(0.5, np.eye(1), np.zeros((1, 1)), np.zeros(1))
    spec = fb.SegmentSpec("interior", grid, np.zeros(1), np.ones(1), obs=mid_obs)
    hard = fb.build_kernel(spec, aux)
    with pytest.raises(ValueError):
        hard.limit_r_at_S(np.zeros(1))


# -- closed-form examples ---------------------------------------------------


def test_scalar_bridge_precision_matches_hand_inverse():
    # Driftless unit-noise scalar case with an exact mid readout: the
    # two-constraint precision has an explicit 2x2 inverse.
    t0, s, t1 = 0.0, 1.0, 2.5
    grid = np.array([t0, 0.4, s, 1.7, t1])
    aux = fb.LinearAuxiliary.constant(np.zeros(1), np.eye(1))
    obs = fb.Observation(s, np.eye(1), np.zeros((1, 1)), np.array([0.3]))
    spec = fb.SegmentSpec("interior", grid, np.zeros(1), np.array([1.0]),
                          obs=obs)
    kernel = fb.build_kernel(spec, aux, method="generic")
    for t in (0.1, 0.5, 0.85):
        u = kernel.precision_U(t)
        den = (s - t) * (t1 - s)
        expect = np.array([[t1 - t, -(s - t)], [-(s - t), s - t]]) / den
        assert np.allclose(u, expect, atol=1e-12)


def test_planar_noisy_mid_readout_gain_formula():
    # Planar driftless unit-noise case observing only the first component
    # at the mid time: the blending weight has a scalar closed form.
    t0, s, t1 = 0.0, 1.0, 3.0
    sig = 0.35
    grid = np.sort(np.concatenate([[t0, s, t1], np.linspace(0.1, 2.9, 8)]))
    aux = fb.LinearAuxiliary.constant(np.zeros(2), np.eye(2))
    obs = fb.Observation(s, np.array([[1.0, 0.0]]), np.array([[sig]]),
                         np.array([0.7]))
    spec = fb.SegmentSpec("interior", grid, np.zeros(2),
                          np.array([0.4, -0.2]), obs=obs)
    kernel = fb.build_kernel(spec, aux)
    for t in np.linspace(0.02, 0.98, 20):
        n_expect = (s - t) * (t1 - s) / ((s - t) * (t1 - s) + sig * (t1 - t))
        hh = kernel.guiding_H(t)
        qmat = ((t1 - t) * hh - np.eye(2)) * (s - t) / (t1 - s)
        assert abs(qmat[0, 0] - n_expect) < 1e-12
        assert np.max(np.abs(qmat - np.array([[n_expect, 0.0], [0.0, 0.0]]))) \
            < 1e-12


def test_end_kernel_noise_extremes(rng):
    grid = np.linspace(0.0, 1.0, 6)
    aux = fb.LinearAuxiliary.constant(np.array([0.2, -0.1]),
                                      np.linalg.cholesky(spd(rng, 2)))
    L = np.array([[1.0, 0.4], [0.0, 1.0]])
    v = np.array([0.5, -0.3])
    x = rng.standard_normal(2)
    vague = fb.Observation(1.0, L, np.eye(2) * 1e8, v)
    k_vague = fb.boundary_kernel_end(grid, np.zeros(2), vague, aux)
    assert np.max(np.abs(k_vague.guiding_r(0.5, x))) < 1e-5
    exact = fb.Observation(1.0, L, np.zeros((2, 2)), v)
    k_exact = fb.boundary_kernel_end(grid, np.zeros(2), exact, aux)
    assert np.allclose(k_exact.hard_right_state, np.linalg.solve(L, v),
                       atol=1e-12)
    assert k_vague.hard_right_state is None


def test_interior_exact_mid_readout_is_pinned():
    grid = fb.make_grid(0.0, 2.0, 8)
    aux = fb.LinearAuxiliary.constant(np.zeros(2), np.eye(2))
    L = np.array([[2.0, 1.0], [0.0, 1.0]])
    v = np.array([1.0, 0.5])
    obs = fb.Observation(1.0, L, np.zeros((2, 2)), v)
    spec = fb.SegmentSpec("interior", grid, np.zeros(2), np.ones(2), obs=obs)
    kernel = fb.build_kernel(spec, aux)
    assert np.allclose(kernel.hard_mid_state, np.linalg.solve(L, v), atol=1e-12)
    partial = fb.Observation(1.0, np.array([[1.0, 0.0]]), np.zeros((1, 1)),
                             np.array([1.0]))
    spec2 = fb.SegmentSpec("interior", grid, np.zeros(2), np.ones(2),
                           obs=partial)
    assert fb.build_kernel(spec2, aux).hard_mid_state is None


def test_precision_shapes_track_the_phase(rng):
    spec, aux = random_interior_setup(rng)
    kernel = fb.build_kernel(spec, aux)
    d = aux.dim_state
    m = spec.obs.lmat.shape[0]
    before = kernel.precision_U(float(spec.grid[0]))
    after = kernel.precision_U(spec.obs.time + 1e-3)
    assert before.shape == (m + d, m + d)
    assert after.shape == (d, d)
    espec, eaux = random_end_setup(rng)
    ek = fb.build_kernel(espec, eaux)
    em = espec.obs.lmat.shape[0]
    assert ek.precision_U(float(espec.grid[0])).shape == (em, em)


def test_log_ptilde_equals_gaussian_readout_density_for_end_kind(rng):
    # With one readout, the end-kind log density must equal the Gaussian
    # density of v - L(Phi x + g) under the accumulated covariance.
    spec, aux = random_end_setup(rng)
    kernel = fb.build_kernel(spec, aux)
    t = float(spec.grid[2])
    x = rng.standard_normal(aux.dim_state)
    phi, g, kk = (q[0] for q in fb.flow_quantities(aux, spec.obs.time,
                                                   np.array([t])))
    L = spec.obs.lmat
    resid = spec.obs.value - L @ (phi @ x + g)
    cov = L @ kk @ L.T + spec.obs.cov
    m = resid.shape[0]
    sign, logdet = np.linalg.slogdet(cov)
    expect = -0.5 * (m * np.log(2 * np.pi) + logdet
                     + resid @ np.linalg.solve(cov, resid))
    assert kernel.log_ptilde(t, x) == pytest.approx(expect, abs=1e-10)


# -- configuration guards ---------------------------------------------------


def test_schur_route_guards(rng):
    spec, _ = random_interior_setup(rng, force_constant=True)
    d = spec.obs.lmat.shape[1]
    moving = fb.LinearAuxiliary.time_homogeneous(
        np.zeros(d), np.eye(d) * 0.3, np.eye(d))
    with pytest.raises(fb.ConfigError):
        fb.build_kernel(spec, moving, method="schur")
    espec, eaux = random_end_setup(rng)
    still = fb.LinearAuxiliary.constant(np.zeros(eaux.dim_state),
                                        np.eye(eaux.dim_state))
    with pytest.raises(fb.ConfigError):
        fb.build_kernel(espec, still, method="schur")


def test_surrogate_noise_must_vanish_with_the_data_noise():
    grid = fb.make_grid(0.0, 1.0, 4)
    aux = fb.LinearAuxiliary.constant(np.zeros(1), np.eye(1))
    obs = fb.Observation(1.0, np.eye(1), np.zeros((1, 1)), np.zeros(1))
    with pytest.raises(fb.ConfigError):
        fb.boundary_kernel_end(grid, np.zeros(1), obs, aux,
                               obs_cov_tilde=np.eye(1) * 0.1)
    noisy = fb.Observation(1.0, np.eye(1), np.eye(1) * 0.1, np.zeros(1))
    with pytest.raises(fb.ConfigError):
        fb.boundary_kernel_end(grid, np.zeros(1), noisy, aux,
                               obs_cov_tilde=np.zeros((1, 1)))


def test_degenerate_auxiliary_noise_fails_loudly():
    grid = fb.make_grid(0.0, 1.0, 4)
    dead = fb.LinearAuxiliary.constant(np.zeros(1), np.zeros((1, 1)))
    obs = fb.Observation(1.0, np.eye(1), np.zeros((1, 1)), np.zeros(1))
    spec = fb.SegmentSpec("interior", fb.make_grid(0.0, 2.0, 4), np.zeros(1),
                          np.ones(1), obs=fb.Observation(
                              1.0, np.eye(1), np.zeros((1, 1)), np.zeros(1)))
    with pytest.raises((fb.KernelBuildError, fb.NumericError)):
        fb.build_kernel(spec, dead, method="generic")
    with pytest.raises((fb.KernelBuildError, fb.NumericError)):
        fb.boundary_kernel_end(grid, np.zeros(1), obs, dead, method="generic")


def test_segment_spec_validation(rng):
    grid = fb.make_grid(0.0, 1.0, 4)
    obs_mid = fb.Observation(0.5, np.eye(1), np.eye(1) * 0.1, np.zeros(1))
    obs_end = fb.Observation(1.0, np.eye(1), np.eye(1) * 0.1, np.zeros(1))
    with pytest.raises(fb.ConfigError):
        fb.SegmentSpec("interior", grid, np.zeros(1), None, obs=obs_mid)
    with pytest.raises(fb.ConfigError):
        fb.SegmentSpec("interior", grid, np.zeros(1), np.ones(1), obs=obs_end)
    with pytest.raises(fb.ConfigError):
        fb.SegmentSpec("end", grid, np.zeros(1), np.ones(1), obs=obs_end)
    with pytest.raises(fb.ConfigError):
        fb.SegmentSpec("end", grid, np.zeros(1), None, obs=obs_mid)
    with pytest.raises(fb.ConfigError):
        fb.SegmentSpec("middle", grid, np.zeros(1), np.ones(1), obs=obs_mid)
    with pytest.raises(fb.ConfigError):
        fb.SegmentSpec("interior", grid[::-1], np.zeros(1), np.ones(1),
                       obs=obs_mid)


# -- start posterior --------------------------------------------------------


def test_start_posterior_conjugate_two_dimensional():
    prior = fb.StartPrior(mean=np.array([1.0, -1.0]),
                          cov=np.diag([2.0, 0.5]))
    L = np.array([[1.0, 0.0]])
    obs = fb.Observation(0.0, L, np.array([[0.5]]), np.array([2.0]))
    mean, cov = fb.start_posterior(prior, obs)
    # scalar conjugate update on the first coordinate, second untouched
    prec = 1.0 / 2.0 + 1.0 / 0.5
    m1 = (1.0 / 2.0 * 1.0 + 1.0 / 0.5 * 2.0) / prec
    assert np.allclose(mean, [m1, -1.0], atol=1e-12)
    assert np.allclose(cov, np.diag([1.0 / prec, 0.5]), atol=1e-12)


def test_start_posterior_exact_readout_pins_the_state():
    prior = fb.StartPrior(mean=np.zeros(2), cov=np.eye(2) * 3.0)
    obs = fb.Observation(0.0, np.eye(2), np.zeros((2, 2)),
                         np.array([0.7, -0.2]))
    mean, cov = fb.start_posterior(prior, obs)
    assert np.allclose(mean, obs.value, atol=1e-12)
    assert np.allclose(cov, 0.0, atol=1e-12)


def test_start_posterior_point_prior_is_inert():
    prior = fb.StartPrior(mean=np.array([0.4]), cov=np.zeros((1, 1)))
    obs = fb.Observation(0.0, np.eye(1), np.eye(1) * 0.2, np.array([5.0]))
    mean, cov = fb.start_posterior(prior, obs)
    assert np.allclose(mean, [0.4], atol=1e-15)
    assert np.allclose(cov, 0.0, atol=1e-15)


def test_start_posterior_singular_total_covariance_raises():
    prior = fb.StartPrior(mean=np.zeros(1), cov=np.zeros((1, 1)))
    obs = fb.Observation(0.0, np.eye(1), np.zeros((1, 1)), np.zeros(1))
    with pytest.raises(fb.NumericError):
        fb.start_posterior(prior, obs)
