"""Model containers, grids, observation schemes, forward simulation."""
import numpy as np
import pytest

import fbridge as fb
from conftest import cubic_model


def test_make_grid_values_and_errors():
    g = fb.make_grid(0.0, 1.0, 4)
    assert np.allclose(g, [0.0, 0.25, 0.5, 0.75, 1.0])
    with pytest.raises(fb.ConfigError):
        fb.make_grid(1.0, 1.0, 4)


def test_join_grids_shares_junction():
    left = fb.make_grid(0.0, 1.0, 2)
    right = fb.make_grid(1.0, 3.0, 3)
    joined = fb.join_grids(left, right)
    assert joined.shape[0] == left.shape[0] + right.shape[0] - 1
    assert np.allclose(joined, [0.0, 0.5, 1.0, 5.0 / 3.0, 7.0 / 3.0, 3.0])
    with pytest.raises(fb.ConfigError):
        fb.join_grids(left, fb.make_grid(1.5, 2.0, 2))


def test_simulate_euler_matches_hand_rolled_steps():
    model = fb.make_model("ou")
    theta = np.array([2.0, -0.3, 0.7])
    grid = np.array([0.0, 0.1, 0.25, 0.45])
    noise = np.array([[0.3], [-0.2], [0.55]])
    path = fb.simulate_euler(model, theta, np.array([1.1]), grid, noise=noise)
    x = 1.1
    for k in range(3):
        dt = grid[k + 1] - grid[k]
        x = x + theta[0] * (theta[1] - x) * dt + theta[2] * noise[k, 0]
        assert path.values[k + 1, 0] == pytest.approx(x, abs=1e-14)
    assert path.values[0, 0] == 1.1


def test_simulate_euler_seed_reproducible():
    model = fb.make_model("2d-bm")
    theta = np.array([0.2, -0.1])
    grid = fb.make_grid(0.0, 1.0, 64)
    one = fb.simulate_euler(model, theta, np.zeros(2), grid,
                            rng=np.random.default_rng(5))
    two = fb.simulate_euler(model, theta, np.zeros(2), grid,
                            rng=np.random.default_rng(5))
    assert np.array_equal(one.values, two.values)


def test_simulate_euler_divergence_raises():
    def drift(theta, t, x):
        with np.errstate(over="ignore"):
            return x ** 3

    def dispersion(theta, t, x):
        return np.broadcast_to(np.eye(1), np.shape(x)[:-1] + (1, 1))

    hot = fb.DiffusionModel("hot", 1, 1, 1, drift, dispersion)
    grid = fb.make_grid(0.0, 5.0, 50)
    with pytest.raises(fb.NumericError):
        fb.simulate_euler(hot, np.zeros(1), np.array([4.0]), grid,
                          rng=np.random.default_rng(0))


def test_observation_scheme_validation():
    eye = np.eye(2)
    with pytest.raises(fb.ConfigError):
        fb.ObservationScheme([0.0, 1.0, 0.5], [eye] * 3, [eye * 0.1] * 3)
    with pytest.raises(fb.ConfigError):
        fb.ObservationScheme([0.0, 1.0], [np.array([[1.0, 2.0], [2.0, 4.0]])] * 2,
                             [eye * 0.1] * 2)
    with pytest.raises(fb.ConfigError):
        fb.ObservationScheme([0.0, 1.0], [eye] * 2,
                             [np.array([[0.1, 0.3], [0.0, 0.1]])] * 2)
    with pytest.raises(fb.ConfigError):
        fb.ObservationScheme([0.0, 1.0], [np.ones((3, 2))] * 2, [np.eye(3)] * 2)
    sch = fb.ObservationScheme([0.0, 1.0], [eye] * 2, [eye * 0.1] * 2)
    with pytest.raises(fb.ConfigError):
        sch.observation(0)
    with pytest.raises(fb.ConfigError):
        sch.with_values([np.zeros(2)])


def test_sample_observations_exact_readout_is_linear_map():
    model = fb.make_model("2d-bm")
    grid = fb.make_grid(0.0, 2.0, 40)
    path = fb.simulate_euler(model, np.array([0.1, 0.2]), np.zeros(2), grid,
                             rng=np.random.default_rng(1))
    L = np.array([[1.0, 0.0]])
    sch = fb.ObservationScheme([0.0, 1.0, 2.0], [L] * 3, [np.zeros((1, 1))] * 3)
    got = fb.sample_observations(path, sch, np.random.default_rng(2))
    for i, t in enumerate(got.times):
        k = int(np.argmin(np.abs(grid - t)))
        assert got.values[i][0] == pytest.approx(path.values[k, 0], abs=1e-14)


def test_sample_observations_noisy_reproducible():
    model = fb.make_model("ou")
    grid = fb.make_grid(0.0, 3.0, 60)
    path = fb.simulate_euler(model, np.array([1.0, 0.0, 0.5]), np.array([0.3]),
                             grid, rng=np.random.default_rng(3))
    L = np.eye(1)
    sch = fb.ObservationScheme([0.0, 1.5, 3.0], [L] * 3, [L * 0.04] * 3)
    a = fb.sample_observations(path, sch, np.random.default_rng(9))
    b = fb.sample_observations(path, sch, np.random.default_rng(9))
    assert all(np.array_equal(x, y) for x, y in zip(a.values, b.values))
    assert any(abs(a.values[i][0] - path.values[int(np.argmin(np.abs(grid - t))), 0])
               > 1e-9 for i, t in enumerate(sch.times))


def test_registry_lookup_and_unknown_name():
    model = fb.make_model("ou")
    assert (model.dim_state, model.dim_noise, model.parameter_dim) == (1, 1, 3)
    assert fb.make_model("bm", dim=3).dim_state == 3
    with pytest.raises(fb.ConfigError) as err:
        fb.make_model("no-such-model")
    assert "no-such-model" in str(err.value)


@pytest.mark.parametrize("name,theta", [
    ("bm", np.array([0.4, -1.2, 0.3])),
    ("2d-bm", np.array([0.15, -0.25])),
    ("ou", np.array([1.3, 0.4, 0.6])),
])
def test_model_linear_auxiliary_reproduces_the_model(name, theta, rng):
    if name == "bm":
        model = fb.make_model(name, dim=3)
    else:
        model = fb.make_model(name)
    aux = fb.model_linear_auxiliary(model, theta, 0.0, np.zeros(model.dim_state))
    for _ in range(5):
        t = float(rng.uniform(0, 2))
        x = rng.standard_normal(model.dim_state)
        assert np.allclose(aux.drift(t, x), model.drift(theta, t, x),
                           atol=1e-14)
        assert np.allclose(aux.a(t), model.diffusivity(theta, t, x),
                           atol=1e-14)


def test_auto_auxiliary_freezes_dispersion_at_match_point(rng):
    model = cubic_model()
    theta = np.array([0.5, 0.8, 0.6])
    x_match = np.array([0.7])
    aux = fb.auto_auxiliary(model, theta, 1.0, x_match)
    assert np.allclose(aux.sigma(3.0), model.dispersion(theta, 1.0, x_match))
    assert np.allclose(aux.beta(0.0), 0.0)
    assert np.allclose(aux.bmat(0.0), 0.0)
    assert aux.is_constant


def test_drift_and_dispersion_broadcast_over_batches(rng):
    for model, theta in [(fb.make_model("ou"), np.array([1.1, 0.2, 0.5])),
                         (cubic_model(), np.array([0.4, 0.9, 0.7])),
                         (fb.make_model("2d-bm"), np.array([0.3, -0.4]))]:
        xs = rng.standard_normal((6, model.dim_state))
        ts = np.linspace(0.0, 1.0, 6)
        bb = model.drift(theta, ts, xs)
        ss = model.dispersion(theta, ts, xs)
        for k in range(6):
            assert np.allclose(bb[k], model.drift(theta, ts[k], xs[k]))
            assert np.allclose(ss[k], model.dispersion(theta, ts[k], xs[k]))


def test_linear_auxiliary_dimension_mismatch():
    with pytest.raises(fb.ConfigError):
        fb.LinearAuxiliary.constant(np.zeros(2), np.eye(3))
    with pytest.raises((fb.ConfigError, ValueError)):
        fb.LinearAuxiliary.time_homogeneous(np.zeros(2), np.eye(3), np.eye(2))
