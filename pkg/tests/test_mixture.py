import numpy as np
import pytest

from sidlab.diffusion import NoiseSchedule
from sidlab.errors import ConfigurationError, InputError
from sidlab.mixture import (ConditionMixture, MixtureWorld, condition_posterior,
                            default_world, linear_field, oracle_cfg_score,
                            oracle_denoiser, oracle_log_density, oracle_score,
                            sample_data, sample_given, score_field,
                            verify_identity3)


def single_gaussian_world(mu=(0.0, 0.0), s=1.0):
    return MixtureWorld(d=2, conditions=(
        ConditionMixture(weights=[1.0], means=[list(mu)], stds=[s]),))


def two_component_world():
    return MixtureWorld(d=2, conditions=(
        ConditionMixture(weights=[0.5, 0.5], means=[[3.0, 0.0], [-3.0, 0.0]],
                         stds=[1.0, 1.0]),))


# ---------------------------------------------------------------------------
# construction


def test_weights_must_be_positive_and_normalized():
    with pytest.raises(ConfigurationError):
        ConditionMixture(weights=[0.5, 0.4], means=[[0, 0], [1, 1]], stds=[1, 1])
    with pytest.raises(ConfigurationError):
        ConditionMixture(weights=[1.0, 0.0], means=[[0, 0], [1, 1]], stds=[1, 1])
    with pytest.raises(ConfigurationError):
        ConditionMixture(weights=[1.0], means=[[0, 0]], stds=[0.0])


def test_world_spec_roundtrip():
    world = default_world()
    again = MixtureWorld.from_spec(world.to_spec())
    assert again.to_spec() == world.to_spec()
    assert again.n_conditions == 4


# ---------------------------------------------------------------------------
# sampling


def test_sample_mean_clt_bound():
    world = single_gaussian_world()
    x = sample_data(world, 0, 100_000, np.random.default_rng(0))
    assert np.max(np.abs(x.mean(axis=0))) <= 0.02


def test_symmetric_two_component_half_plane_fraction():
    world = two_component_world()
    x = sample_data(world, 0, 10_000, np.random.default_rng(1))
    frac = np.mean(x[:, 0] > 0)
    assert abs(frac - 0.5) <= 0.02


def test_tiny_std_collapses_to_component_means():
    world = MixtureWorld(d=2, conditions=(
        ConditionMixture(weights=[1.0], means=[[2.0, -1.0]], stds=[1e-9]),))
    x = sample_data(world, 0, 100, np.random.default_rng(2))
    assert np.max(np.abs(x - np.array([2.0, -1.0]))) <= 1e-7


def test_sample_validation():
    world = default_world()
    with pytest.raises(InputError):
        sample_data(world, 0, 0, np.random.default_rng(0))
    with pytest.raises(InputError):
        sample_given(world, np.array([4]), np.random.default_rng(0))


def test_sampling_reproducible_under_seed():
    world = default_world()
    a = sample_data(world, 2, 64, np.random.default_rng(7))
    b = sample_data(world, 2, 64, np.random.default_rng(7))
    assert a.tobytes() == b.tobytes()


# ---------------------------------------------------------------------------
# scores


def test_unit_world_score_is_negative_position(sched):
    world = single_gaussian_world()
    # variance preserving: marginal at any t is N(0, I)
    for t in (100, 625, 950):
        s = oracle_score(world, sched, np.array([1.0, 0.0]), t, 0)
        np.testing.assert_allclose(s, [-1.0, 0.0], atol=1e-12)


def test_symmetric_world_score_vanishes_on_axis(sched):
    world = two_component_world()
    s = oracle_score(world, sched, np.array([0.0, 0.7]), 300, 0)
    assert abs(s[0]) <= 1e-12


def test_score_matches_log_density_finite_differences(sched, rng):
    world = MixtureWorld(d=2, conditions=(
        ConditionMixture(weights=[0.2, 0.5, 0.3],
                         means=[[1.0, 0.0], [-2.0, 1.0], [0.5, -1.5]],
                         stds=[0.4, 1.1, 0.8]),))
    t = 350
    h = 1e-6
    for _ in range(10):
        x = rng.uniform(-4, 4, size=2)
        fd = np.array([
            (oracle_log_density(world, sched, x + h * e, t, 0)
             - oracle_log_density(world, sched, x - h * e, t, 0)) / (2 * h)
            for e in np.eye(2)])
        s = oracle_score(world, sched, x, t, 0)
        np.testing.assert_allclose(s, fd, atol=1e-6)


def test_score_finite_forty_sigma_away(sched):
    world = default_world()
    far = np.array([40.0 * 4, 40.0 * 4])
    for c in (None, 0, 3):
        s = oracle_score(world, sched, far, 500, c)
        assert np.all(np.isfinite(s))
    assert np.all(np.isfinite(condition_posterior(world, far)))


# ---------------------------------------------------------------------------
# denoiser


def test_denoiser_small_std_returns_weighted_means(sched):
    world = MixtureWorld(d=2, conditions=(
        ConditionMixture(weights=[0.5, 0.5], means=[[5.0, 0.0], [-5.0, 0.0]],
                         stds=[1e-8, 1e-8]),))
    t = 300
    # far to the right: responsibility collapses onto the right component
    f = oracle_denoiser(world, sched, sched.a[t] * np.array([5.0, 0.0]), t, 0)
    np.testing.assert_allclose(f, [5.0, 0.0], atol=1e-6)


def test_denoiser_score_duality_identity(world, sched, rng, time_range):
    for _ in range(50):
        t = int(rng.integers(time_range.t_min, time_range.t_max + 1))
        c = int(rng.integers(0, world.n_conditions))
        x_t = rng.uniform(-6, 6, size=(8, 2))
        via_score = (x_t + sched.sigma[t] ** 2
                     * oracle_score(world, sched, x_t, t, c)) / sched.a[t]
        direct = oracle_denoiser(world, sched, x_t, t, c)
        assert np.max(np.abs(via_score - direct)) <= 1e-9


def test_denoiser_no_noise_returns_x_over_a():
    world = default_world()
    sched0 = NoiseSchedule(kind="linear", T=2, beta_min=0.1, beta_max=0.1,
                           a=np.array([0.9, 0.9]), sigma=np.array([0.0, 0.0]))
    x_t = np.array([[1.0, 2.0], [-3.0, 0.5]])
    f = oracle_denoiser(world, sched0, x_t, 1, 2)
    np.testing.assert_allclose(f, x_t / 0.9, atol=1e-9)


# ---------------------------------------------------------------------------
# CFG oracle


def test_cfg_score_reductions_and_linearity(world, sched, rng):
    x = rng.uniform(-5, 5, size=(6, 2))
    t, c = 400, 1
    s_c = oracle_score(world, sched, x, t, c)
    s_u = oracle_score(world, sched, x, t, None)
    np.testing.assert_array_equal(oracle_cfg_score(world, sched, x, t, c, 1.0), s_c)
    np.testing.assert_array_equal(oracle_cfg_score(world, sched, x, t, c, 0.0), s_u)
    k1, k2, alpha = 0.7, 2.5, 0.3
    mix = alpha * k1 + (1 - alpha) * k2
    lhs = oracle_cfg_score(world, sched, x, t, c, mix)
    rhs = (alpha * oracle_cfg_score(world, sched, x, t, c, k1)
           + (1 - alpha) * oracle_cfg_score(world, sched, x, t, c, k2))
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_cfg_single_condition_world_kappa_independent(sched, rng):
    world = single_gaussian_world(mu=(1.0, 2.0), s=0.8)
    x = rng.uniform(-4, 4, size=(5, 2))
    base = oracle_cfg_score(world, sched, x, 300, 0, 1.0)
    for kappa in (0.0, 0.5, 3.0, 7.5):
        np.testing.assert_allclose(
            oracle_cfg_score(world, sched, x, 300, 0, kappa), base, atol=1e-12)


# ---------------------------------------------------------------------------
# condition posterior


def test_posterior_concentrates_at_isolated_mean():
    # a component mean at least 10 stds away from every other condition
    world = MixtureWorld(d=2, conditions=(
        ConditionMixture(weights=[1.0], means=[[3.0, 0.0]], stds=[0.25]),
        ConditionMixture(weights=[1.0], means=[[-3.0, 0.0]], stds=[0.25]),
    ))
    post = condition_posterior(world, np.array([3.0, 0.0]))
    assert post[0] >= 0.999


def test_posterior_symmetric_on_mirror_plane():
    world = MixtureWorld(d=2, conditions=(
        ConditionMixture(weights=[1.0], means=[[2.0, 0.0]], stds=[1.0]),
        ConditionMixture(weights=[1.0], means=[[-2.0, 0.0]], stds=[1.0]),
    ))
    post = condition_posterior(world, np.array([0.0, 1.3]))
    np.testing.assert_allclose(post, [0.5, 0.5], atol=1e-12)


def test_posterior_sums_to_one(world, rng):
    x = rng.uniform(-8, 8, size=(64, 2))
    post = condition_posterior(world, x)
    np.testing.assert_allclose(post.sum(axis=1), np.ones(64), atol=1e-12)


# ---------------------------------------------------------------------------
# identity 3


def test_identity3_zero_field_exact(world, sched):
    r = verify_identity3(world, sched, 300, lambda x: np.zeros_like(x),
                         2000, np.random.default_rng(0))
    assert r["lhs_estimate"] == 0.0 and r["rhs_estimate"] == 0.0
    assert r["rel_error"] == 0.0


def test_identity3_linear_field_matches_stein_value(sched):
    world = single_gaussian_world()
    r = verify_identity3(world, sched, 500, linear_field(np.eye(2)),
                         200_000, np.random.default_rng(3), c=0)
    assert r["rel_error"] <= 0.05
    # E[x . grad log p] = -d for the unit-variance marginal
    assert r["lhs_estimate"] == pytest.approx(-2.0, abs=0.1)
    assert r["rhs_estimate"] == pytest.approx(-2.0, abs=0.1)


def test_identity3_score_field_three_components(sched):
    world = MixtureWorld(d=2, conditions=(
        ConditionMixture(weights=[0.3, 0.3, 0.4],
                         means=[[2.0, 0.0], [-1.0, 2.0], [0.0, -2.0]],
                         stds=[0.5, 0.8, 0.6]),))
    r = verify_identity3(world, sched, 400, score_field(world, sched, 400, 0),
                         200_000, np.random.default_rng(4), c=0)
    assert r["rel_error"] <= 0.05


def test_identity3_rejects_small_n(world, sched):
    with pytest.raises(ConfigurationError):
        verify_identity3(world, sched, 300, linear_field(np.eye(2)), 999,
                         np.random.default_rng(0))
