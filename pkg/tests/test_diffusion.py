import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sidlab import mixture
from sidlab.diffusion import (NoiseSchedule, TimeRange, check_fingerprint,
                              denoiser_to_eps, eps_to_denoiser, forward_diffuse,
                              forward_conditional_score, make_schedule,
                              score_from_denoiser)
from sidlab.errors import (ConfigurationError, InputError, SingularityError)


def toy_sched(a=0.8, sigma=0.6, T=4):
    """Hand-built schedule with constant coefficients (no invariant checks)."""
    return NoiseSchedule(kind="linear", T=T, beta_min=0.1, beta_max=0.1,
                         a=np.full(T, a), sigma=np.full(T, sigma))


# ---------------------------------------------------------------------------
# make_schedule


def test_default_schedule_hits_snr_calibration(sched):
    ratio = sched.sigma[625] / sched.a[625]
    assert abs(ratio - 2.5) <= 0.1


def test_variance_preserving_within_1e12(sched):
    assert np.max(np.abs(sched.a ** 2 + sched.sigma ** 2 - 1.0)) <= 1e-12


def test_monotonicity_over_full_grid(sched):
    assert np.all(np.diff(sched.a) <= 0)
    assert np.all(np.diff(sched.sigma) >= 0)


def test_linear_schedule_terminal_snr_matches_extended_precision_product():
    sched = make_schedule(1000, "linear", 1e-4, 0.02)
    betas = np.linspace(1e-4, 0.02, 1000, dtype=np.longdouble)
    alpha_bar = np.cumprod(1 - betas)
    expected = np.sqrt(float(1 - alpha_bar[-1])) / np.sqrt(float(alpha_bar[-1]))
    got = sched.sigma[999] / sched.a[999]
    assert got > 10.0
    assert got == pytest.approx(expected, rel=1e-10)


@settings(max_examples=20, deadline=None)
@given(T=st.integers(2, 64), kind=st.sampled_from(["linear", "scaled_linear"]),
       b0=st.floats(1e-5, 0.01), spread=st.floats(1.0, 30.0))
def test_schedule_invariants_property(T, kind, b0, spread):
    sched = make_schedule(T, kind, b0, min(b0 * spread, 0.5))
    assert np.max(np.abs(sched.a ** 2 + sched.sigma ** 2 - 1.0)) <= 1e-12
    assert np.all(sched.a > 0) and np.all(sched.a <= 1)
    assert np.all(sched.sigma >= 0) and np.all(sched.sigma < 1)


def test_make_schedule_rejects_bad_args():
    with pytest.raises(ConfigurationError):
        make_schedule(1)
    with pytest.raises(ConfigurationError):
        make_schedule(100, "linear", 0.0, 0.02)
    with pytest.raises(ConfigurationError):
        make_schedule(100, "linear", 0.03, 0.02)
    with pytest.raises(ConfigurationError):
        make_schedule(100, "cosine", 0.001, 0.02)


def test_time_range_validation():
    TimeRange(20, 625, 979).validate(1000)
    with pytest.raises(ConfigurationError):
        TimeRange(20, 10, 979).validate(1000)
    with pytest.raises(ConfigurationError):
        TimeRange(20, 625, 1000).validate(1000)


# ---------------------------------------------------------------------------
# forward_diffuse


def test_forward_diffuse_t0_is_nearly_identity(sched, rng):
    x0 = rng.standard_normal((8, 2))
    eps = rng.standard_normal((8, 2))
    x_t = forward_diffuse(sched, x0, np.zeros(8, int), eps)
    assert np.max(np.abs(x_t - x0)) <= 5 * sched.sigma[0]


def test_forward_diffuse_zero_noise_scales_by_a(sched, rng):
    x0 = rng.standard_normal((8, 2))
    t = np.full(8, 300)
    x_t = forward_diffuse(sched, x0, t, np.zeros_like(x0))
    np.testing.assert_array_equal(x_t, sched.a[300] * x0)


def test_forward_diffuse_hand_example():
    sched = toy_sched()
    x_t = forward_diffuse(sched, np.array([[1.0, 0.0]]), np.array([1]),
                          np.array([[0.0, 1.0]]))
    np.testing.assert_allclose(x_t, [[0.8, 0.6]], atol=1e-15)


def test_time_index_out_of_range(sched):
    with pytest.raises(InputError):
        forward_diffuse(sched, np.zeros((1, 2)), np.array([1000]), np.zeros((1, 2)))


# ---------------------------------------------------------------------------
# conversions


def test_eps_zero_maps_to_x_over_a(sched, rng):
    x_t = rng.standard_normal((4, 2))
    t = np.full(4, 200)
    f = eps_to_denoiser(sched, x_t, t, np.zeros_like(x_t))
    np.testing.assert_array_equal(f, x_t / sched.a[200])


def test_conversion_roundtrip_within_1e12(sched, rng, time_range):
    for _ in range(20):
        t = rng.integers(time_range.t_min, time_range.t_max + 1, 16)
        x_t = rng.standard_normal((16, 2)) * 3
        eps = rng.standard_normal((16, 2))
        f = eps_to_denoiser(sched, x_t, t, eps)
        back = denoiser_to_eps(sched, x_t, t, f)
        assert np.max(np.abs(back - eps)) <= 1e-12


def test_conversion_inverts_forward_diffuse_example():
    sched = toy_sched()
    f = eps_to_denoiser(sched, np.array([[0.8, 0.6]]), np.array([1]),
                        np.array([[0.0, 1.0]]))
    np.testing.assert_allclose(f, [[1.0, 0.0]], atol=1e-15)


def test_singularity_errors():
    degenerate_a = NoiseSchedule(kind="linear", T=2, beta_min=0.1, beta_max=0.1,
                                 a=np.array([1.0, 0.0]), sigma=np.array([0.0, 1.0]))
    with pytest.raises(SingularityError):
        eps_to_denoiser(degenerate_a, np.zeros((1, 2)), np.array([1]),
                        np.zeros((1, 2)))
    with pytest.raises(SingularityError):
        denoiser_to_eps(degenerate_a, np.zeros((1, 2)), np.array([0]),
                        np.zeros((1, 2)))
    with pytest.raises(SingularityError):
        score_from_denoiser(degenerate_a, np.zeros((1, 2)), np.array([0]),
                            np.zeros((1, 2)))
    with pytest.raises(SingularityError):
        forward_conditional_score(degenerate_a, np.zeros((1, 2)),
                                  np.zeros((1, 2)), np.array([0]))


# ---------------------------------------------------------------------------
# score conversions


def test_score_zero_when_denoiser_equals_x_over_a(sched, rng):
    x_t = rng.standard_normal((4, 2))
    t = np.full(4, 500)
    s = score_from_denoiser(sched, x_t, t, x_t / sched.a[500])
    assert np.max(np.abs(s)) <= 1e-12


def test_score_via_f_and_via_eps_agree(sched, rng):
    t = rng.integers(1, 1000, 32)
    x_t = rng.standard_normal((32, 2)) * 2
    eps_hat = rng.standard_normal((32, 2))
    f_hat = eps_to_denoiser(sched, x_t, t, eps_hat)
    s1 = score_from_denoiser(sched, x_t, t, f_hat)
    s2 = -eps_hat / sched.sigma[t][:, None]
    np.testing.assert_allclose(s1, s2, atol=1e-12)


def test_score_from_denoiser_matches_oracle_in_single_gaussian_world(sched):
    world = mixture.MixtureWorld(d=2, conditions=(
        mixture.ConditionMixture(weights=[1.0], means=[[0.5, -1.0]], stds=[0.7]),))
    rng = np.random.default_rng(5)
    for t in (50, 400, 900):
        x_t = rng.standard_normal((16, 2)) * 2
        tt = np.full(16, t)
        f = mixture.oracle_denoiser(world, sched, x_t, t, 0)
        s = score_from_denoiser(sched, x_t, tt, f)
        s_oracle = mixture.oracle_score(world, sched, x_t, t, 0)
        assert np.max(np.abs(s - s_oracle)) <= 1e-9


def test_forward_conditional_score_examples(sched, rng):
    x = rng.standard_normal((8, 2))
    t = np.full(8, 300)
    # x_t at the mean -> zero score
    s = forward_conditional_score(sched, x, sched.a[300] * x, t)
    assert np.max(np.abs(s)) <= 1e-12
    # x_t = a x + sigma eps -> -eps / sigma
    eps = rng.standard_normal((8, 2))
    x_t = forward_diffuse(sched, x, t, eps)
    s = forward_conditional_score(sched, x, x_t, t)
    np.testing.assert_allclose(s, -eps / sched.sigma[300], atol=1e-10)


def test_forward_conditional_score_matches_log_pdf_gradient(sched):
    t = 300
    a, sig = sched.a[t], sched.sigma[t]
    x = np.array([0.3, -0.7])
    x_t = np.array([0.5, 0.1])

    def logpdf(y):
        return -0.5 * np.sum((y - a * x) ** 2) / sig ** 2

    h = 1e-6
    fd = np.array([(logpdf(x_t + h * e) - logpdf(x_t - h * e)) / (2 * h)
                   for e in np.eye(2)])
    s = forward_conditional_score(sched, x, x_t, np.array(t))
    np.testing.assert_allclose(s, fd, atol=1e-6)


def test_fingerprint_mismatch_raises(sched):
    other = make_schedule(1000, "linear", 1e-4, 0.02)
    with pytest.raises(ConfigurationError):
        check_fingerprint(sched.fingerprint(), other.fingerprint())
    check_fingerprint(sched.fingerprint(), sched.fingerprint())
