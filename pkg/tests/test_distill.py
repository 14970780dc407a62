import numpy as np
import pytest

from sidlab import distill, guidance
from sidlab.diffusion import TimeRange, eps_to_denoiser
from sidlab.distill import (DistillConfig, distill_step,
                            generate_one_step, init_from_teacher, omega_weight,
                            psi_loss, teacher_pretrain, theta_loss,
                            theta_loss_simplified, validation_eps_mse)
from sidlab.errors import ConfigurationError, InputError, TrainingError
from sidlab.guidance import GuidanceScales, strategy_preset
from sidlab.nn import DiffusionMLP, NetArch
from tests.conftest import SMALL_ARCH

TR = TimeRange(20, 625, 979)


@pytest.fixture
def small_state(small_arch, sched, rng):
    teacher = DiffusionMLP.create(small_arch, rng)
    for name in teacher.params.names():
        teacher.params.tensors[name] += 0.2 * rng.standard_normal(
            teacher.params[name].shape)
    cfg = DistillConfig(guidance=strategy_preset("lsg", 1.5), time_range=TR,
                        batch=16, image_budget=16 * 4, seed=0)
    return init_from_teacher(teacher, cfg), cfg


def test_config_validation():
    g = strategy_preset("no_cfg")
    with pytest.raises(ConfigurationError):
        DistillConfig(guidance=g, time_range=TR, dropout_rate=1.5,
                      image_budget=10)
    with pytest.raises(ConfigurationError):
        DistillConfig(guidance=g, time_range=TR, image_budget=0)
    with pytest.raises(ConfigurationError):
        DistillConfig(guidance=g, time_range=TR, image_budget=10, alpha=-1)


# ---------------------------------------------------------------------------
# one-step generation


def test_generate_from_zero_noise_is_teacher_denoised_origin(small_state, sched):
    state, _ = small_state
    z = np.zeros((3, 2))
    c = np.array([0, 1, 2])
    x_g = generate_one_step(state.phi, sched, z, c, TR.t_init)
    tt = np.full(3, TR.t_init)
    eps_hat = state.phi.forward(np.zeros((3, 2)), tt, c)
    expected = eps_to_denoiser(sched, np.zeros((3, 2)), tt, eps_hat)
    np.testing.assert_array_equal(x_g, expected)


def test_generate_deterministic(small_state, sched, rng):
    state, _ = small_state
    z = rng.standard_normal((5, 2))
    c = rng.integers(0, 4, 5)
    a = generate_one_step(state.theta, sched, z, c, TR.t_init)
    b = generate_one_step(state.theta, sched, z, c, TR.t_init)
    assert a.tobytes() == b.tobytes()


def test_generate_rejects_empty_condition(small_state, sched):
    state, _ = small_state
    with pytest.raises(InputError):
        generate_one_step(state.theta, sched, np.zeros((1, 2)),
                          np.array([state.theta.arch.empty_condition]),
                          TR.t_init)


def test_generate_scales_noise_by_sigma_not_a(small_state, sched):
    # the conditioning input is sigma_t_init * z: with a zero-output net
    # the denoised coordinate is exactly sigma*z/a
    state, _ = small_state
    arch = state.theta.arch
    zero_net = DiffusionMLP.create(arch, np.random.default_rng(0))
    z = np.ones((2, 2))
    x_g = generate_one_step(zero_net, sched, z, np.array([0, 1]), TR.t_init)
    expected = sched.sigma[TR.t_init] * z / sched.a[TR.t_init]
    np.testing.assert_allclose(x_g, expected, atol=1e-15)


# ---------------------------------------------------------------------------
# psi loss


def test_psi_loss_zero_when_prediction_matches_noise(small_state, sched):
    state, cfg = small_state
    zero_net = DiffusionMLP.create(state.psi.arch, np.random.default_rng(0))
    state.psi = zero_net  # predicts exactly zero
    x_g = np.random.default_rng(1).standard_normal((8, 2))
    t = np.full(8, 500)
    eps = np.zeros((8, 2))
    loss = psi_loss(state, sched, GuidanceScales(1, 1, 1, 1), x_g,
                    np.zeros(8, int), t, eps)
    assert float(loss.value) == 0.0


def test_psi_loss_kappa1_equals_plain_denoising_loss(small_state, sched, rng):
    state, _ = small_state
    from sidlab.diffusion import forward_diffuse

    x_g = rng.standard_normal((8, 2))
    c = rng.integers(0, 4, 8)
    t = rng.integers(TR.t_min, TR.t_max + 1, 8)
    eps = rng.standard_normal((8, 2))
    loss = psi_loss(state, sched, GuidanceScales(1, 1, 1, 1), x_g, c, t, eps)
    x_t = forward_diffuse(sched, x_g, t, eps)
    manual = np.mean(np.sum((state.psi.forward(x_t, t, c) - eps) ** 2, axis=1))
    assert float(loss.value) == manual


def test_psi_loss_unit_example(small_state, sched):
    state, _ = small_state
    state.psi = DiffusionMLP.create(state.psi.arch, np.random.default_rng(0))
    x_g = np.zeros((1, 2))
    eps = np.array([[1.0, 0.0]])
    loss = psi_loss(state, sched, GuidanceScales(1, 1, 1, 1), x_g,
                    np.zeros(1, int), np.array([500]), eps)
    # prediction (0,0) against eps (1,0): per-sample squared error 1.0
    assert float(loss.value) == pytest.approx(1.0, abs=1e-12)


# ---------------------------------------------------------------------------
# omega


def test_omega_hand_example():
    from sidlab.diffusion import NoiseSchedule

    sched1 = NoiseSchedule(kind="linear", T=2, beta_min=0.1, beta_max=0.1,
                           a=np.array([1.0, 1.0]), sigma=np.array([1.0, 1.0]))
    x_g = np.array([[1.0, 2.0]])
    f_phi = np.array([[3.0, 0.0]])  # L1 distance 4
    w = omega_weight(sched1, np.array([1]), x_g, f_phi)
    assert w[0] == pytest.approx(0.5, abs=1e-15)


def test_omega_positive(sched, rng):
    t = rng.integers(TR.t_min, TR.t_max + 1, 64)
    x_g = rng.standard_normal((64, 2))
    f_phi = rng.standard_normal((64, 2))
    assert np.all(omega_weight(sched, t, x_g, f_phi) > 0)


def test_omega_clamps_zero_denominator(sched, caplog):
    import logging

    x = np.array([[1.0, 1.0]])
    with caplog.at_level(logging.WARNING, logger="sidlab.distill"):
        w = omega_weight(sched, np.array([500]), x, x)
    assert "clamping" in caplog.text
    expected = sched.sigma[500] ** 4 / sched.a[500] ** 2 * 2 / 1e-8
    assert w[0] == pytest.approx(expected)


# ---------------------------------------------------------------------------
# theta loss


def test_theta_loss_zero_at_teacher_init_with_matched_kappas(small_state, sched, rng):
    state, cfg = small_state
    z = rng.standard_normal((64, 2))
    c = rng.integers(0, 4, 64)
    t = rng.integers(TR.t_min, TR.t_max + 1, 64)
    eps = rng.standard_normal((64, 2))
    loss, _ = theta_loss(state, sched, cfg.guidance, z, c, t, eps, TR)
    assert abs(float(loss.value)) <= 1e-10


def test_theta_loss_zero_when_fake_matches_generator(small_state, sched, rng):
    state, _ = small_state
    state.psi = DiffusionMLP.create(state.psi.arch, np.random.default_rng(0))
    # zero-output fake net with eps=0: f_psi(x_t) = x_t/a = x_g exactly
    z = rng.standard_normal((16, 2))
    c = rng.integers(0, 4, 16)
    t = rng.integers(TR.t_min, TR.t_max + 1, 16)
    eps = np.zeros((16, 2))
    loss, _ = theta_loss(state, sched, GuidanceScales(1, 1, 1, 1),
                         z, c, t, eps, TR)
    assert abs(float(loss.value)) <= 1e-12


def test_theta_loss_cancellation_direct_vs_simplified(small_state, sched, rng):
    state, _ = small_state
    # decorrelate psi from phi so the loss is nonzero
    r2 = np.random.default_rng(9)
    for name in state.psi.params.names():
        state.psi.params.tensors[name] += 0.1 * r2.standard_normal(
            state.psi.params[name].shape)
    z = rng.standard_normal((128, 2))
    c = rng.integers(0, 4, 128)
    t = rng.integers(TR.t_min, TR.t_max + 1, 128)
    eps = rng.standard_normal((128, 2))
    for scales in (GuidanceScales(1, 1, 1, 2), GuidanceScales(1.5, 1.5, 1.5, 1.5),
                   GuidanceScales(1, 0.5, 0.5, 1)):
        loss, info = theta_loss(state, sched, scales, z, c, t, eps, TR)
        direct = float(loss.value)
        simplified = theta_loss_simplified(info, 2)
        assert direct == pytest.approx(simplified, rel=1e-12, abs=1e-14)


def test_theta_gradient_matches_finite_differences():
    from sidlab.verify import gradient_check_theta_objective

    assert gradient_check_theta_objective(seed=1) <= 1e-4


def test_theta_alpha_blend_changes_first_factor(small_state, sched, rng):
    state, _ = small_state
    r2 = np.random.default_rng(9)
    for name in state.psi.params.names():
        state.psi.params.tensors[name] += 0.1 * r2.standard_normal(
            state.psi.params[name].shape)
    z = rng.standard_normal((8, 2))
    c = rng.integers(0, 4, 8)
    t = rng.integers(TR.t_min, TR.t_max + 1, 8)
    eps = rng.standard_normal((8, 2))
    g = GuidanceScales(1, 1, 1, 1.5)
    l1, _ = theta_loss(state, sched, g, z, c, t, eps, TR, alpha=1.0)
    l2, _ = theta_loss(state, sched, g, z, c, t, eps, TR, alpha=0.5)
    assert float(l1.value) != float(l2.value)


# ---------------------------------------------------------------------------
# distill_step


def test_distill_step_order_and_counters(small_state, sched):
    state, cfg = small_state
    m = distill_step(state, sched, cfg)
    assert state.step == 1
    assert state.images_seen == cfg.batch
    assert set(m) >= {"psi_loss", "theta_loss", "omega_mean"}
    assert np.isfinite(m["psi_loss"]) and np.isfinite(m["theta_loss"])


def test_distill_step_theta_loss_zero_when_psi_frozen(small_arch, sched, rng):
    teacher = DiffusionMLP.create(small_arch, rng)
    for name in teacher.params.names():
        teacher.params.tensors[name] += 0.2 * rng.standard_normal(
            teacher.params[name].shape)
    cfg = DistillConfig(guidance=strategy_preset("lsg", 1.5), time_range=TR,
                        batch=16, image_budget=16, seed=0, lr_psi=0.0)
    state = init_from_teacher(teacher, cfg)
    m = distill_step(state, sched, cfg)
    # psi never moves, so the first factor cancels exactly in the theta phase
    assert abs(m["theta_loss"]) <= 1e-10


def test_teacher_params_bit_frozen_through_distillation(small_state, sched):
    state, cfg = small_state
    before = state.phi.params.checksum()
    for _ in range(3):
        distill_step(state, sched, cfg)
    assert state.phi.params.checksum() == before


def test_dropout_accounting(small_arch, sched, rng):
    teacher = DiffusionMLP.create(small_arch, rng)
    cfg = DistillConfig(guidance=strategy_preset("no_cfg"), time_range=TR,
                        batch=100, image_budget=100 * 100, seed=3,
                        dropout_rate=0.1)
    state = init_from_teacher(teacher, cfg)
    fracs = [distill_step(state, sched, cfg)["psi_empty_frac"]
             for _ in range(100)]
    assert abs(np.mean(fracs) - 0.1) <= 0.01


def test_nonfinite_loss_aborts_with_diagnostics(small_state, sched):
    state, cfg = small_state
    state.psi.params.tensors["w0"][0, 0] = np.nan
    with pytest.raises(TrainingError) as err:
        distill_step(state, sched, cfg)
    assert err.value.diagnostics["phase"] == "psi"
    assert err.value.diagnostics["step"] == 0


# ---------------------------------------------------------------------------
# init_from_teacher


def test_init_from_teacher_pointwise_equal_and_decoupled(small_state, sched, rng):
    state, _ = small_state
    x = rng.standard_normal((6, 2))
    t = rng.integers(0, 1000, 6)
    c = rng.integers(0, 5, 6)
    out_phi = state.phi.forward(x, t, c)
    np.testing.assert_array_equal(state.psi.forward(x, t, c), out_phi)
    np.testing.assert_array_equal(state.theta.forward(x, t, c), out_phi)
    np.testing.assert_array_equal(state.ema.shadow["w0"], state.theta.params["w0"])
    state.psi.params.tensors["w0"][:] += 1.0
    np.testing.assert_array_equal(state.phi.forward(x, t, c), out_phi)


# ---------------------------------------------------------------------------
# teacher pretraining


def test_teacher_pretrain_zero_steps_returns_zero_predictor(world, sched, rng):
    arch = NetArch(input_dim=2, n_conditions=4, **SMALL_ARCH)
    net, log = teacher_pretrain(world, sched, arch, steps=0, batch=16,
                                lr=1e-4, dropout_rate=0.1, rng=rng)
    assert log == []
    x = rng.standard_normal((8, 2))
    out = net.forward(x, np.full(8, 100), np.zeros(8, int))
    np.testing.assert_array_equal(out, np.zeros((8, 2)))
    # against drawn noise the zero predictor pays E||eps||^2 = d per sample
    eps = rng.standard_normal((4000, 2))
    assert np.mean(np.sum((0 - eps) ** 2, axis=1)) == pytest.approx(2.0, abs=0.15)


def test_teacher_full_dropout_never_trains_real_condition_rows(world, sched):
    # with dropout_rate=1 every draw uses the empty condition, so the real
    # rows of the embedding table keep their initialization bit-exactly
    arch = NetArch(input_dim=2, n_conditions=4, **SMALL_ARCH)
    init_rows = DiffusionMLP.create(arch, np.random.default_rng(7)).params["cond_emb"].copy()
    net, _ = teacher_pretrain(world, sched, arch, steps=5, batch=16,
                              lr=1e-3, dropout_rate=1.0,
                              rng=np.random.default_rng(7))
    np.testing.assert_array_equal(net.params["cond_emb"][:4], init_rows[:4])
    assert np.any(net.params["cond_emb"][4] != init_rows[4])


def test_teacher_pretrain_aborts_on_divergence(world, sched):
    # an absurd learning rate overflows the activations within a step or two
    arch = NetArch(input_dim=2, n_conditions=4, **SMALL_ARCH)
    with pytest.raises(TrainingError):
        teacher_pretrain(world, sched, arch, steps=5, batch=8, lr=1e200,
                         dropout_rate=0.1, rng=np.random.default_rng(0))


def test_validation_mse_zero_for_oracle_like_net(world, sched):
    # the zero predictor's validation MSE equals the mean squared optimal
    # prediction, which is strictly positive and below d
    arch = NetArch(input_dim=2, n_conditions=4, **SMALL_ARCH)
    net = DiffusionMLP.create(arch, np.random.default_rng(0))
    v = validation_eps_mse(net, world, sched, 2000, np.random.default_rng(1))
    assert 0.05 < v <= 1.1
