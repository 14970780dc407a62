"""Teacher pretraining and the alternating one-step distillation loop.

Each distillation step runs, in order: (i) a fake-score update — sample
noise and conditions (with empty-condition dropout), generate a batch
from the current generator without gradients, diffuse it, and take one
Adam step on the kappa1-guided denoising loss; (ii) a generator update —
fresh samples (no dropout), a weighted inner-product loss between the
guided teacher and guided fake-score fields with gradients flowing
through the generated batch and its diffusion into both frozen
networks; (iii) an EMA update of the generator. Distillation consumes
no data from the world: conditions are drawn uniformly and everything
else is synthesized.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .autodiff import _val
from .diffusion import TimeRange, eps_to_denoiser, forward_diffuse
from .errors import ConfigurationError, InputError, TrainingError
from .guidance import GuidanceScales, branch_pair, cfg_combine, guided_net_eps
from .mixture import oracle_eps, sample_given
from .nn import (AdamState, DiffusionMLP, EmaState, adam_step, ema_update,
                 grads_from_vars, make_param_vars)

log = logging.getLogger(__name__)

OMEGA_DENOM_FLOOR = 1e-8


@dataclass
class DistillConfig:
    guidance: GuidanceScales
    time_range: TimeRange
    batch: int = 256
    lr_psi: float = 3e-4
    lr_theta: float = 3e-4
    alpha: float = 1.0
    dropout_rate: float = 0.1
    ema_half_life_images: float = 50_000.0
    image_budget: int = 1_280_000
    seed: int = 0
    adam_beta1: float = 0.0
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = None

    def __post_init__(self):
        if not (0.0 <= self.dropout_rate <= 1.0):
            raise ConfigurationError("dropout_rate must lie in [0, 1]")
        if self.image_budget <= 0:
            raise ConfigurationError("image budget must be positive")
        if self.alpha < 0:
            raise ConfigurationError("alpha must be >= 0")
        if self.batch < 1:
            raise ConfigurationError("batch must be >= 1")


@dataclass
class DistillState:
    phi: DiffusionMLP
    psi: DiffusionMLP
    psi_opt: AdamState
    theta: DiffusionMLP
    theta_opt: AdamState
    ema: EmaState
    rng: np.random.Generator
    step: int = 0
    images_seen: int = 0


def init_from_teacher(phi, config, rng=None):
    """Deep-copy the teacher into both trainable networks, with fresh
    optimizer and EMA state; the teacher itself is never mutated."""
    psi = phi.copy()
    theta = phi.copy()
    return DistillState(
        phi=phi,
        psi=psi,
        psi_opt=AdamState.init_for(psi.params, config.adam_beta1,
                                   config.adam_beta2, config.adam_eps),
        theta=theta,
        theta_opt=AdamState.init_for(theta.params, config.adam_beta1,
                                     config.adam_beta2, config.adam_eps),
        ema=EmaState(shadow=theta.params.copy(),
                     half_life_images=config.ema_half_life_images),
        rng=rng if rng is not None else np.random.default_rng(config.seed),
    )


# ---------------------------------------------------------------------------
# One-step generation


def _one_step(theta, sched, z, c, t_init, train_vars=None):
    """Generator evaluation without the conditioning guard: the noise is
    scaled by sigma only (not a), evaluated at t_init, and the raw head
    is converted to the denoised coordinate."""
    z = np.asarray(z, dtype=np.float64)
    t_init = int(t_init)
    tt = np.full(z.shape[0], t_init, dtype=np.int64)
    x_in = sched.sigma[t_init] * z
    if train_vars is None:
        eps_hat = theta.forward(x_in, tt, c)
    else:
        eps_hat = theta.apply(x_in, tt, c, train_vars=train_vars)
    return eps_to_denoiser(sched, x_in, tt, eps_hat)


def generate_one_step(theta, sched, z, c, t_init):
    """Public one-step generation; always conditioned on a real class."""
    c = np.asarray(c, dtype=np.int64)
    if np.any(c == theta.arch.empty_condition):
        raise InputError("one-step generation requires a real condition")
    return _one_step(theta, sched, z, c, t_init)


# ---------------------------------------------------------------------------
# Losses


def psi_loss(state, sched, guidance, x_g, c, t, eps, train_vars=None):
    """Denoising loss of the kappa1-guided fake-score network against the
    injected noise; x_g is treated as a constant."""
    return _psi_loss_net(state.psi, sched, guidance, x_g, c, t, eps,
                         train_vars=train_vars)


def _psi_loss_net(psi, sched, guidance, x_g, c, t, eps, train_vars=None):
    x_t = forward_diffuse(sched, np.asarray(x_g, dtype=np.float64), t, eps)
    eps_k1 = guided_net_eps(psi, x_t, t, c, guidance.kappa1,
                            train_vars=train_vars)
    resid = eps_k1 - eps
    return (resid * resid).sum(axis=1).mean()


def omega_weight(sched, t, x_g, f_phi_k4):
    """Per-sample loss weight (sigma^4/a^2) * d / ||x_g - f_phi_k4||_1.
    The L1 denominator is a stop-gradient quantity: pass plain arrays.
    A vanishing denominator is clamped to a small floor."""
    t = np.asarray(t, dtype=np.int64)
    a = sched.a[t]
    sigma = sched.sigma[t]
    d = x_g.shape[1]
    l1 = np.abs(np.asarray(x_g) - np.asarray(f_phi_k4)).sum(axis=1)
    if np.any(l1 < OMEGA_DENOM_FLOOR):
        log.warning("omega denominator below %.0e on %d sample(s); clamping",
                    OMEGA_DENOM_FLOOR, int(np.sum(l1 < OMEGA_DENOM_FLOOR)))
        l1 = np.maximum(l1, OMEGA_DENOM_FLOOR)
    return (sigma ** 4 / a ** 2) * d / l1


def theta_loss(state, sched, guidance, z, c, t, eps, time_range,
               alpha=1.0, train_vars=None, omega_override=None):
    """Generator loss: weighted inner product of (guided teacher - guided
    fake) with (guided fake - generated batch), differentiable through
    the generated batch and its diffusion. Returns (loss, info) where
    info carries the stop-gradient pieces used by the cancellation and
    monitoring checks."""
    t = np.asarray(t, dtype=np.int64)
    c = np.asarray(c, dtype=np.int64)
    x_g = _one_step(state.theta, sched, z, c, time_range.t_init,
                    train_vars=train_vars)
    x_t = forward_diffuse(sched, x_g, t, eps)

    eps_phi_k4 = guided_net_eps(state.phi, x_t, t, c, guidance.kappa4)
    f_phi_k4 = eps_to_denoiser(sched, x_t, t, eps_phi_k4)

    k2, k3 = guidance.kappa2, guidance.kappa3
    if k2 == 1.0 and k3 == 1.0:
        eps_psi_k2 = eps_psi_k3 = state.psi.apply(x_t, t, c)
    else:
        cond, uncond = branch_pair(state.psi, x_t, t, c)
        eps_psi_k2 = cfg_combine(cond, uncond, k2)
        eps_psi_k3 = eps_psi_k2 if k3 == k2 else cfg_combine(cond, uncond, k3)
    f_psi_k2 = eps_to_denoiser(sched, x_t, t, eps_psi_k2)
    f_psi_k3 = eps_to_denoiser(sched, x_t, t, eps_psi_k3)

    if omega_override is None:
        omega = omega_weight(sched, t, _val(x_g), _val(f_phi_k4))
    else:
        omega = np.asarray(omega_override, dtype=np.float64)

    first = f_phi_k4 - f_psi_k2
    if alpha != 1.0:
        first = first + (1.0 - alpha) * (f_psi_k2 - x_g)
    inner = (first * (f_psi_k3 - x_g)).sum(axis=1)
    a = sched.a[t]
    sigma = sched.sigma[t]
    prefac = a ** 2 / sigma ** 4
    loss = (omega * prefac * inner).mean()

    info = {
        "omega": omega,
        "inner": _val(inner),
        "prefac": prefac,
        "l1": np.abs(_val(x_g) - _val(f_phi_k4)).sum(axis=1),
        "x_g": _val(x_g),
    }
    return loss, info


def theta_loss_simplified(info, d):
    """The algebraically reduced loss value (d / ||.||_1) * inner-product,
    from the pieces theta_loss recorded; the sigma^4/a^2 weight cancels
    the a^2/sigma^4 prefactor exactly."""
    l1 = np.maximum(info["l1"], OMEGA_DENOM_FLOOR)
    return float(np.mean(d / l1 * info["inner"]))


# ---------------------------------------------------------------------------
# Training loops


def _diagnostics(step, phase, **arrays):
    diag = {"step": int(step), "phase": phase}
    for k, v in arrays.items():
        diag[k] = np.asarray(v).tolist()
    return diag


def distill_step(state, sched, config):
    """One alternation: fake-score update, generator update, EMA update.
    Returns step metrics."""
    rng = state.rng
    b = config.batch
    arch = state.phi.arch
    d = arch.input_dim
    n_cond = arch.n_conditions
    tr = config.time_range

    # fake-score phase: conditions drop to the empty embedding at the
    # configured rate before the batch is generated
    z = rng.standard_normal((b, d))
    c = rng.integers(0, n_cond, b)
    dropped = rng.random(b) < config.dropout_rate
    c_psi = np.where(dropped, arch.empty_condition, c)
    x_g = _one_step(state.theta, sched, z, c_psi, tr.t_init)
    t = rng.integers(tr.t_min, tr.t_max + 1, b)
    eps = rng.standard_normal((b, d))
    pvars = make_param_vars(state.psi.params)
    p_loss = psi_loss(state, sched, config.guidance, x_g, c_psi, t, eps,
                      train_vars=pvars)
    psi_loss_val = float(p_loss.value)
    if not np.isfinite(psi_loss_val):
        raise TrainingError(
            f"non-finite fake-score loss at step {state.step}",
            _diagnostics(state.step, "psi", z=z, c=c_psi, t=t, eps=eps))
    p_loss.backward()
    adam_step(state.psi.params, grads_from_vars(state.psi.params, pvars),
              state.psi_opt, config.lr_psi, clip_value=config.grad_clip)

    # generator phase: fresh draws, no condition dropout
    z2 = rng.standard_normal((b, d))
    c2 = rng.integers(0, n_cond, b)
    t2 = rng.integers(tr.t_min, tr.t_max + 1, b)
    eps2 = rng.standard_normal((b, d))
    tvars = make_param_vars(state.theta.params)
    t_loss, info = theta_loss(state, sched, config.guidance, z2, c2, t2, eps2,
                              tr, alpha=config.alpha, train_vars=tvars)
    theta_loss_val = float(t_loss.value)
    if not np.isfinite(theta_loss_val):
        raise TrainingError(
            f"non-finite generator loss at step {state.step}",
            _diagnostics(state.step, "theta", z=z2, c=c2, t=t2, eps=eps2))
    t_loss.backward()
    adam_step(state.theta.params, grads_from_vars(state.theta.params, tvars),
              state.theta_opt, config.lr_theta, clip_value=config.grad_clip)

    ema_update(state.ema, state.theta.params, b)
    state.step += 1
    state.images_seen += b
    return {
        "psi_loss": psi_loss_val,
        "theta_loss": theta_loss_val,
        "omega_mean": float(np.mean(info["omega"])),
        "psi_empty_frac": float(np.mean(dropped)),
    }


def teacher_pretrain(world, sched, arch, steps, batch, lr, dropout_rate, rng,
                     adam_beta1=0.0, adam_beta2=0.999, adam_eps=1e-8,
                     log_every=200, on_step=None):
    """Standard conditional denoising pretraining with condition dropout;
    t is drawn over the full schedule. Returns (net, loss_log) where
    loss_log is a list of (step, loss) rows."""
    if steps < 0:
        raise ConfigurationError("steps must be >= 0")
    net = DiffusionMLP.create(arch, rng)
    opt = AdamState.init_for(net.params, adam_beta1, adam_beta2, adam_eps)
    loss_log = []
    for step in range(1, steps + 1):
        c = rng.integers(0, world.n_conditions, batch)
        x0 = sample_given(world, c, rng)
        dropped = rng.random(batch) < dropout_rate
        c_in = np.where(dropped, arch.empty_condition, c)
        t = rng.integers(0, sched.T, batch)
        eps = rng.standard_normal((batch, world.d))
        x_t = forward_diffuse(sched, x0, t, eps)
        pvars = make_param_vars(net.params)
        eps_hat = net.apply(x_t, t, c_in, train_vars=pvars)
        resid = eps_hat - eps
        loss = (resid * resid).sum(axis=1).mean()
        val = float(loss.value)
        if not np.isfinite(val):
            raise TrainingError(f"non-finite teacher loss at step {step}",
                                _diagnostics(step, "teacher", t=t))
        loss.backward()
        adam_step(net.params, grads_from_vars(net.params, pvars), opt, lr)
        if step % log_every == 0 or step == steps:
            loss_log.append((step, val))
        if on_step is not None:
            on_step(step, val)
    return net, loss_log


def validation_eps_mse(net, world, sched, n, rng, kappa=1.0, time_range=None):
    """Mean ||net eps - optimal eps||^2 / d on fresh conditional pairs;
    the reference is the closed-form optimal prediction, so a perfect
    net scores 0 and the zero predictor scores roughly 1."""
    c = rng.integers(0, world.n_conditions, n)
    x0 = sample_given(world, c, rng)
    if time_range is None:
        t = rng.integers(0, sched.T, n)
    else:
        t = rng.integers(time_range.t_min, time_range.t_max + 1, n)
    eps = rng.standard_normal((n, world.d))
    x_t = forward_diffuse(sched, x0, t, eps)
    eps_hat = net.forward(x_t, t, c)
    eps_star = np.empty_like(eps_hat)
    for ti in np.unique(t):
        mask = t == ti
        for ci in np.unique(c[mask]):
            sel = mask & (c == ci)
            eps_star[sel] = oracle_eps(world, sched, x_t[sel], int(ti), int(ci))
    return float(np.mean(np.sum((eps_hat - eps_star) ** 2, axis=1)) / world.d)


def fit_fake_score_to_mixture(world, sched, net, steps, batch, lr, time_range,
                              dropout_rate, rng, kappa1=1.0,
                              adam_beta1=0.0, adam_beta2=0.999, adam_eps=1e-8):
    """Train a fake-score net against a frozen generator that emits an
    exact known mixture (the fake-score-phase machinery with world
    samples standing in for generated batches). Mutates net in place."""
    opt = AdamState.init_for(net.params, adam_beta1, adam_beta2, adam_eps)
    guidance = GuidanceScales(kappa1, 1.0, 1.0, 1.0)
    for _ in range(steps):
        c = rng.integers(0, world.n_conditions, batch)
        x_g = sample_given(world, c, rng)
        dropped = rng.random(batch) < dropout_rate
        c_in = np.where(dropped, net.arch.empty_condition, c)
        t = rng.integers(time_range.t_min, time_range.t_max + 1, batch)
        eps = rng.standard_normal((batch, world.d))
        pvars = make_param_vars(net.params)
        loss = _psi_loss_net(net, sched, guidance, x_g, c_in, t, eps,
                             train_vars=pvars)
        loss.backward()
        adam_step(net.params, grads_from_vars(net.params, pvars), opt, lr)
    return net
