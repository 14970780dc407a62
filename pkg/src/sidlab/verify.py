"""Verification battery: schedule invariants, the score identities
against their independent closed-form or Monte Carlo routes, the
eps/denoiser bijection, and finite-difference gradient checks.

Every check returns a record {name, measured, tolerance, passed, detail};
exceptions inside a check are caught and reported as failures so one
broken input (say, an injected sigma_t = 0) cannot take down the rest of
the battery.
"""

import numpy as np

from . import mixture
from .diffusion import denoiser_to_eps, eps_to_denoiser
from .distill import DistillConfig, init_from_teacher, theta_loss
from .guidance import GuidanceScales
from .mixture import (linear_field, oracle_denoiser, oracle_score,
                      score_field, verify_identity3)
from .nn import DiffusionMLP, NetArch, grads_from_vars, make_param_vars

FD_STEP = 1e-5

SMALL_ARCH = dict(hidden_width=16, depth=2, time_dim=8, cond_dim=4)


def _check(name, tolerance, fn):
    try:
        measured, detail = fn()
        passed = bool(measured <= tolerance)
    except Exception as exc:
        measured, detail, passed = float("nan"), f"{type(exc).__name__}: {exc}", False
    return {"name": name, "measured": measured, "tolerance": tolerance,
            "passed": passed, "detail": detail}


def _shifted_world(world, rng):
    """A second mixture standing in for a generator's output distribution:
    the same component layout, randomly shifted and rescaled."""
    conds = []
    for cm in world.conditions:
        shift = rng.normal(scale=0.7, size=(1, world.d))
        conds.append(mixture.ConditionMixture(
            weights=cm.weights, means=cm.means * 0.8 + shift,
            stds=cm.stds * 1.3))
    return mixture.MixtureWorld(d=world.d, conditions=tuple(conds))


def check_schedule_vp(sched):
    def fn():
        err = float(np.max(np.abs(sched.a ** 2 + sched.sigma ** 2 - 1.0)))
        return err, "max |a^2 + sigma^2 - 1| over the grid"
    return _check("schedule_variance_preserving", 1e-12, fn)


def check_schedule_monotone(sched):
    def fn():
        bad = int(np.sum(np.diff(sched.a) > 0) + np.sum(np.diff(sched.sigma) < 0))
        return float(bad), "count of monotonicity violations"
    return _check("schedule_monotone", 0.0, fn)


def check_bijection(sched, time_range, rng, n=256):
    def fn():
        # always cover the range endpoints (degenerate coefficients, if
        # any, live there)
        ts = rng.integers(time_range.t_min, time_range.t_max + 1, n)
        ts[0], ts[-1] = time_range.t_min, time_range.t_max
        x_t = rng.standard_normal((n, 2)) * 3.0
        eps = rng.standard_normal((n, 2))
        f = eps_to_denoiser(sched, x_t, ts, eps)
        back = denoiser_to_eps(sched, x_t, ts, f)
        err = float(np.max(np.abs(back - eps)))
        return err, "max |eps -> f -> eps| round-trip error"
    return _check("bijection_roundtrip", 1e-12, fn)


def _identity1_error(world, sched, time_range, rng, n):
    ts = rng.integers(time_range.t_min, time_range.t_max + 1, n)
    cs = rng.integers(0, world.n_conditions, n)
    x_t = rng.uniform(-6.0, 6.0, size=(n, world.d))
    worst = 0.0
    for t in np.unique(ts):
        for c in np.unique(cs[ts == t]):
            sel = (ts == t) & (cs == c)
            pts = x_t[sel]
            via_score = ((pts + sched.sigma[t] ** 2
                          * oracle_score(world, sched, pts, int(t), int(c)))
                         / sched.a[t])
            direct = oracle_denoiser(world, sched, pts, int(t), int(c))
            worst = max(worst, float(np.max(np.abs(via_score - direct))))
    return worst


def check_identity1(world, sched, time_range, rng, n=1000):
    def fn():
        return (_identity1_error(world, sched, time_range, rng, n),
                f"denoiser via score vs posterior mean, {n} random (x_t,t,c)")
    return _check("identity1_dual_routes", 1e-9, fn)


def check_identity2(world, sched, time_range, rng, n=1000):
    def fn():
        gen_world = _shifted_world(world, rng)
        return (_identity1_error(gen_world, sched, time_range, rng, n),
                "same algebra on a mixture standing in for the generator")
    return _check("identity2_generator_side", 1e-9, fn)


def check_identity3_linear(world, sched, t, rng, n=200_000):
    def fn():
        u = linear_field(np.eye(world.d))
        r = verify_identity3(world, sched, t, u, n, rng)
        return r["rel_error"], f"lhs={r['lhs_estimate']:.4f} rhs={r['rhs_estimate']:.4f}"
    return _check("identity3_linear_field", 5e-2, fn)


def check_identity3_score(world, sched, t, rng, n=200_000):
    def fn():
        u = score_field(world, sched, t)
        r = verify_identity3(world, sched, t, u, n, rng)
        return r["rel_error"], f"lhs={r['lhs_estimate']:.4f} rhs={r['rhs_estimate']:.4f}"
    return _check("identity3_score_field", 5e-2, fn)


# ---------------------------------------------------------------------------
# Gradient checks


def _max_rel_err(analytic, numeric):
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / scale))


def _fd_over_params(params, loss_fn):
    """Central finite differences of loss_fn() with respect to every
    entry of every tensor in params (mutated in place and restored)."""
    grads = {}
    for name in params.names():
        arr = params.tensors[name]
        g = np.zeros_like(arr)
        flat = arr.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + FD_STEP
            up = loss_fn()
            flat[i] = orig - FD_STEP
            down = loss_fn()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * FD_STEP)
        grads[name] = g
    return grads


def gradient_check_net_loss(seed=0, batch=8):
    """Reverse-mode vs central differences on a plain denoising-style
    loss of a small random network; returns the max relative error over
    all parameters and the input batch."""
    rng = np.random.default_rng(seed)
    arch = NetArch(input_dim=2, n_conditions=3, **SMALL_ARCH)
    net = DiffusionMLP.create(arch, rng)
    for name in net.params.names():
        net.params.tensors[name] += 0.3 * rng.standard_normal(
            net.params[name].shape)
    x = rng.standard_normal((batch, 2))
    t = rng.integers(0, 1000, batch)
    c = rng.integers(0, 4, batch)  # includes the empty condition index 3
    target = rng.standard_normal((batch, 2))

    from .autodiff import Var

    xv = Var(x, requires_grad=True)
    pvars = make_param_vars(net.params)
    out = net.apply(xv, t, c, train_vars=pvars)
    resid = out - target
    loss = (resid * resid).sum(axis=1).mean()
    loss.backward()
    an = grads_from_vars(net.params, pvars)

    def loss_value():
        o = net.forward(x, t, c)
        return float(np.mean(np.sum((o - target) ** 2, axis=1)))

    fd = _fd_over_params(net.params, loss_value)
    worst = max(_max_rel_err(an[name], fd[name]) for name in net.params.names())

    fd_x = np.zeros_like(x)
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            orig = x[i, j]
            x[i, j] = orig + FD_STEP
            up = loss_value()
            x[i, j] = orig - FD_STEP
            down = loss_value()
            x[i, j] = orig
            fd_x[i, j] = (up - down) / (2.0 * FD_STEP)
    worst = max(worst, _max_rel_err(xv.grad, fd_x))
    return worst


def gradient_check_theta_objective(seed=0, batch=6, kappas=(1.5, 1.5, 1.5, 1.5)):
    """Reverse-mode vs central differences on the full generator
    objective (through the generated batch, its diffusion, and both
    frozen networks), with the weighting's stop-gradient denominator
    frozen at its base value on both sides."""
    from .diffusion import TimeRange, make_schedule

    rng = np.random.default_rng(seed)
    sched = make_schedule(64, "linear", 0.001, 0.05)
    tr = TimeRange(t_min=5, t_init=40, t_max=60)
    arch = NetArch(input_dim=2, n_conditions=3, **SMALL_ARCH)
    teacher = DiffusionMLP.create(arch, rng)
    for name in teacher.params.names():
        teacher.params.tensors[name] += 0.3 * rng.standard_normal(
            teacher.params[name].shape)
    cfg = DistillConfig(guidance=GuidanceScales(*kappas), time_range=tr,
                        batch=batch, image_budget=batch)
    state = init_from_teacher(teacher, cfg)
    for net in (state.psi, state.theta):
        for name in net.params.names():
            net.params.tensors[name] += 0.2 * rng.standard_normal(
                net.params[name].shape)

    z = rng.standard_normal((batch, 2))
    c = rng.integers(0, arch.n_conditions, batch)
    t = rng.integers(tr.t_min, tr.t_max + 1, batch)
    eps = rng.standard_normal((batch, 2))

    tvars = make_param_vars(state.theta.params)
    loss, info = theta_loss(state, sched, cfg.guidance, z, c, t, eps, tr,
                            train_vars=tvars)
    loss.backward()
    an = grads_from_vars(state.theta.params, tvars)
    omega_base = info["omega"]

    def loss_value():
        l, _ = theta_loss(state, sched, cfg.guidance, z, c, t, eps, tr,
                          omega_override=omega_base)
        return float(l.value)

    fd = _fd_over_params(state.theta.params, loss_value)
    return max(_max_rel_err(an[name], fd[name])
               for name in state.theta.params.names())


def check_gradient_net(seed=0):
    def fn():
        return gradient_check_net_loss(seed), "small net, denoising loss, all params + inputs"
    return _check("gradient_net_loss", 1e-4, fn)


def check_gradient_theta(seed=0):
    def fn():
        return (gradient_check_theta_objective(seed),
                "full generator objective, frozen-weighting finite differences")
    return _check("gradient_theta_objective", 1e-4, fn)


def run_battery(world, sched, time_range, seed=0, mc_n=200_000):
    """The full verification battery; deterministic under the seed."""
    rng = np.random.default_rng(seed)
    t_mid = (time_range.t_min + time_range.t_max) // 2
    return [
        check_schedule_vp(sched),
        check_schedule_monotone(sched),
        check_bijection(sched, time_range, rng),
        check_identity1(world, sched, time_range, rng),
        check_identity2(world, sched, time_range, rng),
        check_identity3_linear(world, sched, t_mid, rng, mc_n),
        check_identity3_score(world, sched, t_mid, rng, mc_n),
        check_gradient_net(seed),
        check_gradient_theta(seed),
    ]


def format_battery(results):
    lines = []
    width = max(len(r["name"]) for r in results)
    for r in results:
        status = "PASS" if r["passed"] else "FAIL"
        lines.append(f"{status}  {r['name']:<{width}}  measured={r['measured']:.3e}  "
                     f"tol={r['tolerance']:.0e}  ({r['detail']})")
    return "\n".join(lines)
