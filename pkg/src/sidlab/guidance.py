"""Classifier-free guidance: the affine combination operator, guided
network evaluation, and the named strategy presets over the quadruple
(kappa1, kappa2, kappa3, kappa4).

kappa1 guides the fake-score network while it trains; kappa2/kappa3
guide its two appearances in the generator loss; kappa4 guides the
frozen teacher. Guidance is combined in eps-space and converted — the
conversion is affine in the network output, so combining in f-space
would give the identical result (asserted by test, not assumed).
"""

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff
from .autodiff import Var
from .diffusion import eps_to_denoiser
from .errors import ConfigurationError, InputError

STRATEGIES = ("no_cfg", "long", "short", "simplest_lsg", "lsg")


@dataclass(frozen=True)
class GuidanceScales:
    kappa1: float
    kappa2: float
    kappa3: float
    kappa4: float

    def __post_init__(self):
        for name in ("kappa1", "kappa2", "kappa3", "kappa4"):
            v = getattr(self, name)
            if not (v >= 0.0):
                raise ConfigurationError(f"{name} must be >= 0, got {v}")
        if self.kappa1 == 1.0 and self.kappa2 == self.kappa3 and self.kappa2 > 1.0:
            warnings.warn(
                "guidance family kappa1=1, kappa2=kappa3>1 is known to converge "
                "slowly or stall; constructing it anyway", RuntimeWarning)

    def as_tuple(self):
        return (self.kappa1, self.kappa2, self.kappa3, self.kappa4)


def strategy_preset(name, kappa=None):
    """Named presets spanning the guidance design space."""
    if name == "no_cfg":
        if kappa not in (None, 1, 1.0):
            raise ConfigurationError("no_cfg takes no scale (or kappa=1)")
        return GuidanceScales(1.0, 1.0, 1.0, 1.0)
    if kappa is None:
        raise ConfigurationError(f"strategy {name!r} needs a kappa value")
    kappa = float(kappa)
    if name == "long":
        if kappa < 1.0:
            raise ConfigurationError(f"long strategy needs kappa >= 1, got {kappa}")
        return GuidanceScales(1.0, 1.0, 1.0, kappa)
    if name == "short":
        if not (0.0 < kappa < 1.0):
            raise ConfigurationError(f"short strategy needs 0 < kappa < 1, got {kappa}")
        return GuidanceScales(1.0, kappa, kappa, 1.0)
    if name == "simplest_lsg":
        if kappa < 1.0:
            raise ConfigurationError(f"simplest_lsg needs kappa >= 1, got {kappa}")
        return GuidanceScales(kappa, 1.0, 1.0, 1.0)
    if name == "lsg":
        if kappa < 1.0:
            raise ConfigurationError(f"lsg needs kappa >= 1, got {kappa}")
        return GuidanceScales(kappa, kappa, kappa, kappa)
    raise ConfigurationError(f"unknown strategy {name!r}; choices: {STRATEGIES}")


def cfg_combine(out_cond, out_uncond, kappa):
    """uncond + kappa * (cond - uncond); same formula for eps outputs,
    f outputs, or scores. Works on arrays and autodiff Vars. The
    endpoint scales return their branch outright so the kappa=0/1
    reductions are exact."""
    if kappa == 1.0:
        return out_cond
    if kappa == 0.0:
        return out_uncond
    return out_uncond + kappa * (out_cond - out_uncond)


def branch_pair(net, x_t, t, c, train_vars=None):
    """Evaluate a net at (x_t, t, c) and (x_t, t, empty) in one stacked
    batch; returns (out_cond, out_uncond) as graph nodes."""
    b = x_t.shape[0]
    empty = np.full(b, net.arch.empty_condition, dtype=np.int64)
    tt = np.concatenate([t, t])
    cc = np.concatenate([np.asarray(c, dtype=np.int64), empty])
    if isinstance(x_t, Var):
        xx = autodiff.vconcat([x_t, x_t])
    else:
        xx = np.concatenate([x_t, x_t], axis=0)
    out = net.apply(xx, tt, cc, train_vars=train_vars)
    return autodiff.rows(out, 0, b), autodiff.rows(out, b, 2 * b)


def guided_net_eps(net, x_t, t, c, kappa, train_vars=None):
    """kappa-guided eps prediction as a graph node. Rows whose condition
    is already the empty index degenerate to the unconditional branch
    (up to rounding: the two branches are separate rows of one stacked
    evaluation), which is what the condition-dropout phase needs."""
    if kappa == 1.0:
        return net.apply(x_t, t, c, train_vars=train_vars)
    cond, uncond = branch_pair(net, x_t, t, c, train_vars=train_vars)
    return cfg_combine(cond, uncond, kappa)


def guided_eval(net, sched, x_t, t, c, kappa):
    """Inference-time guided evaluation; returns bijection-consistent
    {"f": ..., "eps": ...} arrays. With kappa=1 the empty branch is
    skipped (exactly one network evaluation)."""
    x_t = np.asarray(x_t, dtype=np.float64)
    t = np.asarray(t, dtype=np.int64)
    c = np.asarray(c, dtype=np.int64)
    if kappa != 1.0 and np.any(c == net.arch.empty_condition):
        raise InputError("guided evaluation with kappa != 1 needs a real condition")
    if kappa == 1.0:
        eps_k = net.forward(x_t, t, c)
    else:
        b = x_t.shape[0]
        empty = np.full(b, net.arch.empty_condition, dtype=np.int64)
        out = net.forward(np.concatenate([x_t, x_t], axis=0),
                          np.concatenate([t, t]),
                          np.concatenate([c, empty]))
        eps_k = cfg_combine(out[:b], out[b:], kappa)
    f_k = eps_to_denoiser(sched, x_t, t, eps_k)
    return {"f": f_k, "eps": eps_k}
