"""Forward diffusion process and the conversion algebra between noise
prediction, denoised-sample prediction, and score.

Every conversion works on plain arrays and on autodiff Vars alike (they
only use arithmetic operators), so the same functions serve inference
and loss graphs. Batched calls take t as an int array aligned with the
batch axis; scalar t with a single d-vector also works.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, InputError, SingularityError

SCHEDULE_KINDS = ("scaled_linear", "linear")


@dataclass(frozen=True)
class NoiseSchedule:
    """Discrete-time signal/noise coefficients of the forward process,
    with a_t**2 + sigma_t**2 = 1 (variance preserving)."""

    kind: str
    T: int
    beta_min: float
    beta_max: float
    a: np.ndarray
    sigma: np.ndarray

    def fingerprint(self):
        return {"kind": self.kind, "T": self.T,
                "beta_min": self.beta_min, "beta_max": self.beta_max}


@dataclass(frozen=True)
class TimeRange:
    t_min: int
    t_init: int
    t_max: int

    def validate(self, T):
        if not (0 <= self.t_min <= self.t_init <= self.t_max < T):
            raise ConfigurationError(
                f"need 0 <= t_min <= t_init <= t_max < T, got "
                f"({self.t_min}, {self.t_init}, {self.t_max}) with T={T}")
        return self


DEFAULT_TIME_RANGE = TimeRange(t_min=20, t_init=625, t_max=979)


def make_schedule(T, kind="scaled_linear", beta_min=0.00085, beta_max=0.012):
    """Build the cumulative-product schedule. scaled_linear spaces betas
    linearly in sqrt-space (the convention of the discrete schedule this
    lab is calibrated to, where sigma/a at t=625 comes out near 2.5);
    linear spaces them directly."""
    if T < 2:
        raise ConfigurationError(f"schedule needs T >= 2, got {T}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ConfigurationError(
            f"need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]")
    if kind == "scaled_linear":
        betas = np.linspace(np.sqrt(beta_min), np.sqrt(beta_max), T) ** 2
    elif kind == "linear":
        betas = np.linspace(beta_min, beta_max, T)
    else:
        raise ConfigurationError(f"unknown schedule kind {kind!r}; choices: {SCHEDULE_KINDS}")
    alpha_bar = np.cumprod(1.0 - betas)
    a = np.sqrt(alpha_bar)
    sigma = np.sqrt(1.0 - alpha_bar)
    sched = NoiseSchedule(kind=kind, T=T, beta_min=float(beta_min),
                          beta_max=float(beta_max), a=a, sigma=sigma)
    _check_invariants(sched)
    return sched


def _check_invariants(sched):
    a, sigma = sched.a, sched.sigma
    if np.any(a <= 0) or np.any(a > 1) or np.any(sigma < 0) or np.any(sigma >= 1):
        raise ConfigurationError("schedule coefficients out of range")
    if np.any(np.diff(a) > 0) or np.any(np.diff(sigma) < 0):
        raise ConfigurationError("schedule coefficients not monotone")
    if np.max(np.abs(a ** 2 + sigma ** 2 - 1.0)) > 1e-12:
        raise ConfigurationError("schedule is not variance preserving")


def _coef(values, t, T):
    t = np.asarray(t, dtype=np.int64)
    if np.any(t < 0) or np.any(t >= T):
        raise InputError(f"time index out of range [0, {T})")
    v = values[t]
    if v.ndim == 1:
        v = v[:, None]
    return v


def forward_diffuse(sched, x0, t, eps):
    """x_t = a_t * x0 + sigma_t * eps, with caller-supplied noise."""
    a = _coef(sched.a, t, sched.T)
    sigma = _coef(sched.sigma, t, sched.T)
    return a * x0 + sigma * eps


def eps_to_denoiser(sched, x_t, t, eps_hat):
    """f_hat = (x_t - sigma_t * eps_hat) / a_t."""
    a = _coef(sched.a, t, sched.T)
    sigma = _coef(sched.sigma, t, sched.T)
    if np.any(a == 0):
        raise SingularityError("a_t = 0: denoiser coordinate undefined")
    return (x_t - sigma * eps_hat) / a


def denoiser_to_eps(sched, x_t, t, f_hat):
    """eps_hat = (x_t - a_t * f_hat) / sigma_t; inverse of eps_to_denoiser."""
    a = _coef(sched.a, t, sched.T)
    sigma = _coef(sched.sigma, t, sched.T)
    if np.any(sigma == 0):
        raise SingularityError("sigma_t = 0: noise coordinate undefined")
    return (x_t - a * f_hat) / sigma


def score_from_denoiser(sched, x_t, t, f_hat):
    """s_hat = (a_t * f_hat - x_t) / sigma_t**2 (= -eps_hat / sigma_t)."""
    a = _coef(sched.a, t, sched.T)
    sigma = _coef(sched.sigma, t, sched.T)
    if np.any(sigma == 0):
        raise SingularityError("sigma_t = 0: score undefined at t=0 limit")
    return (a * f_hat - x_t) / (sigma * sigma)


def forward_conditional_score(sched, x, x_t, t):
    """Gradient of ln N(x_t; a_t x, sigma_t^2 I) in x_t: (a_t x - x_t)/sigma_t^2."""
    a = _coef(sched.a, t, sched.T)
    sigma = _coef(sched.sigma, t, sched.T)
    if np.any(sigma == 0):
        raise SingularityError("sigma_t = 0: forward conditional is degenerate")
    return (a * x - x_t) / (sigma * sigma)


def check_fingerprint(expected, found):
    if expected != found:
        raise ConfigurationError(
            f"schedule fingerprint mismatch: config {expected} vs checkpoint {found}")
