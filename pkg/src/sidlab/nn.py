"""Dense-network machinery: parameter sets, the conditional MLP, Adam, EMA,
and structured-text checkpoints.

The MLP maps (x, t, c) -> a d-vector through concat(x, time embedding,
condition embedding) and `depth` SiLU hidden layers. Its raw output is
the noise (epsilon) head; the denoised-sample coordinate is always
derived through the exact conversion in sidlab.diffusion. Condition
index `n_conditions` is reserved for the empty condition.
"""

import json
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff, backend
from .autodiff import Var
from .errors import ConfigurationError, InputError, NumericError

CHECKPOINT_FORMAT_VERSION = 1


class _EvalCounter:
    """Instrumentation hook: counts network evaluations by batch row."""

    def __init__(self):
        self.rows = 0
        self.calls = 0

    def reset(self):
        self.rows = 0
        self.calls = 0

    def bump(self, n):
        self.rows += int(n)
        self.calls += 1


EVALS = _EvalCounter()


# ---------------------------------------------------------------------------
# Parameter sets


@dataclass
class ParamSet:
    """Ordered, named collection of float64 tensors."""

    tensors: dict

    def __post_init__(self):
        clean = {}
        for name, t in self.tensors.items():
            if name in clean:
                raise ConfigurationError(f"duplicate parameter name {name!r}")
            clean[name] = np.ascontiguousarray(t, dtype=np.float64)
        self.tensors = clean

    def names(self):
        return list(self.tensors)

    def shapes(self):
        return {k: v.shape for k, v in self.tensors.items()}

    def copy(self):
        return ParamSet({k: v.copy() for k, v in self.tensors.items()})

    def congruent_with(self, other):
        return self.shapes() == other.shapes() and self.names() == other.names()

    def __getitem__(self, name):
        return self.tensors[name]

    def checksum(self):
        """Order-sensitive digest of the raw bytes, for freeze checks."""
        import hashlib

        h = hashlib.sha256()
        for name, t in self.tensors.items():
            h.update(name.encode())
            h.update(t.tobytes())
        return h.hexdigest()


def require_congruent(a, b, what):
    if not a.congruent_with(b):
        raise ConfigurationError(f"incongruent ParamSets in {what}: "
                                 f"{a.shapes()} vs {b.shapes()}")


def zeros_like_params(params):
    return ParamSet({k: np.zeros_like(v) for k, v in params.tensors.items()})


# ---------------------------------------------------------------------------
# Time embedding


def time_embedding(t, dim):
    """Sinusoidal embedding at geometrically spaced frequencies.

    t may be an int or an int array; the result has shape (..., dim).
    """
    if dim % 2 != 0:
        raise ConfigurationError(f"time embedding dim must be even, got {dim}")
    t = np.asarray(t, dtype=np.float64)
    half = dim // 2
    freqs = 10000.0 ** (-np.arange(half) / half)
    phase = t[..., None] * freqs
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=-1)


# ---------------------------------------------------------------------------
# Network


@dataclass(frozen=True)
class NetArch:
    """Shape of the conditional MLP. `n_conditions` counts real condition
    indices; index n_conditions is the empty condition."""

    input_dim: int
    n_conditions: int
    hidden_width: int = 128
    depth: int = 3
    time_dim: int = 32
    cond_dim: int = 32

    def __post_init__(self):
        if self.input_dim < 1 or self.n_conditions < 1:
            raise ConfigurationError("input_dim and n_conditions must be >= 1")
        if self.depth < 1 or self.hidden_width < 1:
            raise ConfigurationError("depth and hidden_width must be >= 1")
        if self.time_dim % 2 != 0:
            raise ConfigurationError("time_dim must be even")

    @property
    def empty_condition(self):
        return self.n_conditions

    @property
    def cat_dim(self):
        return self.input_dim + self.time_dim + self.cond_dim

    def layer_dims(self):
        dims = [self.cat_dim] + [self.hidden_width] * self.depth + [self.input_dim]
        return list(zip(dims[:-1], dims[1:]))

    def as_dict(self):
        return {
            "input_dim": self.input_dim,
            "n_conditions": self.n_conditions,
            "hidden_width": self.hidden_width,
            "depth": self.depth,
            "time_dim": self.time_dim,
            "cond_dim": self.cond_dim,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def init_params(arch, rng):
    """Variance-scaled uniform hidden layers, zero final layer, unit-normal
    condition embedding table (one extra row for the empty condition)."""
    tensors = {"cond_emb": rng.standard_normal((arch.n_conditions + 1, arch.cond_dim))}
    dims = arch.layer_dims()
    for i, (fan_in, fan_out) in enumerate(dims):
        if i == len(dims) - 1:
            w = np.zeros((fan_in, fan_out))
        else:
            limit = math.sqrt(3.0 / fan_in)
            w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        tensors[f"w{i}"] = w
        tensors[f"b{i}"] = np.zeros(fan_out)
    return ParamSet(tensors)


@dataclass
class DiffusionMLP:
    arch: NetArch
    params: ParamSet

    @classmethod
    def create(cls, arch, rng):
        return cls(arch=arch, params=init_params(arch, rng))

    def copy(self):
        return DiffusionMLP(arch=self.arch, params=self.params.copy())

    def _check_inputs(self, x, t, c):
        x = np.ascontiguousarray(x, dtype=np.float64)
        t = np.asarray(t, dtype=np.int64)
        c = np.asarray(c, dtype=np.int64)
        if x.ndim != 2 or x.shape[1] != self.arch.input_dim:
            raise ConfigurationError(
                f"expected x of shape (batch, {self.arch.input_dim}), got {x.shape}")
        if t.shape != (x.shape[0],) or c.shape != (x.shape[0],):
            raise ConfigurationError(
                f"batch lengths differ: x {x.shape[0]}, t {t.shape}, c {c.shape}")
        if np.any(t < 0):
            raise InputError("negative time index")
        if np.any((c < 0) | (c > self.arch.empty_condition)):
            raise InputError(
                f"condition index out of range [0, {self.arch.empty_condition}]")
        return x, t, c

    def _weight_lists(self, source):
        ws, bs = [], []
        for i in range(self.arch.depth + 1):
            ws.append(source[f"w{i}"])
            bs.append(source[f"b{i}"])
        return ws, bs

    def forward(self, x, t, c):
        """Inference evaluation (no gradient graph); returns the raw head."""
        x, t, c = self._check_inputs(x, t, c)
        temb = time_embedding(t, self.arch.time_dim)
        cemb = self.params["cond_emb"][c]
        xcat = np.concatenate([x, temb, cemb], axis=1)
        ws, bs = self._weight_lists(self.params)
        out, _ = backend.mlp_forward(xcat, ws, bs)
        EVALS.bump(x.shape[0])
        return out

    def apply(self, x, t, c, train_vars=None):
        """Graph evaluation. x may be a Var (gradients flow to it) or an
        array; train_vars, when given, is the dict from make_param_vars
        and receives parameter gradients."""
        x_var = x if isinstance(x, Var) else None
        xv, t, c = self._check_inputs(x.value if x_var is not None else x, t, c)
        source = self.params if train_vars is None else {
            k: v.value for k, v in train_vars.items()}
        temb = time_embedding(t, self.arch.time_dim)
        table = source["cond_emb"]
        cemb = table[c]
        xcat = np.concatenate([xv, temb, cemb], axis=1)
        ws, bs = self._weight_lists(source)
        out, cache = backend.mlp_forward(xcat, ws, bs)
        EVALS.bump(xv.shape[0])

        d = self.arch.input_dim
        emb_start = d + self.arch.time_dim
        parents = []
        if x_var is not None:
            parents.append(x_var)
        if train_vars is not None:
            tv_items = list(train_vars.items())
            parents.extend(v for _, v in tv_items)
        need_wgrads = train_vars is not None

        def vjp(g):
            g_xcat, g_ws, g_bs = backend.mlp_backward(ws, cache, g, need_wgrads)
            grads = []
            if x_var is not None:
                grads.append(np.ascontiguousarray(g_xcat[:, :d]))
            if train_vars is not None:
                by_name = {}
                g_table = np.zeros_like(table)
                np.add.at(g_table, c, g_xcat[:, emb_start:])
                by_name["cond_emb"] = g_table
                for i in range(len(ws)):
                    by_name[f"w{i}"] = g_ws[i]
                    by_name[f"b{i}"] = g_bs[i]
                grads.extend(by_name[k] for k, _ in tv_items)
            return grads

        return autodiff.from_op(out, parents, vjp, name="mlp")


def make_param_vars(params):
    """Leaf Vars over a ParamSet, for training that net's parameters."""
    return {k: Var(v, requires_grad=True, name=k) for k, v in params.tensors.items()}


def grads_from_vars(params, pvars):
    """Collect accumulated gradients into a ParamSet congruent with params.
    Parameters the loss never touched get exact zeros."""
    out = {}
    for name, ref in params.tensors.items():
        g = pvars[name].grad
        out[name] = np.zeros_like(ref) if g is None else g
    return ParamSet(out)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: ParamSet
    v: ParamSet
    step: int = 0
    beta1: float = 0.0
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init_for(cls, params, beta1=0.0, beta2=0.999, eps=1e-8):
        return cls(m=zeros_like_params(params), v=zeros_like_params(params),
                   step=0, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params, grads, state, lr, clip_value=None):
    """One Adam update with bias correction; mutates params and state in
    place and returns them. clip_value, when set, clips gradient values
    symmetrically before the moment updates (off by default)."""
    require_congruent(params, grads, "adam_step(params, grads)")
    require_congruent(params, state.m, "adam_step(params, state)")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name in params.names():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter '{name}'")
        if clip_value is not None:
            g = np.clip(g, -clip_value, clip_value)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        params.tensors[name] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# EMA


@dataclass
class EmaState:
    shadow: ParamSet
    half_life_images: float
    images_seen: int = 0

    def __post_init__(self):
        if self.half_life_images <= 0:
            raise ConfigurationError("EMA half-life must be positive")


def ema_update(ema, params, batch_images):
    """shadow <- decay*shadow + (1-decay)*params with
    decay = 0.5 ** (batch_images / half_life_images)."""
    if ema.half_life_images <= 0:
        raise ConfigurationError("EMA half-life must be positive")
    require_congruent(ema.shadow, params, "ema_update")
    decay = 0.5 ** (batch_images / ema.half_life_images)
    for name in params.names():
        s = ema.shadow[name]
        s *= decay
        s += (1.0 - decay) * params[name]
    ema.images_seen += batch_images
    return ema


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, header, tensors):
    """Structured-text checkpoint: JSON with shortest-round-trip decimal
    floats, so values survive save/load bit-exactly."""
    doc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "header": header,
        "tensors": {
            name: {"shape": list(t.shape), "data": np.asarray(t, dtype=np.float64).ravel().tolist()}
            for name, t in tensors.items()
        },
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, sort_keys=True, separators=(",", ":"))
        f.write("\n")


def load_checkpoint(path):
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    if doc.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ConfigurationError(
            f"unsupported checkpoint format_version {doc.get('format_version')!r}")
    tensors = {
        name: np.asarray(rec["data"], dtype=np.float64).reshape(rec["shape"])
        for name, rec in doc["tensors"].items()
    }
    return doc["header"], tensors


def net_to_tensors(net):
    return dict(net.params.tensors)


def net_from_checkpoint(header, tensors):
    arch = NetArch.from_dict(header["arch"])
    return DiffusionMLP(arch=arch, params=ParamSet(dict(tensors)))
