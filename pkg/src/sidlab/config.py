"""Run configuration: JSON files with nested sections, validated into a
RunConfig with every default echoed back, so the resolved config written
next to each run's outputs reproduces it exactly."""

import copy
import json
import os
from dataclasses import dataclass

from .diffusion import SCHEDULE_KINDS, TimeRange, make_schedule
from .distill import DistillConfig
from .errors import ConfigurationError
from .guidance import GuidanceScales, strategy_preset
from .mixture import MixtureWorld, default_world
from .nn import NetArch

DEFAULTS = {
    "schedule": {"kind": "scaled_linear", "T": 1000,
                 "beta_min": 0.00085, "beta_max": 0.012},
    "arch": {"hidden_width": 128, "depth": 3, "time_dim": 32, "cond_dim": 32},
    "time_range": {"t_min": 20, "t_init": 625, "t_max": 979},
    "guidance": {"strategy": "lsg", "kappa": 1.5},
    "optimizer": {"lr_teacher": 1e-4, "lr_psi": 3e-4, "lr_theta": 3e-4,
                  "beta1": 0.0, "beta2": 0.999, "eps": 1e-8},
    "dropout_rate": 0.1,
    "alpha": 1.0,
    "ema_half_life_images": 50000,
    "batch": 256,
    "teacher_steps": 20000,
    "distill_image_budget": 1280000,
    "grad_clip": None,
    "seed": 0,
    "out_dir": "runs/out",
    "eval": {"interval_steps": 1000, "n_per_condition": 2000,
             "n_projections": 128, "seed": 0},
    "log_every": 200,
}


def _merge(defaults, user):
    out = {}
    for key, dval in defaults.items():
        if isinstance(dval, dict) and isinstance(user.get(key), dict):
            out[key] = _merge(dval, user[key])
        elif key in user:
            out[key] = copy.deepcopy(user[key])
        else:
            out[key] = copy.deepcopy(dval)
    for key, uval in user.items():
        if key not in out:
            out[key] = copy.deepcopy(uval)
    return out


@dataclass
class RunConfig:
    """Fully-resolved configuration; `raw` is the merged dict that gets
    echoed to disk."""

    raw: dict
    world: MixtureWorld
    schedule_spec: dict
    arch: NetArch
    time_range: TimeRange
    guidance: GuidanceScales
    optimizer: dict
    dropout_rate: float
    alpha: float
    ema_half_life_images: float
    batch: int
    teacher_steps: int
    distill_image_budget: int
    grad_clip: float
    seed: int
    out_dir: str
    eval: dict
    log_every: int

    def make_schedule(self):
        return make_schedule(**self.schedule_spec)

    def distill_config(self):
        return DistillConfig(
            guidance=self.guidance,
            time_range=self.time_range,
            batch=self.batch,
            lr_psi=self.optimizer["lr_psi"],
            lr_theta=self.optimizer["lr_theta"],
            alpha=self.alpha,
            dropout_rate=self.dropout_rate,
            ema_half_life_images=self.ema_half_life_images,
            image_budget=self.distill_image_budget,
            seed=self.seed,
            adam_beta1=self.optimizer["beta1"],
            adam_beta2=self.optimizer["beta2"],
            adam_eps=self.optimizer["eps"],
            grad_clip=self.grad_clip,
        )


def _expect(errors, cond, field_name, message):
    if not cond:
        errors.append(f"{field_name}: {message}")
    return cond


def resolve_config(user, overrides=None, env=None):
    """Merge user dict with defaults and overrides, validate every field,
    and build the RunConfig. Raises ConfigurationError listing every
    invalid field at once."""
    if not isinstance(user, dict):
        raise ConfigurationError("config root must be a JSON object")
    env = os.environ if env is None else env
    errors = []
    if "world" not in user:
        errors.append("world: required field is missing "
                      "(use \"default\" for the built-in world)")
    merged = _merge(DEFAULTS, user)
    merged["world"] = user.get("world", "default")
    for path, value in (overrides or {}).items():
        node = merged
        keys = path.split(".")
        for k in keys[:-1]:
            if not isinstance(node.get(k), dict):
                errors.append(f"{path}: unknown override section")
                break
            node = node[k]
        else:
            node[keys[-1]] = value
    if env.get("SIDLAB_OUT"):
        if "out_dir" not in (overrides or {}):
            merged["out_dir"] = env["SIDLAB_OUT"]

    world = None
    wspec = merged["world"]
    if wspec == "default":
        world = default_world()
        merged["world"] = world.to_spec()
    elif isinstance(wspec, dict):
        try:
            world = MixtureWorld.from_spec(wspec)
            merged["world"] = world.to_spec()
        except (ConfigurationError, KeyError, TypeError, ValueError) as exc:
            errors.append(f"world: {exc}")
    elif "world" in user:
        errors.append("world: must be \"default\" or a mixture spec object")

    s = merged["schedule"]
    _expect(errors, s.get("kind") in SCHEDULE_KINDS, "schedule.kind",
            f"must be one of {SCHEDULE_KINDS}")
    _expect(errors, isinstance(s.get("T"), int) and s["T"] >= 2,
            "schedule.T", "must be an integer >= 2")
    try:
        ok_betas = 0 < s["beta_min"] <= s["beta_max"] < 1
    except (KeyError, TypeError):
        ok_betas = False
    _expect(errors, ok_betas, "schedule.beta_min/beta_max",
            "need 0 < beta_min <= beta_max < 1")

    tr = merged["time_range"]
    time_range = None
    try:
        time_range = TimeRange(int(tr["t_min"]), int(tr["t_init"]), int(tr["t_max"]))
        time_range.validate(int(s.get("T", 2)))
    except (ConfigurationError, KeyError, TypeError, ValueError) as exc:
        errors.append(f"time_range: {exc}")

    g = merged["guidance"]
    scales = None
    try:
        if all(k in g for k in ("kappa1", "kappa2", "kappa3", "kappa4")):
            scales = GuidanceScales(float(g["kappa1"]), float(g["kappa2"]),
                                    float(g["kappa3"]), float(g["kappa4"]))
        else:
            scales = strategy_preset(g["strategy"], g.get("kappa"))
    except (ConfigurationError, KeyError, TypeError, ValueError) as exc:
        errors.append(f"guidance: {exc}")

    opt = merged["optimizer"]
    for key in ("lr_teacher", "lr_psi", "lr_theta"):
        _expect(errors, isinstance(opt.get(key), (int, float)) and opt[key] > 0,
                f"optimizer.{key}", "must be a positive number")
    _expect(errors, 0.0 <= merged["dropout_rate"] <= 1.0, "dropout_rate",
            "must lie in [0, 1]")
    _expect(errors, merged["alpha"] >= 0, "alpha", "must be >= 0")
    _expect(errors, merged["ema_half_life_images"] > 0, "ema_half_life_images",
            "must be positive")
    _expect(errors, isinstance(merged["batch"], int) and merged["batch"] >= 1,
            "batch", "must be an integer >= 1")
    _expect(errors, isinstance(merged["teacher_steps"], int)
            and merged["teacher_steps"] >= 0,
            "teacher_steps", "must be an integer >= 0")
    _expect(errors, isinstance(merged["distill_image_budget"], int)
            and merged["distill_image_budget"] > 0,
            "distill_image_budget", "must be a positive integer")
    _expect(errors, isinstance(merged["seed"], int), "seed", "must be an integer")
    ev = merged["eval"]
    _expect(errors, isinstance(ev.get("interval_steps"), int)
            and ev["interval_steps"] >= 0,
            "eval.interval_steps", "must be an integer >= 0")
    _expect(errors, isinstance(ev.get("n_per_condition"), int)
            and ev["n_per_condition"] >= 2,
            "eval.n_per_condition", "must be an integer >= 2")

    if errors:
        raise ConfigurationError("invalid configuration:\n  " + "\n  ".join(errors))

    arch = NetArch(input_dim=world.d, n_conditions=world.n_conditions,
                   **merged["arch"])
    return RunConfig(
        raw=merged, world=world, schedule_spec=dict(s), arch=arch,
        time_range=time_range, guidance=scales, optimizer=dict(opt),
        dropout_rate=float(merged["dropout_rate"]),
        alpha=float(merged["alpha"]),
        ema_half_life_images=float(merged["ema_half_life_images"]),
        batch=int(merged["batch"]), teacher_steps=int(merged["teacher_steps"]),
        distill_image_budget=int(merged["distill_image_budget"]),
        grad_clip=merged["grad_clip"], seed=int(merged["seed"]),
        out_dir=str(merged["out_dir"]), eval=dict(ev),
        log_every=int(merged["log_every"]),
    )


def load_config(path, overrides=None, env=None):
    try:
        with open(path, "r", encoding="utf-8") as f:
            user = json.load(f)
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file is not valid JSON: {exc}")
    return resolve_config(user, overrides=overrides, env=env)


def write_resolved(config, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(config.raw, f, indent=2, sort_keys=True)
        f.write("\n")
