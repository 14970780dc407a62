"""Evaluation metrics and the guidance-strategy sweep runner.

Two axes mirror the usual text-to-image evaluation pair at desk scale:
distribution match (sliced Wasserstein-2 and the Fréchet distance
between Gaussian fits, on raw coordinates) and condition adherence (the
mean Bayes posterior probability of the prompted condition under the
oracle world, which is exact and classifier-free).
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import distill as distill_mod
from .errors import InputError
from .guidance import strategy_preset
from .mixture import condition_posterior, sample_data

CSV_HEADER = ["strategy", "kappa1", "kappa2", "kappa3", "kappa4", "seed",
              "steps", "images_seen", "condition", "sliced_w2",
              "gaussian_frechet", "alignment_score"]


def sliced_w2(a, b, n_proj=128, seed=0):
    """Average over fixed-seed random unit directions of the squared 1-D
    Wasserstein-2 distance between the projected empirical distributions.
    Unequal sample counts are handled exactly (piecewise-constant
    quantile functions integrated over their merged breakpoints)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] == 0 or b.shape[0] == 0:
        raise InputError("sliced_w2 needs two nonempty (n, d) sample sets")
    if a.shape[1] != b.shape[1]:
        raise InputError("sample sets have different dimensions")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise InputError("sliced_w2 needs at least 2 samples per set")
    if n_proj < 1:
        raise InputError("n_proj must be >= 1")
    n, m = a.shape[0], b.shape[0]
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((n_proj, a.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pa = np.sort(a @ dirs.T, axis=0)
    pb = np.sort(b @ dirs.T, axis=0)
    edges = np.union1d(np.arange(1, n + 1) / n, np.arange(1, m + 1) / m)
    widths = np.diff(np.concatenate([[0.0], edges]))
    mids = edges - widths / 2
    ia = np.minimum((mids * n).astype(np.int64), n - 1)
    ib = np.minimum((mids * m).astype(np.int64), m - 1)
    gaps = pa[ia, :] - pb[ib, :]
    return float(np.sum(widths[:, None] * gaps * gaps) / n_proj)


def _tr_sqrt_product(cov_a, cov_b):
    """Trace of the symmetric square root of cov_a @ cov_b."""
    if cov_a.shape[0] == 2:
        m = cov_a @ cov_b
        det = max(float(np.linalg.det(m)), 0.0)
        arg = float(np.trace(m)) + 2.0 * np.sqrt(det)
        return np.sqrt(max(arg, 0.0))
    from scipy.linalg import sqrtm

    return float(np.real(np.trace(sqrtm(cov_a @ cov_b))))


def random_feature_map(d_in, d_out, seed=0):
    """Frozen random projection for running the Fréchet metric on features
    instead of raw coordinates (useful above d=2)."""
    rng = np.random.default_rng(seed)
    proj = rng.standard_normal((d_in, d_out)) / np.sqrt(d_in)

    def apply(x):
        return np.asarray(x, dtype=np.float64) @ proj

    return apply


def gaussian_frechet(a, b, feature_map=None):
    """Fréchet distance between Gaussian fits of the two sample sets:
    ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)). A feature_map,
    when given, is applied to both sets before fitting."""
    if feature_map is not None:
        a = feature_map(a)
        b = feature_map(b)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d = a.shape[1]
    if a.shape[0] < d + 1 or b.shape[0] < d + 1:
        raise InputError(f"need at least d+1={d + 1} samples per set")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.cov(a, rowvar=False, ddof=1)
    cov_b = np.cov(b, rowvar=False, ddof=1)
    for name, cov in (("A", cov_a), ("B", cov_b)):
        if np.linalg.eigvalsh(cov).min() <= 0:
            warnings.warn(f"singular covariance in sample set {name}; "
                          "regularizing with 1e-8*I", RuntimeWarning)
            cov += 1e-8 * np.eye(d)
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(cov_a) + np.trace(cov_b)
                 - 2.0 * _tr_sqrt_product(cov_a, cov_b))


def alignment_score(world, samples, c):
    """Mean posterior probability of condition c over the samples."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[0] == 0:
        raise InputError("alignment_score needs a nonempty (n, d) sample set")
    return float(condition_posterior(world, samples)[:, int(c)].mean())


# ---------------------------------------------------------------------------
# Generator evaluation


@dataclass
class EvalReport:
    strategy: str
    kappas: tuple
    seed: int
    steps: int
    images_seen: int
    n_per_condition: int
    per_condition: dict
    pooled: dict

    def rows(self):
        meta = {"strategy": self.strategy,
                "kappa1": self.kappas[0], "kappa2": self.kappas[1],
                "kappa3": self.kappas[2], "kappa4": self.kappas[3],
                "seed": self.seed, "steps": self.steps,
                "images_seen": self.images_seen}
        out = []
        for c in sorted(self.per_condition):
            out.append({**meta, "condition": str(c), **self.per_condition[c]})
        out.append({**meta, "condition": "pooled", **self.pooled})
        return out


def evaluate_generator(world, sched, net, time_range, n_per_condition=2000,
                       seed=0, n_proj=128, strategy="", kappas=(1, 1, 1, 1),
                       steps=0, images_seen=0):
    """Sample the one-step generator per condition, compare with fresh
    world samples, and score all three metrics per condition and pooled."""
    rng = np.random.default_rng(seed)
    per_condition = {}
    gen_all, ref_all = [], []
    align_sum = 0.0
    for c in range(world.n_conditions):
        z = rng.standard_normal((n_per_condition, world.d))
        cc = np.full(n_per_condition, c, dtype=np.int64)
        gen = distill_mod.generate_one_step(net, sched, z, cc, time_range.t_init)
        ref = sample_data(world, c, n_per_condition, rng)
        align = alignment_score(world, gen, c)
        per_condition[c] = {
            "sliced_w2": sliced_w2(gen, ref, n_proj=n_proj, seed=seed),
            "gaussian_frechet": gaussian_frechet(gen, ref),
            "alignment_score": align,
        }
        align_sum += align
        gen_all.append(gen)
        ref_all.append(ref)
    gen_all = np.concatenate(gen_all)
    ref_all = np.concatenate(ref_all)
    pooled = {
        "sliced_w2": sliced_w2(gen_all, ref_all, n_proj=n_proj, seed=seed),
        "gaussian_frechet": gaussian_frechet(gen_all, ref_all),
        "alignment_score": align_sum / world.n_conditions,
    }
    return EvalReport(strategy=strategy, kappas=tuple(kappas), seed=seed,
                      steps=steps, images_seen=images_seen,
                      n_per_condition=n_per_condition,
                      per_condition=per_condition, pooled=pooled)


# ---------------------------------------------------------------------------
# Sweep


@dataclass
class SweepOutcome:
    reports: list = field(default_factory=list)
    snapshots: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)


def run_distillation(world, teacher, sched, config, steps, eval_every=0,
                     eval_seed=0, n_per_condition=2000, n_proj=128,
                     strategy="", on_step=None):
    """Distill for a fixed number of steps, optionally evaluating the EMA
    generator periodically (always at step 0 and at the end when
    eval_every > 0). Returns (state, metrics_rows, snapshot_reports)."""
    state = distill_mod.init_from_teacher(teacher, config)
    snapshots = []

    def snap():
        ema_net = distill_mod.DiffusionMLP(arch=state.theta.arch,
                                           params=state.ema.shadow.copy())
        snapshots.append(evaluate_generator(
            world, sched, ema_net, config.time_range,
            n_per_condition=n_per_condition, seed=eval_seed, n_proj=n_proj,
            strategy=strategy, kappas=config.guidance.as_tuple(),
            steps=state.step, images_seen=state.images_seen))

    if eval_every > 0:
        snap()
    rows = []
    for _ in range(steps):
        m = distill_mod.distill_step(state, sched, config)
        rows.append({"step": state.step, "images_seen": state.images_seen, **m})
        if on_step is not None:
            on_step(state, m)
        if eval_every > 0 and (state.step % eval_every == 0 or state.step == steps):
            if not snapshots or snapshots[-1].steps != state.step:
                snap()
    return state, rows, snapshots


def sweep_cells(strategy_list, kappa_list):
    """Expand (strategy, kappa) combinations; no_cfg contributes a single
    scale-free cell."""
    cells = []
    for strat in strategy_list:
        if strat == "no_cfg":
            cells.append((strat, None))
        else:
            for kappa in kappa_list:
                cells.append((strat, kappa))
    return cells


def tradeoff_sweep(world, teacher, sched, strategy_list, kappa_list, steps,
                   seeds, base_config, eval_every=0, n_per_condition=2000,
                   n_proj=128, include_baseline=True):
    """Run distillation for every (strategy, kappa, seed) cell and score
    the EMA generator; cells that abort are recorded as failures and the
    sweep continues. The init-from-teacher baseline is evaluated once."""
    from dataclasses import replace

    outcome = SweepOutcome()
    if include_baseline:
        outcome.reports.append(evaluate_generator(
            world, sched, teacher, base_config.time_range,
            n_per_condition=n_per_condition, seed=0, n_proj=n_proj,
            strategy="init", kappas=(1, 1, 1, 1), steps=0, images_seen=0))
    for strat, kappa in sweep_cells(strategy_list, kappa_list):
        scales = strategy_preset(strat, kappa)
        for seed in seeds:
            config = replace(base_config, guidance=scales, seed=seed)
            try:
                state, _, snaps = run_distillation(
                    world, teacher, sched, config, steps,
                    eval_every=eval_every, eval_seed=seed,
                    n_per_condition=n_per_condition, n_proj=n_proj,
                    strategy=strat)
                ema_net = distill_mod.DiffusionMLP(arch=state.theta.arch,
                                                   params=state.ema.shadow)
                report = evaluate_generator(
                    world, sched, ema_net, config.time_range,
                    n_per_condition=n_per_condition, seed=seed, n_proj=n_proj,
                    strategy=strat, kappas=scales.as_tuple(),
                    steps=state.step, images_seen=state.images_seen)
                outcome.reports.append(report)
                if snaps:
                    outcome.snapshots[(strat, kappa, seed)] = snaps
            except Exception as exc:
                outcome.failures.append({"strategy": strat, "kappa": kappa,
                                         "seed": seed, "error": str(exc)})
    key = {s: i for i, s in enumerate(["init", *strategy_list])}
    outcome.reports.sort(key=lambda r: (key.get(r.strategy, 99), r.kappas, r.seed))
    return outcome


def write_eval_csv(path, reports, failures=()):
    """Fixed-schema CSV (RFC-4180 quoting, LF endings)."""
    import csv

    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.DictWriter(f, fieldnames=CSV_HEADER, lineterminator="\n")
        w.writeheader()
        for report in reports:
            for row in report.rows():
                w.writerow(row)
        for fail in failures:
            scales = ("", "", "", "")
            if fail.get("kappa") is not None:
                try:
                    scales = strategy_preset(fail["strategy"], fail["kappa"]).as_tuple()
                except Exception:
                    pass
            w.writerow({"strategy": fail["strategy"],
                        "kappa1": scales[0], "kappa2": scales[1],
                        "kappa3": scales[2], "kappa4": scales[3],
                        "seed": fail["seed"], "steps": "", "images_seen": "",
                        "condition": "failed", "sliced_w2": "",
                        "gaussian_frechet": "", "alignment_score": ""})
