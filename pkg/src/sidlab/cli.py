"""Command-line surface: pretrain, distill, verify, eval, sweep.

Exit codes: 0 success, 1 verification failure, 2 configuration error,
3 runtime training error. Every subcommand writes the fully-resolved
config next to its outputs and never mutates its inputs; reruns with the
same resolved config are byte-identical (no timestamps are written).
"""

from . import _tuning

_tuning.set_runtime_defaults()

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import backend
from . import metrics as metrics_mod
from . import svgplot
from .config import load_config, write_resolved
from .diffusion import check_fingerprint
from .distill import distill_step, init_from_teacher, teacher_pretrain
from .errors import ConfigurationError, SidlabError, TrainingError
from .guidance import STRATEGIES
from .nn import (DiffusionMLP, ParamSet, load_checkpoint, net_from_checkpoint,
                 save_checkpoint)
from .verify import format_battery, run_battery

METRICS_HEADER = ["step", "images_seen", "psi_loss", "theta_loss",
                  "omega_mean", "kappa1", "kappa2", "kappa3", "kappa4", "seed"]


def _parse_overrides(pairs):
    overrides = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigurationError(f"--set expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        try:
            overrides[key] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key] = raw
    return overrides


def _load(args):
    overrides = _parse_overrides(getattr(args, "set", None))
    if getattr(args, "out", None):
        overrides["out_dir"] = args.out
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return load_config(args.config, overrides=overrides)


def _prepare_out(cfg):
    os.makedirs(cfg.out_dir, exist_ok=True)
    write_resolved(cfg, os.path.join(cfg.out_dir, "resolved_config.json"))


def _net_header(cfg, kind, counters):
    return {"kind": kind, "arch": cfg.arch.as_dict(),
            "schedule": cfg.make_schedule().fingerprint(),
            "counters": counters, "backend": backend.active_name()}


def _load_teacher(path, cfg):
    header, tensors = load_checkpoint(path)
    check_fingerprint(cfg.make_schedule().fingerprint(), header["schedule"])
    if header["arch"] != cfg.arch.as_dict():
        raise ConfigurationError(
            f"architecture mismatch: config {cfg.arch.as_dict()} "
            f"vs checkpoint {header['arch']}")
    return net_from_checkpoint(header, tensors)


# ---------------------------------------------------------------------------
# pretrain


def cmd_pretrain(args):
    cfg = _load(args)
    _prepare_out(cfg)
    sched = cfg.make_schedule()
    rng = np.random.default_rng(cfg.seed)
    rows = []

    def on_step(step, loss):
        if step % cfg.log_every == 0 or step == cfg.teacher_steps:
            print(f"pretrain step {step}/{cfg.teacher_steps} loss {loss:.5f}")

    net, loss_log = teacher_pretrain(
        cfg.world, sched, cfg.arch, cfg.teacher_steps, cfg.batch,
        cfg.optimizer["lr_teacher"], cfg.dropout_rate, rng,
        adam_beta1=cfg.optimizer["beta1"], adam_beta2=cfg.optimizer["beta2"],
        adam_eps=cfg.optimizer["eps"], log_every=cfg.log_every,
        on_step=on_step)
    rows.extend(loss_log)
    ckpt = os.path.join(cfg.out_dir, "teacher.ckpt")
    save_checkpoint(ckpt, _net_header(cfg, "teacher",
                                      {"steps": cfg.teacher_steps}),
                    dict(net.params.tensors))
    with open(os.path.join(cfg.out_dir, "teacher_loss.csv"), "w",
              encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "loss"])
        w.writerows(rows)
    print(f"wrote {ckpt}")
    return 0


# ---------------------------------------------------------------------------
# distill


def _state_tensors(state):
    out = {}
    for prefix, params in (("phi", state.phi.params), ("psi", state.psi.params),
                           ("theta", state.theta.params),
                           ("psi_opt.m", state.psi_opt.m), ("psi_opt.v", state.psi_opt.v),
                           ("theta_opt.m", state.theta_opt.m),
                           ("theta_opt.v", state.theta_opt.v),
                           ("ema", state.ema.shadow)):
        for name, t in params.tensors.items():
            out[f"{prefix}.{name}"] = t
    return out


def _split_prefix(tensors, prefix):
    plen = len(prefix) + 1
    return ParamSet({k[plen:]: v for k, v in tensors.items()
                     if k.startswith(prefix + ".") and "." not in k[plen:]})


def _save_state(path, cfg, state, dcfg):
    header = _net_header(cfg, "state", {
        "step": state.step, "images_seen": state.images_seen,
        "psi_opt_step": state.psi_opt.step, "theta_opt_step": state.theta_opt.step,
        "ema_images_seen": state.ema.images_seen})
    header["rng_state"] = state.rng.bit_generator.state
    header["guidance"] = list(dcfg.guidance.as_tuple())
    header["seed"] = dcfg.seed
    save_checkpoint(path, header, _state_tensors(state))


def _restore_state(path, cfg, dcfg):
    header, tensors = load_checkpoint(path)
    check_fingerprint(cfg.make_schedule().fingerprint(), header["schedule"])
    arch = cfg.arch
    if header["arch"] != arch.as_dict():
        raise ConfigurationError("architecture mismatch in state checkpoint")
    if list(dcfg.guidance.as_tuple()) != header["guidance"]:
        raise ConfigurationError("guidance scales differ from checkpointed run")
    phi = DiffusionMLP(arch=arch, params=_split_prefix(tensors, "phi"))
    psi = DiffusionMLP(arch=arch, params=_split_prefix(tensors, "psi"))
    theta = DiffusionMLP(arch=arch, params=_split_prefix(tensors, "theta"))
    state = init_from_teacher(phi, dcfg)
    state.psi = psi
    state.theta = theta
    state.psi_opt.m = _split_prefix(tensors, "psi_opt.m")
    state.psi_opt.v = _split_prefix(tensors, "psi_opt.v")
    state.psi_opt.step = header["counters"]["psi_opt_step"]
    state.theta_opt.m = _split_prefix(tensors, "theta_opt.m")
    state.theta_opt.v = _split_prefix(tensors, "theta_opt.v")
    state.theta_opt.step = header["counters"]["theta_opt_step"]
    state.ema.shadow = _split_prefix(tensors, "ema")
    state.ema.images_seen = header["counters"]["ema_images_seen"]
    state.step = header["counters"]["step"]
    state.images_seen = header["counters"]["images_seen"]
    state.rng.bit_generator.state = header["rng_state"]
    return state


def _append_csv(path, header, rows):
    exists = os.path.exists(path)
    with open(path, "a", encoding="utf-8", newline="") as f:
        w = csv.DictWriter(f, fieldnames=header, lineterminator="\n")
        if not exists:
            w.writeheader()
        for row in rows:
            w.writerow(row)


def _snapshot_eval(cfg, sched, state, strategy):
    net = DiffusionMLP(arch=state.theta.arch, params=state.ema.shadow.copy())
    report = metrics_mod.evaluate_generator(
        cfg.world, sched, net, cfg.time_range,
        n_per_condition=cfg.eval["n_per_condition"], seed=cfg.eval["seed"],
        n_proj=cfg.eval["n_projections"], strategy=strategy,
        kappas=cfg.guidance.as_tuple(), steps=state.step,
        images_seen=state.images_seen)
    return report


def cmd_distill(args):
    cfg = _load(args)
    _prepare_out(cfg)
    sched = cfg.make_schedule()
    dcfg = cfg.distill_config()
    strategy = cfg.raw["guidance"].get("strategy", "custom")
    if args.resume:
        state = _restore_state(args.resume, cfg, dcfg)
        print(f"resumed at step {state.step} ({state.images_seen} images)")
    else:
        teacher = _load_teacher(args.teacher, cfg)
        state = init_from_teacher(teacher, dcfg)
    interval = cfg.eval["interval_steps"]
    total_steps = -(-dcfg.image_budget // dcfg.batch)

    metrics_path = os.path.join(cfg.out_dir, "metrics.csv")
    snaps_path = os.path.join(cfg.out_dir, "eval_snapshots.csv")
    if not args.resume:
        for path in (metrics_path, snaps_path):
            if os.path.exists(path):
                os.remove(path)
    if interval > 0 and state.step == 0:
        _append_csv(snaps_path, metrics_mod.CSV_HEADER,
                    _snapshot_eval(cfg, sched, state, strategy).rows())

    k1, k2, k3, k4 = dcfg.guidance.as_tuple()
    while state.images_seen < dcfg.image_budget:
        m = distill_step(state, sched, dcfg)
        _append_csv(metrics_path, METRICS_HEADER, [{
            "step": state.step, "images_seen": state.images_seen,
            "psi_loss": m["psi_loss"], "theta_loss": m["theta_loss"],
            "omega_mean": m["omega_mean"], "kappa1": k1, "kappa2": k2,
            "kappa3": k3, "kappa4": k4, "seed": dcfg.seed}])
        if state.step % cfg.log_every == 0 or state.images_seen >= dcfg.image_budget:
            print(f"distill step {state.step}/{total_steps} "
                  f"psi_loss {m['psi_loss']:.5f} theta_loss {m['theta_loss']:.5f}")
        at_interval = interval > 0 and state.step % interval == 0
        if at_interval or state.images_seen >= dcfg.image_budget:
            if interval > 0:
                _append_csv(snaps_path, metrics_mod.CSV_HEADER,
                            _snapshot_eval(cfg, sched, state, strategy).rows())
            _save_nets(cfg, state)
            _save_state(os.path.join(cfg.out_dir, "state.ckpt"), cfg, state, dcfg)

    _save_nets(cfg, state)
    _save_state(os.path.join(cfg.out_dir, "state.ckpt"), cfg, state, dcfg)
    print(f"distillation finished at step {state.step}")
    return 0


def _save_nets(cfg, state):
    counters = {"step": state.step, "images_seen": state.images_seen}
    for kind, params in (("psi", state.psi.params), ("theta", state.theta.params),
                         ("theta_ema", state.ema.shadow)):
        save_checkpoint(os.path.join(cfg.out_dir, f"{kind}.ckpt"),
                        _net_header(cfg, kind, counters), dict(params.tensors))


# ---------------------------------------------------------------------------
# verify


def cmd_verify(args):
    cfg = _load(args)
    _prepare_out(cfg)
    sched = cfg.make_schedule()
    results = run_battery(cfg.world, sched, cfg.time_range, seed=cfg.seed,
                          mc_n=args.mc_n)
    print(format_battery(results))
    failed = [r for r in results if not r["passed"]]
    if failed:
        print(f"{len(failed)} of {len(results)} checks failed")
        return 1
    print(f"all {len(results)} checks passed")
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args):
    cfg = _load(args)
    _prepare_out(cfg)
    net = _load_teacher(args.checkpoint, cfg)
    sched = cfg.make_schedule()
    n = args.n or cfg.eval["n_per_condition"]
    report = metrics_mod.evaluate_generator(
        cfg.world, sched, net, cfg.time_range, n_per_condition=n,
        seed=cfg.eval["seed"], n_proj=cfg.eval["n_projections"])
    path = os.path.join(cfg.out_dir, "eval.csv")
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["condition", "n_per_condition", "sliced_w2",
                    "gaussian_frechet", "alignment_score"])
        for c in sorted(report.per_condition):
            row = report.per_condition[c]
            w.writerow([c, n, row["sliced_w2"], row["gaussian_frechet"],
                        row["alignment_score"]])
        w.writerow(["pooled", n, report.pooled["sliced_w2"],
                    report.pooled["gaussian_frechet"],
                    report.pooled["alignment_score"]])
    print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# sweep


def _sweep_cell_task(payload):
    """Module-level worker for --jobs > 1 (must be picklable)."""
    from .config import resolve_config

    cfg = resolve_config(payload["config"])
    sched = cfg.make_schedule()
    teacher = _load_teacher(payload["teacher"], cfg)
    outcome = metrics_mod.tradeoff_sweep(
        cfg.world, teacher, sched, [payload["strategy"]],
        [payload["kappa"]] if payload["kappa"] is not None else [],
        payload["steps"], [payload["seed"]], cfg.distill_config(),
        eval_every=payload["eval_every"],
        n_per_condition=cfg.eval["n_per_condition"],
        n_proj=cfg.eval["n_projections"], include_baseline=False)
    return outcome


def cmd_sweep(args):
    cfg = _load(args)
    _prepare_out(cfg)
    sched = cfg.make_schedule()
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    for s in strategies:
        if s not in STRATEGIES:
            raise ConfigurationError(f"unknown strategy {s!r}; choices: {STRATEGIES}")
    kappas = [float(k) for k in args.kappas.split(",")] if args.kappas else []
    seeds = [int(s) for s in args.seeds.split(",")]
    steps = args.steps or -(-cfg.distill_image_budget // cfg.batch)
    eval_every = args.eval_every if args.eval_every is not None else max(steps // 4, 1)
    teacher = _load_teacher(args.teacher, cfg)
    base = cfg.distill_config()

    if args.jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        outcome = metrics_mod.SweepOutcome()
        outcome.reports.append(metrics_mod.evaluate_generator(
            cfg.world, sched, teacher, cfg.time_range,
            n_per_condition=cfg.eval["n_per_condition"], seed=0,
            n_proj=cfg.eval["n_projections"], strategy="init"))
        tasks = []
        for strat, kappa in metrics_mod.sweep_cells(strategies, kappas):
            for seed in seeds:
                tasks.append({"config": cfg.raw, "teacher": args.teacher,
                              "strategy": strat, "kappa": kappa, "seed": seed,
                              "steps": steps, "eval_every": eval_every})
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            for part in pool.map(_sweep_cell_task, tasks):
                outcome.reports.extend(part.reports)
                outcome.snapshots.update(part.snapshots)
                outcome.failures.extend(part.failures)
        key = {s: i for i, s in enumerate(["init", *strategies])}
        outcome.reports.sort(key=lambda r: (key.get(r.strategy, 99), r.kappas, r.seed))
    else:
        outcome = metrics_mod.tradeoff_sweep(
            cfg.world, teacher, sched, strategies, kappas, steps, seeds, base,
            eval_every=eval_every, n_per_condition=cfg.eval["n_per_condition"],
            n_proj=cfg.eval["n_projections"])

    csv_path = os.path.join(cfg.out_dir, "sweep.csv")
    metrics_mod.write_eval_csv(csv_path, outcome.reports, outcome.failures)
    for metric in ("sliced_w2", "gaussian_frechet", "alignment_score"):
        series = []
        for (strat, kappa, seed), snaps in sorted(outcome.snapshots.items(),
                                                  key=lambda kv: str(kv[0])):
            label = f"{strat}" + (f" k={kappa}" if kappa is not None else "")
            label += f" seed={seed}"
            series.append((label, [(r.images_seen, r.pooled[metric])
                                   for r in snaps]))
        svgplot.write_line_chart(
            os.path.join(cfg.out_dir, f"sweep_{metric}.svg"), series,
            title=f"{metric} vs images seen", x_label="images seen",
            y_label=metric)
    print(f"wrote {csv_path} ({len(outcome.reports)} reports, "
          f"{len(outcome.failures)} failures)")
    if outcome.failures and not outcome.reports:
        return 3
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sidlab",
        description="Desk-scale one-step diffusion distillation lab")

    def common(p):
        p.add_argument("config", help="path to a JSON run config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config field (dotted path)")
        p.add_argument("--out", help="output directory (overrides config)")
        p.add_argument("--seed", type=int, help="seed (overrides config)")

    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("pretrain", help="train the teacher network")
    common(p)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("distill", help="distill a one-step generator")
    common(p)
    p.add_argument("--teacher", required=False,
                   help="teacher checkpoint (required unless --resume)")
    p.add_argument("--resume", help="state checkpoint to resume from")
    p.set_defaults(fn=cmd_distill)

    p = sub.add_parser("verify", help="run the identity/gradient battery")
    common(p)
    p.add_argument("--mc-n", type=int, default=200_000,
                   help="Monte Carlo sample count for the identity checks")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("eval", help="evaluate a generator checkpoint")
    p.add_argument("checkpoint", help="theta or theta_ema checkpoint")
    common(p)
    p.add_argument("--n", type=int, help="samples per condition")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="guidance-strategy sweep")
    common(p)
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.add_argument("--strategies", default="lsg",
                   help="comma-separated strategy names")
    p.add_argument("--kappas", default="1.5",
                   help="comma-separated guidance scales")
    p.add_argument("--seeds", default="0", help="comma-separated seeds")
    p.add_argument("--steps", type=int, help="distillation steps per cell")
    p.add_argument("--eval-every", type=int,
                   help="snapshot interval in steps (default steps/4)")
    p.add_argument("--jobs", type=int, default=1, help="parallel cell workers")
    p.set_defaults(fn=cmd_sweep)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "distill" and not args.resume and not args.teacher:
            raise ConfigurationError("distill needs --teacher (or --resume)")
        return args.fn(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except TrainingError as exc:
        dump = None
        if exc.diagnostics:
            dump = os.path.join(os.getcwd(), "training_abort_dump.json")
            with open(dump, "w", encoding="utf-8") as f:
                json.dump(exc.diagnostics, f)
        print(f"training error: {exc}"
              + (f" (diagnostics: {dump})" if dump else ""), file=sys.stderr)
        return 3
    except SidlabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
