"""Benchmark the compiled kernels against the pure-numpy fallback.

Times the fused network forward/backward at training shapes and a full
distillation step under each backend. Run from the repo root:

    python benchmarks/bench_backends.py [--batch 256] [--repeats 50]
"""

import argparse
import time

from sidlab import _tuning

_tuning.set_runtime_defaults()

import numpy as np

from sidlab import backend, diffusion, distill, guidance
from sidlab.nn import DiffusionMLP, NetArch


def timer(fn, repeats):
    fn()
    best = float("inf")
    t0 = time.perf_counter()
    n = 0
    while n < repeats:
        t1 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t1)
        n += 1
    total = time.perf_counter() - t0
    return best * 1e3, total / repeats * 1e3


def bench_kernels(name, batch, repeats):
    backend.select(name)
    rng = np.random.default_rng(0)
    arch = NetArch(input_dim=2, n_conditions=4)
    dims = arch.layer_dims()
    ws = [rng.standard_normal(d) * 0.3 for d in dims]
    bs = [rng.standard_normal(d[1]) * 0.1 for d in dims]
    x = rng.standard_normal((batch, arch.cat_dim))
    out, cache = backend.mlp_forward(x, ws, bs)
    g = rng.standard_normal(out.shape)
    rows = []
    for label, fn in [
        ("forward", lambda: backend.mlp_forward(x, ws, bs)),
        ("backward (weights)", lambda: backend.mlp_backward(ws, cache, g, True)),
        ("backward (input only)", lambda: backend.mlp_backward(ws, cache, g, False)),
    ]:
        best, mean = timer(fn, repeats)
        rows.append((label, best, mean))
    return rows


def bench_distill_step(name, batch, repeats):
    backend.select(name)
    rng = np.random.default_rng(0)
    sched = diffusion.make_schedule(1000)
    arch = NetArch(input_dim=2, n_conditions=4)
    teacher = DiffusionMLP.create(arch, rng)
    cfg = distill.DistillConfig(
        guidance=guidance.strategy_preset("lsg", 1.5),
        time_range=diffusion.DEFAULT_TIME_RANGE, batch=batch,
        image_budget=batch * (repeats + 5))
    state = distill.init_from_teacher(teacher, cfg)
    for _ in range(3):
        distill.distill_step(state, sched, cfg)
    return timer(lambda: distill.distill_step(state, sched, cfg), repeats)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--batch", type=int, default=256)
    parser.add_argument("--repeats", type=int, default=50)
    args = parser.parse_args()

    names = backend.available()
    print(f"backends available: {names}; batch={args.batch}, "
          f"repeats={args.repeats}\n")
    header = f"{'kernel':<24}" + "".join(f"{n + ' (best/mean ms)':>28}" for n in names)
    print(header)
    print("-" * len(header))
    per_backend = {n: bench_kernels(n, args.batch, args.repeats) for n in names}
    for i, (label, _, _) in enumerate(per_backend[names[0]]):
        cells = "".join(f"{per_backend[n][i][1]:>15.3f} /{per_backend[n][i][2]:>9.3f}"
                        for n in names)
        print(f"{label:<24}" + cells)
    print()
    for n in names:
        best, mean = bench_distill_step(n, args.batch, max(10, args.repeats // 5))
        print(f"full distillation step [{n}]: best {best:.2f} ms, mean {mean:.2f} ms")
    if len(names) == 2:
        a = bench_distill_step(names[0], args.batch, 10)[1]
        b = bench_distill_step(names[1], args.batch, 10)[1]
        fast, slow = sorted([(a, names[0]), (b, names[1])])
        print(f"\n{fast[1]} is {slow[0] / fast[0]:.2f}x faster on the full step")


if __name__ == "__main__":
    main()
