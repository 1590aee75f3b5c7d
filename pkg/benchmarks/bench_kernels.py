"""Time the compiled kernels against the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--repeat 3]

Each kernel is fed identical inputs under both backends; the script checks
that the outputs agree before reporting timings.
"""
import argparse
import time

import numpy as np

from aoisched import kernels
from aoisched.env import EnvConfig
from aoisched.learn import LearnerConfig, SarsaState, World, run_segment, sarsa_params
from aoisched.policy import WhittleContext, whittle_table
from aoisched.solve import LagrangianProblem, _model


def _timeit(fn, repeat):
    best = np.inf
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def bench_bellman(backend, cfg, sweeps):
    model = _model(cfg, cfg.fail_matrix)
    k = model.space.kernel
    n = model.space.size
    h = np.zeros(n)
    th = np.empty(n)
    act = np.empty(n, dtype=np.int64)

    def go():
        h[:] = 0.0
        for _ in range(sweeps):
            backend.bellman_sweep(h, model.cost, 2.0, k.idle_next, k.new_ok, k.new_bad,
                                  model.p_new_fail, k.retx_ok, k.retx_bad, model.p_retx_fail,
                                  model.retx_mask_u8, th, act)
            h[:] = th - th[0]
        return h.copy()
    return go


def bench_rollout(backend, cfg, T):
    table = whittle_table(cfg, WhittleContext.from_config(cfg, eta=5.0)).codes
    u = np.random.default_rng(0).random((T, 2))

    def go():
        world = World(cfg)
        cost = np.zeros(T)
        act = np.zeros(T, dtype=np.int8)
        fb = np.zeros(T, dtype=np.int8)
        st = np.zeros(T, dtype=np.int64)
        empty = np.zeros((0, 0), dtype=np.int64)
        backend.run_segment(kernels.TABLE, world.ages, world.retx, 0, T, world.fail, world.weights,
                            cfg.r_cap, world.strides, cfg.delta_max, table, table, 1.0,
                            np.zeros(0), 0.0, empty, empty, empty, empty, False, u, cost, act, fb, st)
        return cost
    return go


def bench_sarsa(backend, cfg, T):
    lcfg = LearnerConfig()
    u = np.random.default_rng(0).random((T, 3))

    def go():
        world = World(cfg)
        s = SarsaState.fresh(cfg, lcfg)
        vec = np.array([0.0, 0.0, 0.0, -1.0, 1.0])
        e1, e8 = np.zeros(0), np.zeros(0, dtype=np.int8)
        backend.run_sarsa(world.ages, world.retx, 0, T, world.fail, world.weights, cfg.r_cap,
                          world.strides, cfg.delta_max, s.Q, s.visits,
                          sarsa_params(lcfg, cfg.lam), vec, u, e1, e8, e8,
                          np.zeros(0, dtype=np.int64))
        return s.Q
    return go


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    if kernels.compiled_backend is None:
        raise SystemExit("compiled extension not built; nothing to compare")
    arq = EnvConfig.arq([0.5, 0.2, 0.1], delta_max=30)
    harq = EnvConfig.harq([[0.5, 0.25, 0.125, 0.0625]] * 2, delta_max=30)
    cases = [
        ("bellman_sweep ARQ M=3 D=30 x20", bench_bellman, arq, 20),
        ("bellman_sweep HARQ M=2 D=30 x20", bench_bellman, harq, 20),
        ("run_segment table, 2e4 slots", bench_rollout, arq, 20_000),
        ("run_sarsa, 2e4 slots", bench_sarsa, arq, 20_000),
    ]
    print(f"{'kernel':34s} {'cython [ms]':>12s} {'python [ms]':>12s} {'speedup':>8s}")
    for label, make, cfg, size in cases:
        tc, oc = _timeit(make(kernels.compiled_backend, cfg, size), args.repeat)
        tp, op = _timeit(make(kernels.python_backend, cfg, size), args.repeat)
        if not np.allclose(oc, op, atol=1e-9):
            raise SystemExit(f"{label}: backends disagree")
        print(f"{label:34s} {tc * 1e3:12.2f} {tp * 1e3:12.2f} {tp / tc:8.1f}x")


if __name__ == "__main__":
    main()
