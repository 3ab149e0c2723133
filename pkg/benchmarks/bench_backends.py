#!/usr/bin/env python3
"""Benchmark the compiled stepping core against the pure-Python fallback.

Times the workloads that dominate the convergence experiments:

  * ExpMilstein reference stepping (dense cached-propagator path, d=4, m=4)
  * EI0 on the diagonal-noise problem (per-step dense matrix exponential)
  * EI0 on Ginzburg-Landau (scalar diagonal fast path)
  * EI0 on the stiff rotation problem (cached split propagator)

Usage: python benchmarks/bench_backends.py [--samples N] [--level N]
"""

import argparse
import time

import numpy as np

from gbmei import model, noise, schemes


def bench_case(name, problem, spec, level, samples, seed=7):
    grid = noise.GridSpec(T=1.0, levels=(level,))
    batches = [
        noise.generate(seed, s, problem.m, grid, K=10, levy_areas=False)
        for s in range(samples)
    ]
    iterated_needed = spec.needs_iterated
    results = {}
    backends = ["python"]
    try:
        import gbmei._core  # noqa: F401

        backends.append("compiled")
    except ImportError:
        pass
    for backend in backends:
        runner = schemes.path_runner(problem, spec, 1.0 / level, backend=backend)
        # warm up once, then time
        runner.run(batches[0].increments(level),
                   batches[0].iterated_integrals(level) if iterated_needed else None,
                   problem.u0)
        t0 = time.perf_counter()
        final = 0.0
        for batch in batches:
            res = runner.run(
                batch.increments(level),
                batch.iterated_integrals(level) if iterated_needed else None,
                problem.u0,
            )
            final += float(res.states[-1, 0])
        elapsed = time.perf_counter() - t0
        results[backend] = (elapsed, final)
    steps = samples * level
    line = f"{name:34s}"
    for backend in backends:
        elapsed, _ = results[backend]
        line += f"  {backend}: {elapsed:7.3f}s ({steps / elapsed / 1e6:6.2f} Msteps/s)"
    if len(backends) == 2:
        line += f"  speedup {results['python'][0] / results['compiled'][0]:6.1f}x"
        a, b = results["python"][1], results["compiled"][1]
        assert abs(a - b) <= 1e-9 * max(1.0, abs(a)), "backends disagree"
    print(line)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--samples", type=int, default=20)
    parser.add_argument("--level", type=int, default=4096)
    args = parser.parse_args()
    diag = model.diag_noise()
    print(f"paths: {args.samples}, steps per path: {args.level}")
    bench_case(
        "ExpMilstein reference (diag_noise)",
        diag,
        schemes.SchemeSpec("ExpMilstein"),
        args.level,
        args.samples,
    )
    bench_case(
        "EI0 per-step expm (diag_noise)",
        diag,
        schemes.SchemeSpec("EI0"),
        args.level,
        args.samples,
    )
    bench_case(
        "EI0 scalar fast path (GL)",
        model.ginzburg_landau(),
        schemes.SchemeSpec("EI0"),
        args.level,
        args.samples,
    )
    bench_case(
        "EI0 split propagator (stiff2d)",
        model.stiff2d(),
        schemes.SchemeSpec("EI0"),
        args.level,
        args.samples,
    )


if __name__ == "__main__":
    main()
