"""Monte-Carlo experiment engine: strong-error tables, order fitting,
efficiency measurement and long-time moment trajectories.

For every sample one noise realisation spans the reference grid and the
whole step-size ladder through coarsening, so reference and approximations
ride the same Brownian path. Samples are independent work units; a process
pool distributes them and results are reduced in sample order, which makes
every statistic bitwise independent of the worker count.

Wall-clock timing covers the integration loops only; noise synthesis and the
reference solve are timed separately and reported in the metadata.
"""

import hashlib
import json
import logging
import os
import pickle
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .model import builtin
from .noise import DEFAULT_LEVY_TERMS, GridSpec, generate
from .schemes import DEFAULT_GUARD, SchemeSpec, backend_name, path_runner, scheme_spec

log = logging.getLogger("gbmei")

FIT_FLOOR = 1e-11


class ExclusionError(RuntimeError):
    """Too many samples lost to reference blowups; the run is unusable."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Full description of one strong-error / efficiency benchmark run."""

    problem: str
    params: dict = field(default_factory=dict)
    schemes: tuple = ()  # SchemeSpec instances; empty -> per-problem default
    ladder: tuple = ()  # step counts, any order; empty -> default
    T: float = 0.0  # 0 -> default
    samples: int = 0  # 0 -> default
    seed: int = 12345
    reference: tuple = ()  # ("exact",) or ("scheme", kind, level); empty -> default
    levy_terms: int = DEFAULT_LEVY_TERMS
    commutative_identity: bool = True
    ref_refine: int = 4  # exact references use a grid this much finer than the ladder
    exclusion_limit: float = 0.01
    ref_selftest: bool = True
    workers: int = 1
    guard: float = DEFAULT_GUARD
    error_metric: str = "final"  # or "sup" (sup over shared grid points)


# Desk-scale default protocols per built-in problem (ladder coarse -> fine).
_DEFAULTS = {
    "ginzburg_landau": dict(
        T=1.0,
        ladder=(32, 64, 128, 256, 512, 1024),
        samples=1000,
        schemes=("EI0", "EI1", "EI2", "SETD1"),
        reference=("exact",),
    ),
    "diag_noise": dict(
        T=1.0,
        ladder=(32, 64, 128, 256, 512),
        samples=500,
        schemes=("EI0", "SETD0", "HomEI0"),
        reference=("scheme", "ExpMilstein", 16384),
    ),
    "noncomm_noise": dict(
        T=1.0,
        ladder=(32, 64, 128, 256, 512),
        samples=100,
        schemes=("EI0", "SETD0", "HomEI0"),
        reference=("scheme", "ExpMilstein", 16384),
    ),
    "stiff2d": dict(
        T=1.0,
        ladder=(32, 64, 128, 256, 512),
        samples=100,
        schemes=("EI0", "SETD0"),
        reference=("scheme", "ExpMilstein", 16384),
    ),
}


def resolve_config(config):
    """Fill per-problem protocol defaults and normalise scheme specs."""
    defaults = _DEFAULTS.get(config.problem, _DEFAULTS["diag_noise"])
    problem = builtin(config.problem, config.params)
    T = config.T if config.T > 0 else defaults["T"]
    ladder = tuple(sorted(config.ladder)) if config.ladder else defaults["ladder"]
    samples = config.samples if config.samples > 0 else defaults["samples"]
    reference = tuple(config.reference) if config.reference else defaults["reference"]
    raw_schemes = config.schemes if config.schemes else defaults["schemes"]
    specs = tuple(
        s if isinstance(s, SchemeSpec) else scheme_spec(s, problem=problem) for s in raw_schemes
    )
    if len({s.kind for s in specs}) != len(specs):
        raise ValueError("duplicate scheme kinds in one experiment")
    if samples < 2:
        raise ValueError("samples must be >= 2")
    if reference[0] == "scheme":
        _, ref_kind, ref_level = reference
        if ref_level <= max(ladder):
            raise ValueError("reference level must be finer than every ladder level")
    elif reference[0] != "exact":
        raise ValueError(f"unknown reference type {reference[0]!r}")
    return replace(
        config, T=T, ladder=ladder, samples=samples, reference=reference, schemes=specs
    )


@dataclass(frozen=True)
class ErrorRow:
    dt: float
    rms: float
    stderr: float
    wall_seconds: float


@dataclass
class ErrorTable:
    """Strong-error rows (dt descending) with the fitted log2-log2 slope.

    Rows whose rms sits below ``FIT_FLOOR`` are excluded from the fit; when
    fewer than two rows survive, the table is flagged ``at_floor`` and the
    fit fields are NaN.
    """

    problem: str
    scheme: str
    rows: list
    slope: float = float("nan")
    intercept: float = float("nan")
    r2: float = float("nan")
    at_floor: bool = False


@dataclass
class ExperimentResult:
    tables: dict  # scheme kind -> ErrorTable, in config order
    meta: dict


@dataclass
class MomentTrajectory:
    times: np.ndarray
    mean: np.ndarray  # (N+1, d), mean over non-blown paths
    norm: np.ndarray  # (N+1,)
    blowup_fraction: float
    samples: int


def fit_order(rows):
    """Least squares of log2(rms) on log2(dt) over rows above the error floor.

    ``rows`` holds (dt, rms) pairs (extra fields ignored). Returns
    (slope, intercept, r2); raises ValueError with fewer than two usable rows.
    """
    pts = []
    for row in rows:
        dt, rms = (row.dt, row.rms) if hasattr(row, "dt") else (row[0], row[1])
        if rms >= FIT_FLOOR:
            pts.append((np.log2(dt), np.log2(rms)))
    if len(pts) < 2:
        raise ValueError("need at least 2 rows above the error floor to fit an order")
    x = np.array([p[0] for p in pts])
    y = np.array([p[1] for p in pts])
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    ss_res = float(np.sum(resid**2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res < 1e-30 else 0.0)
    return float(slope), float(intercept), float(r2)


def jackknife_rms(err2):
    """RMS of errors plus the jackknife standard error of that estimate."""
    err2 = np.asarray(err2, dtype=float)
    M = err2.size
    S = float(err2.sum())
    rms = np.sqrt(S / M)
    if M < 2:
        return rms, float("nan")
    loo = np.sqrt(np.maximum(S - err2, 0.0) / (M - 1))
    se = np.sqrt((M - 1) / M * float(np.sum((loo - loo.mean()) ** 2)))
    return float(rms), float(se)


# ---------------------------------------------------------------------------
# Worker-side machinery. State is rebuilt per process from a pickled payload;
# chunk results are keyed by absolute sample index so reductions are
# order-independent of the pool layout.

_STATE = None


def _build_state(payload):
    problem = payload["problem"]
    specs = payload["specs"]
    grid = payload["grid"]
    state = {
        "problem": problem,
        "specs": specs,
        "grid": grid,
        "seed": payload["seed"],
        "K": payload["levy_terms"],
        "levy": payload["levy"],
        "guard": payload["guard"],
        "timing": payload["timing"],
        "mode": payload["mode"],
        "error_metric": payload.get("error_metric", "final"),
    }
    if payload["mode"] == "strong":
        ladder = payload["ladder"]
        state["ladder"] = ladder
        state["reference"] = payload["reference"]
        state["runners"] = {
            (si, N): path_runner(problem, spec, grid.T / N, payload["guard"])
            for si, spec in enumerate(specs)
            for N in ladder
        }
        if payload["reference"][0] == "scheme":
            ref_spec = scheme_spec(payload["reference"][1], problem=problem)
            state["ref_spec"] = ref_spec
            state["ref_runner"] = path_runner(problem, ref_spec, grid.T / grid.finest, payload["guard"])
    else:
        state["runner"] = path_runner(problem, specs[0], grid.T / grid.finest, payload["guard"])
    return state


def _init_worker(payload_bytes):
    global _STATE
    _STATE = _build_state(pickle.loads(payload_bytes))


def _chunk_strong(samples):
    st = _STATE
    problem, grid = st["problem"], st["grid"]
    specs, ladder = st["specs"], st["ladder"]
    S, L = len(specs), len(ladder)
    n = len(samples)
    err2 = np.full((S, L, n), np.nan)
    excluded = np.zeros(n, dtype=bool)
    blowups = np.zeros((S, L), dtype=np.int64)
    wall = np.zeros((S, L))
    noise_seconds = 0.0
    ref_seconds = 0.0
    sup = st["error_metric"] == "sup"
    for k, sample in enumerate(samples):
        t0 = time.perf_counter()
        batch = generate(st["seed"], sample, problem.m, grid, st["K"], st["levy"])
        noise_seconds += time.perf_counter() - t0
        t0 = time.perf_counter()
        ref_traj = None
        if st["reference"][0] == "exact":
            if sup:
                ref_final = None
            else:
                ref_final = problem.exact(grid.T, batch)
        else:
            res = st["ref_runner"].run(
                batch.increments(grid.finest),
                batch.iterated_integrals(grid.finest) if st["ref_spec"].needs_iterated else None,
                problem.u0,
            )
            if res.blowup:
                excluded[k] = True
                ref_seconds += time.perf_counter() - t0
                continue
            ref_final = res.states[-1]
            ref_traj = res.states if sup else None
        ref_seconds += time.perf_counter() - t0
        for si in range(S):
            spec = specs[si]
            for li, N in enumerate(ladder):
                dW = batch.increments(N)
                iterated = batch.iterated_integrals(N) if spec.needs_iterated else None
                t0 = time.perf_counter()
                res = st["runners"][(si, N)].run(dW, iterated, problem.u0)
                wall[si, li] += time.perf_counter() - t0
                if res.blowup:
                    blowups[si, li] += 1
                if sup:
                    if st["reference"][0] == "exact":
                        tgrid = grid.T / N * np.arange(N + 1)
                        ref_states = np.array([problem.exact(t, batch) for t in tgrid])
                    else:
                        ref_states = ref_traj[:: grid.finest // N]
                    diff = res.states - ref_states
                    err2[si, li, k] = float(np.max(np.sum(diff * diff, axis=1)))
                else:
                    diff = res.states[-1] - ref_final
                    err2[si, li, k] = float(diff @ diff)
    return {
        "samples": np.asarray(samples),
        "err2": err2,
        "excluded": excluded,
        "blowups": blowups,
        "wall": wall,
        "noise_seconds": noise_seconds,
        "ref_seconds": ref_seconds,
    }


def _chunk_moment(samples):
    st = _STATE
    problem, grid = st["problem"], st["grid"]
    N = grid.finest
    n = len(samples)
    trajs = np.zeros((n, N + 1, problem.d))
    blown = np.zeros(n, dtype=bool)
    for k, sample in enumerate(samples):
        batch = generate(st["seed"], sample, problem.m, grid, st["K"], st["levy"])
        res = st["runner"].run(
            batch.increments(N),
            batch.iterated_integrals(N) if st["specs"][0].needs_iterated else None,
            problem.u0,
        )
        trajs[k] = res.states
        blown[k] = res.blowup
    return {"samples": np.asarray(samples), "trajs": trajs, "blown": blown}


def _run_chunks(payload, chunk_fn, M, workers):
    if workers is None or workers < 1:
        workers = os.cpu_count() or 1
    nchunks = max(1, min(M, workers * 4))
    bounds = np.linspace(0, M, nchunks + 1).astype(int)
    chunks = [list(range(bounds[i], bounds[i + 1])) for i in range(nchunks) if bounds[i] < bounds[i + 1]]
    if workers == 1:
        # inline path: no pickling, so ad-hoc problems with closures work
        global _STATE
        _STATE = _build_state(payload)
        return [chunk_fn(c) for c in chunks]
    payload_bytes = pickle.dumps(payload)
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(payload_bytes,)) as pool:
        return list(pool.map(chunk_fn, chunks))


def _run_experiment(config, timing):
    config = resolve_config(config)
    problem = builtin(config.problem, config.params)
    specs = config.schemes
    ladder = tuple(sorted(config.ladder))
    if config.reference[0] == "scheme":
        finest = config.reference[2]
        from .schemes import MILSTEIN_KINDS

        ref_needs_iter = config.reference[1] in MILSTEIN_KINDS
    else:
        if problem.exact is None:
            raise ValueError(f"problem {config.problem!r} has no exact solution hook")
        finest = max(ladder) * max(1, config.ref_refine)
        ref_needs_iter = False
    grid = GridSpec(T=config.T, levels=ladder + (finest,))
    needs_iter = ref_needs_iter or any(s.needs_iterated for s in specs)
    levy = needs_iter and not (problem.commutative_noise and config.commutative_identity)
    payload = {
        "mode": "strong",
        "problem": problem,
        "specs": specs,
        "grid": grid,
        "ladder": ladder,
        "reference": config.reference,
        "seed": config.seed,
        "levy_terms": config.levy_terms,
        "levy": levy,
        "guard": config.guard,
        "timing": timing,
        "error_metric": config.error_metric,
    }
    M = config.samples
    t_start = time.perf_counter()
    results = _run_chunks(payload, _chunk_strong, M, config.workers)
    total_seconds = time.perf_counter() - t_start

    S, L = len(specs), len(ladder)
    err2 = np.full((S, L, M), np.nan)
    excluded = np.zeros(M, dtype=bool)
    blowups = np.zeros((S, L), dtype=np.int64)
    wall = np.zeros((S, L))
    noise_seconds = 0.0
    ref_seconds = 0.0
    for res in results:
        idx = res["samples"]
        err2[:, :, idx] = res["err2"]
        excluded[idx] = res["excluded"]
        blowups += res["blowups"]
        wall += res["wall"]
        noise_seconds += res["noise_seconds"]
        ref_seconds += res["ref_seconds"]
    n_excl = int(excluded.sum())
    excl_fraction = n_excl / M
    if excl_fraction > config.exclusion_limit:
        raise ExclusionError(
            f"reference blew up on {n_excl}/{M} paths "
            f"({excl_fraction:.1%} > limit {config.exclusion_limit:.1%})"
        )
    keep = ~excluded

    tables = {}
    for si, spec in enumerate(specs):
        rows = []
        for li, N in enumerate(ladder):  # ascending N = descending dt
            rms, se = jackknife_rms(err2[si, li, keep])
            rows.append(
                ErrorRow(
                    dt=grid.T / N,
                    rms=rms,
                    stderr=se,
                    wall_seconds=wall[si, li] if timing else 0.0,
                )
            )
        table = ErrorTable(problem=config.problem, scheme=spec.kind, rows=rows)
        try:
            table.slope, table.intercept, table.r2 = fit_order(rows)
        except ValueError:
            table.at_floor = True
        tables[spec.kind] = table

    meta = {
        "config": _config_echo(config),
        "config_sha256": _config_hash(config),
        "backend": backend_name(),
        "samples": M,
        "excluded": n_excl,
        "excluded_fraction": excl_fraction,
        "blowups": {spec.kind: blowups[si].tolist() for si, spec in enumerate(specs)},
        "timing": {
            "total_seconds": total_seconds,
            "noise_seconds": noise_seconds,
            "reference_seconds": ref_seconds,
            "integration_seconds": {
                spec.kind: wall[si].tolist() for si, spec in enumerate(specs)
            },
            "timed_region": "integration loops only; noise and reference reported separately",
        },
        "levy_areas_sampled": levy,
    }

    if config.ref_selftest and config.reference[0] == "scheme":
        meta["ref_selftest"] = _reference_selftest(config, problem, tables)

    return ExperimentResult(tables=tables, meta=meta)


def _reference_selftest(config, problem, tables, pilot_paths=20):
    """Compare the reference scheme at dt_ref and dt_ref/2 on a pilot set.

    The RMS difference at T should sit well below the smallest ladder error;
    warns (and records) otherwise.
    """
    _, ref_kind, N_ref = config.reference
    spec = scheme_spec(ref_kind, problem=problem)
    grid = GridSpec(T=config.T, levels=(N_ref, 2 * N_ref))
    levy = spec.needs_iterated and not (problem.commutative_noise and config.commutative_identity)
    r1 = path_runner(problem, spec, grid.T / N_ref, config.guard)
    r2 = path_runner(problem, spec, grid.T / (2 * N_ref), config.guard)
    diffs = []
    for sample in range(pilot_paths):
        batch = generate(config.seed, sample, problem.m, grid, config.levy_terms, levy)
        a = r1.run(
            batch.increments(N_ref),
            batch.iterated_integrals(N_ref) if spec.needs_iterated else None,
            problem.u0,
        )
        b = r2.run(
            batch.increments(2 * N_ref),
            batch.iterated_integrals(2 * N_ref) if spec.needs_iterated else None,
            problem.u0,
        )
        if a.blowup or b.blowup:
            continue
        diffs.append(float(np.sum((a.states[-1] - b.states[-1]) ** 2)))
    rms_diff = float(np.sqrt(np.mean(diffs))) if diffs else float("nan")
    min_rms = min(
        (row.rms for t in tables.values() for row in t.rows if row.rms > 0), default=float("nan")
    )
    threshold = min_rms / 10.0
    ok = bool(rms_diff < threshold) if np.isfinite(rms_diff) and np.isfinite(threshold) else False
    if not ok:
        log.warning(
            "reference self-test: dt_ref vs dt_ref/2 differ by %.3e, not below "
            "min ladder error / 10 = %.3e; the reference may be too coarse",
            rms_diff,
            threshold,
        )
    return {"rms_diff": rms_diff, "threshold": threshold, "ok": ok, "paths": pilot_paths}


def strong_error(config):
    """Strong-error tables (one per scheme) for the configured protocol.

    The wall_seconds column is fixed at zero so that output files are
    byte-identical across runs and worker counts; use :func:`efficiency` for
    timed tables.
    """
    return _run_experiment(config, timing=False)


def efficiency(config):
    """Same runs as :func:`strong_error` with the integration loops timed."""
    return _run_experiment(config, timing=True)


def moment_trajectory(problem, spec, dt, T, samples, seed, workers=1, guard=DEFAULT_GUARD, levy_terms=DEFAULT_LEVY_TERMS):
    """Sample mean of u(t) on [0, T] with blown-up paths excluded.

    Returns a :class:`MomentTrajectory`; the blowup fraction counts paths
    whose state norm crossed the overflow guard (those paths do not
    contribute to the mean at any time).
    """
    N = int(round(T / dt))
    if abs(N * dt - T) > 1e-9 * max(1.0, T):
        raise ValueError(f"dt={dt} does not divide T={T}")
    grid = GridSpec(T=T, levels=(N,))
    levy = spec.needs_iterated and not problem.commutative_noise
    payload = {
        "mode": "moment",
        "problem": problem,
        "specs": (spec,),
        "grid": grid,
        "seed": seed,
        "levy_terms": levy_terms,
        "levy": levy,
        "guard": guard,
        "timing": False,
    }
    results = _run_chunks(payload, _chunk_moment, samples, workers)
    trajs = np.zeros((samples, N + 1, problem.d))
    blown = np.zeros(samples, dtype=bool)
    for res in results:
        idx = res["samples"]
        trajs[idx] = res["trajs"]
        blown[idx] = res["blown"]
    n_blown = int(blown.sum())
    kept = trajs[~blown]
    if kept.shape[0] > 0:
        mean = kept.sum(axis=0) / kept.shape[0]
    else:
        mean = np.full((N + 1, problem.d), np.nan)
    return MomentTrajectory(
        times=(T / N) * np.arange(N + 1),
        mean=mean,
        norm=np.sqrt(np.sum(mean * mean, axis=1)),
        blowup_fraction=n_blown / samples,
        samples=samples,
    )


def _config_echo(config):
    d = {
        "problem": config.problem,
        "params": config.params,
        "schemes": [
            {"kind": s.kind} if s.p is None else {"kind": s.kind, "p": s.p} for s in config.schemes
        ],
        "ladder": list(config.ladder),
        "T": config.T,
        "samples": config.samples,
        "seed": config.seed,
        "reference": list(config.reference),
        "levy_terms": config.levy_terms,
        "commutative_identity": config.commutative_identity,
        "ref_refine": config.ref_refine,
        "exclusion_limit": config.exclusion_limit,
        "ref_selftest": config.ref_selftest,
        "workers": config.workers,
        "guard": config.guard,
        "error_metric": config.error_metric,
    }
    return d


def _config_hash(config):
    blob = json.dumps(_config_echo(config), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()
