"""Command-line front end: convergence / efficiency / stiff experiments.

Subcommands
    convergence   strong-error tables + fitted orders (deterministic CSV)
    efficiency    the same runs with the integration loops wall-clocked
    stiff         long-time moment trajectory of E[u(t)]
    list          available schemes and problems

Configuration is a JSON object; every field has a default, so
``{"problem": "ginzburg_landau"}`` runs the desk-scale Ginzburg-Landau
convergence protocol. Unknown keys are rejected by name. The seed is taken
from --seed, then the config, then the GBMEI_SEED environment variable.

Exit codes: 0 success, 1 configuration error, 2 numerical failure (reference
exclusions above the configured limit). Outputs are written atomically
(temp file + rename) as CSV plus a JSON metadata sidecar.
"""

import argparse
import json
import os
import sys
import tempfile

import numpy as np

from .harness import (
    ExclusionError,
    ExperimentConfig,
    efficiency,
    moment_trajectory,
    resolve_config,
    strong_error,
)
from .model import BUILTIN_PROBLEMS, builtin
from .schemes import HOMOTOPY_KINDS, KINDS, scheme_spec

DEFAULT_SEED = 12345


class ConfigError(ValueError):
    pass


_COMMON_KEYS = {
    "problem",
    "params",
    "schemes",
    "seed",
    "samples",
    "workers",
    "levy_terms",
    "out",
}
_CONV_KEYS = _COMMON_KEYS | {
    "T",
    "levels",
    "reference",
    "commutative_identity",
    "ref_refine",
    "exclusion_limit",
    "ref_selftest",
    "guard",
    "error_metric",
}
_STIFF_KEYS = _COMMON_KEYS | {"T", "dt", "guard"}


def _fmt(x):
    """Full-precision decimal formatting (shortest 17-significant-digit form)."""
    return format(float(x), ".17g")


def _load_config(path):
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"malformed JSON in {path} at byte offset {e.pos}: {e.msg}") from e
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    return cfg


def _check_keys(cfg, allowed, what):
    for key in cfg:
        if key not in allowed:
            raise ConfigError(f"unknown config key {key!r} for {what}")


def _resolve_seed(args, cfg):
    if args.seed is not None:
        return args.seed
    if "seed" in cfg:
        return int(cfg["seed"])
    env = os.environ.get("GBMEI_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as e:
            raise ConfigError(f"GBMEI_SEED={env!r} is not an integer") from e
    return DEFAULT_SEED


def _scheme_entry(entry, problem):
    if isinstance(entry, str):
        entry = {"kind": entry}
    if isinstance(entry, dict):
        extra = set(entry) - {"kind", "p"}
        if extra:
            raise ConfigError(f"unknown scheme keys {sorted(extra)}")
        kind = entry.get("kind")
        p = entry.get("p")
        if kind in HOMOTOPY_KINDS and p is None:
            from .model import default_homotopy_p

            if default_homotopy_p(problem) is None:
                raise ConfigError(
                    f"{kind} needs an explicit homotopy parameter p for this problem"
                )
        return scheme_spec(kind, p=p, problem=problem)
    raise ConfigError(f"bad scheme entry {entry!r}")


def _reference_entry(ref):
    if not isinstance(ref, dict) or "type" not in ref:
        raise ConfigError('reference must be {"type": "exact"} or {"type": "scheme", ...}')
    if ref["type"] == "exact":
        extra = set(ref) - {"type"}
        if extra:
            raise ConfigError(f"unknown reference keys {sorted(extra)}")
        return ("exact",)
    if ref["type"] == "scheme":
        extra = set(ref) - {"type", "scheme", "level"}
        if extra:
            raise ConfigError(f"unknown reference keys {sorted(extra)}")
        try:
            return ("scheme", ref["scheme"], int(ref["level"]))
        except KeyError as e:
            raise ConfigError(f"scheme reference needs key {e.args[0]!r}") from e
    raise ConfigError(f"unknown reference type {ref['type']!r}")


def _experiment_config(args, cfg):
    _check_keys(cfg, _CONV_KEYS, "convergence/efficiency")
    name = cfg.get("problem", "ginzburg_landau")
    if name not in BUILTIN_PROBLEMS:
        raise ConfigError(f"unknown problem {name!r}; available: {sorted(BUILTIN_PROBLEMS)}")
    params = cfg.get("params", {})
    try:
        problem = builtin(name, params)
    except TypeError as e:
        raise ConfigError(f"bad params for {name}: {e}") from e
    try:
        schemes = tuple(_scheme_entry(s, problem) for s in cfg.get("schemes", ()))
        reference = _reference_entry(cfg["reference"]) if "reference" in cfg else ()
        config = ExperimentConfig(
            problem=name,
            params=params,
            schemes=schemes,
            ladder=tuple(int(n) for n in cfg.get("levels", ())),
            T=float(cfg.get("T", 0.0)),
            samples=int(args.samples if args.samples is not None else cfg.get("samples", 0)),
            seed=_resolve_seed(args, cfg),
            reference=reference,
            levy_terms=int(
                args.levy_terms if args.levy_terms is not None else cfg.get("levy_terms", 30)
            ),
            commutative_identity=bool(cfg.get("commutative_identity", True)),
            ref_refine=int(cfg.get("ref_refine", 4)),
            exclusion_limit=float(cfg.get("exclusion_limit", 0.01)),
            ref_selftest=bool(cfg.get("ref_selftest", True)),
            workers=args.workers if args.workers is not None else int(cfg.get("workers", 0) or 0),
            error_metric=str(cfg.get("error_metric", "final")),
        )
        return resolve_config(config)
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from e


def _atomic_write(path, text):
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".gbmei-", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def emit_csv(tables, path, problem):
    """Write error tables as CSV: value rows then one ``#fit`` footer per scheme."""
    lines = ["problem,scheme,dt,rms_error,stderr,wall_seconds"]
    for table in tables.values():
        for row in table.rows:
            lines.append(
                f"{problem},{table.scheme},{_fmt(row.dt)},{_fmt(row.rms)},"
                f"{_fmt(row.stderr)},{_fmt(row.wall_seconds)}"
            )
    for table in tables.values():
        lines.append(
            f"#fit,{table.scheme},{_fmt(table.slope)},{_fmt(table.intercept)},{_fmt(table.r2)}"
        )
    _atomic_write(path, "\n".join(lines) + "\n")


def parse_csv(path):
    """Read back an emit_csv file: (rows, fits) with full-precision floats."""
    rows, fits = [], []
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().strip()
        if header != "problem,scheme,dt,rms_error,stderr,wall_seconds":
            raise ValueError(f"unexpected header {header!r}")
        for line in f:
            parts = line.strip().split(",")
            if parts[0] == "#fit":
                fits.append((parts[1], float(parts[2]), float(parts[3]), float(parts[4])))
            else:
                rows.append(
                    (parts[0], parts[1]) + tuple(float(v) for v in parts[2:])
                )
    return rows, fits


def _emit_stiff_csv(results, path, problem_name, d):
    comp_cols = ",".join(f"mean_{j}" for j in range(d))
    lines = [f"problem,scheme,t,mean_norm,{comp_cols}"]
    for kind, mt in results.items():
        for n, t in enumerate(mt.times):
            comps = ",".join(_fmt(v) for v in mt.mean[n])
            lines.append(f"{problem_name},{kind},{_fmt(t)},{_fmt(mt.norm[n])},{comps}")
    _atomic_write(path, "\n".join(lines) + "\n")


def _write_sidecar(path, meta):
    _atomic_write(path + ".meta.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _cmd_list(args):
    print("schemes:")
    for kind in KINDS:
        print(f"  {kind}")
    print("problems:")
    for name in BUILTIN_PROBLEMS:
        print(f"  {name}")
    return 0


def _cmd_convergence(args, timed=False):
    cfg = _load_config(args.config)
    config = _experiment_config(args, cfg)
    out = args.out or cfg.get("out") or f"{config.problem}_{'efficiency' if timed else 'convergence'}.csv"
    result = efficiency(config) if timed else strong_error(config)
    emit_csv(result.tables, out, config.problem)
    _write_sidecar(out, result.meta)
    for kind, table in result.tables.items():
        slope = "at-floor" if table.at_floor else f"{table.slope:.3f}"
        print(f"{config.problem} {kind}: slope {slope} over {len(table.rows)} dt levels -> {out}")
    return 0


def _cmd_stiff(args):
    cfg = _load_config(args.config)
    _check_keys(cfg, _STIFF_KEYS, "stiff")
    name = cfg.get("problem", "stiff2d")
    if name not in BUILTIN_PROBLEMS:
        raise ConfigError(f"unknown problem {name!r}; available: {sorted(BUILTIN_PROBLEMS)}")
    try:
        problem = builtin(name, cfg.get("params", {}))
    except TypeError as e:
        raise ConfigError(f"bad params for {name}: {e}") from e
    T = float(cfg.get("T", 50.0))
    dt = float(cfg.get("dt", 0.05))
    samples = int(args.samples if args.samples is not None else cfg.get("samples", 1000))
    seed = _resolve_seed(args, cfg)
    workers = args.workers if args.workers is not None else int(cfg.get("workers", 0) or 0)
    scheme_names = cfg.get("schemes", ["EI0", "SETD0"])
    try:
        specs = [_scheme_entry(s, problem) for s in scheme_names]
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from e
    out = args.out or cfg.get("out") or f"{name}_stiff.csv"
    results = {}
    blow = {}
    for spec in specs:
        mt = moment_trajectory(problem, spec, dt, T, samples, seed, workers=workers)
        results[spec.kind] = mt
        blow[spec.kind] = mt.blowup_fraction
        with np.errstate(invalid="ignore"):
            peak = float(np.nanmax(mt.norm)) if np.any(np.isfinite(mt.norm)) else float("nan")
        print(
            f"{name} {spec.kind}: max_t |E[u(t)]| = {peak:.6g}, "
            f"blowup fraction {mt.blowup_fraction:.3f}"
        )
    _emit_stiff_csv(results, out, name, problem.d)
    _write_sidecar(
        out,
        {
            "problem": name,
            "T": T,
            "dt": dt,
            "samples": samples,
            "seed": seed,
            "schemes": [s.kind for s in specs],
            "blowup_fractions": blow,
        },
    )
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="gbmei", description="SDE exponential-integrator benchmarks"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd, doc in (
        ("convergence", "strong-error convergence tables"),
        ("efficiency", "error-vs-walltime tables"),
        ("stiff", "long-time moment trajectories"),
    ):
        p = sub.add_parser(cmd, help=doc)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="master seed (overrides config)")
        p.add_argument("--samples", type=int, help="Monte-Carlo sample count")
        p.add_argument("--out", help="output CSV path")
        p.add_argument("--workers", type=int, help="worker processes (default: all cores)")
        p.add_argument("--levy-terms", dest="levy_terms", type=int, help="Levy-area series terms")
    sub.add_parser("list", help="print available schemes and problems")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "list":
            return _cmd_list(args)
        if args.command == "convergence":
            return _cmd_convergence(args, timed=False)
        if args.command == "efficiency":
            return _cmd_convergence(args, timed=True)
        if args.command == "stiff":
            return _cmd_stiff(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except ExclusionError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
