"""Command-line interface: ``quoka verify|ablate|bench``.

Configs are JSON files; ``--set key.path=value`` overrides individual keys.
Exit codes: 0 pass, 1 property failure, 2 config error, 3 measurement
error.  Metrics output is deterministic given (config, seed); wall times
are reported but excluded from that guarantee.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, MeasurementError
from .experiments import (
    BENCH_COLUMNS,
    BENCH_SCHEMA,
    METRICS_COLUMNS,
    METRICS_SCHEMA,
    run_ablation,
    run_bench,
)
from .verify import run_verify_suite


def default_config() -> dict:
    return {
        "seed": 0,
        "tolerances": {
            "chunked_vs_dense": 1e-5,
            "full_budget": 1e-5,
            "preaggregation": 1e-6,
            "theorem": 1e-5,
        },
        "verify": {
            "instances": 50,
            "max_T": 64,
            "linearity_draws": 1000,
            "oracle_instances": 200,
            "theorem_trials": 20000,
            "theorem_dims": [2, 8, 64],
        },
        "ablate": {
            "T": 288,
            "B_CP": 32,
            "layout": {"n_q": 4, "n_kv": 2, "d": 32},
            "seeds": 20,
            "arms": ["cosine-max", "cosine-mean", "dot-max", "dot-mean"],
            "B_SA_grid": [32],
            "N_Q_grid": [8],
            "needles": 4,
            "alignment": 0.9,
            "noise_scale": 0.6,
        },
        "bench": {
            "T_list": [2048, 4096, 8192, 16384, 32768],
            "B_CP": 128,
            "B_SA": 1024,
            "N_Q": 16,
            "repeats": 3,
            "layout": {"n_q": 2, "n_kv": 1, "d": 32},
            "arms": ["quoka"],
        },
    }


def _parse_set(expr: str):
    if "=" not in expr:
        raise ConfigError(f"--set expects KEY=VALUE, got {expr!r}")
    key, raw = expr.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _apply_override(config: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = config
    for part in parts[:-1]:
        if not isinstance(node.get(part), dict):
            raise ConfigError(f"--set path {dotted!r}: {part!r} is not a config section")
        node = node[part]
    node[parts[-1]] = value


def load_config(path: str | None, overrides, seed: int | None) -> dict:
    config = default_config()
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config root must be a JSON object")
        unknown = set(user) - set(config)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        for key, value in user.items():
            if isinstance(config.get(key), dict) and isinstance(value, dict):
                config[key].update(value)
            else:
                config[key] = value
    for expr in overrides or ():
        key, value = _parse_set(expr)
        _apply_override(config, key, value)
    if seed is not None:
        config["seed"] = seed
    return config


def _resolve_threads(arg_threads: int | None) -> int | None:
    if arg_threads is not None:
        return arg_threads
    env = os.environ.get("QUOKA_THREADS")
    if env:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"QUOKA_THREADS must be an integer, got {env!r}") from exc
    return None


@contextlib.contextmanager
def _thread_limit(threads: int | None):
    if threads is None:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=threads):
        yield


def _effective_threads(requested: int | None) -> int:
    return requested if requested is not None else (os.cpu_count() or 1)


@dataclass
class RunReport:
    """Config echo, fixture hashes, deterministic metrics and environment.

    The ``metrics`` section is byte-identical across reruns with the same
    config and seed; ``timings`` sits outside it on purpose.
    """

    config: dict
    metrics: list
    fixture_hashes: dict = field(default_factory=dict)
    environment: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def metrics_json(self) -> str:
        return json.dumps(self.metrics, sort_keys=True)

    def to_json(self) -> str:
        return json.dumps(
            {
                "config": self.config,
                "fixture_hashes": self.fixture_hashes,
                "metrics": self.metrics,
                "environment": self.environment,
                "timings": self.timings,
            },
            sort_keys=True, indent=2)


def _csv_cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path, schema: str, columns, rows) -> None:
    lines = [f"# schema: {schema}", ",".join(columns)]
    for row in rows:
        lines.append(",".join(_csv_cell(row[c]) for c in columns))
    Path(path).write_text("\n".join(lines) + "\n")


def _emit_jsonl(rows, drop=()) -> None:
    for row in rows:
        slim = {k: v for k, v in row.items() if k not in drop}
        print(json.dumps(slim, sort_keys=True))


def _environment(threads: int | None) -> dict:
    return {"threads": _effective_threads(threads), "dtype": "float32"}


def cmd_verify(config: dict, out: str | None, jsonl: bool, threads: int | None) -> int:
    results = run_verify_suite(config)
    rows = [r.metrics_row() for r in results]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        line = f"{status} {r.name}: {r.detail}"
        if not r.passed and r.failing_seed is not None:
            line += f" (reproduce with seed={r.failing_seed})"
        print(line)
    if jsonl:
        _emit_jsonl(rows)
    if out:
        report = RunReport(config=config, metrics=rows, environment=_environment(threads))
        Path(out).write_text(report.to_json() + "\n")
    return 0 if all(r.passed for r in results) else 1


def cmd_ablate(config: dict, out: str, jsonl: bool, threads: int | None) -> int:
    rows = run_ablation(config)
    _write_csv(out, METRICS_SCHEMA, METRICS_COLUMNS, rows)
    if jsonl:
        _emit_jsonl(rows, drop=("time_ms",))
    metrics = [{k: v for k, v in row.items() if k != "time_ms"} for row in rows]
    timings = {"rows_ms": [row["time_ms"] for row in rows]}
    report = RunReport(config=config, metrics=metrics,
                       environment=_environment(threads), timings=timings)
    Path(out).with_suffix(".report.json").write_text(report.to_json() + "\n")
    print(f"wrote {len(rows)} rows to {out}")
    return 0


def cmd_bench(config: dict, out: str, jsonl: bool, threads: int | None) -> int:
    rows, slopes, speedup = run_bench(config)
    _write_csv(out, BENCH_SCHEMA, BENCH_COLUMNS, rows)
    if jsonl:
        _emit_jsonl(rows, drop=("median_s",))
    metrics = [{k: v for k, v in row.items() if k != "median_s"} for row in rows]
    timings = {"median_s": {f"{r['selector']}/{r['mode']}/{r['T']}": r["median_s"] for r in rows},
               "slopes": slopes}
    report = RunReport(config=config, metrics=metrics,
                       environment=_environment(threads), timings=timings)
    Path(out).with_suffix(".report.json").write_text(report.to_json() + "\n")
    for label, slope in slopes.items():
        print(f"slope {label}: {slope:.3f}")
    if speedup is not None:
        largest = max(config["bench"]["T_list"])
        print(f"full-prefill speedup of quoka over dense at T={largest}: {speedup:.2f}x")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="quoka",
                                     description="Verify, ablate and benchmark selective attention.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text, default_out in (
        ("verify", "run the cross-module invariant suite", None),
        ("ablate", "run the selector ablation grid, write a metrics CSV", "ablation.csv"),
        ("bench", "run the complexity probe, write a bench CSV", "bench.csv"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file (defaults are built in)")
        p.add_argument("--set", action="append", metavar="KEY=VAL", dest="overrides",
                       help="override a config key by dotted path, e.g. ablate.seeds=5")
        p.add_argument("--out", default=default_out, help="output path")
        p.add_argument("--threads", type=int, default=None,
                       help="thread cap (falls back to QUOKA_THREADS, then hardware)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--jsonl", action="store_true",
                       help="stream metrics rows as JSON lines on stdout")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config, args.overrides, args.seed)
        threads = _resolve_threads(args.threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    command = {"verify": cmd_verify, "ablate": cmd_ablate, "bench": cmd_bench}[args.command]
    try:
        with _thread_limit(threads):
            return command(config, args.out, args.jsonl, threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except MeasurementError as exc:
        print(f"measurement error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
