"""Command-line benchmark runner.

    afckf run --config bench.toml --case A,B --seed 7 --out results/

The config file is TOML.  Every key is optional; unknown keys are rejected.
Matrices are given either as nested lists or as a flat list holding the
diagonal.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import shutil
import sys
import tempfile
from dataclasses import replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import tomli_w

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .adaptive import Variant
from .simulator import RunConfig, RunReport, monte_carlo

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

POSITION_COLUMNS = ("epoch", "time_s", "variant", "rmse_m")
VELOCITY_COLUMNS = ("epoch", "time_s", "variant", "rmse_mps")
SUMMARY_COLUMNS = ("variant", "case", "avg_rmse_pos_m", "avg_rmse_vel_mps", "failed_epochs")
FACTOR_COLUMNS = ("epoch", "time_s", "a1", "a2", "trace_c_hat", "trace_p_zz", "floored_runs", "failed_runs")


class ConfigError(Exception):
    pass


class ParseError(ConfigError):
    pass


class ValidationError(ConfigError):
    pass


_MATRIX_KEYS = {"q0": 4, "r0": 2, "q_true": 4, "p0": 4}
_INT_KEYS = ("seed", "runs", "steps", "window", "inflation_first", "inflation_last")
_FLOAT_KEYS = ("ts", "a_max", "eps_r", "inflation_gamma")
KNOWN_KEYS = frozenset(
    {"case", "variants", "x0", "estimate_q", *_MATRIX_KEYS, *_INT_KEYS, *_FLOAT_KEYS}
)


def _matrix(name: str, value: Any, size: int) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{name}: not numeric ({exc})") from None
    if arr.ndim == 1:
        arr = np.diag(arr)
    if arr.shape != (size, size):
        raise ValidationError(f"{name}: expected a {size}x{size} matrix or {size} diagonal entries, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name}: entries must be finite")
    if not np.allclose(arr, arr.T):
        raise ValidationError(f"{name}: must be symmetric")
    w = np.linalg.eigvalsh(arr)
    if name == "r0" and w[0] <= 0.0:
        raise ValidationError("r0: must be positive definite")
    if w[0] < -1e-12 * max(1.0, abs(w[-1])):
        raise ValidationError(f"{name}: must be positive semi-definite")
    return arr


def _cases(value: Any) -> tuple[str, ...]:
    items = [value] if isinstance(value, str) else value
    if not isinstance(items, list) or not items:
        raise ValidationError("case: expected 'A', 'B' or a list of them")
    out = []
    for item in items:
        for part in str(item).replace("+", ",").split(","):
            part = part.strip().upper()
            if part not in ("A", "B"):
                raise ValidationError(f"case: unknown noise case {part!r}")
            if part not in out:
                out.append(part)
    return tuple(out)


def _variants(value: Any) -> tuple[Variant, ...]:
    items = value.split(",") if isinstance(value, str) else value
    if not isinstance(items, list) and not isinstance(items, tuple):
        raise ValidationError("variants: expected a list of variant names")
    try:
        out = tuple(dict.fromkeys(Variant.parse(v) for v in items))
    except ValueError as exc:
        raise ValidationError(f"variants: {exc}") from None
    if not out:
        raise ValidationError("variants: at least one variant is required")
    return out


def config_from_mapping(data: dict) -> RunConfig:
    unknown = sorted(set(data) - KNOWN_KEYS)
    if unknown:
        raise ParseError(f"unknown config key(s): {', '.join(repr(k) for k in unknown)}")
    kw: dict[str, Any] = {}
    if "case" in data:
        kw["cases"] = _cases(data["case"])
    if "variants" in data:
        kw["variants"] = _variants(data["variants"])
    for key in _INT_KEYS:
        if key in data:
            if isinstance(data[key], bool) or not isinstance(data[key], int):
                raise ValidationError(f"{key}: expected an integer, got {data[key]!r}")
            kw[key] = data[key]
    for key in _FLOAT_KEYS:
        if key in data:
            if isinstance(data[key], bool) or not isinstance(data[key], (int, float)):
                raise ValidationError(f"{key}: expected a number, got {data[key]!r}")
            kw[key] = float(data[key])
    for key, size in _MATRIX_KEYS.items():
        if key in data:
            kw[key] = _matrix(key, data[key], size)
    if "x0" in data:
        x0 = np.asarray(data["x0"], dtype=float)
        if x0.shape != (4,):
            raise ValidationError(f"x0: expected 4 entries, got shape {x0.shape}")
        kw["x0"] = x0
    if "estimate_q" in data:
        if not isinstance(data["estimate_q"], bool):
            raise ValidationError("estimate_q: expected true or false")
        kw["estimate_q"] = data["estimate_q"]
    _check_ranges(kw)
    return validate(RunConfig(**kw))


def _check_ranges(kw: dict) -> None:
    for key in ("runs", "steps", "window"):
        if key in kw and kw[key] < (2 if key == "window" else 1):
            raise ValidationError(f"{key}: must be {'>= 2' if key == 'window' else 'positive'}, got {kw[key]}")
    for key in ("ts", "eps_r", "inflation_gamma"):
        if key in kw and not kw[key] > 0.0:
            raise ValidationError(f"{key}: must be positive, got {kw[key]}")
    if "a_max" in kw and not kw["a_max"] >= 1.0:
        raise ValidationError(f"a_max: must be >= 1, got {kw['a_max']}")


def validate(config: RunConfig) -> RunConfig:
    sched = config.schedule()
    if not 1 <= sched.first <= sched.last <= config.steps:
        raise ValidationError(
            f"inflation window {sched.first}..{sched.last} must lie within epochs 1..{config.steps}")
    return config


def load_config(path) -> RunConfig:
    """Read a TOML run configuration; missing keys take their defaults."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"{path}: {exc.strerror}") from None
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from None
    return config_from_mapping(data)


def resolved_mapping(config: RunConfig) -> dict:
    """Fully explicit config, loadable by :func:`load_config`."""
    sched = config.schedule()
    q_true = config.q0 if config.q_true is None else config.q_true
    return {
        "case": list(config.cases),
        "variants": [v.value for v in config.variants],
        "seed": config.seed,
        "runs": config.runs,
        "steps": config.steps,
        "ts": config.ts,
        "window": config.window,
        "a_max": config.a_max,
        "eps_r": config.eps_r,
        "estimate_q": config.estimate_q,
        "inflation_gamma": sched.gamma,
        "inflation_first": sched.first,
        "inflation_last": sched.last,
        "x0": config.x0.tolist(),
        "q0": config.q0.tolist(),
        "r0": config.r0.tolist(),
        "q_true": q_true.tolist(),
        "p0": config.p0.tolist(),
    }


def _num(x) -> str:
    # shortest round-trip decimal
    return repr(float(x))


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def summary_csv(report: RunReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for variant, case, pos, vel, failed in report.summary_rows():
        w.writerow([variant, case, _num(pos), _num(vel), failed])
    return buf.getvalue()


def summary_table(report: RunReport) -> str:
    """Average RMSE laid out with one row per variant and (m, m/s) pairs per case."""
    cases = list(report.config.cases)
    header = f"{'':14s}" + "".join(f"{'Case ' + c:>24s}" for c in cases)
    sub = f"{'':14s}" + "".join(f"{'RMSE[m]':>12s}{'RMSE[m/s]':>12s}" for _ in cases)
    lines = [header, sub]
    for variant in report.config.variants:
        row = f"{variant.value:14s}"
        for c in cases:
            r = report.get(c, variant)
            row += f"{r.avg_position:12.4f}{r.avg_velocity:12.4f}"
        lines.append(row)
    return "\n".join(lines) + "\n"


def write_outputs(report: RunReport, out: Path) -> None:
    cfg = report.config
    (out / "summary.csv").write_text(summary_csv(report))
    (out / "config_resolved.toml").write_text(tomli_w.dumps(resolved_mapping(cfg)))
    epochs = np.arange(1, cfg.steps + 1)
    times = epochs * cfg.ts
    for case in cfg.cases:
        d = out / f"case_{case}"
        d.mkdir()
        pos_rows, vel_rows = [], []
        for variant in cfg.variants:
            r = report.get(case, variant)
            for k, t in zip(epochs, times):
                pos_rows.append([int(k), _num(t), variant.value, _num(r.rmse_position[k - 1])])
                vel_rows.append([int(k), _num(t), variant.value, _num(r.rmse_velocity[k - 1])])
            run = r.run
            frows = [
                [int(k), _num(t), _num(run.a1[:, k - 1].mean()), _num(run.a2[:, k - 1].mean()),
                 _num(run.trace_c_hat[:, k - 1].mean()), _num(run.trace_p_zz[:, k - 1].mean()),
                 int(run.floored[:, k - 1].sum()), int(run.failed[:, k - 1].sum())]
                for k, t in zip(epochs, times)
            ]
            _write_csv(d / f"factors_{variant.value}.csv", FACTOR_COLUMNS, frows)
        _write_csv(d / "rmse_position.csv", POSITION_COLUMNS, pos_rows)
        _write_csv(d / "rmse_velocity.csv", VELOCITY_COLUMNS, vel_rows)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="afckf", description="Cubature Kalman filter benchmark runner")
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run the Monte Carlo tracking benchmark")
    run.add_argument("--config", type=Path, help="TOML run configuration")
    run.add_argument("--case", help="noise case(s): A, B or A,B")
    run.add_argument("--variants", help="comma-separated variant list, e.g. CKF,AFCKF_R")
    run.add_argument("--runs", type=int)
    run.add_argument("--steps", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--out", type=Path, default=Path("afckf_out"))
    run.add_argument("--format", choices=("csv", "table"), default="table")
    run.add_argument("-v", "--verbose", action="store_true")
    return p


def _resolve(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    overrides: dict[str, Any] = {}
    if args.case:
        overrides["cases"] = _cases(args.case)
    if args.variants:
        overrides["variants"] = _variants(args.variants)
    for key in ("runs", "steps", "seed"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    if overrides:
        _check_ranges(overrides)
        config = validate(replace(config, **overrides))
    return config


def run_command(args) -> int:
    try:
        config = _resolve(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out: Path = args.out
    staging = None
    try:
        report = monte_carlo(config)
        out.parent.mkdir(parents=True, exist_ok=True)
        # stage next to the target so a failed run never leaves partial files behind
        staging = Path(tempfile.mkdtemp(prefix=".afckf-", dir=out.parent))
        write_outputs(report, staging)
        if out.exists():
            shutil.rmtree(out)
        staging.rename(out)
        staging = None
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        log.debug("run failed", exc_info=True)
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        if staging is not None:
            shutil.rmtree(staging, ignore_errors=True)

    sys.stdout.write(summary_csv(report) if args.format == "csv" else summary_table(report))
    aborted = sum(r.aborted_runs for r in report.results.values())
    if aborted:
        print(f"warning: {aborted} run(s) aborted after >10% failed epochs", file=sys.stderr)
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "run":
        return run_command(args)
    parser.error(f"unknown command {args.command}")
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
