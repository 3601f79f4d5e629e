"""Command-line entry point: ``miniquic run`` and ``miniquic compare-rtt``."""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path
from typing import Optional, Sequence

from .scenarios import (
    OVERRIDE_TYPES,
    RESULT_COLUMNS,
    SCENARIO_NAMES,
    InvalidScenario,
    Scenario,
    rtt_comparison,
    run_scenario,
)
from .simnet import InvalidConfig, SimConfig

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2

# Config-file keys that map onto run flags rather than scenario overrides.
FLAG_KEYS = {"seed": int, "loss": float, "delay_us": int, "streams": int, "bytes": int}


class UsageError(Exception):
    pass


def read_config(path: Path) -> dict[str, str]:
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    try:
        text = path.read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def build_scenario(args: argparse.Namespace) -> Scenario:
    settings: dict[str, object] = read_config(Path(args.config)) if args.config else {}
    for key in FLAG_KEYS:
        value = getattr(args, key)
        if value is not None:
            settings[key] = value
    sim_fields = {}
    for key, attr in (("seed", "seed"), ("loss", "loss_rate"), ("delay_us", "delay")):
        if key in settings:
            try:
                sim_fields[attr] = FLAG_KEYS[key](settings.pop(key))
            except ValueError:
                raise InvalidScenario(key, f"not a number: {settings.get(key)!r}") from None
    counts = {}
    for key in ("streams", "bytes"):
        if key in settings:
            try:
                counts[key] = int(settings.pop(key))  # type: ignore[arg-type]
            except ValueError:
                raise InvalidScenario(key, "not an integer") from None
    try:
        sim = SimConfig(**sim_fields)
    except InvalidConfig as exc:
        raise InvalidScenario("sim", str(exc)) from None
    return Scenario(
        args.scenario,
        sim,
        streams=counts.get("streams"),
        bytes_per_stream=counts.get("bytes"),
        overrides=settings,
    )


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="miniquic", description="Run transport experiments on a simulated network.")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run one named scenario and print its metrics as CSV")
    run.add_argument("scenario", choices=SCENARIO_NAMES)
    run.add_argument("--seed", type=int)
    run.add_argument("--loss", type=float)
    run.add_argument("--delay-us", dest="delay_us", type=int)
    run.add_argument("--streams", type=int)
    run.add_argument("--bytes", type=int)
    run.add_argument("--config", help="file of key=value lines; flags take precedence")
    run.add_argument("--trace", help="write the full event trace as CSV")
    cmp_ = sub.add_parser("compare-rtt", help="round trips before first data, per protocol")
    cmp_.add_argument("--rtt-us", dest="rtt_us", type=int, default=50_000)
    cmp_.add_argument("--seed", type=int, default=0)
    return parser


def _cmd_run(args: argparse.Namespace) -> int:
    scenario = build_scenario(args)
    run = run_scenario(scenario)
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(RESULT_COLUMNS)
    writer.writerow(run.result.csv_values())
    if args.trace:
        run.trace.write(args.trace)
    for failure in run.failures:
        print(f"FAIL: {failure}", file=sys.stderr)
    return EXIT_OK if run.passed else EXIT_FAILED


def _cmd_compare(args: argparse.Namespace) -> int:
    try:
        rows = rtt_comparison(args.rtt_us, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(("protocol", "rtts_to_first_data"))
    for name, value in rows:
        writer.writerow((name, "" if value is None else str(value)))
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        if args.command == "run":
            return _cmd_run(args)
        return _cmd_compare(args)
    except (UsageError, InvalidScenario) as exc:
        print(f"miniquic: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


__all__ = ["main", "build_scenario", "read_config", "OVERRIDE_TYPES"]
