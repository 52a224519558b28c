"""Command-line entry point.

Subcommands: run, suite, calibrate, report, render. Every command writes into
an output directory and finishes with ``manifest.json`` mapping each written
file to its sha256. Exit status is 0 on success, 1 on usage errors and 2 on
runtime errors.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import os
import sys
from pathlib import Path
from typing import Any, Sequence

from .calibration import fit_calibrator, save_calibrator
from .engine import (
    MODES,
    LogError,
    SimConfig,
    SuiteRow,
    aggregate,
    read_log,
    replay,
    run_episode,
    run_suite,
    sig6,
    write_log,
)
from .bev import render_bev
from .llm import API_KEY_ENV
from .planning import PlannerError
from .protocol import ChannelParams, SpareConfig
from .scenario import Scenario, ScenarioError, SensorConfig, bundled_scenarios, load_scenario, synthetic_calibration_set

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
CSV_COLUMNS = ("mode", "scenario", "ds", "rc", "ip", "tb_kb", "ig_decision", "ig_perception", "min_margin_m")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ------------------------------------------------------------------ config

_SIM_FIELDS = {f.name for f in dataclasses.fields(SimConfig)} - {"spare", "channel", "kinematics", "penalties"}


def build_config(file_doc: dict | None, overrides: dict) -> SimConfig:
    """Layer defaults < config file < command-line flags into a SimConfig."""
    merged: dict[str, Any] = {}
    for layer in (file_doc or {}, {k: v for k, v in overrides.items() if v is not None}):
        for key, value in layer.items():
            if key in ("spare", "channel"):
                merged.setdefault(key, {}).update(value)
            else:
                merged[key] = value
    spare = dict(merged.pop("spare", {}))
    if "d" in merged:
        spare["distance_threshold_m"] = merged.pop("d")
    channel = merged.pop("channel", {})
    unknown = set(merged) - _SIM_FIELDS
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    if "mode" in merged and merged["mode"] not in MODES:
        raise UsageError(f"invalid mode {merged['mode']!r}; valid modes: {', '.join(MODES)}")
    try:
        return SimConfig(spare=SpareConfig(**spare), channel=ChannelParams(**channel), **merged)
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid configuration: {e}") from None


def _load_config_file(path: str | None) -> dict | None:
    if path is None:
        return None
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise UsageError(f"{path}: not valid JSON ({e.msg})") from None
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    return doc


def _overrides(args) -> dict:
    return {
        "mode": getattr(args, "mode", None),
        "seed": getattr(args, "seed", None),
        "planner": args.planner,
        "d": args.d,
        "calibrator_path": args.calibrator,
    }


def _check_credentials(cfg: SimConfig) -> None:
    if cfg.planner == "external" and not os.environ.get(API_KEY_ENV):
        raise RuntimeError(f"external planner selected but {API_KEY_ENV} is not set")


# ----------------------------------------------------------------- outputs

def _fmt(v) -> str:
    return "" if v is None else f"{v:.6g}"


def _sig6_tree(obj):
    if isinstance(obj, float):
        return sig6(obj)
    if isinstance(obj, dict):
        return {k: _sig6_tree(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sig6_tree(v) for v in obj]
    return obj


def _dump_json(obj) -> str:
    return json.dumps(_sig6_tree(obj), sort_keys=True, indent=2) + "\n"


def write_manifest(out_dir: Path, files: Sequence[Path]) -> Path:
    entries = {}
    for f in sorted(set(files)):
        entries[f.relative_to(out_dir).as_posix()] = hashlib.sha256(f.read_bytes()).hexdigest()
    path = out_dir / "manifest.json"
    path.write_text(json.dumps({"files": entries}, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def suite_csv(rows: Sequence[SuiteRow]) -> str:
    """Per (mode, scenario) means over seeds, then one 'all' row per mode."""
    groups: dict[tuple[str, str], list[SuiteRow]] = {}
    for r in rows:
        groups.setdefault((r.mode, r.scenario), []).append(r)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    mode_order = [m for m in MODES if any(r.mode == m for r in rows)]
    for mode in mode_order:
        for (m, scen), group in sorted(groups.items()):
            if m != mode:
                continue
            w.writerow(_csv_row(mode, scen, aggregate(group)[mode]))
    for mode, agg in sorted(aggregate(rows).items(), key=lambda kv: MODES.index(kv[0])):
        w.writerow(_csv_row(mode, "all", agg))
    return buf.getvalue()


def _csv_row(mode: str, scenario: str, agg: dict) -> list[str]:
    return [mode, scenario, _fmt(agg["ds"]), _fmt(agg["rc"]), _fmt(agg["ip"]), _fmt(agg["tb_kb"]),
            _fmt(agg["ig_decision"]), _fmt(agg["ig_perception"]), _fmt(agg["min_distance_margin_m"])]


def _log_name(scenario: str, mode: str, seed: int) -> str:
    return f"{scenario}__{mode}__s{seed}.jsonl"


def _messages_jsonl(records: Sequence[dict]) -> str:
    lines = []
    for rec in records[1:-1]:
        for d in rec["decisions"]:
            lines.append(json.dumps({"tick": rec["tick"], **d}, sort_keys=True, separators=(",", ":")))
    return "".join(line + "\n" for line in lines)


def _resolve_scenarios(specs: Sequence[str]) -> list[Scenario]:
    paths: list[Path] = []
    for spec in specs:
        p = Path(spec)
        if spec.rstrip("/") == "bundled":
            paths.extend(bundled_scenarios())
        elif p.is_dir():
            paths.extend(sorted(p.glob("*.json")))
        else:
            paths.append(p)
    if not paths:
        raise UsageError("no scenarios given")
    return [load_scenario(p) for p in paths]


# ---------------------------------------------------------------- commands

def cmd_run(args) -> int:
    cfg = build_config(_load_config_file(args.config), _overrides(args))
    _check_credentials(cfg)
    scenario = load_scenario(args.scenario)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = run_episode(scenario, cfg)
    files = [write_log(result, out / _log_name(scenario.name, cfg.mode, cfg.seed))]
    report = {"scenario": scenario.name, "mode": cfg.mode, "seed": cfg.seed, "metrics": result.metrics.as_dict()}
    rp = out / "report.json"
    rp.write_text(_dump_json(report), encoding="utf-8")
    cp = out / "report.csv"
    cp.write_text(suite_csv([SuiteRow(cfg.mode, scenario.name, cfg.seed, result.metrics)]), encoding="utf-8")
    files += [rp, cp]
    if args.messages:
        mp = out / "messages.jsonl"
        mp.write_text(_messages_jsonl(result.records), encoding="utf-8")
        files.append(mp)
    write_manifest(out, files)
    m = result.metrics
    print(f"{scenario.name} {cfg.mode} seed={cfg.seed} ds={_fmt(m.ds)} rc={_fmt(m.rc)} ip={_fmt(m.ip)} "
          f"tb_kb={_fmt(m.tb_kb)} margin={_fmt(m.min_distance_margin_m)}")
    return EXIT_OK


def _parse_list(text: str, what: str) -> list[str]:
    items = [t.strip() for t in text.split(",") if t.strip()]
    if not items:
        raise UsageError(f"empty {what} list")
    return items


def cmd_suite(args) -> int:
    file_doc = _load_config_file(args.config)
    base = build_config(file_doc, _overrides(args))
    _check_credentials(base)
    modes = _parse_list(args.modes, "mode") if args.modes else list(MODES)
    bad = [m for m in modes if m not in MODES]
    if bad:
        raise UsageError(f"invalid mode {bad[0]!r}; valid modes: {', '.join(MODES)}")
    try:
        seeds = [int(s) for s in _parse_list(args.seeds, "seed")]
    except ValueError:
        raise UsageError(f"seeds must be integers: {args.seeds!r}") from None
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    scenarios = _resolve_scenarios(args.scenarios)
    out = Path(args.out)
    logs = out / "logs"
    logs.mkdir(parents=True, exist_ok=True)
    files: list[Path] = []

    def keep(row, res):
        files.append(write_log(res, logs / _log_name(row.scenario, row.mode, row.seed)))

    rows = run_suite(scenarios, modes, seeds, base, jobs=args.jobs, on_result=keep)
    cp = out / "suite.csv"
    cp.write_text(suite_csv(rows), encoding="utf-8")
    files.append(cp)
    write_manifest(out, files)
    sys.stdout.write(cp.read_text(encoding="utf-8"))
    return EXIT_OK


def cmd_report(args) -> int:
    src = Path(args.logs)
    paths = sorted(src.glob("*.jsonl")) if src.is_dir() else [src]
    if not paths:
        raise LogError(f"no episode logs under {src}")
    scenarios = {}
    if args.scenarios:
        scenarios = {s.name: s for s in _resolve_scenarios(args.scenarios)}
    rows = []
    for p in paths:
        records = read_log(p)
        if not records:
            raise LogError(f"{p}: empty log")
        header = records[0]
        metrics = replay(records, scenarios.get(header.get("scenario")))
        rows.append(SuiteRow(header["config"]["mode"], header["scenario"], header["config"]["seed"], metrics))
    rows.sort(key=lambda r: (r.scenario, MODES.index(r.mode), r.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cp = out / "suite.csv"
    cp.write_text(suite_csv(rows), encoding="utf-8")
    write_manifest(out, [cp])
    sys.stdout.write(cp.read_text(encoding="utf-8"))
    return EXIT_OK


def cmd_calibrate(args) -> int:
    if args.n <= 0:
        raise UsageError("--n must be a positive number of samples")
    sensor = SensorConfig(noise_temp=args.noise_temp, temp_per_m=args.temp_per_m, range_m=args.range_m)
    if args.scenario:
        sensor = load_scenario(args.scenario).sensor
    model = fit_calibrator(synthetic_calibration_set(args.n, sensor, args.num_classes, args.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / args.file
    save_calibrator(model, path)
    write_manifest(out, [path])
    print(f"{path} n={model.n} sha256={hashlib.sha256(path.read_bytes()).hexdigest()}")
    return EXIT_OK


def cmd_render(args) -> int:
    cfg = build_config(_load_config_file(args.config), _overrides(args))
    _check_credentials(cfg)
    scenario = load_scenario(args.scenario)
    result = run_episode(scenario, cfg)
    snaps = [s for s in result.snapshots if args.ego is None or s[1] == args.ego]
    if args.tick is not None:
        snaps = [s for s in snaps if s[0] == args.tick]
    if not snaps:
        raise RuntimeError("no planner query matches the requested tick/ego; nothing to render")
    tick, ego, fused, states = snaps[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = render_bev(fused, states, out / f"bev_{scenario.name}_{cfg.mode}_ego{ego}_t{tick}.svg")
    write_manifest(out, [path])
    print(path)
    return EXIT_OK


# ------------------------------------------------------------------ parser

def _add_sim_flags(p: argparse.ArgumentParser, with_mode: bool = True) -> None:
    if with_mode:
        p.add_argument("--mode", choices=MODES, help="communication mode")
        p.add_argument("--seed", type=int, help="episode seed")
    p.add_argument("--planner", choices=("mock", "external"), help="planner backend")
    p.add_argument("--d", type=float, help="partner-selection distance threshold in metres")
    p.add_argument("--calibrator", help="calibrator file to use instead of the built-in fit")
    p.add_argument("--config", help="JSON config file (flags override it)")
    p.add_argument("--out", default="out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="uncap", description="Cooperative-driving communication simulator.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", help="run one episode")
    p.add_argument("--scenario", required=True, help="scenario file or bundled scenario name")
    p.add_argument("--messages", action="store_true", help="also write messages.jsonl")
    _add_sim_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("suite", help="run scenarios x modes x seeds")
    p.add_argument("--scenarios", nargs="+", default=["bundled"],
                   help="scenario files, directories, or 'bundled'")
    p.add_argument("--modes", help="comma-separated modes (default: all)")
    p.add_argument("--seeds", default="1,2,3", help="comma-separated seeds")
    p.add_argument("--jobs", type=int, default=1, help="worker threads")
    _add_sim_flags(p, with_mode=False)
    p.set_defaults(func=cmd_suite)

    p = sub.add_parser("calibrate", help="fit and save a calibrator from synthetic detections")
    p.add_argument("--n", type=int, default=1000, help="calibration set size")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--noise-temp", type=float, default=0.3)
    p.add_argument("--temp-per-m", type=float, default=0.0)
    p.add_argument("--range-m", type=float, default=70.0)
    p.add_argument("--num-classes", type=int, default=4)
    p.add_argument("--scenario", help="take the sensor model from this scenario instead")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--file", default="calibrator.json", help="calibrator file name")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("report", help="recompute the suite table from episode logs")
    p.add_argument("--logs", required=True, help="log file or directory of logs")
    p.add_argument("--scenarios", nargs="*", help="check logs against these scenarios")
    p.add_argument("--out", default="out", help="output directory")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("render", help="render the fused bird's-eye view at a planner query")
    p.add_argument("--scenario", required=True)
    p.add_argument("--tick", type=int, help="query tick (default: first query)")
    p.add_argument("--ego", type=int, help="ego id (default: first ego)")
    _add_sim_flags(p)
    p.set_defaults(func=cmd_render)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:
        # --help and friends
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    except (OSError, ScenarioError, LogError, PlannerError, RuntimeError, ValueError) as e:
        print(f"uncap: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
