"""Command-line front end: single runs, seeded batches, batch reports.

Every invocation is reproducible from what it writes: output headers carry
the package version, scenario name, seed, and the invocation line, and the
simulation itself has no hidden entropy. Nothing is written outside the
chosen output directory.

Exit codes: 0 success, 1 run aborted or deadlocked, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import shlex
import statistics
import sys
from pathlib import Path

from swarmherd import __version__
from swarmherd.engine import RunResult, World, run
from swarmherd.metrics import MetricsReport, build_report, normalize_distortions
from swarmherd.scenarios import Scenario, ScenarioError, build_world, load_scenario

DURATION_STATES = ("task_allocation", "shaping_setup", "shaping", "movement")

SUMMARY_COLUMNS = [
    "scenario",
    "n_workers",
    "n_guides",
    "seed",
    "status",
    "ticks",
    "duration_task_allocation",
    "duration_shaping_setup",
    "duration_shaping",
    "duration_movement",
    "distortion_raw",
    "distortion_norm",
    "min_pairwise_distance",
    "max_rigid_edge_error",
    "collision_events",
]


def _stamp(invocation: str, scenario: str, seed: int) -> list[str]:
    return [
        f"# swarmherd {__version__}",
        f"# scenario={scenario} seed={seed}",
        f"# invocation={invocation}",
    ]


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float) and math.isinf(value):
        return "inf"
    return str(value)


def _execute(
    scenario: Scenario,
    seed: int,
    max_ticks: int,
    heartbeat: bool,
) -> tuple[RunResult, World, MetricsReport]:
    world = build_world(scenario, seed=seed)
    if max_ticks == 0:
        result = RunResult(status="completed", ticks=0)
        world.log.final_tick = 0
        world.log.final_positions = world.pos.copy()
    else:
        progress = None
        if heartbeat:
            def progress(tick: int, _world: World) -> None:
                print(f"tick {tick}/{max_ticks}", flush=True)
        result = run(world, max_ticks, progress=progress, progress_every=1000)
    report = build_report(world.log, world.n_workers, world.params.radius)
    return result, world, report


def _write_run_files(
    out: Path,
    invocation: str,
    scenario: Scenario,
    seed: int,
    max_ticks: int,
    result: RunResult,
    world: World,
    report: MetricsReport,
) -> None:
    import yaml

    out.mkdir(parents=True, exist_ok=True)
    stamp = _stamp(invocation, scenario.name, seed)

    config_doc = {
        "package_version": __version__,
        "invocation": invocation,
        "scenario_name": scenario.name,
        "seed": seed,
        "max_ticks": max_ticks,
        "status": result.status,
        "ticks_run": result.ticks,
        "config": scenario.config,
    }
    (out / "config.yaml").write_text(yaml.safe_dump(config_doc, sort_keys=True))

    with (out / "trajectory.csv").open("w", newline="") as fh:
        for line in stamp:
            fh.write(line + "\n")
        writer = csv.writer(fh)
        writer.writerow(["tick", "robot_id", "role", "x", "y", "state"])
        for row in world.log.trajectory:
            writer.writerow(row)

    with (out / "events.jsonl").open("w") as fh:
        for ev in world.log.events:
            fh.write(
                json.dumps(
                    {"tick": ev.tick, "robot": ev.guide_id, "kind": ev.kind, "detail": ev.detail},
                    sort_keys=True,
                )
                + "\n"
            )

    (out / "metrics.txt").write_text("\n".join(stamp) + "\n" + report.to_text())


def cmd_run(args: argparse.Namespace, invocation: str) -> int:
    try:
        scenario = load_scenario(args.scenario, overrides=args.set or [])
        seed = args.seed if args.seed is not None else scenario.seed
        max_ticks = args.max_ticks if args.max_ticks is not None else scenario.max_ticks
        if max_ticks < 0:
            raise ScenarioError("--max-ticks must be >= 0")
        result, world, report = _execute(scenario, seed, max_ticks, heartbeat=True)
    except (ScenarioError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out) if args.out else Path("runs") / f"{scenario.name}-s{seed}"
    _write_run_files(out, invocation, scenario, seed, max_ticks, result, world, report)
    print(f"{scenario.name} seed={seed}: {result.status} after {result.ticks} ticks -> {out}")
    if result.status == "completed":
        return 0
    print(f"error: {result.reason}", file=sys.stderr)
    return 1


def _parse_seeds(expr: str) -> list[int]:
    if ".." in expr:
        a, _, b = expr.partition("..")
        try:
            lo, hi = int(a), int(b)
        except ValueError as exc:
            raise ScenarioError(f"bad seed range {expr!r}") from exc
        if hi < lo:
            raise ScenarioError(f"empty seed range {expr!r}")
        return list(range(lo, hi + 1))
    try:
        seeds = [int(s) for s in expr.split(",")]
    except ValueError as exc:
        raise ScenarioError(f"bad seed list {expr!r}") from exc
    if len(set(seeds)) != len(seeds):
        raise ScenarioError("seeds must be distinct")
    return seeds


def cmd_batch(args: argparse.Namespace, invocation: str) -> int:
    try:
        seeds = _parse_seeds(args.seeds)
        overrides = list(args.set or [])
        # batch cells default to metrics-only logging; trajectories are opt-in
        if not any(o.startswith("engine.log_every=") for o in overrides):
            overrides.append("engine.log_every=0")
        scenarios = [load_scenario(name, overrides=overrides) for name in args.scenario]
    except (ScenarioError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out) if args.out else Path("batch")
    out.mkdir(parents=True, exist_ok=True)

    rows: list[dict] = []
    any_failure = False
    for scenario in scenarios:
        for seed in seeds:
            max_ticks = args.max_ticks if args.max_ticks is not None else scenario.max_ticks
            row = {
                "scenario": scenario.name,
                "n_workers": scenario.n_workers,
                "n_guides": scenario.n_guides,
                "seed": seed,
            }
            try:
                result, world, report = _execute(scenario, seed, max_ticks, heartbeat=False)
            except (ScenarioError, ValueError) as exc:
                any_failure = True
                row.update({"status": f"error: {exc}", "ticks": 0})
                rows.append(row)
                print(f"{scenario.name} seed={seed}: error: {exc}", flush=True)
                continue
            if result.status != "completed":
                any_failure = True
            row.update(
                {
                    "status": result.status,
                    "ticks": result.ticks,
                    "distortion_raw": report.distortion_raw,
                    "min_pairwise_distance": report.min_pairwise_distance,
                    "max_rigid_edge_error": report.max_rigid_edge_error,
                    "collision_events": report.collision_events,
                }
            )
            for state in DURATION_STATES:
                row[f"duration_{state}"] = report.state_durations.get(state)
            cell_dir = out / f"{scenario.name}-s{seed}"
            _write_run_files(cell_dir, invocation, scenario, seed, max_ticks, result, world, report)
            rows.append(row)
            print(f"{scenario.name} seed={seed}: {result.status} after {result.ticks} ticks", flush=True)

    raws = [r["distortion_raw"] for r in rows if r.get("distortion_raw") is not None]
    divisor = max(raws) if raws else None
    if raws:
        normed = normalize_distortions(raws)
        norm_iter = iter(normed)
        for r in rows:
            if r.get("distortion_raw") is not None:
                r["distortion_norm"] = next(norm_iter)

    summary = out / "summary.csv"
    with summary.open("w", newline="") as fh:
        fh.write(f"# swarmherd {__version__}\n")
        fh.write(f"# invocation={invocation}\n")
        fh.write(f"# normalization_divisor={_cell(divisor)}\n")
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_COLUMNS)
        for r in rows:
            writer.writerow([_cell(r.get(col)) for col in SUMMARY_COLUMNS])
    print(f"summary: {summary} ({len(rows)} rows)")
    return 1 if any_failure else 0


def _read_summary(path: Path) -> tuple[list[str], list[dict]]:
    lines = [ln for ln in path.read_text().splitlines() if not ln.startswith("#")]
    reader = csv.reader(lines)
    try:
        header = next(reader)
    except StopIteration:
        raise ScenarioError(f"{path} is empty")
    rows = []
    for idx, row in enumerate(reader, start=2):
        if not row:
            continue
        rows.append(dict(zip(header, row)))
        rows[-1]["_line"] = idx
    return header, rows


def _quartiles(values: list[float]) -> tuple[float, float, float]:
    if len(values) == 1:
        return values[0], values[0], values[0]
    q = statistics.quantiles(values, n=4, method="inclusive")
    return q[0], statistics.median(values), q[2]


REPORT_METRICS = [f"duration_{s}" for s in DURATION_STATES] + ["distortion_norm"]


def cmd_report(args: argparse.Namespace, invocation: str) -> int:
    path = Path(args.summary)
    if not path.exists():
        print(f"error: summary {path} does not exist", file=sys.stderr)
        return 2
    try:
        _header, rows = _read_summary(path)
    except (ScenarioError, csv.Error) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    groups: dict[tuple[str, str], list[dict]] = {}
    for row in rows:
        key = (row.get("scenario", "?"), row.get("n_workers", "?"))
        groups.setdefault(key, []).append(row)

    long_rows: list[list] = []
    col_names = ["scenario", "N"] + [m.replace("duration_", "t_") for m in REPORT_METRICS]
    widths = [max(18, len(c)) for c in col_names]
    print("  ".join(c.ljust(w) for c, w in zip(col_names, widths)))
    for (scenario, n_workers), members in sorted(groups.items()):
        cells = [scenario, n_workers]
        for metric in REPORT_METRICS:
            values = []
            for row in members:
                raw = row.get(metric, "")
                if raw in ("", None):
                    continue
                try:
                    values.append(float(raw))
                except ValueError:
                    print(
                        f"error: non-numeric {metric}={raw!r} in row for "
                        f"{scenario} seed={row.get('seed')} (line {row['_line']})",
                        file=sys.stderr,
                    )
                    return 2
            if values:
                q1, med, q3 = _quartiles(values)
                cells.append(f"{med:.4g} [{q1:.4g},{q3:.4g}]")
                long_rows.append([scenario, n_workers, metric, med, q1, q3])
            else:
                cells.append("n/a")
        print("  ".join(str(c).ljust(w) for c, w in zip(cells, widths)))

    out_dir = Path(args.out) if args.out else path.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    long_path = out_dir / "report_long.csv"
    with long_path.open("w", newline="") as fh:
        fh.write(f"# swarmherd {__version__}\n")
        fh.write(f"# invocation={invocation}\n")
        writer = csv.writer(fh)
        writer.writerow(["scenario", "n_workers", "metric", "median", "q1", "q3"])
        for row in long_rows:
            writer.writerow(row)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="swarmherd",
        description="Deterministic hierarchical swarm simulation: run scenarios, batches, reports.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one scenario with one seed")
    p_run.add_argument("--scenario", required=True, help="scenario file path or built-in name")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--out", default=None, help="output directory (default runs/<name>-s<seed>)")
    p_run.add_argument("--max-ticks", type=int, default=None)
    p_run.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted-path config override")

    p_batch = sub.add_parser("batch", help="run a scenario/seed grid and summarize")
    p_batch.add_argument("--scenario", action="append", required=True, help="repeatable")
    p_batch.add_argument("--seeds", default="0..29", help="range a..b (inclusive) or comma list")
    p_batch.add_argument("--out", default=None, help="output directory (default batch/)")
    p_batch.add_argument("--max-ticks", type=int, default=None)
    p_batch.add_argument("--set", action="append", metavar="KEY=VALUE")

    p_report = sub.add_parser("report", help="summarize a batch summary.csv")
    p_report.add_argument("--summary", required=True)
    p_report.add_argument("--out", default=None, help="directory for report_long.csv (default: summary's)")
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    invocation = "swarmherd " + shlex.join(argv)
    if args.command == "run":
        return cmd_run(args, invocation)
    if args.command == "batch":
        return cmd_batch(args, invocation)
    return cmd_report(args, invocation)


if __name__ == "__main__":
    sys.exit(main())
