"""``faces-sim``: run Faces experiments and sweeps, write CSV and traces."""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .costs import CostModel
from .errors import ConfigError, Deadlock, ParseError, SimError, SummaryError
from .faces import CSV_COLUMNS, BenchmarkConfig, GridSpec, run_variant, verify_exchange

# Keys that may take comma-separated lists and are swept as a cartesian product,
# in the order the product is expanded.
SWEEP_KEYS = ("grid", "ranks_per_node", "variant", "throttle", "merge", "overlap")
SCALAR_KEYS = ("inner", "outer", "middle", "n", "s", "sync_interval", "tops_capacity", "seed",
               "counter_mode", "kernel_ns", "csv", "trace", "periodic")
COST_KEYS = tuple(CostModel.field_names())
KNOWN_KEYS = SWEEP_KEYS + SCALAR_KEYS + COST_KEYS

DEFAULTS = {
    "grid": "2x2x2",
    "ranks_per_node": "8",
    "variant": "st_arma",
    "throttle": "adaptive",
    "merge": "merged",
    "overlap": "off",
    "inner": "10",
    "outer": "2",
    "middle": "2",
    "n": "4",
    "s": "8",
    "tops_capacity": "4096",
    "seed": "0",
    "counter_mode": "monotonic",
    "kernel_ns": "1000",
    "periodic": "false",
}


def parse_grid(text: str) -> tuple[int, int, int]:
    parts = text.lower().split("x")
    if len(parts) != 3:
        raise ValueError(f"grid {text!r} needs three dimensions, e.g. 2x2x2")
    dims = tuple(int(p) for p in parts)
    if min(dims) < 1:
        raise ValueError(f"grid {text!r} has a non-positive dimension")
    return dims


def parse_overlap(text: str) -> int | None:
    if text == "off":
        return None
    if text.startswith("on:"):
        ns = int(text[3:])
        if ns < 0:
            raise ValueError("overlap duration must be non-negative")
        return ns
    raise ValueError(f"overlap must be 'off' or 'on:<ns>', got {text!r}")


def parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


_CHECKS = {
    "grid": parse_grid,
    "ranks_per_node": int,
    "overlap": parse_overlap,
    "inner": int, "outer": int, "middle": int, "n": int, "s": int,
    "sync_interval": int, "tops_capacity": int, "seed": int, "kernel_ns": int,
    "periodic": parse_bool,
}


def parse_settings(text: str) -> dict[str, list[str]]:
    """Parse ``key = value`` lines into raw value lists, checking syntax per line."""
    out: dict[str, list[str]] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in KNOWN_KEYS:
            raise ParseError(f"unknown key {key!r}", lineno)
        values = [v.strip() for v in value.split(",")]
        if not all(values):
            raise ParseError(f"empty value for {key!r}", lineno)
        if len(values) > 1 and key not in SWEEP_KEYS:
            raise ParseError(f"{key!r} does not accept a list", lineno)
        check = _CHECKS.get(key, float if key in COST_KEYS else None)
        if check:
            for v in values:
                try:
                    check(v)
                except ValueError as exc:
                    raise ParseError(f"bad value for {key!r}: {exc}", lineno) from None
        out[key] = values
    return out


@dataclass
class ExperimentPlan:
    configs: list[BenchmarkConfig]
    keys: list[tuple] = field(default_factory=list)
    csv_path: str | None = None
    trace_path: str | None = None


def _number(text: str):
    f = float(text)
    return int(f) if f.is_integer() else f


def build_plan(settings: dict[str, list[str]]) -> ExperimentPlan:
    merged = {k: [v] for k, v in DEFAULTS.items()}
    merged.update(settings)
    one = {k: v[0] for k, v in merged.items()}
    costs = {k: _number(one[k]) for k in COST_KEYS if k in one}
    sync_interval = int(one["sync_interval"]) if "sync_interval" in one else None
    base_seed = int(one["seed"])
    configs, keys = [], []
    for i, combo in enumerate(itertools.product(*(merged[k] for k in SWEEP_KEYS))):
        pick = dict(zip(SWEEP_KEYS, combo))
        px, py, pz = parse_grid(pick["grid"])
        grid = GridSpec(px, py, pz, int(pick["ranks_per_node"]), int(one["n"]), int(one["s"]),
                        parse_bool(one["periodic"]))
        cfg = BenchmarkConfig(
            variant=pick["variant"], grid=grid, outer=int(one["outer"]),
            middle=int(one["middle"]), inner=int(one["inner"]), throttle=pick["throttle"],
            app_sync_interval=sync_interval, merge=pick["merge"],
            overlap=parse_overlap(pick["overlap"]), seed=base_seed + i,
            tops_capacity=int(one["tops_capacity"]), counter_mode=one["counter_mode"],
            kernel_ns=int(one["kernel_ns"]), costs=costs)
        key = (grid, cfg.variant, cfg.throttle, cfg.merge, cfg.overlap)
        if key in keys:
            raise ConfigError(f"duplicate experiment {pick}")
        keys.append(key)
        configs.append(cfg)
    if one["counter_mode"] not in ("monotonic", "reset"):
        raise ConfigError(f"unknown counter_mode {one['counter_mode']!r}")
    return ExperimentPlan(configs, keys, one.get("csv"), one.get("trace"))


def parse_config(text: str) -> ExperimentPlan:
    return build_plan(parse_settings(text))


def _trace_path(base: str, index: int, total: int) -> Path:
    p = Path(base)
    if total == 1:
        return p
    return p.with_name(f"{p.stem}.{index}{p.suffix}")


def format_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for row in rows:
        w.writerow(row.values())
    return buf.getvalue()


def run_experiment(plan: ExperimentPlan, out=None, err=None) -> int:
    """Run every configuration; returns the process exit code."""
    out = out or sys.stdout
    err = err or sys.stderr
    rows, failed = [], False
    for i, cfg in enumerate(plan.configs):
        label = f"{cfg.variant} {cfg.grid.label()} throttle={cfg.throttle} merge={cfg.merge}"
        try:
            run = run_variant(cfg)
        except Deadlock as exc:
            print(f"run {i} ({label}): {exc}", file=err)
            failed = True
            continue
        bad = verify_exchange(run)
        if bad or run.compare_mismatches:
            failed = True
            print(f"run {i} ({label}): verification failed, "
                  f"{run.compare_mismatches} in-loop mismatches", file=err)
            for mm in bad:
                print(f"  rank {mm.rank} {mm.coords} dir {mm.offset} byte {mm.index}: "
                      f"expected {mm.expected} got {mm.got}", file=err)
        rows.append(run.row)
        if plan.trace_path:
            _trace_path(plan.trace_path, i, len(plan.configs)).write_text(
                run.report.trace_text() + "\n")
    text = format_csv(rows)
    if plan.csv_path:
        Path(plan.csv_path).write_text(text)
        summary_out = out
    else:
        out.write(text)
        summary_out = err
    try:
        summary = emit_summary(text)
    except SummaryError:
        summary = ""
    if summary:
        print(summary, file=summary_out)
    return 1 if failed else 0


_GRID_COLS = ("px", "py", "pz", "ranks_per_node", "n", "s")
_LABEL_COLS = ("variant", "throttle", "merge", "overlap")


def emit_summary(csv_text: str) -> str:
    """Pairwise ``A vs B: +X.X%`` deltas of virtual_time_ns, later rows against earlier."""
    rows = list(csv.DictReader(io.StringIO(csv_text)))
    if len(rows) < 2:
        return ""
    if len({tuple(r[c] for c in _GRID_COLS) for r in rows}) > 1:
        raise SummaryError("rows do not share one grid")
    varying = [c for c in _LABEL_COLS if len({r[c] for r in rows}) > 1] or ["variant"]
    labels = ["/".join(r[c] for c in varying) for r in rows]
    lines = []
    for (i, a), (j, b) in itertools.combinations(enumerate(rows), 2):
        base = int(a["virtual_time_ns"])
        if base == 0:
            continue
        pct = (int(b["virtual_time_ns"]) - base) / base * 100
        lines.append(f"{labels[j]} vs {labels[i]}: {pct:+.1f}%")
    return "\n".join(lines)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="faces-sim",
                                description="Simulate the Faces halo exchange over "
                                            "classic and stream-triggered one-sided MPI.")
    p.add_argument("--config", metavar="PATH", help="key = value settings file")
    p.add_argument("--variant", help="p2p, arma, st_arma or a comma list")
    p.add_argument("--grid", metavar="PxQxR")
    p.add_argument("--ranks-per-node", metavar="K")
    p.add_argument("--inner", metavar="N")
    p.add_argument("--throttle", help="app, static, adaptive or a comma list")
    p.add_argument("--sync-interval", metavar="K", help="iterations between app-level syncs")
    p.add_argument("--merge", help="independent, merged or a comma list")
    p.add_argument("--overlap", metavar="{off,on:<ns>}")
    p.add_argument("--tops-capacity", metavar="K")
    p.add_argument("--seed", metavar="S")
    p.add_argument("--csv", metavar="PATH")
    p.add_argument("--trace", metavar="PATH")
    p.add_argument("--cost", action="append", default=[], metavar="NAME=VALUE",
                   help="override one cost-model entry (repeatable)")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        text = Path(args.config).read_text() if args.config else ""
        settings = parse_settings(text)
        flags = [f"{k} = {v}" for k, v in vars(args).items()
                 if k not in ("config", "cost") and v is not None]
        flags += args.cost
        settings.update(parse_settings("\n".join(flags)))
        plan = build_plan(settings)
    except OSError as exc:
        print(f"faces-sim: {exc}", file=sys.stderr)
        return 2
    except ParseError as exc:
        where = "command line" if args.config is None else args.config
        print(f"faces-sim: {where}: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"faces-sim: {exc}", file=sys.stderr)
        return 2
    try:
        return run_experiment(plan)
    except ConfigError as exc:
        print(f"faces-sim: {exc}", file=sys.stderr)
        return 2
    except SimError as exc:
        print(f"faces-sim: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
