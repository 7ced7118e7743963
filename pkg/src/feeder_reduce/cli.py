"""``feeder-reduce`` command line: ingest, visualize, powerflow, reduce, simulate, report.

Numeric settings come from three layers, highest first: command-line
flags, the ``--config`` file (TOML or JSON) and the library defaults. The
config file may hold these tables::

    [powerflow]   head_v, tol, max_iter
    [layout]      max_iter, tol
    [reduction]   window_frac, min_pocket_frac, loaded_term, composition
    [scenario]    any ScenarioSpec field
    [dynamics]    dist_tx_pct, ..., [dynamics.contactor], [dynamics.sphim]
    [fixture]     any FixtureSpec field

Exit codes are 0 on success, 1 on a domain or I/O error (one line on
stderr starting with ``error:``) and 2 on a usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

from .fixtures import FEEDER_A_SYNTH, FixtureSpec, write_fixture
from .ingest import parse_sections, validate_topology
from .model import ConductorLibrary, FeederError
from .powerflow import sweep_voltage_drops
from .reduction import Composition, FeederReducer, ReducedFeederModel, builtin_feeder_O
from .topology import FeederGraph, classify_laterals, export_visualization, kamada_kawai_layout, trunk_and_branches

try:  # Python 3.11+
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

BUILTIN_O = "builtin:O"
CONFIG_TABLES = ("powerflow", "layout", "reduction", "scenario", "dynamics", "fixture")


class UsageError(Exception):
    """Bad command-line input detected after argparse (exit code 2)."""


# --------------------------------------------------------------------------
# configuration


def load_config(path) -> dict:
    """Read a TOML or JSON config file into a dict of tables."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FeederError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        if path.suffix.lower() == ".json":
            cfg = json.loads(raw.decode())
        else:
            cfg = tomllib.loads(raw.decode())
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise FeederError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise FeederError(f"config {path} must be a table of tables")
    unknown = set(cfg) - set(CONFIG_TABLES)
    if unknown:
        raise FeederError(f"config {path}: unknown table(s) {sorted(unknown)}")
    return cfg


def _layer(cfg: Mapping, table: str, flags: Mapping[str, Any]) -> dict:
    """Config table overlaid with the flags that were actually given."""
    out = dict(cfg.get(table, {}))
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def _positive(name: str, value, integer: bool = False):
    if value is None:
        return None
    if integer and (not isinstance(value, int) or isinstance(value, bool)):
        raise FeederError(f"{name} must be an integer, got {value!r}")
    if not isinstance(value, (int, float)) or isinstance(value, bool) or not value > 0:
        raise FeederError(f"{name} must be a positive number, got {value!r}")
    return value


def _check_keys(table: str, values: Mapping, allowed: Sequence[str]) -> None:
    unknown = set(values) - set(allowed)
    if unknown:
        raise FeederError(f"unknown {table} setting(s): {sorted(unknown)}")


def powerflow_settings(cfg: Mapping, head_v=None, tol=None, max_iter=None) -> dict:
    s = _layer(cfg, "powerflow", {"head_v": head_v, "tol": tol, "max_iter": max_iter})
    _check_keys("powerflow", s, ("head_v", "tol", "max_iter"))
    _positive("head_v", s.get("head_v"))
    _positive("tol", s.get("tol"))
    _positive("max_iter", s.get("max_iter"), integer=True)
    return s


def layout_settings(cfg: Mapping, max_iter=None, tol=None) -> dict:
    s = {"max_iter": 100000, "tol": 1e-4}
    s.update(_layer(cfg, "layout", {"max_iter": max_iter, "tol": tol}))
    _check_keys("layout", s, ("max_iter", "tol"))
    _positive("layout max_iter", s["max_iter"], integer=True)
    _positive("layout tol", s["tol"])
    return s


def reducer_settings(cfg: Mapping, head_v=None) -> dict:
    s = _layer(cfg, "reduction", {"head_v": head_v})
    head = cfg.get("powerflow", {}).get("head_v")
    if head is not None and head_v is None:
        s.setdefault("head_v", head)
    _check_keys("reduction", s, ("head_v", "window_frac", "min_pocket_frac", "loaded_term", "composition"))
    for key in ("head_v", "window_frac", "min_pocket_frac"):
        _positive(key, s.get(key))
    if s.get("loaded_term", "mean") not in ("mean", "sum"):
        raise FeederError("loaded_term must be 'mean' or 'sum'")
    if "composition" in s:
        try:
            s["composition"] = Composition.from_dict(s["composition"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FeederError(f"invalid composition: {exc}") from exc
    return s


def dynamics_settings(cfg: Mapping):
    from .dynamics import DynamicsParams

    try:
        return DynamicsParams.from_dict(cfg.get("dynamics"))
    except (TypeError, ValueError) as exc:
        raise FeederError(f"invalid dynamics settings: {exc}") from exc


def scenario_from(cfg: Mapping, source: Optional[str], dt_ms=None):
    """A scenario from a reference name (S1/S2/S3) or a JSON file, with overrides."""
    from .dynamics import ScenarioError, ScenarioSpec, reference_scenario

    overrides = _layer(cfg, "scenario", {"dt_ms": dt_ms})
    try:
        if source is None:
            base = reference_scenario("S2")
        elif source in ("S1", "S2", "S3"):
            base = reference_scenario(source)
        else:
            base = _scenario_file(source)
        if not overrides:
            return base
        merged = base.to_dict()
        merged.update(overrides)
        return ScenarioSpec.from_dict(merged)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise FeederError(f"invalid scenario: {exc}") from exc


def _scenario_file(path):
    from .dynamics import ScenarioSpec

    data = _read_json(path, "scenario")
    if not isinstance(data, dict):
        raise FeederError(f"{path}: a scenario file holds one JSON object")
    return ScenarioSpec.from_dict(data)


def _read_json(path, what: str):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FeederError(f"cannot read {what} file {path}: {exc.strerror}") from exc
    try:
        return json.loads(text)
    except ValueError as exc:
        raise FeederError(f"{path}: not valid JSON ({exc})") from exc


def _load_model(source: str) -> ReducedFeederModel:
    if source == BUILTIN_O:
        return builtin_feeder_O()
    data = _read_json(source, "model")
    try:
        return ReducedFeederModel.from_dict(data)
    except (KeyError, TypeError, ValueError) as exc:
        raise FeederError(f"{source}: invalid reduced model ({exc})") from exc


# --------------------------------------------------------------------------
# output helpers


def _output_path(out: Optional[str], default_name: str) -> Path:
    """``--out`` naming a file (it has a suffix) or a directory for ``default_name``."""
    if out is None:
        path = Path(default_name)
    elif Path(out).suffix:
        path = Path(out)
    else:
        path = Path(out) / default_name
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _output_dir(out: Optional[str]) -> Path:
    path = Path(out) if out is not None else Path(".")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _say(args, text: str) -> None:
    if not args.quiet:
        print(text)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n")


def _dataset(args):
    lib = ConductorLibrary.from_json(args.conductors) if getattr(args, "conductors", None) else None
    return parse_sections(args.dataset, lib=lib, root=getattr(args, "root", None)), lib


# --------------------------------------------------------------------------
# subcommands


def cmd_ingest(args, cfg) -> int:
    d, _ = _dataset(args)
    report = validate_topology(d)
    out = _output_path(args.out, f"{d.name}.validation.json")
    body = {"stats": d.stats(), "validation": report.to_dict(d)}
    _write_json(out, body)
    s = d.stats()
    _say(args, f"{s['name']}: {s['nodes']} nodes, {s['sections']} sections, "
               f"{s['loaded_sections']} loaded; accepted={report.accepted} -> {out}")
    if not report.accepted:
        raise FeederError(f"{len(report.unreachable)} node(s) unreachable from the head")
    return 0


def cmd_visualize(args, cfg) -> int:
    d, lib = _dataset(args)
    settings = layout_settings(cfg, args.max_iter, args.tol)
    g = classify_laterals(trunk_and_branches(FeederGraph.from_dataset(d, lib), d), d)
    layout = kamada_kawai_layout(g, settings["max_iter"], settings["tol"])
    bounds = []
    if args.boundaries:
        bounds = FeederReducer(**reducer_settings(cfg)).fit(d).boundaries_
    out = _output_path(args.out, f"{d.name}.{args.format}")
    export_visualization(g, layout, args.format, out, bounds, d.external_ids)
    _say(args, f"layout stress {layout.stress:.6g} after {layout.iterations} moves -> {out}")
    return 0


def cmd_powerflow(args, cfg) -> int:
    d, lib = _dataset(args)
    s = powerflow_settings(cfg, args.head_v, args.tol, args.max_iter)
    sol = sweep_voltage_drops(d, lib=lib, **s)
    out = _output_path(args.out, f"{d.name}.powerflow.json")
    sol.to_json(out)
    _say(args, f"head {abs(sol.head_power_mva):.4f} MVA, min |V| {sol.min_voltage:.4f} pu, "
               f"{sol.iterations} iterations -> {out}")
    return 0


def cmd_reduce(args, cfg) -> int:
    d, _ = _dataset(args)
    s = reducer_settings(cfg, args.head_v)
    reducer = FeederReducer(**s).fit(d)
    model = reducer.model_
    if args.name:
        model = dataclasses.replace(model, name=args.name)
    out = _output_path(args.out, f"{model.name}.json")
    model.to_json(out)
    fr = ", ".join(f"{f:.3f}" for f in model.fractions)
    _say(args, f"{model.name}: fractions [{fr}], boundaries "
               f"{[d.external_ids[b] for b in reducer.boundaries_]} -> {out}")
    return 0


def cmd_simulate(args, cfg) -> int:
    from .dynamics import extract_metrics, scenario_sweep, simulate_scenario

    model = _load_model(args.model)
    params = dynamics_settings(cfg)
    out = _output_dir(args.out)
    if args.grid:
        from .dynamics import ScenarioSpec

        grid_data = _read_json(args.grid, "grid")
        if not isinstance(grid_data, list) or not grid_data:
            raise FeederError(f"{args.grid}: a grid file holds a non-empty JSON array of scenarios")
        try:
            grid = [ScenarioSpec.from_dict(c) for c in grid_data]
        except (TypeError, ValueError) as exc:
            raise FeederError(f"{args.grid}: invalid scenario ({exc})") from exc
        cells = scenario_sweep(model, grid, params, workers=args.workers)
        rows = [
            {"scenario": c.scenario, "metrics": c.metrics.to_dict() if c.metrics else None, "error": c.error}
            for c in cells
        ]
        path = out / f"{model.name}.sweep.json"
        _write_json(path, rows)
        failed = sum(1 for c in cells if c.error)
        _say(args, f"{len(cells)} scenarios, {failed} failed -> {path}")
        return 0

    scenario = scenario_from(cfg, args.scenario, args.dt)
    ts = simulate_scenario(model, scenario, params)
    metrics = extract_metrics(ts)
    stem = f"{model.name}.{scenario.name}"
    ts.to_csv(out / f"{stem}.csv")
    _write_json(out / f"{stem}.metrics.json", metrics.to_dict())
    _say(args, f"{stem}: {metrics.st}, TMS {metrics.tms}, IMS {list(metrics.ims)} -> {out}")
    return 0


def report_label(metrics) -> str:
    """Row label such as ``O/1`` from the model and scenario names."""
    model = metrics.model
    for prefix in ("feeder-", "feeder_", "feeder"):
        if model.startswith(prefix) and len(model) > len(prefix):
            model = model[len(prefix):]
            break
    scen = metrics.scenario
    if scen[:1] in ("S", "s") and scen[1:].isdigit():
        scen = scen[1:]
    return f"{model}/{scen}"


def render_table(rows) -> str:
    """Markdown comparison table, one row per metrics record."""
    from .dynamics import EventMetrics

    def num(x, fmt):
        return "-" if x is None else format(x, fmt)

    lines = [
        "| Feeder Type/Scenario | ST | T1 (ms) | V1 (pu) | T2 (ms) | V2 (pu) | TMS | IMS |",
        "|---|---|---|---|---|---|---|---|",
    ]
    for m in rows:
        if not isinstance(m, EventMetrics):
            m = EventMetrics.from_dict(m)
        ims = "{" + ",".join(str(i) for i in m.ims) + "}"
        lines.append(
            f"| {report_label(m)} | {m.st} | {num(m.t1, '.1f')} | {num(m.v1, '.2f')} | "
            f"{num(m.t2, '.1f')} | {num(m.v2, '.2f')} | {m.tms} | {ims} |"
        )
    return "\n".join(lines) + "\n"


def cmd_report(args, cfg) -> int:
    from .dynamics import EventMetrics

    rows = []
    for path in args.metrics:
        data = _read_json(path, "metrics")
        try:
            rows.append(EventMetrics.from_dict(data))
        except (KeyError, TypeError, ValueError) as exc:
            raise FeederError(f"{path}: not a metrics record ({exc})") from exc
    table = render_table(rows)
    if args.out is None:
        sys.stdout.write(table)
    else:
        out = _output_path(args.out, "table.md")
        out.write_text(table)
        _say(args, f"{len(rows)} rows -> {out}")
    return 0


def cmd_gen_fixture(args, cfg) -> int:
    fields = dataclasses.asdict(FEEDER_A_SYNTH)
    overrides = _layer(cfg, "fixture", {"seed": args.seed})
    _check_keys("fixture", overrides, fields)
    fields.update(overrides)
    try:
        spec = FixtureSpec(**fields)
    except (TypeError, ValueError) as exc:
        raise FeederError(f"invalid fixture spec: {exc}") from exc
    csv_path, man_path = write_fixture(spec, _output_dir(args.out))
    _say(args, f"{spec.name} (seed {spec.seed}) -> {csv_path}, {man_path}")
    return 0


# --------------------------------------------------------------------------
# parser


def _common() -> argparse.ArgumentParser:
    """Global flags, accepted both before and after the subcommand."""
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=argparse.SUPPRESS, help="TOML or JSON settings file")
    p.add_argument("--out", default=argparse.SUPPRESS, help="output file or directory")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="generator seed (gen-fixture)")
    p.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS, help="no progress output")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(
        prog="feeder-reduce",
        description="Reduce a detailed radial feeder to a three-segment model and simulate faults on it.",
        parents=[common],
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, parents=[common])
        p.set_defaults(func=func)
        return p

    def dataset_args(p):
        p.add_argument("dataset", help="section CSV")
        p.add_argument("--root", help="feeder head node id (default: the only node never fed)")
        p.add_argument("--conductors", help="conductor library JSON")

    p = add("ingest", cmd_ingest, "Parse and validate a section CSV.")
    dataset_args(p)

    p = add("visualize", cmd_visualize, "Draw the feeder with a Kamada-Kawai layout.")
    dataset_args(p)
    p.add_argument("--format", choices=("svg", "dot", "json"), default="svg")
    p.add_argument("--max-iter", type=int, dest="max_iter")
    p.add_argument("--tol", type=float)
    p.add_argument("--boundaries", action="store_true", help="draw the reduction's segment dividers")

    p = add("powerflow", cmd_powerflow, "Constant-power sweep of the detailed feeder.")
    dataset_args(p)
    p.add_argument("--head-v", type=float, dest="head_v")
    p.add_argument("--tol", type=float)
    p.add_argument("--max-iter", type=int, dest="max_iter")

    p = add("reduce", cmd_reduce, "Build the three-segment model of a detailed feeder.")
    p.add_argument("dataset", help="section CSV")
    p.add_argument("--root", help="feeder head node id")
    p.add_argument("--head-v", type=float, dest="head_v")
    p.add_argument("--name", help="model name (default: <dataset>-reduced)")

    p = add("simulate", cmd_simulate, "Simulate a fault scenario on a reduced model.")
    p.add_argument("model", help=f"reduced model JSON, or {BUILTIN_O} for the reference model")
    p.add_argument("--scenario", help="scenario JSON or a reference name S1, S2, S3 (default S2)")
    p.add_argument("--grid", help="JSON array of scenarios to sweep")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--dt", type=float, help="time step, ms")

    p = add("report", cmd_report, "Tabulate metrics files as a Markdown comparison table.")
    p.add_argument("metrics", nargs="+", help="metrics JSON files")

    add("gen-fixture", cmd_gen_fixture, "Write the synthetic feederA-synth dataset and its manifest.")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, default in (("config", None), ("out", None), ("seed", None), ("quiet", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    try:
        if getattr(args, "workers", 1) < 1:
            raise UsageError("--workers must be at least 1")
        if getattr(args, "scenario", None) and getattr(args, "grid", None):
            raise UsageError("--scenario and --grid are mutually exclusive")
        cfg = load_config(args.config) if args.config else {}
        return args.func(args, cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"feeder-reduce: error: {exc}", file=sys.stderr)
        return 2
    except (FeederError, OSError, ValueError) as exc:
        message = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
