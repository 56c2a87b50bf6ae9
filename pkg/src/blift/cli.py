"""Command-line entry point: ``blift {simulate,estimate,project,report}``.

Settings come from flags, then the JSON config (``--config``), then the
documented defaults. See README.md for the config schema.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

from .dgp import DgpParams, SimulationScenario, run_replications, simulate_replicate
from .errors import BliftError, ConfigError
from .estimators import EffectEstimate, load_outcomes, write_edge_outcomes_csv
from .exposure import diagnose_overlap, exposure_table
from .graph import load_assignment, load_graph, write_assignment_csv, write_graph_csv
from .pipeline import EstimationConfig, analyze
from .projection import project_effect, require_edge_additivity
from .report import (
    SCHEMA_VERSION,
    atomic_write_text,
    canonical_json,
    emit_report,
    load_record_set,
    sha256_text,
)

CONFIG_FIELDS = {
    "schema_version", "seed", "jobs", "out", "scenarios", "dgp", "estimation",
    "edge_additive", "inputs", "treatment_probability",
}
INPUT_FIELDS = {"units", "edges", "assignment", "outcomes", "estimates", "runs"}


class RunConfig:
    """Merged settings for one command; ``base`` resolves relative input paths."""

    def __init__(self, command: str, data: dict, args: argparse.Namespace, base: Path):
        self.command = command
        self.data = data
        self.base = base
        unknown = sorted(set(data) - CONFIG_FIELDS)
        if unknown:
            raise ConfigError(f"config: unknown field(s) {unknown}")
        if data.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
            raise ConfigError(f"config.schema_version: expected {SCHEMA_VERSION}, got {data['schema_version']!r}")
        self.seed = _pick(args.seed, data.get("seed"), 0, "seed", int)
        if self.seed < 0 or self.seed >= 2**64:
            raise ConfigError("seed: must be an unsigned 64-bit integer")
        env_jobs = os.environ.get("BLIFT_JOBS")
        self.jobs = _pick(args.jobs, data.get("jobs", env_jobs), 1, "jobs", int)
        if self.jobs < 1:
            raise ConfigError("jobs: must be >= 1")
        out = _pick(args.out, data.get("out"), None, "out", str)
        if out is None:
            raise ConfigError("out: output directory is required (--out or config field 'out')")
        self.out = Path(out)
        self.edge_additive = bool(getattr(args, "edge_additive", False) or data.get("edge_additive", False))
        inputs = data.get("inputs", {})
        if not isinstance(inputs, dict):
            raise ConfigError("inputs: must be an object")
        bad = sorted(set(inputs) - INPUT_FIELDS)
        if bad:
            raise ConfigError(f"inputs: unknown field(s) {bad}")
        self.inputs = {}
        for key in INPUT_FIELDS:
            flag = getattr(args, key, None)
            val = flag if flag is not None else inputs.get(key)
            if val is not None:
                path = Path(val)
                self.inputs[key] = path if (flag is not None or path.is_absolute()) else base / path

    def input(self, key: str) -> Path:
        if key not in self.inputs:
            raise ConfigError(f"inputs.{key}: required for '{self.command}' (flag --{key} or config inputs.{key})")
        path = self.inputs[key]
        if not path.exists():
            raise BliftError(f"inputs.{key}: file not found: {path}")
        return path

    def estimation(self) -> EstimationConfig:
        est = dict(self.data.get("estimation", {}))
        if "edge_additive" in est:
            raise ConfigError("estimation.edge_additive: set the top-level field 'edge_additive' instead")
        cfg = EstimationConfig.from_dict(est)
        return replace(cfg, edge_additive=self.edge_additive)


def _pick(flag, file_value, default, name, cast):
    value = flag if flag is not None else file_value
    if value is None:
        return default
    try:
        return cast(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: invalid value {value!r}") from None


def _scenarios(data: dict, seed: int) -> list[SimulationScenario]:
    entries = data.get("scenarios")
    if not entries:
        raise ConfigError("scenarios: at least one scenario is required for 'simulate'")
    out = []
    for k, entry in enumerate(entries):
        entry = dict(entry)
        if "base_seed" in entry:
            raise ConfigError(f"scenarios[{k}].base_seed: use the top-level 'seed' (or --seed)")
        for req in ("spec_id", "mean_primary_degree", "treatment_probability"):
            if req not in entry:
                raise ConfigError(f"scenarios[{k}].{req}: missing required field")
        try:
            out.append(SimulationScenario.from_dict({**entry, "base_seed": seed}))
        except ConfigError as exc:
            raise ConfigError(f"scenarios[{k}]: {exc}") from None
        except TypeError as exc:
            raise ConfigError(f"scenarios[{k}]: {exc}") from None
    ids = [s.spec_id for s in out]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"scenarios: duplicate spec_id in {ids}")
    return out


# -- commands ----------------------------------------------------------------------------


def cmd_simulate(rc: RunConfig, args) -> None:
    scenarios = _scenarios(rc.data, rc.seed)
    params = DgpParams.from_dict(rc.data.get("dgp", {}))
    # simulated outcomes are edge sums by construction, so projection is always valid here
    est_cfg = replace(rc.estimation(), edge_additive=True)
    for sc in scenarios:
        run = run_replications(sc, params, est_cfg, jobs=rc.jobs)
        d = rc.out / f"scenario_{sc.spec_id}"
        meta = {
            "schema_version": SCHEMA_VERSION,
            "command": "simulate",
            "seed": rc.seed,
            "scenario": sc.to_dict(),
            "dgp": params.to_dict(),
            "estimation": est_cfg.to_dict(),
        }
        meta["config_hash"] = sha256_text(canonical_json({k: meta[k] for k in ("scenario", "dgp", "estimation", "seed")}))
        atomic_write_text(d / "replications.csv", run.records_csv())
        atomic_write_text(d / "failures.csv", run.failures_csv())
        atomic_write_text(d / "run.json", canonical_json(meta))
        if args.dump_data:
            exp = simulate_replicate(sc, params, 0)
            data_dir = d / "data"
            data_dir.mkdir(parents=True, exist_ok=True)
            write_graph_csv(exp.graph, data_dir / "units.csv", data_dir / "edges.csv")
            write_assignment_csv(exp.graph, exp.assignment, data_dir / "assignment.csv")
            write_edge_outcomes_csv(exp.graph, exp.outcomes, data_dir / "outcomes.csv")
            atomic_write_text(data_dir / "ground_truth.json", canonical_json(exp.truth.to_dict()))
        n_fail = len(run.failures)
        print(f"scenario {sc.spec_id}: {len(run.records)} records, {n_fail} failures -> {d}")


def _load_graph(rc: RunConfig):
    return load_graph(rc.input("units"), rc.input("edges"))


def cmd_estimate(rc: RunConfig, args) -> None:
    p = _pick(args.treatment_probability, rc.data.get("treatment_probability"), None, "treatment_probability", float)
    if p is None:
        raise ConfigError("treatment_probability: required for 'estimate' (design probability of treatment)")
    graph = _load_graph(rc)
    z = load_assignment(graph, rc.input("assignment"))
    outcomes = load_outcomes(graph, rc.input("outcomes"))
    ex = exposure_table(graph, z, p)
    cfg = rc.estimation()
    estimates, failures = analyze(graph, ex, outcomes, cfg, seed=rc.seed)
    doc = {
        "schema_version": SCHEMA_VERSION,
        "graph_fingerprint": graph.fingerprint,
        "assignment_id": z.id,
        "treatment_probability": p,
        "seed": rc.seed,
        "estimation": cfg.to_dict(),
        "estimates": [e.to_dict() for e in estimates],
        "failures": [asdict(f) for f in failures],
        "overlap": diagnose_overlap(ex).to_dict(),
    }
    rc.out.mkdir(parents=True, exist_ok=True)
    ex.to_csv(graph, rc.out / "exposures.csv")
    atomic_write_text(rc.out / "estimates.json", canonical_json(doc))
    for e in estimates:
        print(f"{e.estimand:4s} {e.level:9s} {e.method:9s} {e.estimate: .6g}" + (f"  [{e.ci[0]:.6g}, {e.ci[1]:.6g}]" if e.ci else ""))
    for f in failures:
        print(f"FAILED {f.estimand} {f.level} {f.method}: {f.error}", file=sys.stderr)


def cmd_project(rc: RunConfig, args) -> None:
    require_edge_additivity(rc.edge_additive)
    graph = _load_graph(rc)
    doc = json.loads(rc.input("estimates").read_text(encoding="utf-8"))
    if doc.get("graph_fingerprint") not in (None, graph.fingerprint):
        raise BliftError("estimates were computed on a different graph")
    projected = []
    for d in doc.get("estimates", []):
        e = EffectEstimate.from_dict(d)
        # the basic contrast is not a total effect, so it has no outcome-level counterpart
        if e.level == "treatment" and e.method != "basic" and not e.method.startswith("proj_"):
            projected.append(project_effect(e, graph, edge_additive=True))
    if not projected:
        raise BliftError("no treatment-level estimates to project")
    out = {"schema_version": SCHEMA_VERSION, "graph_fingerprint": graph.fingerprint,
           "estimates": [e.to_dict() for e in projected]}
    atomic_write_text(rc.out / "projected.json", canonical_json(out))
    for e in projected:
        print(f"{e.estimand:4s} outcome   {e.method:9s} {e.estimate: .6g}  (factor {e.metadata['projection']['factor']:.6g})")


def cmd_report(rc: RunConfig, args) -> None:
    runs = rc.inputs.get("runs", rc.out)
    dirs = sorted(p for p in Path(runs).glob("scenario_*") if p.is_dir())
    if not dirs:
        raise BliftError(f"no scenario_* directories under {runs}")
    sets = [load_record_set(d) for d in dirs]
    metas = {}
    for d in dirs:
        meta = json.loads((d / "run.json").read_text(encoding="utf-8"))
        metas[str(meta["scenario"]["spec_id"])] = meta
    manifest = {
        "config_hash": sha256_text(canonical_json(metas)),
        "seeds": {k: m["seed"] for k, m in metas.items()},
        "runs": metas,
        "inputs": {d.name: sha256_text((d / "replications.csv").read_text(encoding="utf-8")) for d in dirs},
    }
    bundle = emit_report(sets, manifest)
    out = rc.out / "report"
    bundle.write(out)
    print(bundle.ptte.to_markdown())
    print(f"report written to {out}")


COMMANDS = {"simulate": cmd_simulate, "estimate": cmd_estimate, "project": cmd_project, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=argparse.SUPPRESS, help="JSON run config")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="base seed (u64)")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--jobs", type=int, default=argparse.SUPPRESS, help="worker processes (env BLIFT_JOBS)")

    parser = argparse.ArgumentParser(prog="blift", parents=[common],
                                     description="Total treatment effects in bipartite experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", parents=[common], help="run replication studies")
    sim.add_argument("--dump-data", action="store_true", help="also write replicate 0 as CSV inputs")

    est = sub.add_parser("estimate", parents=[common], help="estimate effects from CSV inputs")
    for key in ("units", "edges", "assignment", "outcomes"):
        est.add_argument(f"--{key}", default=None)
    est.add_argument("--treatment-probability", type=float, default=None)
    est.add_argument("--edge-additive", action="store_true", help="assert outcomes are sums of edge outcomes")

    proj = sub.add_parser("project", parents=[common], help="project treatment-level estimates")
    for key in ("units", "edges", "estimates"):
        proj.add_argument(f"--{key}", default=None)
    proj.add_argument("--edge-additive", action="store_true", help="assert outcomes are sums of edge outcomes")

    rep = sub.add_parser("report", parents=[common], help="median tables and boxplot summaries")
    rep.add_argument("--runs", default=None, help="directory holding scenario_* outputs (default: --out)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    for name in ("config", "seed", "out", "jobs"):
        if not hasattr(args, name):
            setattr(args, name, None)
    try:
        data, base = {}, Path.cwd()
        if args.config is not None:
            try:
                data = json.loads(Path(args.config).read_text(encoding="utf-8"))
            except FileNotFoundError:
                raise ConfigError(f"config: file not found: {args.config}") from None
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config: invalid JSON ({exc})") from None
            if not isinstance(data, dict):
                raise ConfigError("config: top level must be an object")
            base = Path(args.config).resolve().parent
        rc = RunConfig(args.command, data, args, base)
        COMMANDS[args.command](rc, args)
    except ConfigError as exc:
        print(f"blift: invalid config: {exc}", file=sys.stderr)
        return 2
    except BliftError as exc:
        print(f"blift: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
