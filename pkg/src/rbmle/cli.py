"""Command-line experiment driver.

    rbmle run --config exp.json [--out DIR] [--seeds 0-99] [--horizon 4096] [--agent ce-greedy]
    rbmle verify --records DIR
    rbmle constants --model reference --a 400
    rbmle report --records DIR [--out regret.csv]

Exit codes: 0 success, 2 configuration error, 3 runtime error, 4 a
verification check failed.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from .agents import BASELINE_KINDS, admissible_threshold, make_agent
from .index import OptimizerConfig, OptimizerError
from .mdp import MdpError, MdpModel
from .models import BUILTIN_MODELS, load_mdp, random_model
from .harness.constants import TheoremConstants, theorem_bound
from .harness.records import RunRecord, atomic_write, load_record, load_records, save_record, truncate
from .harness.regret import _log_grid, expected_regret
from .harness.simulate import SimulationError, ground_truth, run_seeds
from .harness import verify

SCHEMA_VERSION = 1
OUTPUT_ENV = "RBMLE_OUTPUT_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_VERIFY = 0, 2, 3, 4
CHECKS = ("accounting", "lemma1", "lemma2", "lemma3", "lemma4", "lemma6", "lemma7", "theorem")


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the offending field."""


# ---------------------------------------------------------------------------
# Configuration


def _field(cfg: dict, path: str, kind, default=None, required=False):
    if path.split(".")[-1] not in cfg:
        if required:
            raise ConfigError(f"{path}: required field is missing")
        return default
    value = cfg[path.split(".")[-1]]
    if not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
        raise ConfigError(f"{path}: expected {getattr(kind, '__name__', kind)}, got {type(value).__name__}")
    return value


def parse_seeds(spec) -> list[int]:
    """``[1, 2, 5]``, ``{"start": 0, "count": 100}``, ``"0-99"`` or ``"3,7,9"``."""
    if isinstance(spec, list):
        seeds = spec
    elif isinstance(spec, dict):
        seeds = list(range(int(spec.get("start", 0)), int(spec.get("start", 0)) + int(spec["count"])))
    elif isinstance(spec, str):
        seeds = []
        for part in spec.split(","):
            lo, _, hi = part.strip().partition("-")
            seeds.extend(range(int(lo), int(hi) + 1) if hi else [int(lo)])
    else:
        raise ConfigError("seeds: expected a list, {start, count} or a range string")
    if not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        raise ConfigError("seeds: need at least one non-negative integer")
    return [int(s) for s in seeds]


def load_model(spec, base_dir: Path = Path(".")) -> MdpModel:
    if not isinstance(spec, dict):
        raise ConfigError("model: expected an object")
    if "builtin" in spec:
        name = spec["builtin"]
        if name not in BUILTIN_MODELS:
            raise ConfigError(f"model.builtin: unknown model {name!r} (choose from {sorted(BUILTIN_MODELS)})")
        return BUILTIN_MODELS[name]()
    if "file" in spec:
        path = base_dir / spec["file"]
        if not path.is_file():
            raise ConfigError(f"model.file: no such file {str(path)!r}")
        try:
            return load_mdp(path)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"model.file: {path} is not valid JSON ({exc})") from exc
    if "generator" in spec:
        gen = spec["generator"]
        try:
            return random_model(
                int(gen["num_states"]), int(gen["num_actions"]), float(gen.get("p_min", 0.05)), int(gen.get("seed", 0))
            )
        except KeyError as exc:
            raise ConfigError(f"model.generator.{exc.args[0]}: required field is missing") from exc
        except ValueError as exc:
            raise ConfigError(f"model.generator: {exc}") from exc
    if "transitions" in spec:
        return MdpModel.from_dict(spec)
    raise ConfigError("model: give one of builtin, file, generator or an inline transitions/rewards table")


def load_config(path: str | os.PathLike) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"--config: no such file {str(path)!r}")
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"--config: {path} is not valid JSON ({exc})") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config: expected a JSON object")
    cfg["_base_dir"] = str(path.parent)
    return cfg


def resolve_experiment(cfg: dict, args=None) -> dict:
    """Validate a raw config (plus command-line overrides) into a plain experiment dict."""
    version = cfg.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version: expected {SCHEMA_VERSION}, got {version!r}")
    model = load_model(cfg.get("model"), Path(cfg.get("_base_dir", ".")))

    agent = dict(_field(cfg, "agent", dict, default={"kind": "rbmle"}))
    if args is not None and args.agent:
        if args.agent.lstrip().startswith("{"):
            try:
                agent.update(json.loads(args.agent))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"--agent: invalid JSON ({exc})") from exc
        else:
            agent["kind"] = args.agent
    kind = agent.setdefault("kind", "rbmle")
    if kind != "rbmle" and kind not in BASELINE_KINDS:
        raise ConfigError(f"agent.kind: unknown agent {kind!r}")
    if kind == "rbmle":
        if not isinstance(agent.get("a"), (int, float)) or agent["a"] <= 0:
            raise ConfigError("agent.a: the rbmle agent needs a positive bias scale")
        if not float(agent.get("b", 3.0)) > 2:
            raise ConfigError("agent.b: must exceed 2")
        try:
            OptimizerConfig(**agent.get("optimizer", {}))
        except TypeError as exc:
            raise ConfigError(f"agent.optimizer: {exc}") from exc

    horizon = args.horizon if args is not None and args.horizon else _field(cfg, "horizon", int, required=True)
    if horizon < 2:
        raise ConfigError("horizon: must be at least 2")
    seeds = parse_seeds(args.seeds if args is not None and args.seeds else cfg.get("seeds", [0]))
    initial = _field(cfg, "initial_state", int, default=0)
    if not 0 <= initial < model.num_states:
        raise ConfigError(f"initial_state: must lie in [0, {model.num_states})")
    checks = _field(cfg, "verify", dict, default={})
    unknown = set(checks) - set(CHECKS)
    if unknown:
        raise ConfigError(f"verify: unknown checks {sorted(unknown)}")
    out = (args.out if args is not None and args.out else None) or cfg.get("output")
    if out is None:
        out = os.environ.get(OUTPUT_ENV, "rbmle-output")
    return {
        "model": model,
        "agent": agent,
        "horizon": int(horizon),
        "seeds": seeds,
        "initial_state": initial,
        "verify": {name: bool(checks.get(name, True)) for name in CHECKS},
        "output": Path(out),
        "n_jobs": int(cfg.get("n_jobs", 1)),
        "write_csv": bool(cfg.get("write_csv", True)),
    }


# ---------------------------------------------------------------------------
# Verification shared by `run` and `verify`


def _agent_constants(records: list[RunRecord]) -> TheoremConstants | None:
    agent = records[0].agent
    truth = records[0].truth
    if agent.get("kind") != "rbmle" or truth.gap_min is None:
        return None
    return TheoremConstants.from_truth(records[0].model, truth, agent["a"], agent.get("b", 3.0))


def run_checks(records: list[RunRecord], enabled: dict | None = None) -> list[dict]:
    enabled = enabled or {name: True for name in CHECKS}
    constants = _agent_constants(records)
    truth = records[0].truth
    horizon = records[0].horizon
    reports = []
    if enabled["accounting"]:
        reports.append(verify.verify_accounting(records))
    if enabled["lemma1"]:
        reports.append(verify.verify_lemma1(records))
    if enabled["lemma6"]:
        reports.append(verify.verify_lemma6_visits(records))
    if enabled["lemma7"]:
        reports.append(
            verify.verify_lemma7_mixing(records[0].model, truth.optimal_policies[0], horizon, max(len(records), 2), truth.mixing_time)
        )
    if any(ep.indices for ep in records[0].episodes):
        if enabled["lemma2"]:
            reports.append(verify.verify_lemma2(records))
        if constants is not None and enabled["lemma3"]:
            reports.append(verify.verify_lemma3(records, constants))
        if constants is not None and constants.admissible and enabled["lemma4"]:
            reports.append(verify.verify_lemma4(records, constants))
    if constants is not None and constants.admissible and enabled["theorem"]:
        grid = [t for t in (2**10, 2**12, 2**14) if t < horizon] + [horizon]
        reports.append(verify.verify_theorem(records, constants, grid))
    return reports


def verification_document(records: list[RunRecord], reports: list[dict]) -> dict:
    return {
        "runs": len(records),
        "horizon": records[0].horizon,
        "agent": records[0].agent,
        "passed": all(r["passed"] for r in reports),
        "checks": reports,
    }


def _dump(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"not serializable: {type(obj).__name__}")


# ---------------------------------------------------------------------------
# Subcommands


def regret_csv(records: list[RunRecord]) -> str:
    summary = expected_regret(records)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("t", "mean_regret", "stderr"))
    for t in range(1, summary.horizon + 1):
        writer.writerow((t, repr(float(summary.mean[t - 1])), repr(float(summary.stderr[t - 1]))))
    return buf.getvalue()


def cmd_run(args) -> int:
    exp = resolve_experiment(load_config(args.config), args)
    model, agent_cfg = exp["model"], exp["agent"]
    make_agent(agent_cfg, model)  # fail fast on a bad agent block
    out = exp["output"]
    records = run_seeds(model, agent_cfg, exp["horizon"], exp["seeds"], exp["initial_state"], exp["n_jobs"])
    for rec in records:
        save_record(rec, out / "records", write_csv=exp["write_csv"])
    atomic_write(out / "regret.csv", regret_csv(records))
    summary = expected_regret(records)
    truth = ground_truth(model)
    reports = run_checks(records, exp["verify"])
    doc = {
        "schema_version": SCHEMA_VERSION,
        "agent": records[0].agent,
        "horizon": exp["horizon"],
        "seeds": exp["seeds"],
        "model": model.to_dict(),
        "truth": truth.to_dict(),
        "regret": summary.to_dict(),
        "verification": verification_document(records, reports),
    }
    atomic_write(out / "summary.json", _dump(doc))
    final, se = summary.at(exp["horizon"])
    print(f"{len(records)} run(s) written to {out}; mean R(T) = {final:.3f} +/- {se:.3f}")
    return EXIT_OK


def _records_from(args) -> list[RunRecord]:
    directory = Path(args.records)
    if (directory / "records").is_dir():
        directory = directory / "records"
    if not directory.is_dir():
        raise ConfigError(f"--records: no such directory {str(directory)!r}")
    records = load_records(directory)
    if not records:
        raise ConfigError(f"--records: no record_*.json files in {str(directory)!r}")
    return records


def cmd_verify(args) -> int:
    if args.records:
        records = _records_from(args)
        enabled = None
    else:
        if not args.config:
            raise ConfigError("verify: give --records DIR or --config FILE")
        exp = resolve_experiment(load_config(args.config), args)
        records = run_seeds(exp["model"], exp["agent"], exp["horizon"], exp["seeds"], exp["initial_state"], exp["n_jobs"])
        enabled = exp["verify"]
    kinds = {json.dumps(r.agent, sort_keys=True) for r in records}
    if len(kinds) > 1:
        raise ConfigError("--records: the directory mixes several agent configurations")
    doc = verification_document(records, run_checks(records, enabled))
    text = _dump(doc)
    if args.out:
        atomic_write(Path(args.out), text)
    sys.stdout.write(text)
    return EXIT_OK if doc["passed"] else EXIT_VERIFY


def constants_report(model: MdpModel, a: float | None, b: float = 3.0) -> dict:
    truth = ground_truth(model)
    doc = {
        "num_states": model.num_states,
        "num_actions": model.num_actions,
        "p_min": model.p_min,
        "optimal_gain": truth.optimal_gain,
        "optimal_policies": [list(p) for p in truth.optimal_policies],
        "gap_min": truth.gap_min,
        "mixing_time": truth.mixing_time,
        "conductivity": truth.conductivity,
    }
    if truth.gap_min is None:
        doc["note"] = "every policy is optimal; gap-dependent constants are undefined"
        return doc
    doc["a_threshold"] = admissible_threshold(model.num_states, model.num_actions, model.p_min, truth.gap_min)
    if a is None:
        return doc
    const = TheoremConstants.from_truth(model, truth, a, b)
    doc.update(
        a=a,
        b=b,
        admissible=const.admissible,
        gamma=const.gamma,
        beta_interval=[0.0, max(const.beta_upper, 0.0)],
        beta=const.beta,
        c=const.c,
        c1=const.c1,
    )
    if const.admissible:
        doc["C"] = const.C
        doc["theorem_bound"] = {str(2**j): theorem_bound(const, 2**j) for j in range(8, 17)}
    return doc


def cmd_constants(args) -> int:
    if args.config:
        cfg = load_config(args.config)
        model = load_model(cfg.get("model"), Path(cfg["_base_dir"]))
        agent = cfg.get("agent", {})
        a = args.a if args.a is not None else agent.get("a")
        b = args.b if args.b is not None else agent.get("b", 3.0)
    else:
        spec = args.model or "reference"
        model = load_model({"builtin": spec} if spec in BUILTIN_MODELS else {"file": spec})
        a, b = args.a, args.b if args.b is not None else 3.0
    text = _dump(constants_report(model, a, b))
    if args.out:
        atomic_write(Path(args.out), text)
    sys.stdout.write(text)
    return EXIT_OK


def _agent_label(agent: dict) -> str:
    if agent.get("kind") == "rbmle":
        return f"rbmle(a={agent['a']:g},b={agent.get('b', 3.0):g})"
    if agent.get("kind") == "epsilon-greedy":
        return f"epsilon-greedy({agent.get('epsilon', 0.1):g})"
    return agent.get("kind", "agent")


def report_csv(records: list[RunRecord], every: bool = False) -> str:
    """Long-format table ``agent,t,runs,mean_regret,stderr`` (one block per agent)."""
    groups: dict[str, list[RunRecord]] = defaultdict(list)
    for rec in records:
        groups[_agent_label(rec.agent)].append(rec)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("agent", "t", "runs", "mean_regret", "stderr"))
    for label in sorted(groups):
        recs = groups[label]
        horizon = min(r.horizon for r in recs)
        if any(r.horizon != horizon for r in recs):
            recs = [truncate(r, horizon) for r in recs]
        summary = expected_regret(recs)
        grid = range(1, horizon + 1) if every else _log_grid(horizon)
        for t in grid:
            writer.writerow((label, t, summary.runs, repr(float(summary.mean[t - 1])), repr(float(summary.stderr[t - 1]))))
    return buf.getvalue()


def cmd_report(args) -> int:
    paths = sorted(Path(args.records).rglob("record_*.json")) if Path(args.records).is_dir() else []
    if not paths:
        raise ConfigError(f"--records: no record_*.json files under {args.records!r}")
    records = [load_record(p) for p in paths]
    text = report_csv(records, every=args.every)
    if args.out:
        atomic_write(Path(args.out), text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rbmle", description="Reward-biased MLE experiments on tabular MDPs.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="simulate one agent over a list of seeds")
    run.add_argument("--config", required=True)
    run.add_argument("--out", help=f"output directory (default: config 'output', then ${OUTPUT_ENV})")
    run.add_argument("--seeds", help="override seeds, e.g. 0-99 or 1,4,9")
    run.add_argument("--horizon", type=int, help="override the horizon T")
    run.add_argument("--agent", help="override agent kind, or a JSON object merged into the agent block")
    run.set_defaults(func=cmd_run)

    ver = sub.add_parser("verify", help="run the verification checks on stored records (or a config)")
    ver.add_argument("--records", help="directory written by 'run'")
    ver.add_argument("--config")
    ver.add_argument("--out", help="also write the JSON report here")
    ver.add_argument("--seeds")
    ver.add_argument("--horizon", type=int)
    ver.add_argument("--agent")
    ver.set_defaults(func=cmd_verify)

    con = sub.add_parser("constants", help="structural and bound constants of a model")
    con.add_argument("--model", help="builtin name or JSON model file (default: reference)")
    con.add_argument("--config")
    con.add_argument("--a", type=float)
    con.add_argument("--b", type=float)
    con.add_argument("--out")
    con.set_defaults(func=cmd_constants)

    rep = sub.add_parser("report", help="mean regret vs t per agent as CSV")
    rep.add_argument("--records", required=True, help="directory searched recursively for records")
    rep.add_argument("--out")
    rep.add_argument("--every", action="store_true", help="one row per time step instead of a log grid")
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MdpError, ValueError) as exc:
        kind = "config error" if isinstance(exc, MdpError) else "error"
        print(f"{kind}: {exc}", file=sys.stderr)
        return EXIT_CONFIG if isinstance(exc, MdpError) else EXIT_RUNTIME
    except (SimulationError, OptimizerError, OSError, RuntimeError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
