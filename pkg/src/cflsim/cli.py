"""Command-line experiment runner.

    cflsim validate --config cfg.json
    cflsim run --config cfg.json [--out DIR] [--threads N] [--dataset FILE ...] [--save-weights]
    cflsim gen-data --config cfg.json --emit-dataset FILE

Exit status: 0 on success, 2 for configuration problems, 3 for failures
while running.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import logging
import os
import statistics
import sys
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from importlib import resources
from pathlib import Path

import jsonschema

from .data import (
    Dataset,
    ModalitySpec,
    bimodal_specs,
    generate_modality,
    merge_test_sets,
    read_dataset,
    write_dataset,
)
from .errors import CFLError, ConfigError
from .experiment import Benchmark, build_benchmark
from .federation import EarlyStopConfig, ExperimentResult, FederationConfig, Regime, RoundRecord, run_experiment
from .metrics import NEGATIVE, POSITIVE, EvalReport, format_metric
from .model import LossSpec, ModelSpec, OptimizerSpec
from .params import save

log = logging.getLogger("cflsim")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

_NOTES = {"^_note": {}}


def _obj(properties: dict, required: tuple[str, ...] = ()) -> dict:
    return {
        "type": "object",
        "properties": properties,
        "patternProperties": _NOTES,
        "additionalProperties": False,
        "required": list(required),
    }


_POS_INT = {"type": "integer", "minimum": 1}
_NUMBER = {"type": "number"}
_VECTOR = {"type": "array", "items": _NUMBER, "minItems": 1}

_MODALITY = _obj(
    {
        "name": {"type": "string", "minLength": 1},
        "input_dim": _POS_INT,
        "negative_mean": _VECTOR,
        "positive_mean": _VECTOR,
        "negative_scale": {"type": "number", "exclusiveMinimum": 0},
        "positive_scale": {"type": "number", "exclusiveMinimum": 0},
        "positive_count": {"type": "integer", "minimum": 0},
        "negative_count": {"type": "integer", "minimum": 0},
        "noise_seed": {"type": "integer", "minimum": 0},
    },
    ("name", "input_dim", "negative_mean", "positive_mean", "positive_count", "negative_count"),
)

SCHEMA = _obj(
    {
        "data": {
            **_obj(
                {
                    "synthetic": {
                        "oneOf": [
                            _obj(
                                {
                                    "bimodal": _obj(
                                        {
                                            "input_dim": {"type": "integer", "minimum": 3},
                                            "separation": {"type": "number", "minimum": 0},
                                            "offset": {"type": "number", "minimum": 0},
                                        }
                                    )
                                },
                                ("bimodal",),
                            ),
                            _obj(
                                {"modalities": {"type": "array", "items": _MODALITY, "minItems": 1}},
                                ("modalities",),
                            ),
                        ]
                    },
                    "files": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                    "test_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                }
            ),
            "not": {"required": ["synthetic", "files"]},
        },
        "model": _obj(
            {
                "input_dim": _POS_INT,
                "architecture": {"enum": ["logistic", "mlp"]},
                "hidden_units": _POS_INT,
                "activation": {"enum": ["relu", "tanh"]},
                "loss": _obj(
                    {
                        "kind": {"enum": ["cross_entropy", "focal"]},
                        "alpha": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                        "gamma": {"type": "number", "minimum": 0},
                    }
                ),
            }
        ),
        "federation": _obj(
            {
                "rounds": _POS_INT,
                "epochs": _POS_INT,
                "batch_size": _POS_INT,
                "optimizer": _obj(
                    {
                        "kind": {"enum": ["sgd", "adam"]},
                        "learning_rate": {"type": "number", "minimum": 0},
                        "adam_beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                        "adam_beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                        "adam_epsilon": {"type": "number", "exclusiveMinimum": 0},
                    }
                ),
                "client_weighting": {"enum": ["uniform", "by_sample_count"]},
                "dropout_probability": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "augment_noise_std": {"type": "number", "minimum": 0},
                "early_stop": _obj(
                    {
                        "enabled": {"type": "boolean"},
                        "patience": _POS_INT,
                        "min_delta": {"type": "number", "minimum": 0},
                    }
                ),
                "clients_per_cluster": {"type": "array", "items": _POS_INT, "minItems": 1},
            }
        ),
        "regimes": {
            "type": "array",
            "items": {"enum": [r.value for r in Regime]},
            "minItems": 1,
            "uniqueItems": True,
        },
        "output_dir": {"type": "string", "minLength": 1},
        "seeds": {
            "type": "array",
            "items": {"type": "integer", "minimum": 0, "maximum": 2**32 - 1},
            "minItems": 1,
            "uniqueItems": True,
        },
    }
)


def default_config() -> dict:
    text = resources.files("cflsim").joinpath("configs/default.json").read_text(encoding="utf-8")
    return json.loads(text)


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _where(error: jsonschema.ValidationError) -> str:
    return "config" + "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in error.absolute_path)


def _describe(error: jsonschema.ValidationError) -> tuple[str, str]:
    if error.validator == "additionalProperties":
        known = set(error.schema.get("properties", {}))
        extra = sorted(k for k in error.instance if k not in known and not k.startswith("_note"))
        where = _where(error)
        return f"unknown key {extra[0]!r}", f"{where}.{extra[0]}"
    if error.validator == "not" and "required" in error.validator_value:
        keys = error.validator_value["required"]
        return f"give only one of {', '.join(map(repr, keys))}", _where(error)
    return error.message, _where(error)


def _deepest(error: jsonschema.ValidationError) -> jsonschema.ValidationError:
    # a oneOf failure is reported at its own level; the branch error that got
    # furthest into the document names the actual problem
    while error.context:
        error = max(error.context, key=lambda e: len(e.absolute_path))
    return error


def validate_document(doc) -> None:
    """Raise ConfigError naming the first offending path."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: [str(p) for p in e.absolute_path])
    if errors:
        message, where = _describe(_deepest(errors[0]))
        raise ConfigError(message, where)


def resolve(doc: dict) -> dict:
    """Validate ``doc`` and fill everything it leaves out from the shipped defaults."""
    validate_document(doc)
    base = default_config()
    if "synthetic" in doc.get("data", {}) or "files" in doc.get("data", {}):
        base["data"] = {k: v for k, v in base["data"].items() if k not in ("synthetic", "files")}
    resolved = _merge(base, doc)
    validate_document(resolved)
    cpc = resolved["federation"]["clients_per_cluster"]
    if "synthetic" in resolved["data"] and "bimodal" in resolved["data"]["synthetic"] and len(cpc) != 2:
        raise ConfigError("bimodal data needs exactly two client counts", "config.federation.clients_per_cluster")
    mods = resolved["data"].get("synthetic", {}).get("modalities")
    if mods is not None and len(mods) != len(cpc):
        raise ConfigError(
            f"{len(mods)} modalities but {len(cpc)} client counts", "config.federation.clients_per_cluster"
        )
    return resolved


def load_config(path: str | Path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return resolve(doc)


def _strip_notes(section: dict) -> dict:
    return {k: v for k, v in section.items() if not k.startswith("_note")}


@dataclass
class Plan:
    """A resolved config turned into package objects."""

    document: dict
    model: ModelSpec
    federation: FederationConfig
    clients_per_cluster: tuple[int, ...]
    regimes: tuple[Regime, ...]
    seeds: tuple[int, ...]
    output_dir: Path
    test_fraction: float = 0.2
    data_files: tuple[Path, ...] = field(default_factory=tuple)


def _input_dim(data: dict) -> int:
    synth = data.get("synthetic")
    if synth is None:
        return _read(data["files"][0]).input_dim
    if "bimodal" in synth:
        return synth["bimodal"].get("input_dim", 32)
    return synth["modalities"][0]["input_dim"]


def _read(path) -> Dataset:
    try:
        return read_dataset(path)
    except FileNotFoundError:
        raise ConfigError(f"dataset file not found: {path}", "config.data.files") from None


def plan_from(doc: dict) -> Plan:
    m = _strip_notes(doc["model"])
    loss = LossSpec(**_strip_notes(m.pop("loss", {})))
    data_dim = _input_dim(doc["data"])
    dim = m.pop("input_dim", data_dim)
    if dim != data_dim:
        raise ConfigError(f"model input_dim {dim} does not match data input_dim {data_dim}", "config.model.input_dim")
    f = _strip_notes(doc["federation"])
    cpc = tuple(f.pop("clients_per_cluster"))
    opt = OptimizerSpec(**_strip_notes(f.pop("optimizer", {})))
    es = EarlyStopConfig(**_strip_notes(f.pop("early_stop", {})))
    try:
        model = ModelSpec(dim, loss=loss, **m)
        fed = FederationConfig(optimizer=opt, early_stop=es, **f)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return Plan(
        document=doc,
        model=model,
        federation=fed,
        clients_per_cluster=cpc,
        regimes=tuple(Regime(r) for r in doc["regimes"]),
        seeds=tuple(doc["seeds"]),
        output_dir=Path(doc["output_dir"]),
        test_fraction=doc["data"].get("test_fraction", 0.2),
        data_files=tuple(Path(p) for p in doc["data"].get("files", ())),
    )


def default_experiment() -> tuple[ModelSpec, FederationConfig]:
    """Model and federation settings of the shipped default config."""
    plan = plan_from(resolve({}))
    return plan.model, plan.federation


def modality_datasets(plan: Plan, seed: int) -> list[Dataset]:
    """One dataset per modality; synthetic data is regenerated from ``seed``."""
    data = plan.document["data"]
    if plan.data_files:
        merged = merge_test_sets([_read(p) for p in plan.data_files])
        return [merged.by_modality(tag) for tag in merged.modalities()]
    synth = data["synthetic"]
    if "bimodal" in synth:
        specs = bimodal_specs(seed=seed, **_strip_notes(synth["bimodal"]))
    else:
        specs = [ModalitySpec(**_strip_notes(s)) for s in synth["modalities"]]
    return [generate_modality(s) for s in specs]


def benchmark_for(plan: Plan, seed: int) -> Benchmark:
    mods = modality_datasets(plan, seed)
    if len(mods) != len(plan.clients_per_cluster):
        raise ConfigError(
            f"data has {len(mods)} modalities but clients_per_cluster lists {len(plan.clients_per_cluster)}",
            "config.federation.clients_per_cluster",
        )
    if mods[0].input_dim != plan.model.input_dim:
        raise ConfigError(f"data input_dim {mods[0].input_dim} does not match the model", "config.model.input_dim")
    return build_benchmark(mods, plan.clients_per_cluster, split_seed=seed, test_fraction=plan.test_fraction)


# --- outputs -----------------------------------------------------------------------


def _num(x: float) -> str:
    return repr(float(x))


def csv_header(modalities: list[str]) -> list[str]:
    cols = ["round", "loss", "accuracy"]
    for cls in (POSITIVE, NEGATIVE):
        cols += [f"precision_{cls}", f"recall_{cls}", f"f1_{cls}"]
    cols.append("macro_f1")
    cols += [f"f1_{m}_modality" for m in modalities]
    cols.append("participants")
    return cols


def rounds_csv(records: list[RoundRecord], modalities: list[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(csv_header(modalities))
    for rec in records:
        rep = rec.report
        row = [rec.round, _num(rec.loss), _num(rec.accuracy)]
        for cls in (POSITIVE, NEGATIVE):
            c = rep.per_class[cls]
            row += [_num(c.precision), _num(c.recall), _num(c.f1)]
        row.append(_num(rec.macro_f1))
        row += [_num(rep.per_modality[m].macro_f1) if m in rep.per_modality else "" for m in modalities]
        row.append(";".join(rec.participants))
        writer.writerow(row)
    return buf.getvalue()


def _plain(value):
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if hasattr(value, "item"):
        return value.item()
    return value


def record_dict(rec: RoundRecord) -> dict:
    return _plain(asdict(rec))


def report_dict(rep: EvalReport) -> dict:
    return _plain(asdict(rep))


def _mean_std(values: list[float]) -> dict:
    return {
        "mean": statistics.fmean(values),
        "std": statistics.stdev(values) if len(values) > 1 else 0.0,
        "n": len(values),
    }


def aggregate(results: dict[tuple[Regime, int], ExperimentResult], modalities: list[str]) -> dict:
    """Cross-seed mean and sample standard deviation of the final reports."""
    out = {}
    for regime in dict.fromkeys(r for r, _ in results):
        finals = [res.final_report for (r, _), res in results.items() if r is regime]
        entry = {
            "macro_f1": _mean_std([f.macro_f1 for f in finals]),
            "weighted_f1": _mean_std([f.weighted_f1 for f in finals]),
            "accuracy": _mean_std([f.accuracy for f in finals]),
            "per_modality": {},
        }
        for m in modalities:
            groups = [f.per_modality[m] for f in finals if m in f.per_modality]
            if not groups:
                continue
            mod = {"macro_f1": _mean_std([g.macro_f1 for g in groups])}
            for cls in (POSITIVE, NEGATIVE):
                mod[cls] = {
                    metric: _mean_std([getattr(g.per_class[cls], metric) for g in groups])
                    for metric in ("precision", "recall", "f1")
                }
            entry["per_modality"][m] = mod
        out[regime.value] = entry
    return out


_REGIME_TITLES = {
    Regime.SPECIALIZED: "Specialized FL",
    Regime.CONVENTIONAL: "Conventional FL",
    Regime.CLUSTERED: "Clustered FL",
}
_CLASS_TITLES = {POSITIVE: "COVID-19", NEGATIVE: "Healthy"}


def comparison_table(summary: dict, regimes: list[Regime], modalities: list[str]) -> str:
    """Per-modality, per-class P/R/F1 for each regime, cross-seed means at two decimals."""
    cell = 18
    lines = []
    head = f"{'Dataset':<12}{'Class':<10}" + "".join(f"| {_REGIME_TITLES[r]:<{cell - 2}}" for r in regimes)
    sub = " " * 22 + "".join(f"| {'P':<5}{'R':<5}{'F1':<6}" for _ in regimes)
    rule = "-" * len(head)
    lines += [head, sub, rule]
    for m in modalities:
        for i, cls in enumerate((POSITIVE, NEGATIVE)):
            row = f"{m if i == 0 else '':<12}{_CLASS_TITLES[cls]:<10}"
            for r in regimes:
                stats = summary[r.value]["per_modality"].get(m)
                if stats is None:
                    row += f"| {'-':<{cell - 2}}"
                    continue
                c = stats[cls]
                vals = [format_metric(c[k]["mean"]) for k in ("precision", "recall", "f1")]
                row += f"| {vals[0]:<5}{vals[1]:<5}{vals[2]:<6}"
            lines.append(row)
        lines.append(rule)
    n = summary[regimes[0].value]["macro_f1"]["n"]
    lines += ["", f"Macro-F1, mean ± std over {n} seed(s)"]
    lines.append(f"{'Regime':<18}{'overall':<14}" + "".join(f"{m:<14}" for m in modalities))
    for r in regimes:
        s = summary[r.value]
        row = f"{_REGIME_TITLES[r]:<18}"
        row += f"{format_metric(s['macro_f1']['mean'])} ± {format_metric(s['macro_f1']['std'])}  "
        for m in modalities:
            mm = s["per_modality"].get(m)
            row += (
                f"{format_metric(mm['macro_f1']['mean'])} ± {format_metric(mm['macro_f1']['std'])}  "
                if mm else f"{'-':<14}"
            )
        lines.append(row.rstrip())
    return "\n".join(lines) + "\n"


def _writable_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".cflsim-write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {path} is not writable: {exc.strerror or exc}") from None
    return path


@dataclass
class RunOutput:
    results: dict[tuple[Regime, int], ExperimentResult]
    summary: dict
    files: list[Path]


def run_plan(plan: Plan, out_dir: Path, threads: int = 1, save_weights: bool = False) -> RunOutput:
    out_dir = _writable_dir(out_dir)
    results: dict[tuple[Regime, int], ExperimentResult] = {}
    files: list[Path] = []
    runs = []
    modalities: list[str] = []
    for seed in plan.seeds:
        bench = benchmark_for(plan, seed)
        modalities = [cl.modality for cl in bench.topology.clusters]
        spec = replace(plan.model, init_seed=seed)
        config = replace(plan.federation, master_seed=seed)
        for regime in plan.regimes:
            log.info("running %s, seed %d", regime.value, seed)
            res = run_experiment(
                bench.topology.with_regime(regime), spec, config, bench.shards, bench.test, threads=threads
            )
            results[(regime, seed)] = res
            path = out_dir / f"rounds_{regime.value}_{seed}.csv"
            path.write_text(rounds_csv(res.records, modalities), encoding="utf-8")
            files.append(path)
            if save_weights:
                for key, w in res.weights.items():
                    suffix = "" if len(res.weights) == 1 else f"_{key}"
                    wpath = out_dir / f"weights_{regime.value}_{seed}{suffix}.cflw"
                    save(w, wpath)
                    files.append(wpath)
            runs.append(
                {
                    "regime": regime.value,
                    "seed": seed,
                    "csv": path.name,
                    "best_round": res.best_round,
                    "stopped_early": res.stopped_early,
                    "early_stop_round": res.records[-1].round if res.stopped_early else None,
                    "error": res.error,
                    "final_report": report_dict(res.final_report),
                    "records": [record_dict(r) for r in res.records],
                }
            )
    agg = aggregate(results, modalities)
    summary = {"config": plan.document, "modalities": modalities, "runs": runs, "aggregate": agg}
    spath = out_dir / "summary.json"
    spath.write_text(json.dumps(summary, indent=2, allow_nan=False) + "\n", encoding="utf-8")
    tpath = out_dir / "comparison.txt"
    tpath.write_text(comparison_table(agg, list(plan.regimes), modalities), encoding="utf-8")
    files += [spath, tpath]
    return RunOutput(results, summary, files)


# --- entry point ---------------------------------------------------------------------


def _threads(value: int | None) -> int:
    if value is not None:
        if value < 1:
            raise ConfigError("--threads must be >= 1")
        return value
    env = os.environ.get("CFLSIM_THREADS")
    if not env:
        return 1
    try:
        n = int(env)
    except ValueError:
        raise ConfigError(f"CFLSIM_THREADS must be an integer, got {env!r}") from None
    if n < 1:
        raise ConfigError("CFLSIM_THREADS must be >= 1")
    return n


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cflsim", description="Clustered federated learning simulator")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run every (regime, seed) combination")
    run.add_argument("--config", required=True)
    run.add_argument("--out", help="output directory (overrides output_dir)")
    run.add_argument("--threads", type=int, help="client-training threads (default: $CFLSIM_THREADS or 1)")
    run.add_argument(
        "--dataset", action="append", metavar="FILE",
        help="CFLD file to train on instead of the configured data; repeatable, split by modality tag",
    )
    run.add_argument("--save-weights", action="store_true", help="write weights_<regime>_<seed>.cflw")

    gen = sub.add_parser("gen-data", help="write the configured benchmark data as a CFLD file")
    gen.add_argument("--config", required=True)
    gen.add_argument("--emit-dataset", required=True, metavar="FILE")
    gen.add_argument("--seed", type=int, help="data seed (default: first configured seed)")

    val = sub.add_parser("validate", help="check a config and print it with defaults filled in")
    val.add_argument("--config", required=True)
    return parser


def _cmd_validate(args) -> int:
    doc = load_config(args.config)
    plan_from(doc)
    print(json.dumps(doc, indent=2))
    return EXIT_OK


def _cmd_gen_data(args) -> int:
    plan = plan_from(load_config(args.config))
    seed = plan.seeds[0] if args.seed is None else args.seed
    merged = merge_test_sets(modality_datasets(plan, seed))
    dest = Path(args.emit_dataset)
    try:
        write_dataset(merged, dest)
    except OSError as exc:
        raise ConfigError(f"cannot write {dest}: {exc.strerror or exc}") from None
    print(f"wrote {len(merged)} samples ({', '.join(merged.modalities())}) to {dest}")
    return EXIT_OK


def _cmd_run(args) -> int:
    doc = load_config(args.config)
    if args.dataset:
        doc = dict(doc)
        doc["data"] = {"files": list(args.dataset), "test_fraction": doc["data"].get("test_fraction", 0.2)}
        validate_document(doc)
    plan = plan_from(doc)
    threads = _threads(args.threads)
    out = Path(args.out) if args.out else plan.output_dir
    output = run_plan(plan, out, threads=threads, save_weights=args.save_weights)
    sys.stdout.write((out / "comparison.txt").read_text(encoding="utf-8"))
    failed = [f"{r.value}/{s}: {res.error}" for (r, s), res in output.results.items() if res.error]
    if failed:
        print("runs ended early with errors:\n  " + "\n  ".join(failed), file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    handlers = {"run": _cmd_run, "gen-data": _cmd_gen_data, "validate": _cmd_validate}
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CFLError, ArithmeticError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
