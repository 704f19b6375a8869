"""Command-line entry point: ``debias <command> [options]``.

Every command reads an optional YAML config (``--config``); flags override
config values, which override built-in defaults. Each run writes its
outputs plus ``resolved_config.yaml`` into ``--out-dir``. Run metadata that
changes between invocations (timestamps) goes to ``run.log`` only, so all
other outputs are byte-identical for identical config and seed.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import datetime as _dt
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np
import yaml

from . import __version__, causal, classify, harmonize, stats, synth
from .core import (
    ConfigError,
    CovariateSpec,
    DataError,
    DebiasError,
    FeatureTable,
    TableSchema,
    derive_seed,
    dumps_canonical,
    load_table,
    write_table,
)

log = logging.getLogger("debias")

COMMANDS = ("synth", "validate", "harmonize", "name-that-dataset", "age-loo", "causal", "report")

# Defaults double as the whitelist of accepted config keys.
DEFAULTS: dict[str, Any] = {
    "input": None,
    "out_dir": ".",
    "seed": 0,
    "threads": 1,
    "schema": None,
    "synth": {},
    "harmonize": {
        "family": None,
        "keep": [],
        "remove": [],
        "pc": None,
        "group_by": None,
        "expand_age_quadratic": True,
    },
    "classify": {
        "fraction": 0.7,
        "n_trees": 500,
        "group_by": None,
        "pca_mode": "strict",
        "predictors": None,
        "shuffle_labels": False,
        "target": "age",
        "spearman_features": [],
        "label": None,
    },
    "causal": {
        "x": None,
        "y": "outcome",
        "k": 1,
        "k_candidates": None,
        "repetitions": 10,
        "n_samples": 50000,
        "label": None,
    },
    "report": {"inputs": []},
}

PRIMARY_REPORT_COLUMNS = (
    "configuration",
    "command",
    "family",
    "accuracy",
    "chance",
    "weighted_chance",
    "median_mae",
    "N",
    "L_ca",
    "L_co",
    "delta",
    "delta_normalized",
    "delta_min",
    "delta_max",
)


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------


def _merge(base: dict[str, Any], override: Mapping[str, Any], path: str = "") -> dict[str, Any]:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if key in ("synth", "schema"):
            out[key] = copy.deepcopy(value) if value is not None else None
        elif isinstance(base[key], dict):
            if not isinstance(value, Mapping):
                raise ConfigError(f"config key {where!r} must be a mapping")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def load_config(path: str | Path | None) -> dict[str, Any]:
    if path is None:
        return {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"config {path} is not valid YAML: {e}") from None
    if doc is None:
        return {}
    if not isinstance(doc, Mapping):
        raise ConfigError("config must be a key-value mapping")
    return dict(doc)


def _flag_overrides(args: argparse.Namespace) -> dict[str, Any]:
    o: dict[str, Any] = {}

    def put(section: str | None, key: str, value: Any) -> None:
        if value is None:
            return
        if section is None:
            o[key] = value
        else:
            o.setdefault(section, {})[key] = value

    put(None, "input", getattr(args, "input", None))
    put(None, "out_dir", args.out_dir)
    put(None, "seed", args.seed)
    put(None, "threads", args.threads)
    put("harmonize", "family", getattr(args, "family", None))
    put("harmonize", "keep", getattr(args, "keep", None))
    put("harmonize", "remove", getattr(args, "remove", None))
    put("harmonize", "pc", getattr(args, "pc", None))
    gb = getattr(args, "group_by", None)
    put("harmonize", "group_by", gb)
    put("classify", "group_by", gb)
    put("classify", "fraction", getattr(args, "fraction", None))
    put("causal", "k", getattr(args, "k", None))
    put("causal", "repetitions", getattr(args, "repetitions", None))
    return o


def resolve_config(args: argparse.Namespace) -> dict[str, Any]:
    cfg = _merge(DEFAULTS, load_config(args.config))
    cfg = _merge(cfg, _flag_overrides(args))
    if args.command == "report" and getattr(args, "input", None):
        cfg["report"]["inputs"] = list(args.input)
        cfg["input"] = None
    elif isinstance(cfg["input"], list):
        if len(cfg["input"]) != 1:
            raise ConfigError(f"command {args.command!r} takes a single input")
        cfg["input"] = cfg["input"][0]
    for key in ("seed", "threads"):
        if not isinstance(cfg[key], int) or isinstance(cfg[key], bool):
            raise ConfigError(f"{key} must be an integer")
    if cfg["threads"] < 1:
        raise ConfigError("threads must be >= 1")
    return cfg


# --------------------------------------------------------------------------
# I/O helpers
# --------------------------------------------------------------------------


def schema_path_for(csv_path: str | Path) -> Path:
    p = Path(csv_path)
    return p.with_name(p.stem + ".schema.yaml")


def _dump_yaml(obj: Any) -> str:
    return yaml.safe_dump(obj, sort_keys=True, default_flow_style=False, allow_unicode=True)


def _write_text(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8", newline="\n")


def _write_json(path: Path, obj: Any) -> None:
    _write_text(path, dumps_canonical(obj) + "\n")


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
    def cell(v: Any) -> str:
        if v is None:
            return ""
        if isinstance(v, (float, np.floating)):
            return repr(float(v))
        return str(v)

    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([cell(v) for v in row])


def write_table_with_schema(table: FeatureTable, path: Path) -> TableSchema:
    schema = write_table(table, path)
    _write_text(schema_path_for(path), _dump_yaml(schema.to_mapping()))
    return schema


def _load_input(cfg: dict[str, Any]) -> tuple[FeatureTable, TableSchema]:
    if not cfg["input"]:
        raise ConfigError("no input file given (use --input or 'input' in the config)")
    path = Path(cfg["input"])
    if not path.is_file():
        raise ConfigError(f"input file not found: {path}")
    if cfg["schema"] is not None:
        schema = TableSchema.from_mapping(cfg["schema"])
    else:
        sp = schema_path_for(path)
        if not sp.is_file():
            raise ConfigError(f"no schema: give a 'schema' config section or provide {sp.name}")
        schema = TableSchema.from_mapping(yaml.safe_load(sp.read_text(encoding="utf-8")) or {})
    return load_table(path, schema), schema


def _group_by(value: str | None, schema: TableSchema | None) -> str | None:
    """CLI grouping name to FeatureTable.labels argument."""
    if value is None or value in ("group",):
        return None
    if schema is not None and value == schema.group_col:
        return None
    return value


def _harmonizer(cfg: dict[str, Any], schema: TableSchema | None) -> harmonize.Harmonizer | None:
    h = cfg["harmonize"]
    if not h["family"]:
        return None
    keep = CovariateSpec(h["keep"]).keep  # accepts comma-separated strings
    spec = CovariateSpec(
        keep, h["remove"], bool(h["expand_age_quadratic"]) and "age" in keep
    )
    n_pcs = h["pc"]
    if n_pcs is not None:
        if not isinstance(n_pcs, int) or n_pcs < 0:
            raise ConfigError("pc must be a non-negative integer")
        if h["family"] in ("linear", "combat") and n_pcs > 0:
            spec = spec.with_pcs(n_pcs)
            n_pcs = None
    return harmonize.Harmonizer(h["family"], spec, _group_by(h["group_by"], schema), n_pcs)


def _label(cfg_label: str | None, harmonizer: harmonize.Harmonizer | None) -> str:
    if cfg_label:
        return str(cfg_label)
    if harmonizer is None:
        return "raw"
    parts = [harmonizer.family]
    if harmonizer.spec.keep:
        parts.append("keep=" + "+".join(harmonizer.spec.keep))
    if harmonizer.spec.remove:
        parts.append("remove=" + "+".join(harmonizer.spec.remove))
    if harmonizer.family == "combatpp":
        parts.append(f"pc={harmonizer.n_components}")
    return " ".join(parts)


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_synth(cfg: dict[str, Any], out: Path) -> None:
    mapping = dict(cfg["synth"] or {})
    mapping.setdefault("seed", cfg["seed"])
    spec = synth.GenerativeSpec.from_mapping(mapping)
    table, truth = synth.generate(spec)
    write_table_with_schema(table, out / "data.csv")
    _write_json(
        out / "truth.json",
        {
            "spec": spec.to_mapping(),
            "gamma_true": truth.gamma_true,
            "delta_true": truth.delta_true,
            "beta_true": truth.beta_true,
            "alpha": truth.alpha,
            "w_true": truth.w_true,
            "regime": truth.regime,
        },
    )


def cmd_validate(cfg: dict[str, Any], out: Path) -> None:
    table, schema = _load_input(cfg)
    labels = table.group
    levels, counts = np.unique(labels, return_counts=True)
    dr = table.drop_report
    _write_json(
        out / "validation.json",
        {
            "n_subjects": table.n_subjects,
            "n_features": table.n_features,
            "features": list(table.feature_names),
            "groups": {str(g): int(c) for g, c in zip(levels, counts)},
            "covariates": {c: ("categorical" if table.is_categorical(c) else "numeric") for c in table.covariates},
            "rows_read": dr.n_read if dr else table.n_subjects,
            "rows_dropped": dr.n_dropped if dr else 0,
            "drop_reasons": list(dr.reasons) if dr else [],
            "schema": schema.to_mapping(),
        },
    )


def cmd_harmonize(cfg: dict[str, Any], out: Path) -> None:
    table, schema = _load_input(cfg)
    h = _harmonizer(cfg, schema)
    if h is None:
        raise ConfigError("harmonize needs a family (--family or harmonize.family)")
    model = h.fit(table)
    result = model.apply(table)
    write_table_with_schema(result, out / "harmonized.csv")
    harmonize.save_model(model, out / "model.json")


def _spearman_report(table: FeatureTable, features: Sequence[str]) -> dict[str, float]:
    if not features:
        return {}
    if "age" not in table.covariates:
        raise DataError("spearman_features needs an 'age' covariate")
    age = np.asarray(table.covariates["age"], dtype=float)
    return {f: stats.spearman(table.feature(f), age) for f in features}


def cmd_name_that_dataset(cfg: dict[str, Any], out: Path) -> None:
    table, schema = _load_input(cfg)
    c = cfg["classify"]
    h = _harmonizer(cfg, schema)
    res = classify.name_that_dataset(
        table,
        group_by=_group_by(c["group_by"], schema),
        fraction=float(c["fraction"]),
        seed=cfg["seed"],
        harmonizer=h,
        pca_mode=c["pca_mode"],
        n_trees=int(c["n_trees"]),
        predictors=c["predictors"],
        shuffle_labels=bool(c["shuffle_labels"]),
        n_jobs=cfg["threads"],
    )
    doc = {"command": "name-that-dataset", "configuration": _label(c["label"], h), "family": h.family if h else None}
    doc.update(res.to_dict())
    if c["spearman_features"]:
        harmonized = h.fit(table).apply(table) if h is not None else table
        doc["spearman_age"] = _spearman_report(harmonized, c["spearman_features"])
    _write_json(out / "metrics.json", doc)
    res.confusion.write_csv(out / "confusion.csv")


def cmd_age_loo(cfg: dict[str, Any], out: Path) -> None:
    table, schema = _load_input(cfg)
    c = cfg["classify"]
    h = _harmonizer(cfg, schema)
    gb = _group_by(c["group_by"], schema)
    common = dict(group_by=gb, target=c["target"], seed=cfg["seed"], n_trees=int(c["n_trees"]),
                  predictors=c["predictors"], n_jobs=cfg["threads"])
    raw = classify.leave_one_group_out(table, **common)
    doc: dict[str, Any] = {
        "command": "age-loo",
        "configuration": _label(c["label"], h),
        "family": h.family if h else None,
        "raw": raw.to_dict(),
    }
    rows = [[g, "raw", m] for g, m in zip(raw.groups, raw.mae)]
    final = raw
    if h is not None:
        harm = classify.leave_one_group_out(table, harmonizer=h, **common)
        doc["harmonized"] = harm.to_dict()
        rows += [[g, h.family, m] for g, m in zip(harm.groups, harm.mae)]
        try:
            w = classify.compare_logo(raw, harm)
            doc["wilcoxon"] = {"statistic": w.statistic, "pvalue": w.pvalue}
        except DataError as e:
            doc["wilcoxon"] = {"error": str(e)}
        final = harm
    doc["median_mae"] = final.median
    _write_json(out / "metrics.json", doc)
    _write_csv(out / "mae.csv", ["group", "pipeline", "mae"], rows)


def _causal_problem(table: FeatureTable, c: Mapping[str, Any], k: int) -> causal.CausalProblem:
    x = c["x"] if c["x"] is not None else list(table.feature_names)
    if isinstance(x, str):
        x = [s.strip() for s in x.split(",") if s.strip()]
    y = c["y"]
    if y in table.covariates:
        Y = np.asarray(table.covariates[y], dtype=float)
    elif y in table.feature_names:
        Y = table.feature(y)
    else:
        raise ConfigError(f"causal target {y!r} is neither a covariate nor a feature")
    if y in x:
        raise ConfigError("causal target cannot also be a cause")
    X = table.select_features(x).values
    return causal.CausalProblem(X, Y, k=k)


def cmd_causal(cfg: dict[str, Any], out: Path) -> None:
    table, schema = _load_input(cfg)
    c = cfg["causal"]
    h = _harmonizer(cfg, schema)
    if h is not None:
        table = h.fit(table).apply(table)
    k = int(c["k"])
    k_table = None
    if c["k_candidates"]:
        problem = _causal_problem(table, c, k)
        k, k_table = causal.select_k(problem, [int(v) for v in c["k_candidates"]], int(c["n_samples"]),
                                     derive_seed(cfg["seed"], "select-k"))
    problem = _causal_problem(table, c, k)
    res = causal.delta(problem, int(c["repetitions"]), cfg["seed"], int(c["n_samples"]))
    if k_table is not None:
        res = causal.DeltaResult(res.L_ca, res.L_co, res.N, res.repetitions, res.L_co_repetitions, k_table)
    label = _label(c["label"], h)
    doc = {"command": "causal", "configuration": label, "family": h.family if h else None, "k": k}
    doc.update(res.to_dict())
    _write_json(out / "causal.json", doc)
    row = res.summary_row(label)
    _write_csv(out / "causal.csv", list(row), [list(row.values())])


def _flatten_metrics(doc: Mapping[str, Any], fallback: str) -> dict[str, Any]:
    row: dict[str, Any] = {"configuration": doc.get("configuration") or fallback, "command": doc.get("command")}
    for key in ("family", "accuracy", "chance", "weighted_chance", "median_mae", "N", "delta", "delta_normalized"):
        if key in doc:
            row[key] = doc[key]
    if "L_ca" in doc:
        row["L_ca"], row["L_co"] = doc["L_ca"], doc["L_co"]
    if "range" in doc:
        row["delta_min"], row["delta_max"] = doc["range"]
    for f, rho in sorted((doc.get("spearman_age") or {}).items()):
        row[f"spearman_{f}"] = rho
    return row


def cmd_report(cfg: dict[str, Any], out: Path) -> None:
    inputs = cfg["report"]["inputs"]
    if not inputs:
        raise ConfigError("report needs metrics files (--input a.json b.json ...)")
    rows = []
    for p in inputs:
        path = Path(p)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except OSError:
            raise ConfigError(f"metrics file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise DataError(f"{path} is not valid JSON: {e.msg}") from None
        rows.append(_flatten_metrics(doc, path.parent.name or path.stem))
    extra = sorted({k for r in rows for k in r} - set(PRIMARY_REPORT_COLUMNS))
    present = [c for c in PRIMARY_REPORT_COLUMNS if any(c in r for r in rows)]
    header = present + extra
    _write_csv(out / "report.csv", header, [[r.get(c) for c in header] for r in rows])


HANDLERS: dict[str, Callable[[dict[str, Any], Path], None]] = {
    "synth": cmd_synth,
    "validate": cmd_validate,
    "harmonize": cmd_harmonize,
    "name-that-dataset": cmd_name_that_dataset,
    "age-loo": cmd_age_loo,
    "causal": cmd_causal,
    "report": cmd_report,
}


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="debias", description="Multi-site harmonization and bias analysis.")
    p.add_argument("--version", action="version", version=f"debias {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    def common(sp: argparse.ArgumentParser, data_input: bool = True) -> None:
        sp.add_argument("--config", help="YAML config file")
        sp.add_argument("--out-dir", dest="out_dir", help="output directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int, help="worker cap for tree ensembles")
        if data_input:
            sp.add_argument("--input", help="input CSV (schema from config or <name>.schema.yaml)")

    def harm(sp: argparse.ArgumentParser) -> None:
        sp.add_argument("--family", choices=harmonize.FAMILIES)
        sp.add_argument("--keep", help="comma-separated covariates to keep")
        sp.add_argument("--remove", help="comma-separated covariates to remove; substitute_pc(m) allowed")
        sp.add_argument("--pc", type=int, help="number of substitute-confounder PCs")
        sp.add_argument("--group-by", dest="group_by", help="grouping column, e.g. site or dataset")

    sp = sub.add_parser("synth", help="generate a synthetic multi-site table")
    common(sp, data_input=False)

    sp = sub.add_parser("validate", help="load and validate a table")
    common(sp)

    sp = sub.add_parser("harmonize", help="fit and apply a harmonization model")
    common(sp)
    harm(sp)

    sp = sub.add_parser("name-that-dataset", help="dataset fingerprinting accuracy")
    common(sp)
    harm(sp)
    sp.add_argument("--fraction", type=float, help="training fraction")

    sp = sub.add_parser("age-loo", help="leave-one-group-out age prediction")
    common(sp)
    harm(sp)

    sp = sub.add_parser("causal", help="causal versus confounded code lengths")
    common(sp)
    harm(sp)
    sp.add_argument("--k", type=int, help="latent dimension of the confounded model")
    sp.add_argument("--repetitions", type=int)

    sp = sub.add_parser("report", help="merge metrics files into one table")
    common(sp, data_input=False)
    sp.add_argument("--input", nargs="+", help="metrics JSON files")
    return p


def _configure_logging() -> None:
    level = os.environ.get("DEBIAS_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)


def run(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    cfg = resolve_config(args)
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    started = _dt.datetime.now(_dt.timezone.utc).isoformat()
    HANDLERS[args.command](cfg, out)
    _write_text(out / "resolved_config.yaml", _dump_yaml({"command": args.command, **cfg}))
    with (out / "run.log").open("a", encoding="utf-8") as fh:
        fh.write(f"{started} debias {__version__} {args.command} ok\n")
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    _configure_logging()
    try:
        return run(argv)
    except DebiasError as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    except ValueError as e:
        # malformed config values that slipped past explicit checks
        print(f"ConfigError: {e}", file=sys.stderr)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
