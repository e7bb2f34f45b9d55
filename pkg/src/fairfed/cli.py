"""Command-line experiment runner.

Subcommands: gen (synthesize a dataset), train (run a config end to end),
eval (score a checkpoint), verify (built-in oracle suite), report (tidy CSV
plus figures across runs).

Exit codes: 0 success, 2 config error, 3 data error, 4 verification failure.
"""

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .core import (
    ConfigError,
    DataError,
    FederatedDataset,
    ModelParams,
    RunConfig,
    build_group_index,
)
from .datagen import (
    PartitionSpec,
    TabularSchema,
    load_dataset,
    load_tabular_csv,
    partition,
    save_dataset,
    split_holdout,
    synth_feature_shift,
    synth_label_shift,
)
from .engine import (
    ServerState,
    evaluate_agnostic,
    load_checkpoint,
    resume_train,
    save_checkpoint,
    train,
    worker_count,
)
from .metrics import REPORT_LEVELS, group_losses_full, report_for
from .models import ModelSpec
from .report import build_report
from .selfcheck import FAULTS, run_suite

__all__ = ["main", "build_parser", "load_experiment", "METRICS_HEADER"]

METRICS_HEADER = (
    "round",
    "avg_acc_attr",
    "disparity_attr",
    "robustness_attr",
    "avg_acc_client",
    "disparity_client",
    "robustness_client",
    "max_group_loss",
)

_GEN_KEYS = {
    "setting",
    "shift_kind",
    "client_count",
    "attribute_arity",
    "samples_per_client",
    "samples_per_cell",
    "concentration",
    "size_ratio",
    "seed",
    "feature_dim",
    "class_count",
    "mean_scale",
    "shift_scale",
    "scale_variation",
}


def _require_dict(obj, where):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} must be a JSON object")
    return obj


def _read_json(path, where) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {where} {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON: {exc}") from exc
    return _require_dict(doc, where)


def _check_keys(doc, allowed, where):
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown fields: {', '.join(unknown)}")


def _parse_generator(doc, where, default_seed=None):
    """Validated generator recipe: (PartitionSpec, synth kwargs, seed, kind)."""
    _check_keys(doc, _GEN_KEYS, where)
    for key in ("setting", "shift_kind", "client_count", "attribute_arity"):
        if key not in doc:
            raise ConfigError(f"{where}: missing required field {key!r}")
    cells = doc.get("samples_per_cell")
    if cells is not None:
        cells = np.asarray(cells, dtype=np.int64)
    spec = PartitionSpec.build(
        setting=doc["setting"],
        shift_kind=doc["shift_kind"],
        client_count=int(doc["client_count"]),
        attribute_arity=int(doc["attribute_arity"]),
        samples_per_client=int(doc.get("samples_per_client", 200)),
        samples_per_cell=cells,
        concentration=doc.get("concentration"),
        size_ratio=doc.get("size_ratio"),
    )
    seed = doc.get("seed", default_seed)
    if seed is None:
        raise ConfigError(f"{where}: no seed given (field 'seed' or --seed)")
    synth = {}
    if doc["shift_kind"] == "feature":
        if "class_count" in doc:
            synth["class_count"] = int(doc["class_count"])
        if "feature_dim" in doc:
            synth["feature_dim"] = int(doc["feature_dim"])
        if "mean_scale" in doc:
            synth["mean_scale"] = float(doc["mean_scale"])
        if "shift_scale" in doc:
            synth["shift_scale"] = float(doc["shift_scale"])
        if "scale_variation" in doc:
            raise ConfigError(f"{where}: scale_variation applies to label shift only")
    else:
        if "class_count" in doc:
            raise ConfigError(f"{where}: class_count applies to feature shift only")
        if "shift_scale" in doc:
            raise ConfigError(f"{where}: shift_scale applies to feature shift only")
        if "feature_dim" in doc:
            synth["feature_dim"] = int(doc["feature_dim"])
        if "mean_scale" in doc:
            synth["mean_scale"] = float(doc["mean_scale"])
        if "scale_variation" in doc:
            synth["scale_variation"] = float(doc["scale_variation"])
    return spec, synth, int(seed)


def _generate(spec: PartitionSpec, synth: dict, seed: int) -> FederatedDataset:
    if spec.shift_kind == "feature":
        return synth_feature_shift(spec, seed, **synth)
    return synth_label_shift(spec, seed, **synth)


def load_experiment(path) -> dict:
    """Parse and validate an experiment config file."""
    doc = _read_json(path, "experiment config")
    _check_keys(doc, ("data", "model", "run", "eval", "output_dir"), "experiment config")
    for key in ("data", "run"):
        if key not in doc:
            raise ConfigError(f"experiment config: missing required section {key!r}")

    run_cfg = RunConfig.from_dict(_require_dict(doc["run"], "run section"))

    data = _require_dict(doc["data"], "data section")
    sources = [k for k in ("generator", "path", "csv") if k in data]
    if len(sources) != 1:
        raise ConfigError("data section needs exactly one of: generator, path, csv")
    _check_keys(data, ("generator", "path", "csv"), "data section")
    parsed_data = {"source": sources[0]}
    if sources[0] == "generator":
        gen = _require_dict(data["generator"], "data.generator")
        parsed_data["generator"] = _parse_generator(gen, "data.generator", run_cfg.seed)
    elif sources[0] == "path":
        p = Path(data["path"])
        if not p.exists():
            raise ConfigError(f"data.path: {p} does not exist")
        parsed_data["path"] = p
    else:
        csv_doc = _require_dict(data["csv"], "data.csv")
        _check_keys(csv_doc, ("path", "schema", "partition"), "data.csv")
        for key in ("path", "schema", "partition"):
            if key not in csv_doc:
                raise ConfigError(f"data.csv: missing required field {key!r}")
        p = Path(csv_doc["path"])
        if not p.exists():
            raise ConfigError(f"data.csv.path: {p} does not exist")
        part = dict(_require_dict(csv_doc["partition"], "data.csv.partition"))
        part.setdefault("shift_kind", "label")
        parsed_data["csv"] = (
            p,
            TabularSchema.from_dict(_require_dict(csv_doc["schema"], "data.csv.schema")),
            _parse_generator(part, "data.csv.partition", run_cfg.seed),
        )

    model_doc = _require_dict(doc.get("model", {"kind": "linear"}), "model section")
    _check_keys(model_doc, ("kind", "hidden_width"), "model section")
    kind = model_doc.get("kind", "linear")
    if kind not in ("linear", "mlp"):
        raise ConfigError(f"model.kind must be linear or mlp, got {kind!r}")
    hidden = int(model_doc.get("hidden_width", 16 if kind == "mlp" else 0))

    eval_doc = _require_dict(doc.get("eval", {}), "eval section")
    _check_keys(eval_doc, ("levels", "holdout_fraction", "agnostic_settings"), "eval section")
    levels = eval_doc.get("levels", ["attribute", "client"])
    if not isinstance(levels, list) or any(lv not in REPORT_LEVELS for lv in levels):
        raise ConfigError(f"eval.levels must be a list drawn from {REPORT_LEVELS}")
    holdout = float(eval_doc.get("holdout_fraction", 0.2))
    if not (0.0 <= holdout < 1.0):
        raise ConfigError("eval.holdout_fraction must lie in [0, 1)")
    agnostic = []
    for i, entry in enumerate(eval_doc.get("agnostic_settings", [])):
        agnostic.append(
            _parse_generator(
                _require_dict(entry, f"eval.agnostic_settings[{i}]"),
                f"eval.agnostic_settings[{i}]",
                run_cfg.seed + 1000 + i,
            )
        )
    if "agnostic" in levels and not agnostic:
        raise ConfigError("eval.levels includes 'agnostic' but no agnostic_settings given")

    return {
        "data": parsed_data,
        "model": (kind, hidden),
        "run": run_cfg,
        "levels": tuple(levels),
        "holdout_fraction": holdout,
        "agnostic_settings": agnostic,
        "output_dir": doc.get("output_dir"),
    }


def _materialize(parsed_data) -> FederatedDataset:
    source = parsed_data["source"]
    if source == "generator":
        spec, synth, seed = parsed_data["generator"]
        return _generate(spec, synth, seed)
    if source == "path":
        return load_dataset(parsed_data["path"])
    path, schema, (spec, _, seed) = parsed_data["csv"]
    pooled = load_tabular_csv(path, schema)
    return partition(pooled, spec, seed)


def _model_for(data: FederatedDataset, kind: str, hidden: int) -> ModelSpec:
    return ModelSpec(kind, data.feature_dim, data.class_count, hidden_width=hidden)


def _fmt(x: float) -> str:
    return "%.17g" % x


def _write_metrics_csv(path, trace) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        for rec in trace.records:
            ma, mc = rec.metrics_attribute, rec.metrics_client
            if ma is None or mc is None:
                raise ConfigError(f"round {rec.round_index} has no metrics to write")
            writer.writerow(
                [
                    rec.round_index,
                    _fmt(ma.avg_acc),
                    _fmt(ma.disparity),
                    _fmt(ma.robustness),
                    _fmt(mc.avg_acc),
                    _fmt(mc.disparity),
                    _fmt(mc.robustness),
                    _fmt(rec.max_group_loss),
                ]
            )


def _infer_model_spec(theta_len: int, data: FederatedDataset) -> ModelSpec:
    """Recover the model shape from a bare parameter vector.

    Linear takes precedence when sizes collide; pass an experiment config to
    force a specific architecture.
    """
    d, C = data.feature_dim, data.class_count
    if theta_len == 1 and d == 1 and C == 1:
        return ModelSpec("quadratic", 1, 1)
    if theta_len == C * d + C:
        return ModelSpec("linear", d, C)
    rem = theta_len - C
    width = d + 1 + C
    if rem > 0 and rem % width == 0:
        return ModelSpec("mlp", d, C, hidden_width=rem // width)
    raise ConfigError(
        f"cannot match {theta_len} parameters to a model over "
        f"{d} features and {C} classes"
    )


# ============================================================================
# subcommands
# ============================================================================


def cmd_gen(args) -> int:
    doc = _read_json(args.config, "generator config")
    spec, synth, seed = _parse_generator(doc, "generator config", args.seed)
    if args.seed is not None:
        seed = args.seed
    data = _generate(spec, synth, seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(data, out)
    cells = spec.samples_per_cell
    width = max(6, len(str(int(cells.max()))) + 2)
    header = "client" + "".join(f"{f'a{k}':>{width}}" for k in range(spec.attribute_arity))
    print(f"wrote {out} ({data.n} samples, {len(data.clients)} clients)")
    print(header)
    for i in range(spec.client_count):
        row = "".join(f"{int(cells[i, k]):>{width}d}" for k in range(spec.attribute_arity))
        print(f"{i:>6d}{row}")
    return 0


def cmd_train(args) -> int:
    exp = load_experiment(args.config)
    out_dir = Path(args.out) if args.out else None
    if out_dir is None and exp["output_dir"]:
        out_dir = Path(exp["output_dir"])
    if out_dir is None:
        raise ConfigError("no output directory (give --out or set output_dir)")
    out_dir.mkdir(parents=True, exist_ok=True)

    cfg = exp["run"]
    full = _materialize(exp["data"])
    if exp["holdout_fraction"] > 0.0:
        train_ds, eval_ds = split_holdout(full, exp["holdout_fraction"], cfg.seed)
    else:
        train_ds, eval_ds = full, full
    spec = _model_for(train_ds, *exp["model"])

    save_dataset(train_ds, out_dir / "train.ffd")
    save_dataset(eval_ds, out_dir / "eval.ffd")

    threads = worker_count()
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        trace = resume_train(
            cfg, train_ds, ckpt, spec=spec, eval_data=eval_ds, threads=threads
        )
    else:
        trace = train(cfg, train_ds, spec=spec, eval_data=eval_ds, threads=threads)

    _write_metrics_csv(out_dir / "metrics.csv", trace)

    index = build_group_index(train_ds)
    state = ServerState(
        theta=trace.final_theta,
        theta_tilde_prev=trace.final_theta,
        lam=trace.final_lambda,
        round=cfg.R,
    )
    save_checkpoint(out_dir / "checkpoint.json", cfg, state, index)

    last = trace.records[-1] if trace.records else None
    summary = {
        "format_version": 1,
        "config": cfg.to_dict(),
        "config_digest": cfg.digest(),
        "data_digest": index.digest(),
        "model": {
            "kind": spec.kind,
            "feature_dim": spec.feature_dim,
            "class_count": spec.class_count,
            "hidden_width": spec.hidden_width,
        },
        "rounds": cfg.R,
        "levels": list(exp["levels"]),
        "final_metrics": {},
        "artifacts": {
            "metrics_csv": "metrics.csv",
            "checkpoint": "checkpoint.json",
            "train_data": "train.ffd",
            "eval_data": "eval.ffd",
        },
    }
    if last is not None and last.metrics_attribute is not None:
        summary["final_metrics"]["attribute"] = last.metrics_attribute.to_dict()
        summary["final_metrics"]["client"] = last.metrics_client.to_dict()
        summary["final_max_group_loss"] = last.max_group_loss
    if exp["agnostic_settings"] and "agnostic" in exp["levels"]:
        settings = [_generate(s, k, sd) for s, k, sd in exp["agnostic_settings"]]
        reports = evaluate_agnostic(trace.final_theta, settings, spec)
        summary["agnostic_reports"] = [r.to_dict() for r in reports]
    (out_dir / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
    print(f"wrote {out_dir / 'metrics.csv'} ({len(trace.records)} rounds)")
    print(f"wrote {out_dir / 'checkpoint.json'}")
    print(f"wrote {out_dir / 'summary.json'}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    theta = ModelParams(np.asarray(ckpt["theta"], dtype=np.float64))

    if args.config:
        exp = load_experiment(args.config)
        kind, hidden = exp["model"]
        agnostic_settings = exp["agnostic_settings"]
    else:
        kind = hidden = None
        agnostic_settings = []

    if args.data:
        data = load_dataset(args.data)
    else:
        sibling = Path(args.checkpoint).parent / "eval.ffd"
        if not sibling.exists():
            raise ConfigError("no --data given and no eval.ffd next to the checkpoint")
        data = load_dataset(sibling)

    spec = (
        _model_for(data, kind, hidden)
        if kind is not None
        else _infer_model_spec(len(theta), data)
    )
    if spec.param_count() != len(theta):
        raise ConfigError(
            f"checkpoint has {len(theta)} parameters but the model needs "
            f"{spec.param_count()}"
        )

    if args.level == "agnostic" and agnostic_settings:
        settings = [_generate(s, k, sd) for s, k, sd in agnostic_settings]
        reports = evaluate_agnostic(theta, settings, spec)
        doc = {"level": "agnostic", "reports": [r.to_dict() for r in reports]}
    else:
        report = report_for(theta, data, spec, args.level)
        doc = report.to_dict()
        index = build_group_index(data)
        doc["max_group_loss"] = float(group_losses_full(theta, data, index, spec).max())
    text = json.dumps(doc, sort_keys=True, indent=1)
    if args.out:
        Path(args.out).write_text(text + "\n")
        print(f"wrote {args.out}")
    else:
        print(text)
    return 0


def cmd_verify(args) -> int:
    results = run_suite(args.seed, trials=args.trials, fault=args.inject_fault)
    width = max(len(r.name) for r in results)
    failed = 0
    for r in results:
        mark = "ok " if r.ok else "FAIL"
        print(f"[{mark}] {r.name:<{width}}  {r.detail}")
        if not r.ok:
            failed += 1
    total = len(results)
    print(f"{total - failed}/{total} checks passed")
    return 4 if failed else 0


def cmd_report(args) -> int:
    outcome = build_report(args.runs, args.out)
    print(f"wrote {outcome['table']} ({outcome['rows']} rows)")
    for fig in outcome["figures"]:
        print(f"wrote {fig}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fairfed",
        description="Group-robust federated training simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic federated dataset")
    p.add_argument("--config", required=True, help="generator spec JSON")
    p.add_argument("--out", required=True, help="output dataset path")
    p.add_argument("--seed", type=int, default=None, help="override the generator seed")
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train", help="run an experiment config")
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--out", default=None, help="run output directory")
    p.add_argument("--checkpoint", default=None, help="resume from this checkpoint")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True, help="checkpoint JSON")
    p.add_argument("--data", default=None, help="dataset container to score")
    p.add_argument("--config", default=None, help="experiment config (model shape)")
    p.add_argument(
        "--level",
        default="client",
        choices=REPORT_LEVELS,
        help="reporting level",
    )
    p.add_argument("--out", default=None, help="write the report JSON here")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("verify", help="run the built-in oracle suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=1)
    p.add_argument(
        "--inject-fault",
        default=None,
        choices=FAULTS,
        help=argparse.SUPPRESS,
    )
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("report", help="tidy CSV and figures across runs")
    p.add_argument("--out", required=True, help="report output directory")
    p.add_argument("runs", nargs="+", help="run directories with metrics.csv")
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
