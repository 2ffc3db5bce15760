"""Command-line entry point.

    pagecl generate-bench --out data/
    pagecl train   --data data/domain1.csv --out-dir run/d1 --seed 0
    pagecl adapt   --checkpoint run/d1/model.ckpt --data data/domain2.csv --out-dir run/d2 --seed 0
    pagecl predict --checkpoint run/d2/model.ckpt --calibration run/d2/calibration_eicp.csv \\
                   --input new.csv --out predictions.csv
    pagecl evaluate --checkpoints run/d1/model.ckpt run/d2/model.ckpt \\
                    --data data/domain1.csv data/domain2.csv --calibration-dir run/d2 --out eval.json
    pagecl report  --record eval.json
    pagecl run     --config experiment.ini --out record.json

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from pagecl import conformal, experiment, metrics, nn
from pagecl.bench import BenchmarkSpec, write_benchmark
from pagecl.config import build_config, read_ini, to_ini
from pagecl.datapipe import (FeatureTransform, LabeledTable, SubjectStream, read_features,
                             read_table, split_subjects, window, write_table)
from pagecl.errors import CheckpointError, ConfigError, DataError, PageError, ShapeError

log = logging.getLogger("pagecl")

CHECKPOINT_NAME = "model.ckpt"
DOMAINS_KEY = "meta.domains_learned"


class _Parser(argparse.ArgumentParser):
    # usage errors are configuration errors (exit 1), not argparse's default 2
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser, seed_required: bool = False) -> None:
    p.add_argument("--config", help="INI config file")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, required=seed_required, help="master seed")
    p.add_argument("--epochs", type=int, help="shortcut for --set sgd.epochs=N")
    p.add_argument("--min-confidence", type=float)
    p.add_argument("--min-credibility", type=float)


def _load_values(args) -> dict:
    overrides = list(args.set)
    for flag, key in (("seed", "experiment.seed"), ("epochs", "sgd.epochs"),
                      ("min_confidence", "conformal.min_confidence"),
                      ("min_credibility", "conformal.min_credibility"),
                      ("strategy", "experiment.strategy")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append(f"{key}={value}")
    return read_ini(args.config, overrides)


def _config(args, domain_files=None) -> experiment.ExperimentConfig:
    values = _load_values(args)
    if domain_files:
        values.setdefault("experiment", {})["domain_files"] = tuple(str(p) for p in domain_files)
    return build_config(values)


def _write_json(obj, path) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True, allow_nan=False, default=_json_default)
    Path(path).write_text(text + "\n", encoding="utf-8")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


# -- checkpoint bundle -------------------------------------------------------


def save_bundle(path, model: nn.MlpModel, transform: FeatureTransform, domains_learned: int) -> None:
    aux = transform.to_arrays()
    aux[DOMAINS_KEY] = np.array([float(domains_learned)])
    Path(path).write_bytes(nn.save_checkpoint(model, aux))


def load_bundle(path) -> tuple[nn.MlpModel, FeatureTransform, int]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    model, aux = nn.load_bundle(data)
    transform = FeatureTransform.from_arrays(aux)
    if transform is None or DOMAINS_KEY not in aux:
        raise CheckpointError(f"{path}: checkpoint carries no input transform")
    if transform.output_dim != model.n_inputs:
        raise CheckpointError(f"{path}: transform and model input sizes differ")
    return model, transform, int(aux[DOMAINS_KEY][0])


def _check_width(table_dim: int, transform: FeatureTransform, what: str) -> None:
    if table_dim != transform.input_dim:
        raise ShapeError(f"{what} has {table_dim} feature columns, checkpoint expects "
                         f"{transform.input_dim}")


def _write_calibrations(out_dir: Path, icp, eicp) -> None:
    conformal.write_calibration(icp, out_dir / "calibration_icp.csv")
    conformal.write_calibration(eicp, out_dir / "calibration_eicp.csv")


def _step_summary(step: experiment.DomainStep, part, domain: int, cfg) -> dict:
    pred = nn.forward(step.model, part.test.features).argmax(axis=1)
    return {
        "domain": domain + 1,
        "config": cfg.to_dict(),
        "test_accuracy": metrics.accuracy(pred, part.test.labels),
        "best_epoch": step.report.best_epoch,
        "best_validation_metric": step.report.best_metric,
        "trace": experiment.step_trace(step),
    }


# -- subcommands -------------------------------------------------------------


def cmd_generate_bench(args) -> int:
    values = _load_values(args)
    bench = dict(values.get("bench", {}))
    for flag in ("shift", "scale", "dim"):
        if getattr(args, flag) is not None:
            bench[flag] = getattr(args, flag)
    if args.seed is not None:
        bench["seed"] = args.seed
    spec = BenchmarkSpec(**bench)
    paths = write_benchmark(spec, args.out)
    for p in paths:
        print(p)
    return 0


def _windowed(table: LabeledTable, rate_hz: float, window_s: float) -> LabeledTable:
    if table.subject_ids is None:
        raise DataError("windowing needs a subject_id column")
    streams = []
    for sid in np.unique(table.subject_ids):
        rows = np.flatnonzero(table.subject_ids == sid)
        if table.timestamps is not None:
            rows = rows[np.argsort(table.timestamps[rows], kind="stable")]
        labels = np.unique(table.labels[rows])
        if labels.size != 1:
            raise DataError(f"subject {sid} carries several labels; cannot window")
        start = float(table.timestamps[rows[0]]) if table.timestamps is not None else 0.0
        streams.append(SubjectStream(int(sid), int(labels[0]), rate_hz,
                                     [table.features[rows]], start))
    return window(streams, window_s, window_s)


def cmd_preprocess(args) -> int:
    table = read_table(args.input)
    if args.rate_hz is not None:
        table = _windowed(table, args.rate_hz, args.window_s)
    seed = args.seed if args.seed is not None else 0
    first, second = split_subjects(table, args.domain_fraction, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, t in enumerate((first, second), start=1):
        write_table(t, out / f"domain{i}.csv")
        print(f"{out / f'domain{i}.csv'}: {len(t)} rows, {np.unique(t.subject_ids).size} subjects")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args, [args.data])
    table = read_table(args.data)
    raw = experiment.split_domain(table, cfg)
    transform = experiment.fit_transform(raw, cfg)
    part = experiment.prepare(raw, transform, cfg, 0)
    n_classes = args.n_classes or experiment.n_classes_of(table)
    step = experiment.learn_first_domain(part, cfg, n_classes)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_bundle(out / CHECKPOINT_NAME, step.model, transform, 1)
    _write_calibrations(out, *experiment.calibrate(step, cfg))
    summary = _step_summary(step, part, 0, cfg)
    _write_json(summary, out / "summary.json")
    print(f"domain 1: test accuracy {summary['test_accuracy']:.4f} "
          f"(best epoch {step.report.best_epoch})")
    return 0


def cmd_adapt(args) -> int:
    cfg = _config(args, [args.data])
    model, transform, learned = load_bundle(args.checkpoint)
    table = read_table(args.data)
    _check_width(table.dim, transform, args.data)
    if table.labels.size and table.labels.max() >= model.n_classes:
        raise DataError(f"{args.data}: label {table.labels.max()} exceeds the model's classes")
    raw = experiment.split_domain(table, cfg)
    part = experiment.prepare(raw, transform, cfg, learned)
    step = experiment.adapt(model, part, cfg, learned)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_bundle(out / CHECKPOINT_NAME, step.model, transform, learned + 1)
    _write_calibrations(out, *experiment.calibrate(step, cfg))
    summary = _step_summary(step, part, learned, cfg)
    summary["strategy"] = cfg.strategy
    _write_json(summary, out / "summary.json")
    print(f"domain {learned + 1}: test accuracy {summary['test_accuracy']:.4f} "
          f"(best epoch {step.report.best_epoch}, strategy {cfg.strategy})")
    return 0


def cmd_predict(args) -> int:
    values = _load_values(args)
    cfg = build_config(values)
    model, transform, _ = load_bundle(args.checkpoint)
    calib = conformal.read_calibration(args.calibration)
    if calib.labels.size and calib.labels.max() >= model.n_classes:
        raise CheckpointError("calibration labels do not fit the checkpoint's classes")
    features, _ = read_features(args.input)
    if features.shape[0]:
        _check_width(features.shape[1], transform, args.input)
        features = transform.transform(features)
    outputs = conformal.predict_many(model, features.reshape(-1, model.n_inputs), calib,
                                     cfg.gamma, cfg.thresholds)
    with Path(args.out).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "confidence", "credibility", "certain"])
        for o in outputs:
            w.writerow([o.predicted_label, repr(o.confidence), repr(o.credibility), int(o.certain)])
    n_certain = sum(o.certain for o in outputs)
    print(f"{len(outputs)} predictions, {n_certain} certain")
    return 0


def evaluate_checkpoints(checkpoints, data_files, cfg, calibrations: dict) -> dict:
    """Accuracy matrix over a checkpoint sequence plus conformal tables for the last one."""
    if len(checkpoints) != len(data_files):
        raise ConfigError("need one data file per checkpoint, in learning order")
    bundles = [load_bundle(p) for p in checkpoints]
    transform = bundles[-1][1]
    tests = []
    for path in data_files:
        table = read_table(path)
        _check_width(table.dim, transform, path)
        tests.append(transform.apply(experiment.split_domain(table, cfg).test))
    acc = metrics.AccuracyMatrix(len(tests))
    for q, (model, _, _) in enumerate(bundles):
        for n in range(q + 1):
            pred = nn.forward(model, tests[n].features).argmax(axis=1)
            acc.record(n, q, metrics.accuracy(pred, tests[n].labels))
    model = bundles[-1][0]
    record = experiment.domain_metrics(model, tests, calibrations, cfg)
    record.update(accuracy_matrix=acc.tolist(), final_accuracy=acc.final().tolist(),
                  average_accuracy=metrics.average(acc.final()),
                  bwt=metrics.bwt(acc) if len(tests) > 1 else None,
                  checkpoints=[str(p) for p in checkpoints], domain_files=[str(p) for p in data_files])
    return record


def cmd_evaluate(args) -> int:
    cfg = _config(args, args.data)
    calibrations = {}
    if args.calibration_dir:
        for key in ("icp", "eicp"):
            path = Path(args.calibration_dir) / f"calibration_{key}.csv"
            if path.is_file():
                calibrations[key] = conformal.read_calibration(path)
    record = evaluate_checkpoints(args.checkpoints, args.data, cfg, calibrations)
    _write_json(record, args.out)
    print(render_record(record))
    return 0


def render_record(record: dict) -> str:
    lines = []
    if record.get("strategy"):
        lines.append(f"strategy: {record['strategy']}")
    final = record["final_accuracy"]
    lines.append("accuracy per domain: " + "  ".join(f"{a:.4f}" for a in final))
    lines.append(f"average accuracy:    {record['average_accuracy']:.4f}")
    if record.get("f1") is not None:
        lines.append("F1 per domain:       " + "  ".join(f"{f:.4f}" for f in record["f1"]))
        lines.append(f"average F1:          {record['average_f1']:.4f}")
    if record.get("bwt") is not None:
        lines.append(f"BWT:                 {record['bwt']:+.4f}")
    if "buffer_bytes" in record:
        lines.append(f"buffer (bytes):      {record['buffer_bytes']}")
    cp = record.get("conformal", {})
    if cp.get("icp") and cp.get("eicp"):
        def table(d):
            return {k: metrics.CpConfusion(v["certain_correct"], v["certain_incorrect"],
                                           v["uncertain_correct"], v["uncertain_incorrect"])
                    for k, v in d.items()}
        lines.append("")
        lines.append(metrics.render_cp_table(table(cp["icp"]), table(cp["eicp"])))
    return "\n".join(lines)


def cmd_report(args) -> int:
    try:
        record = json.loads(Path(args.record).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read record {args.record}: {exc}") from exc
    print(render_record(record))
    return 0


def cmd_run(args) -> int:
    cfg = _config(args, args.data)
    record = experiment.run_experiment(cfg)
    if args.out:
        _write_json(record, args.out)
    if args.dump_config:
        Path(args.dump_config).write_text(to_ini(cfg), encoding="utf-8")
    print(render_record(record))
    return 0


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pagecl", description="Past-agnostic generative replay toolkit.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate-bench", help="write the synthetic multi-domain benchmark")
    _common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--shift", type=float)
    p.add_argument("--scale", type=float)
    p.add_argument("--dim", type=int)
    p.set_defaults(func=cmd_generate_bench)

    p = sub.add_parser("preprocess", help="window a raw CSV and split it into two domains")
    _common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--domain-fraction", type=float, default=0.8)
    p.add_argument("--rate-hz", type=float, help="treat rows as samples at this rate and window them")
    p.add_argument("--window-s", type=float, default=15.0)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="learn the first domain from scratch")
    _common(p, seed_required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-classes", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("adapt", help="adapt a checkpoint to a new domain")
    _common(p, seed_required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--strategy", choices=("page", "naive-finetune"))
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("predict", help="conformal predictions for new rows")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--calibration", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score a checkpoint sequence on every domain's test split")
    _common(p)
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--calibration-dir")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="render a JSON record as text tables")
    p.add_argument("--record", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("run", help="full experiment for one strategy")
    _common(p)
    p.add_argument("--data", nargs="*", help="domain CSVs in order (default: synthetic benchmark)")
    p.add_argument("--strategy", choices=experiment.STRATEGIES)
    p.add_argument("--out", help="JSON record path")
    p.add_argument("--dump-config", help="write the effective config as INI")
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except PageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
