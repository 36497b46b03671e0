"""Command-line front end: ``engagefuse <command> ...``.

Every command exits 0 on success and prints a one-line diagnostic with a
nonzero exit code on failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from engagefuse.config import PROTOCOLS, RunConfig, load_run_config
from engagefuse.domain import MODALITIES, SECTIONS, EngagementLabel, SectionType
from engagefuse.errors import EngageError
from engagefuse.evaluation import balance, run_experiment, train_modality_forests
from engagefuse.features import extract_dataset, feature_matrix, infer_schema
from engagefuse.fileio import (
    ModelBundle,
    Prediction,
    atomic_write_text,
    load_dataset,
    load_instances,
    load_model,
    save_model,
    schema_from_feature_names,
    write_dataset,
    write_instances,
    write_predictions,
)
from engagefuse.forest import mix_seed
from engagefuse.fusion import pool_trees
from engagefuse.simulate import load_sim_config, simulate_dataset

PROG = "engagefuse"


def _run_config(args) -> RunConfig:
    config = load_run_config(args.config)
    return config.with_overrides(seed=getattr(args, "seed", None), protocol=getattr(args, "protocol", None))


def cmd_generate(args) -> None:
    config = load_sim_config(args.config)
    if args.seed is not None:
        config = config.with_seed(args.seed)
    sims = simulate_dataset(config)
    out = Path(args.out)
    write_dataset(out, [s.data for s in sims],
                  states={s.data.session_id: (s.track.t_s, s.track.states) for s in sims})
    atomic_write_text(out / "sim_config.json", json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(sims)} sessions to {out}")


def cmd_extract(args) -> None:
    config = _run_config(args)
    sessions = load_dataset(args.dataset)
    schema = config.feature_schema
    if schema is None:
        schema = infer_schema(s for data in sessions for stream in data.samples.values() for s in stream)
    instances = extract_dataset(sessions, schema, config.window_s, config.hop_s)
    write_instances(args.out, instances)
    print(f"wrote {len(instances)} instances to {args.out}")


def cmd_train(args) -> None:
    config = _run_config(args)
    instances = load_instances(args.instances)
    if args.section:
        section = SectionType(args.section)
        instances = [inst for inst in instances if inst.section is section]
    if not instances:
        raise EngageError("no instances to train on")
    train = balance(instances, mix_seed(config.seed, 0), "train")
    params = {m: config.forest_params(m) for m in MODALITIES}
    forests = train_modality_forests(train, params, mix_seed(config.seed, 1))
    schema = schema_from_feature_names({m: instances[0].features[m].names for m in MODALITIES})
    metadata = {
        "seed": config.seed,
        "config_hash": config.config_hash(),
        "section": args.section,
        "train_instances": len(train),
    }
    save_model(ModelBundle(forests, schema, metadata), args.out)
    print(f"trained on {len(train)} balanced instances; model written to {args.out}")


def cmd_predict(args) -> None:
    expected = load_run_config(args.config).config_hash() if args.config else None
    bundle = load_model(args.model, expected)
    instances = load_instances(args.instances)
    predictions = []
    if instances:
        for m in MODALITIES:
            if instances[0].features[m].names != bundle.forests[m].feature_names:
                raise EngageError(f"{m} features in {args.instances} do not match the model")
        X = {m: feature_matrix(instances, m) for m in MODALITIES}
        votes = pool_trees(bundle.forests).votes_batch(X)
        on_fraction = votes[:, 0] / votes.sum(axis=1)
        labels = np.where(votes[:, 1] > votes[:, 0], int(EngagementLabel.OFF_TASK), int(EngagementLabel.ON_TASK))
        predictions = [
            Prediction(inst.session_id, inst.student_id, inst.window.index, inst.section,
                       EngagementLabel(int(lab)), float(conf))
            for inst, lab, conf in zip(instances, labels, on_fraction)
        ]
    write_predictions(args.out, predictions)
    print(f"wrote {len(predictions)} predictions to {args.out}")


def cmd_evaluate(args) -> None:
    config = _run_config(args)
    instances = load_instances(args.instances)
    report = run_experiment(instances, config, jobs=args.jobs)
    out = Path(args.out)
    atomic_write_text(out / "metrics.json", report.to_json())
    atomic_write_text(out / "metrics.csv", report.to_long_csv())
    sys.stdout.write(report.render_text())


def cmd_report(args) -> None:
    from engagefuse.evaluation import MetricsReport
    from engagefuse.plotting import save_f1_figure

    try:
        text = Path(args.metrics).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise EngageError(f"{args.metrics}: file not found") from None
    report = MetricsReport.from_json(text)
    out = Path(args.out)
    atomic_write_text(out / "table.txt", report.render_text())
    atomic_write_text(out / "table.csv", report.render_csv())
    save_f1_figure(report, out / "f1.png")
    sys.stdout.write(report.render_text())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=PROG, description="Multimodal engagement detection with tree-pool fusion.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="simulate a dataset directory")
    p.add_argument("--config", help="simulation config JSON (default: shipped)")
    p.add_argument("--seed", type=int, help="master seed override")
    p.add_argument("--out", required=True, help="dataset directory to write")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("extract", help="dataset directory -> instances CSV")
    p.add_argument("dataset")
    p.add_argument("--config", help="run config JSON (window, hop, feature schema)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="instances CSV -> model bundle")
    p.add_argument("instances")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--section", choices=[str(s) for s in SECTIONS], help="train on one section only")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="model bundle + instances -> predictions CSV")
    p.add_argument("model")
    p.add_argument("instances")
    p.add_argument("--config", help="warn if the model was trained under a different config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="instances + run config -> metrics.json, metrics.csv")
    p.add_argument("instances")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--protocol", choices=PROTOCOLS)
    p.add_argument("--jobs", type=int, default=1, help="worker processes; never changes results")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="metrics.json -> table.txt, table.csv, f1.png")
    p.add_argument("metrics")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "jobs", 1) < 1:
        print(f"{PROG}: error: --jobs must be at least 1", file=sys.stderr)
        return 2
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            args.func(args)
            status = 0
        except (EngageError, OSError, ValueError) as exc:
            message = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
            print(f"{PROG}: error: {message}", file=sys.stderr)
            status = 1
    seen = set()
    for w in caught:
        text = str(w.message).splitlines()[0]
        if text not in seen:
            seen.add(text)
            print(f"{PROG}: warning: {text}", file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
