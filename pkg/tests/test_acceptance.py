"""The seven acceptance criteria, each at its stated tolerance.

Every test prints one ``ACCEPTANCE <n> <name>: PASS|FAIL (...)`` line; the lines
are repeated in the pytest terminal summary.
"""

import math
import sys
import time
import warnings
from dataclasses import replace

import numpy as np
import pytest

from engagefuse.cli import main
from engagefuse.config import load_run_config, shipped_config_path
from engagefuse.domain import (
    MODALITIES,
    SECTIONS,
    AnnotatorMark,
    EngagementLabel,
    SectionType,
    fuse_annotations,
    label_windows,
    make_windows,
)
from engagefuse.evaluation import (
    ConfusionMatrix,
    UndefinedF1Warning,
    balance,
    class_scores,
    holdout_split_per_student,
    loso_folds,
    run_experiment,
)
from engagefuse.errors import ProtocolError
from engagefuse.features import extract_dataset, infer_schema
from engagefuse.forest import Forest, ForestParams, Internal, Leaf, Split
from engagefuse.fusion import fuse_confidence_sum, fuse_pooled, pool_trees
from engagefuse.simulate import AnnotatorNoise, load_sim_config, markov_states, simulate_annotators, simulate_dataset


def random_tree(rng, n_features, depth):
    if depth == 0 or rng.random() < 0.3:
        on, off = (int(v) for v in rng.integers(0, 4, 2))
        return Leaf(on, off) if on + off else Leaf(1, 0)
    return Internal(Split(int(rng.integers(n_features)), float(rng.normal())),
                    random_tree(rng, n_features, depth - 1), random_tree(rng, n_features, depth - 1))


def test_fusion_equivalence(acceptance):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    triples = inputs = ties = agree = 0
    while triples < 1000:
        n_trees = int(rng.integers(1, 9))
        forests = {}
        for m in MODALITIES:
            d = int(rng.integers(1, 6))
            trees = [random_tree(rng, d, 4) for _ in range(n_trees)]
            forests[m] = Forest(m, trees, tuple(f"f{i}" for i in range(d)), ForestParams(n_trees=n_trees), 0)
        pool = pool_trees(forests)
        for _ in range(5):
            x = {m: rng.normal(size=forests[m].n_features) for m in MODALITIES}
            pooled, votes = fuse_pooled(pool, x)
            summed, _ = fuse_confidence_sum(forests, x)
            inputs += 1
            agree += pooled is summed
            ties += votes[EngagementLabel.ON_TASK] == votes[EngagementLabel.OFF_TASK]
        triples += 1
    elapsed = time.perf_counter() - start
    ok = agree == inputs and ties > 0 and elapsed < 10.0
    acceptance(1, "fusion-equivalence", ok,
               f"{triples} triples, {agree}/{inputs} inputs agree, {ties} exact ties, {elapsed:.2f} s < 10 s")


def brute_force_f1(pairs, positive):
    tp = fp = fn = 0
    for pred, truth in pairs:
        if pred == positive and truth == positive:
            tp += 1
        elif pred == positive:
            fp += 1
        elif truth == positive:
            fn += 1
    if tp + fp + fn == 0:
        return 0.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)


def test_metric_oracle(acceptance):
    rng = np.random.default_rng(7)
    worst = 0.0
    cases = 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UndefinedF1Warning)
        for case in range(300):
            n = int(rng.integers(1, 200))
            # skewed cases so empty classes and perfect predictors show up
            p_on = [0.0, 1.0, rng.random()][case % 3]
            truth = (rng.random(n) >= p_on).astype(int)
            pred = np.where(rng.random(n) < rng.random(), truth, 1 - truth)
            pairs = list(zip(pred.tolist(), truth.tolist()))
            scores = class_scores(ConfusionMatrix.from_predictions(pred, truth))
            for label, row in ((0, "OnTask"), (1, "OffTask")):
                worst = max(worst, abs(scores[row] - brute_force_f1(pairs, label)))
            cases += 1
    acceptance(2, "metric-oracle", worst <= 1e-12, f"{cases} cases, max |diff| = {worst:.1e} <= 1e-12")


def test_windowing_arithmetic(acceptance):
    mismatches = []
    for duration in range(0, 1001):
        expected = []
        start = 0
        while start + 8 <= duration:
            expected.append((float(start), float(start + 8)))
            start += 4
        got = [(w.start_s, w.end_s) for w in make_windows(duration, 8, 4)]
        if got != expected:
            mismatches.append(duration)
    n2400 = len(make_windows(2400, 8, 4))
    ok = not mismatches and n2400 == 599 == math.floor((2400 - 8) / 4) + 1
    acceptance(3, "windowing", ok, f"durations 0-1000 mismatches={len(mismatches)}, 2400 s -> {n2400} windows")


def test_protocol_hygiene(acceptance):
    base = load_sim_config()
    rng = np.random.default_rng(11)
    folds = splits = balanced = skipped = 0
    problems = []
    for k in range(50):
        config = replace(base.with_seed(int(rng.integers(2**31))), n_students=int(rng.integers(2, 6)),
                         duration_s=240.0,
                         schedule=((0.0, 120.0, SectionType.INSTRUCTIONAL), (120.0, 240.0, SectionType.ASSESSMENT)))
        sessions = [s.data for s in simulate_dataset(config)]
        instances = extract_dataset(sessions, infer_schema(
            s for d in sessions for v in d.samples.values() for s in v))
        for section in SECTIONS:
            subset = [i for i in instances if i.section is section]
            train, test = holdout_split_per_student(subset, 0.8)
            splits += 1
            if {i.key for i in train} & {i.key for i in test}:
                problems.append(f"dataset {k}: holdout window overlap")
            for fold in loso_folds(subset):
                folds += 1
                if {i.student_id for i in fold.train_instances} & {i.student_id for i in fold.test_instances}:
                    problems.append(f"dataset {k}: LOSO student overlap")
                for seed in range(3):
                    try:
                        chosen = balance(fold.train_instances, seed)
                    except ProtocolError:
                        skipped += 1
                        continue
                    balanced += 1
                    on = sum(i.label is EngagementLabel.ON_TASK for i in chosen)
                    if on * 2 != len(chosen):
                        problems.append(f"dataset {k}: unbalanced set {on}/{len(chosen)}")
    acceptance(4, "protocol-hygiene", not problems,
               f"50 datasets, {folds} LOSO folds, {splits} holdout splits, {balanced} balanced sets "
               f"({skipped} single-class folds refused), {len(problems)} violations")


def test_determinism(acceptance, tmp_path, capsys):
    run_cfg = str(shipped_config_path("run_acceptance.json"))
    assert main(["generate", "--seed", "0", "--out", str(tmp_path / "ds")]) == 0
    assert main(["extract", str(tmp_path / "ds"), "--out", str(tmp_path / "inst.csv")]) == 0
    outputs = {}
    for name, jobs in (("a", "1"), ("b", "1"), ("c", "3")):
        out = tmp_path / name
        assert main(["evaluate", str(tmp_path / "inst.csv"), "--config", run_cfg, "--seed", "5",
                     "--jobs", jobs, "--out", str(out)]) == 0
        assert main(["report", str(out / "metrics.json"), "--out", str(out / "report")]) == 0
        outputs[name] = {p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}
    capsys.readouterr()
    same_seed = outputs["a"] == outputs["b"]
    same_jobs = outputs["a"] == outputs["c"]
    acceptance(5, "determinism", same_seed and same_jobs and len(outputs["a"]) == 5,
               f"{len(outputs['a'])} files; repeat run identical={same_seed}, --jobs 1 vs 3 identical={same_jobs}")


def test_qualitative_reproduction(acceptance):
    sim = load_sim_config()
    run = load_run_config(shipped_config_path("run_acceptance.json"))
    start = time.perf_counter()
    cells = {}
    for seed in range(10):
        sessions = [s.data for s in simulate_dataset(sim.with_seed(seed))]
        instances = extract_dataset(sessions, infer_schema(
            s for d in sessions for v in d.samples.values() for s in v))
        report = run_experiment(instances, run.with_overrides(seed=seed))
        for key, value in report.cells.items():
            cells.setdefault(key, []).append(value)
    elapsed = time.perf_counter() - start
    mean = {k: float(np.mean(v)) for k, v in cells.items()}

    def overall(section, model):
        return mean[(str(section), model, "Overall")]

    assess = {m: overall(SectionType.ASSESSMENT, m) for m in ("Appearance", "ContextPerformance", "Mouse")}
    fusion = overall(SectionType.ASSESSMENT, "Fusion")
    instr = {m: overall(SectionType.INSTRUCTIONAL, m) for m in ("Appearance", "ContextPerformance", "Mouse")}
    ok_a = fusion >= max(assess.values()) - 0.02
    ok_b = instr["Appearance"] >= instr["ContextPerformance"] + 0.05 and instr["Appearance"] >= instr["Mouse"] + 0.05
    acceptance(6, "qualitative-table", ok_a and ok_b and elapsed <= 120.0,
               f"ASSESS fusion {fusion:.3f} vs best uni-modal {max(assess.values()):.3f}; "
               f"INSTR Appr {instr['Appearance']:.3f} vs CP {instr['ContextPerformance']:.3f}, "
               f"Ms {instr['Mouse']:.3f}; 10 seeds in {elapsed:.1f} s <= 120 s")


def test_annotator_fusion(acceptance):
    sim = replace(load_sim_config(), duration_s=100_000.0,
                  schedule=((0.0, 100_000.0, SectionType.ASSESSMENT),))
    track = markov_states(sim, seed=3)
    windows = make_windows(sim.duration_s, 8.0, 8.0)
    noise = [AnnotatorNoise(a, flip=0.1, invalid=0.0) for a in ("A1", "A2", "A3")]
    spans = simulate_annotators(track, windows, noise, seed=4)
    marks = [label_windows(s, windows) for s in spans]
    agree = sum(fuse_annotations(m) is track.majority(w) for w, m in zip(windows, zip(*marks)))
    invalid = sum(m is AnnotatorMark.INVALID for per in marks for m in per)
    rate = agree / len(windows)
    acceptance(7, "annotator-fusion", len(windows) >= 10_000 and rate >= 0.96 and invalid == 0,
               f"{agree}/{len(windows)} windows agree = {rate:.4f} >= 0.96 (analytic 0.972)")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
