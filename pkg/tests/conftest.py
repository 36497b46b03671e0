import json
from dataclasses import replace

import pytest
from hypothesis import HealthCheck, settings

from engagefuse.config import RunConfig
from engagefuse.domain import EngagementLabel, Modality, SectionType, Window
from engagefuse.features import FeatureVector, Instance
from engagefuse.forest import ForestParams
from engagefuse.simulate import load_sim_config

settings.register_profile("repo", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture(scope="session")
def small_sim():
    """Three short sessions; enough windows of both classes in both sections."""
    base = load_sim_config()
    return replace(base, n_students=3, duration_s=600.0,
                   schedule=((0.0, 300.0, SectionType.INSTRUCTIONAL), (300.0, 600.0, SectionType.ASSESSMENT)))


@pytest.fixture(scope="session")
def small_run():
    return RunConfig(forest=ForestParams(n_trees=8, max_depth=6), repeats=2)


@pytest.fixture
def sim_json(tmp_path, small_sim):
    path = tmp_path / "sim.json"
    path.write_text(json.dumps(small_sim.to_dict()))
    return path


@pytest.fixture
def run_json(tmp_path, small_run):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(small_run.to_dict()))
    return path


def make_instance(student, index, label, section=SectionType.ASSESSMENT, values=None, session=None):
    values = values if values is not None else {m: (float(index), float(int(label))) for m in Modality}
    feats = {m: FeatureVector(m, index, ("a.mean", "sample_rate"), tuple(values[m])) for m in Modality}
    return Instance(student, session or f"{student}-s1", Window(index, 4.0 * index, 4.0 * index + 8.0, section),
                    feats, EngagementLabel(int(label)))


def random_instances(rng, n_students=4, per_student=20, sections=(SectionType.ASSESSMENT,)):
    out = []
    for s in range(n_students):
        for i in range(per_student):
            label = int(rng.random() < 0.3)
            values = {m: (float(rng.normal(label, 1.0)), 4.0) for m in Modality}
            out.append(make_instance(f"stu{s:02d}", i, label, sections[i % len(sections)], values))
    return out


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    """Records one pass/fail line per criterion, then fails the test if the criterion failed."""
    def record(number, name, ok, detail):
        line = f"ACCEPTANCE {number} {name}: {'PASS' if ok else 'FAIL'} ({detail})"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
