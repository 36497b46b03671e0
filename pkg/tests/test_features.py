import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from engagefuse.domain import (
    AnnotationSpan,
    AnnotatorMark,
    EngagementLabel,
    Modality,
    SectionType,
    TimedSample,
    Window,
    make_windows,
)
from engagefuse.errors import DataError, ParameterError
from engagefuse.features import (
    FeatureSchema,
    FeatureVector,
    LabeledWindow,
    SessionData,
    build_instances,
    extract_dataset,
    extract_features,
    extract_stream_features,
    feature_matrix,
    infer_schema,
    label_array,
)

MOUSE = Modality.MOUSE
SCHEMA = FeatureSchema({MOUSE: ("speed",)})


def sample(t, value, modality=MOUSE, channel="speed"):
    return TimedSample("stu01", "s1", modality, t, {channel: value})


def stats(fv):
    return dict(zip(fv.names, fv.values))


class TestExtract:
    def test_hand_statistics(self):
        fv = extract_features([sample(1, 1.0), sample(2, 2.0), sample(3, 3.0)], Window(0, 0, 8), SCHEMA, MOUSE)
        s = stats(fv)
        assert (s["speed.count"], s["speed.mean"], s["speed.min"], s["speed.max"], s["speed.range"]) == \
            (3.0, 2.0, 1.0, 3.0, 2.0)
        assert s["speed.std"] == pytest.approx(math.sqrt(2 / 3), abs=1e-15)
        assert s["sample_rate"] == 3 / 8

    def test_empty_window_is_zero(self):
        fv = extract_features([sample(20, 1.0)], Window(0, 0, 8), SCHEMA, MOUSE)
        assert set(fv.values) == {0.0}
        assert stats(fv)["speed.count"] == 0.0

    def test_single_sample(self):
        s = stats(extract_features([sample(4, 5.0)], Window(0, 0, 8), SCHEMA, MOUSE))
        assert (s["speed.std"], s["speed.mean"], s["speed.range"]) == (0.0, 5.0, 0.0)

    def test_window_is_half_open(self):
        s = stats(extract_features([sample(0, 1.0), sample(8, 9.0)], Window(0, 0, 8), SCHEMA, MOUSE))
        assert s["speed.count"] == 1.0 and s["speed.max"] == 1.0

    def test_wrong_modality_rejected(self):
        with pytest.raises(DataError):
            extract_features([sample(1, 1.0, Modality.APPEARANCE)], Window(0, 0, 8), SCHEMA, MOUSE)

    def test_non_finite_rejected(self):
        with pytest.raises(DataError):
            extract_features([sample(1, float("nan"))], Window(0, 0, 8), SCHEMA, MOUSE)

    def test_unknown_statistic(self):
        with pytest.raises(ParameterError):
            FeatureSchema({MOUSE: ("speed",)}, ("median",))

    @given(st.lists(st.tuples(st.integers(0, 39), st.floats(-1e3, 1e3)), max_size=30), st.randoms())
    def test_order_invariant(self, raw, rnd):
        samples = [sample(t / 4, v) for t, v in raw]
        shuffled = list(samples)
        rnd.shuffle(shuffled)
        w = Window(0, 0, 8)
        assert extract_features(samples, w, SCHEMA, MOUSE) == extract_features(shuffled, w, SCHEMA, MOUSE)

    @given(st.lists(st.tuples(st.integers(0, 200), st.floats(-1e3, 1e3)), max_size=60))
    def test_stream_matches_single(self, raw):
        samples = [sample(t / 4, v) for t, v in raw]
        windows = make_windows(52)
        assert extract_stream_features(samples, windows, SCHEMA, MOUSE) == \
            [extract_features(samples, w, SCHEMA, MOUSE) for w in windows]


def labeled(index, label, session="s1"):
    return LabeledWindow(session, "stu01", Window(index, 4 * index, 4 * index + 8, SectionType.ASSESSMENT), label)


class TestBuildInstances:
    def test_discarded_windows_dropped(self):
        labels = [labeled(i, None if i in (3, 7) else EngagementLabel.ON_TASK) for i in range(10)]
        assert len(build_instances([], labels, SCHEMA)) == 8

    def test_missing_modality_is_zero(self):
        fv = FeatureVector(Modality.APPEARANCE, 0, SCHEMA.names(Modality.APPEARANCE), (0.5,))
        (inst,) = build_instances([("s1", fv)], [labeled(0, EngagementLabel.OFF_TASK)], SCHEMA)
        assert inst.features[MOUSE].values == (0.0,) * len(SCHEMA.names(MOUSE))
        assert inst.features[Modality.APPEARANCE] is fv

    def test_empty(self):
        assert build_instances([], [], SCHEMA) == []

    def test_duplicate_vector(self):
        fv = FeatureVector(MOUSE, 0, SCHEMA.names(MOUSE), (0.0,) * 7)
        with pytest.raises(DataError):
            build_instances([("s1", fv), ("s1", fv)], [labeled(0, EngagementLabel.ON_TASK)], SCHEMA)


def test_extract_dataset_end_to_end():
    schedule = [(0.0, 20.0, SectionType.INSTRUCTIONAL), (20.0, 40.0, SectionType.ASSESSMENT)]
    samples = {MOUSE: [sample(t / 2, float(t)) for t in range(80)]}
    annotations = {
        a: [AnnotationSpan(a, 0, 20, AnnotatorMark.ON_TASK), AnnotationSpan(a, 20, 40, AnnotatorMark.OFF_TASK)]
        for a in ("A1", "A2", "A3")
    }
    session = SessionData("s1", "stu01", schedule, samples, annotations)
    instances = extract_dataset([session], infer_schema(samples[MOUSE]))
    # window 4 = [16, 24] is half OnTask, half OffTask for every annotator: all Invalid, discarded
    assert [inst.window.index for inst in instances] == [0, 1, 2, 3, 5, 6, 7, 8]
    assert [int(x) for x in label_array(instances)] == [0, 0, 0, 0, 1, 1, 1, 1]
    assert [inst.section for inst in instances] == [SectionType.INSTRUCTIONAL] * 4 + [SectionType.ASSESSMENT] * 4
    X = feature_matrix(instances, MOUSE)
    assert X.shape == (8, 7)
    assert np.all(X[:, 0] == 16)


def test_extract_dataset_needs_three_annotators():
    session = SessionData("s1", "stu01", [(0.0, 16.0, SectionType.ASSESSMENT)], {}, {"A1": []})
    with pytest.raises(DataError):
        extract_dataset([session], SCHEMA)
