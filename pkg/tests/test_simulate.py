from dataclasses import replace

import numpy as np
import pytest

from engagefuse.domain import LABELS, MODALITIES, EngagementLabel, Modality, SectionType, make_windows
from engagefuse.errors import ParameterError
from engagefuse.features import label_session
from engagefuse.simulate import (
    AnnotatorNoise,
    SimConfig,
    Transition,
    emit_modality,
    load_sim_config,
    markov_states,
    simulate_annotators,
    simulate_dataset,
    simulate_session,
)

I, A = SectionType.INSTRUCTIONAL, SectionType.ASSESSMENT


@pytest.fixture(scope="module")
def default():
    return load_sim_config()


def with_transition(config, on_off, off_on):
    t = Transition(on_off, off_on)
    return replace(config, transition={I: t, A: t})


def test_absorbing_on_task(default):
    track = markov_states(with_transition(default, 0.0, 0.5), seed=3)
    assert not track.states.any()


def test_forced_alternation(default):
    track = markov_states(with_transition(default, 1.0, 1.0), seed=3)
    assert np.array_equal(track.states, np.arange(len(track)) % 2)


def test_empirical_transition_rates(default):
    t = Transition(0.3, 0.6)
    config = replace(default, transition={I: t, A: t}, duration_s=1e6, schedule=((0.0, 1e6, I),))
    s = markov_states(config, seed=0).states
    prev, nxt = s[:-1], s[1:]
    assert abs(np.mean(nxt[prev == 0] == 1) - 0.3) <= 0.02
    assert abs(np.mean(nxt[prev == 1] == 0) - 0.6) <= 0.02


def test_sample_count(default):
    track = markov_states(default, 0)
    for m in MODALITIES:
        n = len(emit_modality(track, m, default, 1))
        assert abs(n - default.duration_s * default.sample_rate_hz[m]) <= 1


def test_zero_variance_constant_channel(default):
    flat = {s: {lab: {"speed": (2.5, 0.0)} for lab in LABELS} for s in (I, A)}
    config = replace(default, emissions={**default.emissions, Modality.MOUSE: flat})
    samples = emit_modality(markov_states(config, 0), Modality.MOUSE, config, 4)
    assert {s.channels["speed"] for s in samples} == {2.5}


def test_interaction_channels_state_blind_while_instructing(default):
    for m in (Modality.MOUSE, Modality.CONTEXT_PERFORMANCE):
        on = default.emissions[m][I][EngagementLabel.ON_TASK]
        off = default.emissions[m][I][EngagementLabel.OFF_TASK]
        assert all(on[ch][0] - off[ch][0] == 0 for ch in on)
    on = default.emissions[Modality.APPEARANCE][I][EngagementLabel.ON_TASK]
    off = default.emissions[Modality.APPEARANCE][I][EngagementLabel.OFF_TASK]
    assert any(on[ch][0] != off[ch][0] for ch in on)


def annotate(default, flip, invalid, seed=0):
    track = markov_states(default, seed)
    windows = make_windows(default.duration_s, 4, 4)
    noise = [AnnotatorNoise(a, flip, invalid) for a in ("A1", "A2", "A3")]
    return track, windows, simulate_annotators(track, windows, noise, seed)


def test_noiseless_annotators_reproduce_truth(default):
    track, windows, spans = annotate(default, 0.0, 0.0)
    for per_annotator in spans:
        for w in windows:
            (mark,) = {sp.mark for sp in per_annotator if sp.start_s <= w.start_s and w.end_s <= sp.end_s}
            assert mark.to_label() is track.majority(w)
    # merged spans: consecutive spans never share a mark
    assert all(a.mark is not b.mark for a, b in zip(spans[0], spans[0][1:]))


def test_always_invalid_discards_everything(default):
    session = simulate_session(replace(default, annotators=tuple(
        AnnotatorNoise(a.annotator_id, 0.0, 1.0) for a in default.annotators)), 0, 0)
    labels = label_session(session.data, make_windows(default.duration_s))
    assert labels and all(lw.label is None for lw in labels)


def test_simulation_is_seed_deterministic(small_sim):
    a, b = simulate_dataset(small_sim), simulate_dataset(small_sim)
    assert [x.data.samples == y.data.samples and x.data.annotations == y.data.annotations
            for x, y in zip(a, b)] == [True] * len(a)
    c = simulate_dataset(small_sim.with_seed(1))
    assert a[0].data.samples != c[0].data.samples


def test_config_round_trip(default):
    assert SimConfig.from_dict(default.to_dict()) == default


@pytest.mark.parametrize("change", [
    {"extra": 1},
    {"version": 2},
    {"annotators": [{"id": "A1"}]},
    {"transition": {"Instructional": {"on_to_off": 1.5, "off_to_on": 0.1},
                    "Assessment": {"on_to_off": 0.1, "off_to_on": 0.1}}},
    {"schedule": [{"section": "Instructional", "start_s": 0, "end_s": 10}]},
    {"sample_rate_hz": {"Appearance": 0, "ContextPerformance": 1, "Mouse": 1}},
])
def test_config_validation(default, change):
    with pytest.raises(ParameterError):
        SimConfig.from_dict({**default.to_dict(), **change})
