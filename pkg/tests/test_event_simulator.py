import numpy as np
import pytest

from errors import ConfigurationError, RangeError
from event_model import accumulate_window, log_luminance
from event_simulator import FrameSequence, simulate, simulate_log


def _smooth_sequence(rng, n_frames=12, height=5, width=6):
    t = np.linspace(0.0, 1.0, n_frames)
    phase = rng.uniform(0, 2 * np.pi, size=(height, width, 1))
    base = rng.uniform(0.2, 0.6, size=(height, width, 3))
    frames = [np.clip(base * (1.0 + 0.6 * np.sin(2 * np.pi * ti + phase)), 0.0, 1.0) for ti in t]
    return FrameSequence(frames, t)


def test_constant_sequence_has_no_events(rng):
    frame = rng.uniform(0, 1, size=(4, 4, 3))
    events = simulate(FrameSequence([frame] * 5, np.linspace(0, 1, 5)), 0.2)
    assert len(events) == 0


def test_log_ramp_emits_evenly_spaced_events():
    logs = np.array([[[0.0]], [[1.0]]])
    events = simulate_log(logs, [0.0, 1.0], 0.25)
    assert len(events) == 4
    assert np.allclose(events.t, [0.25, 0.5, 0.75, 1.0])
    assert np.all(events.p == 1)


def test_reversed_sequence_mirrors_polarity(rng):
    t = np.linspace(0.0, 1.0, 8)
    base = rng.uniform(0.05, 0.3, size=(5, 6, 3))
    rate = rng.uniform(0.5, 3.0, size=(5, 6, 1))
    seq = FrameSequence([base * (1.0 + rate * ti) for ti in t], t)
    forward = simulate(seq, 0.15)
    backward = simulate(FrameSequence(seq.frames + seq.frames[::-1][1:],
                                      np.concatenate([seq.timestamps, 1.0 + seq.timestamps[1:]])), 0.15)
    H, W = seq.shape
    up = np.zeros((H, W), dtype=np.int64)
    down = np.zeros((H, W), dtype=np.int64)
    i0 = len(forward)
    np.add.at(up, (backward.y[i0:], backward.x[i0:]), backward.p[i0:] == 1)
    np.add.at(down, (backward.y[i0:], backward.x[i0:]), backward.p[i0:] == -1)
    fwd_up = np.zeros((H, W), dtype=np.int64)
    fwd_down = np.zeros((H, W), dtype=np.int64)
    np.add.at(fwd_up, (forward.y, forward.x), forward.p == 1)
    np.add.at(fwd_down, (forward.y, forward.x), forward.p == -1)
    assert np.all(np.abs(up - fwd_down) <= 1)
    assert np.all(np.abs(down - fwd_up) <= 1)


def test_accumulated_events_track_log_change(rng):
    C = 0.1
    seq = _smooth_sequence(rng)
    events = simulate(seq, C)
    window = accumulate_window(events, -1.0, 1.0, C)
    truth = log_luminance(seq.frames[-1]) - log_luminance(seq.frames[0])
    assert np.all(np.abs(truth - window.delta_L) <= C + 1e-9)


def test_halving_threshold_doubles_events(rng):
    t = np.linspace(0.0, 1.0, 6)
    base = rng.uniform(0.05, 0.2, size=(4, 4, 3))
    frames = [base * (1.0 + 3.0 * ti) for ti in t]
    seq = FrameSequence(frames, t)
    coarse = len(simulate(seq, 0.2))
    fine = len(simulate(seq, 0.1))
    assert fine >= 2 * coarse - 16


def test_events_sorted_with_row_major_ties():
    logs = np.zeros((2, 3, 3))
    logs[1] = 0.5
    events = simulate_log(logs, [0.0, 1.0], 0.25)
    assert np.all(np.diff(events.t) >= 0)
    pixel = events.y.astype(int) * 3 + events.x.astype(int)
    same_time = np.diff(events.t) == 0
    assert np.all(np.diff(pixel)[same_time] > 0)
    assert not events.problems()


def test_jitter_is_seeded(rng):
    seq = _smooth_sequence(rng)
    a = simulate(seq, 0.15, timestamp_jitter=1e-3, threshold_jitter=0.05, seed=4)
    b = simulate(seq, 0.15, timestamp_jitter=1e-3, threshold_jitter=0.05, seed=4)
    assert a == b
    assert np.all(np.diff(a.t) >= 0)
    assert a.t.min() >= 0.0 and a.t.max() <= 1.0


def test_rejects_bad_inputs(rng):
    frame = rng.uniform(0, 1, size=(2, 2, 3))
    with pytest.raises(ConfigurationError):
        simulate(FrameSequence([frame, frame], [0.0, 1.0]), 0.0)
    with pytest.raises(RangeError):
        simulate(FrameSequence([frame, frame], [1.0, 1.0]), 0.2)
