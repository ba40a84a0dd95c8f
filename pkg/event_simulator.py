"""
Synthetic event camera: per-pixel log-luminance threshold crossings between
linearly interpolated frames.
"""

from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from errors import ConfigurationError, DimensionMismatchError, RangeError
from event_model import EventStream, log_luminance


@dataclass
class FrameSequence:
    frames: list
    timestamps: np.ndarray

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        if len(self.frames) != len(self.timestamps):
            raise DimensionMismatchError(
                f"{len(self.frames)} frames but {len(self.timestamps)} timestamps")
        if len(self.frames) < 2:
            raise DimensionMismatchError("a frame sequence needs at least 2 frames")
        shapes = {np.shape(f) for f in self.frames}
        if len(shapes) != 1:
            raise DimensionMismatchError(f"frames have mixed shapes: {sorted(shapes)}")

    @property
    def shape(self):
        return np.shape(self.frames[0])[:2]


@njit(cache=True)
def _walk_pixel(log_frames, timestamps, y, x, threshold, emit, xs, ys, ts, ps, cursor):
    """Crossings at one pixel; counts only when emit is False"""
    n = 0
    L_ref = log_frames[0, y, x]
    for k in range(log_frames.shape[0] - 1):
        L0 = log_frames[k, y, x]
        L1 = log_frames[k + 1, y, x]
        t0 = timestamps[k]
        dt = timestamps[k + 1] - t0
        while L1 - L_ref >= threshold:
            L_ref += threshold
            if emit:
                ts[cursor + n] = t0 + (L_ref - L0) / (L1 - L0) * dt
                xs[cursor + n] = x
                ys[cursor + n] = y
                ps[cursor + n] = 1
            n += 1
        while L_ref - L1 >= threshold:
            L_ref -= threshold
            if emit:
                ts[cursor + n] = t0 + (L_ref - L0) / (L1 - L0) * dt
                xs[cursor + n] = x
                ys[cursor + n] = y
                ps[cursor + n] = -1
            n += 1
    return n


@njit(parallel=True, cache=True)
def _count_rows(log_frames, timestamps, thresholds):
    H, W = log_frames.shape[1], log_frames.shape[2]
    counts = np.zeros(H, dtype=np.int64)
    dummy_i = np.zeros(0, dtype=np.int64)
    dummy_f = np.zeros(0, dtype=np.float64)
    for y in prange(H):
        total = 0
        for x in range(W):
            total += _walk_pixel(log_frames, timestamps, y, x, thresholds[y, x], False,
                                 dummy_i, dummy_i, dummy_f, dummy_i, 0)
        counts[y] = total
    return counts


@njit(parallel=True, cache=True)
def _fill_rows(log_frames, timestamps, thresholds, offsets, xs, ys, ts, ps):
    H, W = log_frames.shape[1], log_frames.shape[2]
    for y in prange(H):
        cursor = offsets[y]
        for x in range(W):
            cursor += _walk_pixel(log_frames, timestamps, y, x, thresholds[y, x], True,
                                  xs, ys, ts, ps, cursor)


def _check_timestamps(timestamps):
    if np.any(np.diff(timestamps) <= 0):
        bad = int(np.flatnonzero(np.diff(timestamps) <= 0)[0]) + 1
        raise RangeError(f"frame timestamps must increase strictly (frame {bad}: {timestamps[bad]!r})")


def simulate_log(log_frames, timestamps, C, thresholds=None):
    """Events from a (T, H, W) stack of log-luminance frames"""
    log_frames = np.ascontiguousarray(log_frames, dtype=np.float64)
    timestamps = np.ascontiguousarray(timestamps, dtype=np.float64)
    if C <= 0:
        raise ConfigurationError(f"contrast threshold must be positive (got {C})")
    if log_frames.ndim != 3 or log_frames.shape[0] != len(timestamps):
        raise DimensionMismatchError(
            f"log frames {log_frames.shape} do not match {len(timestamps)} timestamps")
    _check_timestamps(timestamps)
    T, H, W = log_frames.shape
    if thresholds is None:
        thresholds = np.full((H, W), float(C))
    thresholds = np.ascontiguousarray(thresholds, dtype=np.float64)

    counts = _count_rows(log_frames, timestamps, thresholds)
    offsets = np.zeros(H, dtype=np.int64)
    offsets[1:] = np.cumsum(counts)[:-1]
    total = int(counts.sum())
    xs = np.zeros(total, dtype=np.int64)
    ys = np.zeros(total, dtype=np.int64)
    ts = np.zeros(total, dtype=np.float64)
    ps = np.zeros(total, dtype=np.int64)
    if total:
        _fill_rows(log_frames, timestamps, thresholds, offsets, xs, ys, ts, ps)

    # global order: time, then row-major pixel
    order = np.lexsort((ys * W + xs, ts))
    return EventStream(xs[order], ys[order], ts[order], ps[order], W, H)


def simulate(seq, C, timestamp_jitter=0.0, threshold_jitter=0.0, seed=0):
    """
    Simulate an event camera watching a frame sequence.

    Args:
        seq: FrameSequence of H x W x 3 linear RGB frames
        C: contrast threshold (log-luminance step per event)
        timestamp_jitter: std-dev in seconds of Gaussian noise added to event times
        threshold_jitter: relative std-dev of a per-pixel threshold perturbation
        seed: seed for both noise sources

    Returns:
        EventStream sorted by time, ties broken by row-major pixel index
    """
    if C <= 0:
        raise ConfigurationError(f"contrast threshold must be positive (got {C})")
    _check_timestamps(seq.timestamps)
    log_frames = np.stack([log_luminance(f) for f in seq.frames])
    H, W = log_frames.shape[1:]
    rng = np.random.default_rng(seed)

    thresholds = None
    if threshold_jitter > 0:
        thresholds = C * (1.0 + threshold_jitter * rng.standard_normal((H, W)))
        thresholds = np.maximum(thresholds, 0.01 * C)

    events = simulate_log(log_frames, seq.timestamps, C, thresholds)

    if timestamp_jitter > 0 and len(events):
        t = events.t + timestamp_jitter * rng.standard_normal(len(events))
        t = np.clip(t, seq.timestamps[0], seq.timestamps[-1])
        pixel = events.y.astype(np.int64) * W + events.x.astype(np.int64)
        order = np.lexsort((pixel, t))
        events = EventStream(events.x[order], events.y[order], t[order], events.p[order], W, H)
    return events
