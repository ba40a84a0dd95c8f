"""
Event streams, windowed ground-truth log-intensity differences with the
neutralization mask, and the event loss against rendered frame pairs.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from errors import ConfigurationError, DimensionMismatchError, RangeError, EmptySupervisionWarning

# Rec.601 luma
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
LOG_EPS = 1e-3


def luminance(img):
    return np.asarray(img, dtype=np.float64) @ LUMA_WEIGHTS


def log_luminance(img):
    return np.log(luminance(img) + LOG_EPS)


class EventStream:
    """Time-sorted events in structure-of-arrays layout"""

    def __init__(self, x, y, t, p, width, height):
        self.x = np.asarray(x, dtype=np.uint16).reshape(-1)
        self.y = np.asarray(y, dtype=np.uint16).reshape(-1)
        self.t = np.asarray(t, dtype=np.float64).reshape(-1)
        self.p = np.asarray(p, dtype=np.int8).reshape(-1)
        self.width = int(width)
        self.height = int(height)

    @classmethod
    def empty(cls, width, height):
        return cls(np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0), width, height)

    def __len__(self):
        return len(self.t)

    def __eq__(self, other):
        if not isinstance(other, EventStream):
            return NotImplemented
        return (self.width == other.width and self.height == other.height
                and np.array_equal(self.x, other.x) and np.array_equal(self.y, other.y)
                and np.array_equal(self.t.view(np.uint64), other.t.view(np.uint64))
                and np.array_equal(self.p, other.p))

    @property
    def span(self):
        return (float(self.t[0]), float(self.t[-1])) if len(self) else (0.0, 0.0)

    def slice_indices(self, t_s, t_e):
        """Index range of events with t_s < t <= t_e"""
        return (int(np.searchsorted(self.t, t_s, side='right')),
                int(np.searchsorted(self.t, t_e, side='right')))

    def problems(self):
        """Every invariant violation, as readable strings"""
        issues = []
        bad_x = np.flatnonzero(self.x >= self.width)
        bad_y = np.flatnonzero(self.y >= self.height)
        for i in np.union1d(bad_x, bad_y)[:20]:
            issues.append(f"event {i}: coordinate ({self.x[i]}, {self.y[i]}) outside {self.width}x{self.height}")
        bad_p = np.flatnonzero((self.p != 1) & (self.p != -1))
        for i in bad_p[:20]:
            issues.append(f"event {i}: polarity {self.p[i]} is not +1/-1")
        if len(self) > 1:
            unsorted = np.flatnonzero(np.diff(self.t) < 0)
            for i in unsorted[:20]:
                issues.append(f"event {i + 1}: timestamp {self.t[i + 1]!r} earlier than previous {self.t[i]!r}")
        if not np.isfinite(self.t).all():
            issues.append("event timestamps contain non-finite values")
        return issues


@dataclass
class EventWindow:
    t_s: float
    t_e: float
    eta: float
    polarity_sum: np.ndarray
    event_count: np.ndarray
    mask: np.ndarray

    @property
    def delta_L(self):
        return self.eta * self.polarity_sum


def accumulate_window(events, t_s, t_e, eta):
    if not t_s < t_e:
        raise RangeError(f"event window start {t_s} must precede end {t_e}")
    i0, i1 = events.slice_indices(t_s, t_e)
    H, W = events.height, events.width
    pixel = events.y[i0:i1].astype(np.int64) * W + events.x[i0:i1].astype(np.int64)
    polarity = np.bincount(pixel, weights=events.p[i0:i1].astype(np.float64), minlength=H * W)
    count = np.bincount(pixel, minlength=H * W)
    polarity = polarity.astype(np.int64).reshape(H, W)
    count = count.reshape(H, W)
    # net-zero pixels had activity we cannot recover; zero-event pixels are still supervised
    mask = ~((count > 0) & (polarity == 0))
    return EventWindow(float(t_s), float(t_e), float(eta), polarity, count, mask)


def sample_window(rng, l_min, l_max, span):
    if not 0 < l_min <= l_max:
        raise ConfigurationError(f"window lengths must satisfy 0 < l_min <= l_max (got {l_min}, {l_max})")
    if l_max > span:
        raise ConfigurationError(f"l_max={l_max} exceeds the capture span {span}")
    length = rng.uniform(l_min, l_max) if l_max > l_min else float(l_min)
    t_s = rng.uniform(0.0, span - length)
    return float(t_s), float(t_s + length)


def predicted_log_diff(img_s, img_e):
    img_s = np.asarray(img_s, dtype=np.float64)
    img_e = np.asarray(img_e, dtype=np.float64)
    if img_s.shape != img_e.shape:
        raise DimensionMismatchError(f"frame shapes differ: {img_s.shape} vs {img_e.shape}")
    return log_luminance(img_e) - log_luminance(img_s)


def predicted_log_diff_vjp(img_s, img_e, g_pred):
    """Gradients wrt (img_s, img_e) given dL/d(prediction)"""
    g_log_e = g_pred / (luminance(img_e) + LOG_EPS)
    g_log_s = -g_pred / (luminance(img_s) + LOG_EPS)
    return g_log_s[..., None] * LUMA_WEIGHTS, g_log_e[..., None] * LUMA_WEIGHTS


def _check_window_shape(window, pred):
    if pred.shape != window.polarity_sum.shape:
        raise DimensionMismatchError(f"prediction shape {pred.shape} != window shape {window.polarity_sum.shape}")


def event_loss(window, pred):
    """Mean squared error over unmasked pixels"""
    pred = np.asarray(pred, dtype=np.float64)
    _check_window_shape(window, pred)
    n = int(window.mask.sum())
    if n == 0:
        warnings.warn("event window mask is empty; event loss is 0", EmptySupervisionWarning)
        return 0.0
    residual = (window.delta_L - pred)[window.mask]
    return float(np.sum(residual * residual) / n)


def event_loss_grad(window, pred):
    pred = np.asarray(pred, dtype=np.float64)
    _check_window_shape(window, pred)
    n = int(window.mask.sum())
    if n == 0:
        return np.zeros_like(pred)
    return np.where(window.mask, 2.0 * (pred - window.delta_L) / n, 0.0)
