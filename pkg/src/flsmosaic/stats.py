"""Per-pixel local variance and long/short temporal window scoring.

For every polar bin ``k`` of frame ``t`` the local variance ``v[k, t]`` is
the mean squared deviation over a square spatial window. Two centred
temporal windows then average ``v`` over a short span (object evidence) and
a long span (stable seabed and insonification pattern), and the score is

    s[k, t] = mean_short(v) * exp(-gain * mean_long(v))

Temporal windows are truncated at the sequence ends and always averaged
over the frames actually available.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import ndimage

from .frameio import SonarFrame


@dataclass(frozen=True)
class StatConfig:
    spatial_window: int = 5
    short_window: int = 5
    long_window: int = 101
    background_gain: float = 1.0

    def __post_init__(self):
        if self.spatial_window < 3 or self.spatial_window % 2 == 0:
            raise ValueError("spatial_window must be odd and >= 3")
        if self.short_window % 2 == 0 or self.long_window % 2 == 0:
            raise ValueError("temporal windows must be odd")
        if not 1 <= self.short_window < self.long_window:
            raise ValueError("need 1 <= short_window < long_window")
        if not np.isfinite(self.background_gain) or self.background_gain < 0:
            raise ValueError("background_gain must be finite and >= 0")


@dataclass(frozen=True, eq=False)
class VarianceFrame:
    values: np.ndarray  # NaN where the source bin is invalid
    timestamp_index: int


@dataclass(frozen=True, eq=False)
class ScoreFrame:
    values: np.ndarray
    timestamp_index: int


def _box_sum(a: np.ndarray, w: int) -> np.ndarray:
    """Sum over a w x w window, truncated at the borders."""
    ones = np.ones(w)
    out = ndimage.correlate1d(a, ones, axis=0, mode="constant", cval=0.0)
    return ndimage.correlate1d(out, ones, axis=1, mode="constant", cval=0.0)


def local_variance(frame: SonarFrame, cfg: StatConfig = StatConfig()) -> VarianceFrame:
    """Mean squared deviation from the window mean, over valid in-image pixels.

    Values are shifted by one reference pixel before the moment sums so a
    constant window gives exactly zero.
    """
    w = cfg.spatial_window
    h, wd = frame.intensities.shape
    if w > h or w > wd:
        raise ValueError(f"spatial window {w} does not fit a {h}x{wd} frame")
    valid = frame.valid_mask
    p = frame.intensities
    ref = p[valid][0] if valid.any() else 0.0
    x = np.where(valid, p - ref, 0.0)
    n = _box_sum(valid.astype(np.float64), w)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = _box_sum(x, w) / n
        var = _box_sum(x * x, w) / n - mean * mean
    var = np.maximum(var, 0.0)
    var[~valid] = np.nan
    return VarianceFrame(var, frame.timestamp_index)


class _RunningWindow:
    """Running sum over a centred, truncated window of half-width ``half``.

    ``advance(t, last)`` moves the window to centre ``t`` given that frames
    up to index ``last`` exist. Both the batch and the streaming code paths
    drive this same recurrence, which keeps their outputs bit-identical.
    """

    def __init__(self, half: int, fetch: Callable[[int], np.ndarray]):
        self.half = half
        self.fetch = fetch
        self.lo = 0
        self.hi = -1
        self.total: np.ndarray | None = None

    def advance(self, t: int, last: int) -> np.ndarray:
        target_hi = min(t + self.half, last)
        while self.hi < target_hi:
            self.hi += 1
            frame = self.fetch(self.hi)
            self.total = frame.copy() if self.total is None else self.total + frame
        target_lo = max(t - self.half, 0)
        while self.lo < target_lo:
            self.total = self.total - self.fetch(self.lo)
            self.lo += 1
        return np.maximum(self.total, 0.0) / (self.hi - self.lo + 1)


def _score(short_mean: np.ndarray, long_mean: np.ndarray, gain: float) -> np.ndarray:
    return short_mean * np.exp(-gain * long_mean)


def _clean(v: np.ndarray) -> np.ndarray:
    return np.nan_to_num(v, nan=0.0)


def lstsw_scores(variances: Sequence[VarianceFrame], cfg: StatConfig = StatConfig()) -> list[ScoreFrame]:
    """Score every frame of a sequence (batch form)."""
    n = len(variances)
    if n < 1:
        raise ValueError("need at least one variance frame")
    shape = variances[0].values.shape
    if any(v.values.shape != shape for v in variances):
        raise ValueError("variance frames differ in shape")
    cleaned = [_clean(v.values) for v in variances]
    short = _RunningWindow(cfg.short_window // 2, cleaned.__getitem__)
    long = _RunningWindow(cfg.long_window // 2, cleaned.__getitem__)
    out = []
    for t in range(n):
        s = _score(short.advance(t, n - 1), long.advance(t, n - 1), cfg.background_gain)
        out.append(ScoreFrame(s, variances[t].timestamp_index))
    return out


class StreamingScoreBuffer:
    """Incremental scorer with O(long_window) frames of memory.

    ``push`` takes variance frames in temporal order (optionally with a
    payload, e.g. the source frame) and returns the (payload, ScoreFrame)
    pairs that became ready; ``flush`` closes the stream and returns the
    rest. Frame ``t`` is ready once ``t + long_window // 2`` has arrived.
    """

    def __init__(self, cfg: StatConfig = StatConfig()):
        self.cfg = cfg
        self._half_long = cfg.long_window // 2
        self._values: deque[np.ndarray] = deque()
        self._meta: deque[tuple[int, object]] = deque()
        self._base = 0  # absolute index of self._values[0]
        self._count = 0
        self._next = 0
        self._closed = False
        self._short = _RunningWindow(cfg.short_window // 2, self._fetch)
        self._long = _RunningWindow(self._half_long, self._fetch)
        self._last_ts: int | None = None
        self.peak_buffered = 0

    def _fetch(self, i: int) -> np.ndarray:
        return self._values[i - self._base]

    @property
    def buffered(self) -> int:
        return len(self._values)

    def push(self, variance: VarianceFrame, payload=None) -> list[tuple[object, ScoreFrame]]:
        if self._closed:
            raise RuntimeError("stream already flushed")
        ts = variance.timestamp_index
        if self._last_ts is not None and ts <= self._last_ts:
            raise ValueError(f"out-of-order push: t={ts} after t={self._last_ts}")
        if self._values and variance.values.shape != self._values[0].shape:
            raise ValueError("variance frames differ in shape")
        self._last_ts = ts
        self._values.append(_clean(variance.values))
        self._meta.append((ts, payload))
        self._count += 1
        self.peak_buffered = max(self.peak_buffered, len(self._values))
        ready = []
        while self._next + self._half_long <= self._count - 1:
            ready.append(self._emit(self._count - 1))
        return ready

    def flush(self) -> list[tuple[object, ScoreFrame]]:
        if self._count == 0:
            raise ValueError("need at least one variance frame")
        self._closed = True
        ready = []
        while self._next < self._count:
            ready.append(self._emit(self._count - 1))
        return ready

    def _emit(self, last: int) -> tuple[object, ScoreFrame]:
        t = self._next
        s = _score(self._short.advance(t, last), self._long.advance(t, last), self.cfg.background_gain)
        ts, payload = self._meta[t - self._base]
        self._next += 1
        # Oldest frame still needed by the long window of the next centre.
        keep_from = min(self._long.lo, self._short.lo, self._next)
        while self._base < keep_from:
            self._values.popleft()
            self._meta.popleft()
            self._base += 1
        return payload, ScoreFrame(s, ts)


def stream_scores(variances: Iterable[VarianceFrame], cfg: StatConfig = StatConfig()) -> list[ScoreFrame]:
    """Run a variance sequence through :class:`StreamingScoreBuffer`."""
    buf = StreamingScoreBuffer(cfg)
    out = []
    for v in variances:
        out.extend(s for _, s in buf.push(v))
    out.extend(s for _, s in buf.flush())
    return out
