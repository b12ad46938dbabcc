"""Radar point-cloud data model and physics-derived preprocessing.

A frame is the set of points the radar reports for one aggregation window
(200 ms by default). Each point carries Cartesian coordinates in meters,
a signed radial (Doppler) velocity in m/s, and a non-negative reflection
intensity. All operations here are pure functions on immutable frames.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyFrameError, NonMonotonicTimestampsError, ShapeMismatchError

FEATURE_DIM = 5  # x, y, z, doppler, intensity
COORD_COLS = slice(0, 3)
DOPPLER_COL = 3
INTENSITY_COL = 4


@dataclass(frozen=True)
class RadarPoint:
    """One reflection: position (m), radial velocity (m/s), intensity."""

    x: float
    y: float
    z: float
    doppler: float
    intensity: float

    def __post_init__(self):
        vals = (self.x, self.y, self.z, self.doppler, self.intensity)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError(f"radar point fields must be finite, got {vals}")
        if self.intensity < 0:
            raise ValueError(f"intensity must be >= 0, got {self.intensity}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.doppler, self.intensity])


class PointFrame:
    """Points observed in one aggregation window.

    Stores points as a read-only (n, 5) float64 array. Row order carries no
    meaning, but every operation that does not say otherwise preserves it.
    """

    __slots__ = ("data", "timestamp_ms", "window_ms")

    def __init__(self, data, timestamp_ms: int = 0, window_ms: int = 200):
        arr = np.array(data, dtype=np.float64, copy=True)
        if arr.size == 0:
            arr = arr.reshape(0, FEATURE_DIM)
        if arr.ndim != 2 or arr.shape[1] != FEATURE_DIM:
            raise ShapeMismatchError(
                f"frame data must be (n, {FEATURE_DIM}), got {arr.shape}"
            )
        if not np.all(np.isfinite(arr)):
            raise ValueError("frame contains non-finite values")
        if np.any(arr[:, INTENSITY_COL] < 0):
            raise ValueError("intensity must be >= 0")
        if int(window_ms) <= 0:
            raise ValueError(f"window_ms must be > 0, got {window_ms}")
        arr.setflags(write=False)
        self.data = arr
        self.timestamp_ms = int(timestamp_ms)
        self.window_ms = int(window_ms)

    @classmethod
    def from_points(cls, points: Iterable[RadarPoint], timestamp_ms: int = 0,
                    window_ms: int = 200) -> "PointFrame":
        rows = [p.as_array() for p in points]
        data = np.stack(rows) if rows else np.empty((0, FEATURE_DIM))
        return cls(data, timestamp_ms=timestamp_ms, window_ms=window_ms)

    def with_data(self, data) -> "PointFrame":
        """New frame with the same window metadata and different points."""
        return PointFrame(data, timestamp_ms=self.timestamp_ms,
                          window_ms=self.window_ms)

    @property
    def points(self) -> list[RadarPoint]:
        return [RadarPoint(*row) for row in self.data]

    def __len__(self) -> int:
        return self.data.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, PointFrame):
            return NotImplemented
        return (self.timestamp_ms == other.timestamp_ms
                and self.window_ms == other.window_ms
                and self.data.shape == other.data.shape
                and bool(np.all(self.data == other.data)))

    def __repr__(self) -> str:
        return (f"PointFrame(n={len(self)}, t={self.timestamp_ms}ms, "
                f"window={self.window_ms}ms)")


class FrameBatch:
    """Frames resampled to one fixed point count, stackable for the encoder.

    The mask is all-true by construction: resampling with replacement leaves
    no invalid slots. It exists so downstream consumers have a uniform
    validity contract.
    """

    def __init__(self, frames: Sequence[PointFrame]):
        frames = list(frames)
        if not frames:
            raise ValueError("FrameBatch needs at least one frame")
        p_fixed = len(frames[0])
        for i, f in enumerate(frames):
            if len(f) != p_fixed:
                raise ShapeMismatchError(
                    f"frame {i} has {len(f)} points, expected {p_fixed}"
                )
        if p_fixed == 0:
            raise EmptyFrameError("FrameBatch frames must be non-empty")
        self.frames = frames
        self.p_fixed = p_fixed

    @property
    def array(self) -> np.ndarray:
        return np.stack([f.data for f in self.frames])

    @property
    def mask(self) -> np.ndarray:
        return np.ones((len(self.frames), self.p_fixed), dtype=bool)

    def __len__(self) -> int:
        return len(self.frames)


def center_frame(frame: PointFrame) -> PointFrame:
    """Translate the coordinate centroid to the origin.

    Doppler and intensity are untouched; centering is a purely spatial
    correction.
    """
    if len(frame) == 0:
        raise EmptyFrameError("cannot center an empty frame")
    out = frame.data.copy()
    out[:, COORD_COLS] -= out[:, COORD_COLS].mean(axis=0)
    return frame.with_data(out)


def doppler_filter(frame: PointFrame, v_thresh: float) -> PointFrame:
    """Drop points with |doppler| <= v_thresh (static background removal).

    v_thresh = 0 removes exactly the points with zero radial velocity. May
    return an empty frame; survivor order is preserved.
    """
    if v_thresh < 0:
        raise ValueError(f"v_thresh must be >= 0, got {v_thresh}")
    keep = np.abs(frame.data[:, DOPPLER_COL]) > v_thresh
    return frame.with_data(frame.data[keep])


def resample_fixed(frame: PointFrame, p_fixed: int, seed: int) -> PointFrame:
    """Resample a frame to exactly p_fixed points, deterministically per seed.

    Subsamples without replacement when the frame is large enough, otherwise
    resamples with replacement.
    """
    if p_fixed <= 0:
        raise ValueError(f"p_fixed must be > 0, got {p_fixed}")
    n = len(frame)
    if n == 0:
        raise EmptyFrameError("cannot resample an empty frame")
    rng = np.random.default_rng(seed)
    idx = rng.choice(n, size=p_fixed, replace=n < p_fixed)
    return frame.with_data(frame.data[idx])


def window_stream(points_with_timestamps, window_ms: int = 200) -> list[PointFrame]:
    """Cut a time-ordered point stream into consecutive non-overlapping windows.

    Input items are (timestamp_ms, point) pairs where point is a RadarPoint
    or a 5-sequence. Windows are aligned to multiples of window_ms; each
    frame's timestamp is its window start, and gaps yield empty frames.
    """
    if window_ms <= 0:
        raise ValueError(f"window_ms must be > 0, got {window_ms}")
    items = list(points_with_timestamps)
    if not items:
        return []
    times = []
    rows = []
    for t, p in items:
        times.append(int(t))
        rows.append(p.as_array() if isinstance(p, RadarPoint) else
                    np.asarray(p, dtype=np.float64))
    for prev, cur in zip(times, times[1:]):
        if cur < prev:
            raise NonMonotonicTimestampsError(
                f"timestamp {cur} follows {prev}"
            )
    start = (times[0] // window_ms) * window_ms
    frames = []
    i = 0
    w_start = start
    while w_start <= times[-1]:
        w_end = w_start + window_ms
        j = i
        while j < len(times) and times[j] < w_end:
            j += 1
        data = np.stack(rows[i:j]) if j > i else np.empty((0, FEATURE_DIM))
        frames.append(PointFrame(data, timestamp_ms=w_start, window_ms=window_ms))
        i = j
        w_start = w_end
    return frames
