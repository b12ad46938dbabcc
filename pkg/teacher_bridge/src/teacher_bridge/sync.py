"""Camera/radar timestamp alignment.

The radar runs at the lower rate, so every radar window is matched to the
temporally closest camera frame; exact midpoints resolve to the earlier
frame. Offsets for a regular camera grid are therefore bounded by half the
camera inter-frame interval.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NoFramesToMatchError


@dataclass(frozen=True)
class SyncConfig:
    reference: str = "radar"    # the lower-rate stream drives the matching
    matching: str = "nearest"


def synchronize(radar_timestamps, camera_timestamps) -> np.ndarray:
    """Index of the nearest camera timestamp for every radar timestamp."""
    radar = np.asarray(list(radar_timestamps), dtype=np.int64)
    camera = np.asarray(list(camera_timestamps), dtype=np.int64)
    if camera.size == 0:
        raise NoFramesToMatchError("camera timestamp list is empty")
    for name, arr in (("radar", radar), ("camera", camera)):
        if np.any(np.diff(arr) < 0):
            raise ValueError(f"{name} timestamps must be sorted ascending")
    right = np.searchsorted(camera, radar, side="left")
    right = np.clip(right, 0, camera.size - 1)
    left = np.clip(right - 1, 0, camera.size - 1)
    d_left = np.abs(radar - camera[left])
    d_right = np.abs(radar - camera[right])
    # ties go to the earlier frame
    return np.where(d_left <= d_right, left, right)


def sync_offsets(radar_timestamps, camera_timestamps, indices) -> np.ndarray:
    radar = np.asarray(list(radar_timestamps), dtype=np.int64)
    camera = np.asarray(list(camera_timestamps), dtype=np.int64)
    return radar - camera[np.asarray(indices)]
