"""Shared preprocessing: filter, center, resample, standardize, embed.

A trained model is a bundle of encoder parameters plus the preprocessing
that produced its training inputs (Doppler threshold, fixed point count,
resample seed base, and the training split's intensity statistics). Both
the training loop and every evaluator go through this module so the two
sides can never drift apart.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .encoder import EncoderParams, forward_batch
from .errors import NoTrainableDataError
from .pointcloud import INTENSITY_COL, PointFrame, center_frame, doppler_filter, resample_fixed


@dataclass(frozen=True)
class PreprocessConfig:
    v_thresh: float = 0.0
    p_fixed: int = 128
    seed: int = 0


@dataclass
class PairedSample:
    """One radar window paired with its teacher embedding."""

    frame: PointFrame
    teacher_embedding: np.ndarray
    label: Optional[str] = None
    timestamp_ms: int = 0

    def __post_init__(self):
        emb = np.asarray(self.teacher_embedding, dtype=np.float64)
        if emb.ndim != 1:
            raise ValueError(f"teacher embedding must be 1-d, got shape {emb.shape}")
        if not np.all(np.isfinite(emb)):
            raise ValueError("teacher embedding must be finite")
        self.teacher_embedding = emb
        self.timestamp_ms = int(self.timestamp_ms)


@dataclass
class PreprocessedSet:
    frames: np.ndarray          # (M, p_fixed, 5)
    teacher: np.ndarray         # (M, D)
    labels: list
    timestamps: np.ndarray      # (M,)
    kept_indices: list
    dropped_count: int


def _child_seed(base: int, index: int) -> int:
    return int(np.random.SeedSequence([int(base), int(index)]).generate_state(1)[0])


def preprocess_samples(samples: Sequence[PairedSample],
                       cfg: PreprocessConfig) -> PreprocessedSet:
    """Doppler-filter, center, and resample every sample.

    Samples whose frames are emptied by the filter are dropped (the spec's
    logged-count policy); their indices are simply absent from kept_indices.
    """
    frames, teacher, labels, stamps, kept = [], [], [], [], []
    dropped = 0
    for i, s in enumerate(samples):
        f = doppler_filter(s.frame, cfg.v_thresh)
        if len(f) == 0:
            dropped += 1
            continue
        f = center_frame(f)
        f = resample_fixed(f, cfg.p_fixed, seed=_child_seed(cfg.seed, i))
        frames.append(f.data)
        teacher.append(s.teacher_embedding)
        labels.append(s.label)
        stamps.append(s.timestamp_ms)
        kept.append(i)
    if frames:
        frames_arr = np.stack(frames)
        teacher_arr = np.stack(teacher)
    else:
        frames_arr = np.empty((0, cfg.p_fixed, 5))
        teacher_arr = np.empty((0, 0))
    return PreprocessedSet(frames_arr, teacher_arr, labels,
                           np.asarray(stamps, dtype=np.int64), kept, dropped)


def compute_intensity_stats(frames: np.ndarray) -> tuple[float, float]:
    """Mean/std of intensity over every point of the (training) frames."""
    vals = frames[:, :, INTENSITY_COL]
    mean = float(vals.mean()) if vals.size else 0.0
    std = float(vals.std()) if vals.size else 1.0
    return mean, max(std, 1e-12)


def apply_intensity_stats(frames: np.ndarray, mean: float, std: float) -> np.ndarray:
    out = frames.copy()
    out[:, :, INTENSITY_COL] = (out[:, :, INTENSITY_COL] - mean) / std
    return out


@dataclass
class ModelBundle:
    """Everything needed to embed new data exactly like the training run."""

    params: EncoderParams
    preprocess: PreprocessConfig
    intensity_mean: float = 0.0
    intensity_std: float = 1.0

    def copy(self) -> "ModelBundle":
        return ModelBundle(self.params.copy(), self.preprocess,
                           self.intensity_mean, self.intensity_std)


@dataclass
class EmbeddedSet:
    embeddings: np.ndarray      # (M, D) student embeddings
    teacher: np.ndarray         # (M, D) teacher embeddings
    labels: list
    kept_indices: list
    dropped_count: int


def embed_samples(samples: Sequence[PairedSample], bundle: ModelBundle,
                  batch_size: int = 256) -> EmbeddedSet:
    """Inference-mode student embeddings for a sample list."""
    pre = preprocess_samples(samples, bundle.preprocess)
    if len(pre.kept_indices) == 0:
        raise NoTrainableDataError(
            "every frame was emptied by the Doppler filter"
        )
    frames = apply_intensity_stats(pre.frames, bundle.intensity_mean,
                                   bundle.intensity_std)
    frames = frames.astype(bundle.params.config.np_dtype)
    chunks = []
    for start in range(0, frames.shape[0], batch_size):
        emb, _ = forward_batch(frames[start:start + batch_size],
                               bundle.params, mode="eval")
        chunks.append(emb)
    return EmbeddedSet(np.concatenate(chunks, axis=0), pre.teacher,
                       pre.labels, pre.kept_indices, pre.dropped_count)
