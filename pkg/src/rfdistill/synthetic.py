"""Deterministic synthetic world: oracle teacher plus parametric scenes.

Stands in for the camera/teacher side so the whole pipeline is verifiable
on a desk. Each class owns a unit anchor vector in the embedding space;
teacher embeddings are noisy copies of the class anchor, and text anchors
are the anchors themselves (an idealized, perfectly aligned image/text
space). Point clouds mix three populations:

  * subject points: class-dependent geometry, nonzero dopplers, moderate
    intensity;
  * static clutter: doppler exactly zero, so the threshold-0 Doppler filter
    removes precisely these points;
  * dynamic distractor clusters: dopplers drawn from the same magnitude
    band as the subject, so no velocity threshold can remove them and the
    encoder's attention has to learn to ignore them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .classify import AnchorMatrix, TextAnchor, zero_shot
from .pipeline import PairedSample
from .pointcloud import PointFrame

DOPPLER_MAX = 1.2   # m/s; matches the sweep range of the threshold study
DOPPLER_MIN = 0.02  # keeps every moving point strictly nonzero


@dataclass(frozen=True)
class SegmentSpec:
    """One body-segment blob: offset from the subject centroid, spatial
    spread, a multiplier on the class's base doppler, and point share."""

    offset: tuple
    spread: float
    doppler_mul: float
    weight: float
    intensity_mul: float


@dataclass(frozen=True)
class ClassKinematics:
    name: str
    center: tuple               # mean subject location in the room
    centroid_jitter: float      # per-sample wander of the subject centroid
    extent: float               # scales segment offsets and spreads
    base_doppler: float         # m/s, class signature velocity
    base_intensity: float
    segments: tuple


DEFAULT_SEGMENTS = (
    SegmentSpec(offset=(0.0, 0.0, 0.0), spread=0.18, doppler_mul=0.6,
                weight=0.5, intensity_mul=1.2),
    SegmentSpec(offset=(0.0, 0.0, 0.45), spread=0.14, doppler_mul=1.4,
                weight=0.25, intensity_mul=0.9),
    SegmentSpec(offset=(0.0, 0.0, -0.5), spread=0.16, doppler_mul=0.9,
                weight=0.25, intensity_mul=1.0),
)


def make_default_kinematics(n_classes: int) -> tuple:
    """Well-separated class table: centers on a ring, graded velocity,
    extent, and intensity signatures."""
    table = []
    for c in range(n_classes):
        u = c / max(n_classes - 1, 1)
        angle = 2.0 * math.pi * c / n_classes
        center = (2.0 * math.cos(angle), 3.5 + 1.5 * math.sin(angle), 0.9)
        table.append(ClassKinematics(
            name=f"activity_{c}",
            center=center,
            centroid_jitter=0.25,
            extent=0.8 + 0.5 * u,
            base_doppler=0.15 + 0.9 * u,
            base_intensity=5.0 + 6.0 * u,
            segments=DEFAULT_SEGMENTS,
        ))
    return tuple(table)


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 5
    samples_per_class: int = 400
    seed: int = 1
    embedding_noise_sigma: float = 0.05
    n_static_points: int = 40
    n_dynamic_distractors: int = 1
    distractor_points: int = 12
    subject_points: int = 60
    embedding_dim: int = 512
    window_ms: int = 200
    anchor_max_abs_cos: float = 0.3
    kinematics: Optional[tuple] = None

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        if min(self.samples_per_class, self.subject_points,
               self.embedding_dim, self.window_ms) <= 0:
            raise ValueError("counts must be positive")
        if min(self.n_static_points, self.n_dynamic_distractors,
               self.distractor_points) < 0:
            raise ValueError("counts must be non-negative")
        if self.embedding_noise_sigma < 0:
            raise ValueError("sigma must be >= 0")

    def resolved_kinematics(self) -> tuple:
        if self.kinematics is not None:
            if len(self.kinematics) != self.n_classes:
                raise ValueError("kinematics table must cover every class")
            return self.kinematics
        return make_default_kinematics(self.n_classes)


class OracleTeacher:
    """Per-class unit anchors plus the isotropic noise model."""

    def __init__(self, n_classes: int, dim: int, seed: int,
                 sigma: float, max_abs_cos: float = 0.3):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
        for attempt in range(100):
            anchors = rng.standard_normal((n_classes, dim))
            anchors /= np.linalg.norm(anchors, axis=1, keepdims=True)
            gram = anchors @ anchors.T
            off = np.abs(gram - np.eye(n_classes)).max()
            if off <= max_abs_cos:
                break
        else:
            raise RuntimeError(
                f"could not draw {n_classes} anchors with |cos| <= {max_abs_cos}"
            )
        self.anchors = anchors
        self.sigma = sigma

    def embed(self, class_idx: int, rng: np.random.Generator) -> np.ndarray:
        noisy = self.anchors[class_idx] + self.sigma * rng.standard_normal(
            self.anchors.shape[1])
        return noisy / np.linalg.norm(noisy)


def _doppler_values(rng, n, mean, sigma=0.08):
    mags = np.clip(np.abs(rng.normal(mean, sigma, size=n)),
                   DOPPLER_MIN, DOPPLER_MAX)
    signs = rng.choice((-1.0, 1.0), size=n)
    return mags * signs


def _subject_points(rng, kin: ClassKinematics, n: int):
    centroid = np.asarray(kin.center) + kin.centroid_jitter * rng.standard_normal(3)
    shares = np.array([s.weight for s in kin.segments])
    counts = np.floor(shares / shares.sum() * n).astype(int)
    counts[0] += n - counts.sum()
    rows = []
    for seg, cnt in zip(kin.segments, counts):
        if cnt == 0:
            continue
        pos = (centroid
               + kin.extent * np.asarray(seg.offset)
               + kin.extent * seg.spread * rng.standard_normal((cnt, 3)))
        dop = _doppler_values(rng, cnt, kin.base_doppler * seg.doppler_mul)
        inten = np.abs(rng.normal(kin.base_intensity * seg.intensity_mul,
                                  1.0, size=cnt))
        rows.append(np.column_stack([pos, dop, inten]))
    return np.concatenate(rows, axis=0), centroid


def _static_clutter(rng, n):
    pos = np.column_stack([
        rng.uniform(-4.0, 4.0, size=n),
        rng.uniform(0.5, 6.0, size=n),
        rng.uniform(0.0, 2.4, size=n),
    ])
    dop = np.zeros(n)
    inten = np.abs(rng.normal(14.0, 2.5, size=n))
    return np.column_stack([pos, dop, inten])


def _distractor_cluster(rng, n):
    center = np.array([rng.uniform(-3.5, 3.5), rng.uniform(0.5, 5.5),
                       rng.uniform(0.2, 1.6)])
    pos = center + 0.2 * rng.standard_normal((n, 3))
    # wide band spanning the subjects' velocity range, so no threshold can
    # remove the distractor without also cutting into subject points
    dop = _doppler_values(rng, n, 0.5, sigma=0.25)
    inten = np.abs(rng.normal(7.0, 1.5, size=n))
    return np.column_stack([pos, dop, inten])


def gen_dataset(spec: SyntheticSpec):
    """Generate (samples, anchors); a pure function of the spec.

    Sample order interleaves classes (seeded shuffle) along a contiguous
    timestamp grid, so contiguous time splits stay class-balanced.
    """
    kin = spec.resolved_kinematics()
    teacher = OracleTeacher(spec.n_classes, spec.embedding_dim, spec.seed,
                            spec.embedding_noise_sigma, spec.anchor_max_abs_cos)
    order_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1]))
    class_seq = np.repeat(np.arange(spec.n_classes), spec.samples_per_class)
    order_rng.shuffle(class_seq)

    samples = []
    for i, c in enumerate(class_seq):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 2, i]))
        parts = [_subject_points(rng, kin[c], spec.subject_points)[0]]
        if spec.n_static_points:
            parts.append(_static_clutter(rng, spec.n_static_points))
        for _ in range(spec.n_dynamic_distractors):
            parts.append(_distractor_cluster(rng, spec.distractor_points))
        frame = PointFrame(np.concatenate(parts, axis=0),
                           timestamp_ms=i * spec.window_ms,
                           window_ms=spec.window_ms)
        samples.append(PairedSample(
            frame=frame,
            teacher_embedding=teacher.embed(int(c), rng),
            label=kin[c].name,
            timestamp_ms=i * spec.window_ms,
        ))

    anchors = [TextAnchor(class_name=k.name, prompt=f"A person {k.name}",
                          embedding=teacher.anchors[c])
               for c, k in enumerate(kin)]
    return samples, anchors


def oracle_zero_shot_bound(spec: SyntheticSpec) -> float:
    """Accuracy of classifying the teacher embeddings themselves.

    This is the ceiling any student trained against this teacher can
    approach; with sigma = 0 it is exactly 1.0.
    """
    samples, anchors = gen_dataset(spec)
    matrix = AnchorMatrix.from_anchors(anchors)
    correct = sum(1 for s in samples
                  if zero_shot(s.teacher_embedding, matrix)[0] == s.label)
    return correct / len(samples)
