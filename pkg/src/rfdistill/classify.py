"""Zero-shot and few-shot classification against text anchors.

Zero-shot scores a query embedding against the stacked, row-normalized
anchor matrix; the argmax row wins. Few-shot adds, per class, the sum of
cosines to that class's labeled support embeddings plus a gamma-weighted
cosine to the class's text anchor. The support sum is deliberately not
normalized by the shot count; evaluation always uses equal shots per class.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .errors import (MissingSupportError, ShapeMismatchError,
                     UnknownLabelError, ZeroNormEmbeddingError)
from .pipeline import EmbeddedSet, ModelBundle, PairedSample, embed_samples


@dataclass(frozen=True)
class TextAnchor:
    """A class name, its prompt, and the prompt's embedding."""

    class_name: str
    prompt: str
    embedding: np.ndarray

    def __post_init__(self):
        emb = np.asarray(self.embedding, dtype=np.float64)
        if emb.ndim != 1:
            raise ValueError("anchor embedding must be 1-d")
        if not np.all(np.isfinite(emb)):
            raise ValueError("anchor embedding must be finite")
        if np.linalg.norm(emb) == 0.0:
            raise ZeroNormEmbeddingError(
                f"anchor {self.class_name!r} has a zero embedding"
            )
        object.__setattr__(self, "embedding", emb)


@dataclass(frozen=True)
class FewShotConfig:
    gamma: float = 5.5

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")


class AnchorMatrix:
    """Anchor embeddings stacked into rows and L2-normalized at load time."""

    def __init__(self, class_names: Sequence[str], matrix: np.ndarray):
        names = list(class_names)
        if len(set(names)) != len(names):
            raise ValueError("anchor class names must be unique")
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] != len(names):
            raise ShapeMismatchError("matrix rows must match class names")
        norms = np.linalg.norm(matrix, axis=1)
        if np.any(norms == 0.0):
            raise ZeroNormEmbeddingError("anchor with zero norm")
        self.class_names = names
        self.matrix = matrix / norms[:, None]
        self.index = {name: i for i, name in enumerate(names)}

    @classmethod
    def from_anchors(cls, anchors) -> "AnchorMatrix":
        if isinstance(anchors, AnchorMatrix):
            return anchors
        anchors = list(anchors)
        return cls([a.class_name for a in anchors],
                   np.stack([a.embedding for a in anchors]))

    def __len__(self) -> int:
        return len(self.class_names)


def _unit(vec, what: str = "query") -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float64)
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        raise ZeroNormEmbeddingError(f"zero-norm {what} embedding")
    return vec / norm


def zero_shot(query, anchors: AnchorMatrix):
    """Predicted class plus the per-class cosine score vector.

    Ties go to the lowest anchor index, so the prediction is deterministic;
    the full score vector is returned so callers can see ties.
    """
    q = _unit(query)
    scores = anchors.matrix @ q
    best = int(np.argmax(scores))
    return anchors.class_names[best], scores


SupportSet = dict


def few_shot(query, support: SupportSet, anchors: AnchorMatrix,
             config: FewShotConfig = FewShotConfig()):
    """Predicted class plus per-class likelihoods (anchor row order).

    likelihood(c) = sum over support embeddings of cos(query, s)
                    + gamma * cos(query, anchor_c).
    """
    q = _unit(query)
    likelihood = np.empty(len(anchors))
    for i, name in enumerate(anchors.class_names):
        members = support.get(name) or []
        if len(members) == 0:
            raise MissingSupportError(f"class {name!r} has no support examples")
        sims = sum(float(q @ _unit(m, "support")) for m in members)
        likelihood[i] = sims + config.gamma * float(q @ anchors.matrix[i])
    best = int(np.argmax(likelihood))
    return anchors.class_names[best], likelihood


def embed_labeled(samples: Sequence[PairedSample], bundle: ModelBundle) -> EmbeddedSet:
    """Student embeddings for labeled samples (drops filtered-out frames)."""
    return embed_samples(samples, bundle)


@dataclass
class EvalResult:
    class_names: list
    counts: np.ndarray          # raw confusion counts, rows = true class
    confusion: np.ndarray       # row-normalized
    accuracy: float
    n_queries: int
    n_dropped: int
    per_class: dict             # name -> {precision, recall, support}
    mode: str

    def summary_dict(self) -> dict:
        return {
            "mode": self.mode,
            "accuracy": self.accuracy,
            "n_queries": self.n_queries,
            "n_dropped_queries": self.n_dropped,
            "class_names": list(self.class_names),
            "per_class": self.per_class,
        }


def _confusion_from_pairs(true_idx, pred_idx, k):
    counts = np.zeros((k, k), dtype=np.int64)
    for t, p in zip(true_idx, pred_idx):
        counts[t, p] += 1
    row_sums = counts.sum(axis=1, keepdims=True)
    confusion = np.divide(counts, row_sums, where=row_sums > 0,
                          out=np.zeros_like(counts, dtype=np.float64))
    return counts, confusion


def _sample_supports(pool: EmbeddedSet, anchors: AnchorMatrix, k_shots: int,
                     seed: int):
    by_class: dict = {name: [] for name in anchors.class_names}
    for emb, label in zip(pool.embeddings, pool.labels):
        if label in by_class:
            by_class[label].append(emb)
    rng = np.random.default_rng([int(seed), 0x5407])
    support: dict = {}
    for name in anchors.class_names:
        members = by_class[name]
        if len(members) < k_shots:
            raise MissingSupportError(
                f"class {name!r} has {len(members)} support candidates, "
                f"needs {k_shots}"
            )
        pick = rng.choice(len(members), size=k_shots, replace=False)
        support[name] = [members[i] for i in pick]
    return support


def evaluate(samples: Sequence[PairedSample], bundle: ModelBundle,
             anchors, mode: Union[str, int] = "zero", seed: int = 0,
             support_pool: Optional[Sequence[PairedSample]] = None,
             few_shot_config: FewShotConfig = FewShotConfig()) -> EvalResult:
    """Confusion matrix and accuracy on a labeled dataset.

    mode is "zero" or an integer K for K-shot scoring. In K-shot mode the
    supports are drawn (seeded, without replacement) from support_pool,
    which must be disjoint from the query samples. Queries whose frames are
    emptied by the Doppler filter are dropped and counted.
    """
    anchors = AnchorMatrix.from_anchors(anchors)
    for s in samples:
        if s.label is None:
            raise UnknownLabelError("evaluation sample has no label")
        if s.label not in anchors.index:
            raise UnknownLabelError(f"label {s.label!r} not in anchor set")

    embedded = embed_samples(samples, bundle)
    k = len(anchors)

    if mode == "zero":
        mode_name = "zero-shot"
        preds = [zero_shot(e, anchors)[0] for e in embedded.embeddings]
    else:
        k_shots = int(mode)
        if k_shots < 1:
            raise ValueError("K-shot mode needs K >= 1")
        if support_pool is None:
            raise MissingSupportError("K-shot evaluation needs a support pool")
        mode_name = f"{k_shots}-shot"
        pool = embed_samples(support_pool, bundle)
        support = _sample_supports(pool, anchors, k_shots, seed)
        preds = [few_shot(e, support, anchors, few_shot_config)[0]
                 for e in embedded.embeddings]

    true_idx = [anchors.index[label] for label in embedded.labels]
    pred_idx = [anchors.index[p] for p in preds]
    counts, confusion = _confusion_from_pairs(true_idx, pred_idx, k)
    correct = int(np.trace(counts))
    total = int(counts.sum())
    accuracy = correct / total if total else 0.0

    per_class = {}
    for i, name in enumerate(anchors.class_names):
        tp = counts[i, i]
        support_n = counts[i].sum()
        predicted_n = counts[:, i].sum()
        per_class[name] = {
            "precision": float(tp / predicted_n) if predicted_n else 0.0,
            "recall": float(tp / support_n) if support_n else 0.0,
            "support": int(support_n),
        }
    return EvalResult(list(anchors.class_names), counts, confusion, accuracy,
                      total, embedded.dropped_count, per_class, mode_name)
