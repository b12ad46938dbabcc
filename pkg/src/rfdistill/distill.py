"""Distillation losses, diagnostics, and the training loop.

The contrastive loss treats each teacher embedding as an anchor whose
positive is the student embedding of the same sample; every other student
embedding in the minibatch is a negative. Similarities are cosines divided
by the temperature, and the per-anchor term is a stable log-softmax, so
minimizing the loss maximizes a lower bound on the mutual information
between the two embedding streams (log N minus the loss).

The mean-squared-error baseline and the correlation diagnostic exist to
reproduce the failure analysis that motivates the contrastive loss: MSE
aligns embeddings element-wise but not the correlation structure across
embedding dimensions.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import classify
from .encoder import EncoderConfig, encoder_backward, forward_batch, init_params
from .errors import (InsufficientSamplesError, NoTrainableDataError,
                     ShapeMismatchError, ZeroNormEmbeddingError)
from .pipeline import (ModelBundle, PairedSample, PreprocessConfig,
                       apply_intensity_stats, compute_intensity_stats,
                       preprocess_samples)

DIRECTIONS = ("one_way", "symmetric")


@dataclass(frozen=True)
class CKDConfig:
    tau: float = 10.0
    batch_size: int = 256
    direction: str = "one_way"

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    epochs: int = 30
    seed: int = 0
    checkpoint_every: int = 0   # 0: final checkpoint only
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        # zero is allowed so a zero-step-size run can serve as a no-op probe
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


def cosine_sim(a, b) -> float:
    """Cosine similarity of two embeddings; undefined for zero vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeMismatchError(f"embeddings must match, got {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroNormEmbeddingError("cosine similarity of a zero-norm embedding")
    return float(a @ b / (na * nb))


def _unit_rows(e, what: str):
    e = np.asarray(e, dtype=np.float64)
    norms = np.linalg.norm(e, axis=1)
    if np.any(norms == 0.0):
        raise ZeroNormEmbeddingError(f"zero-norm {what} embedding in batch")
    return e / norms[:, None], norms


def _check_batch(teacher, student):
    teacher = np.asarray(teacher, dtype=np.float64)
    student = np.asarray(student, dtype=np.float64)
    if teacher.ndim != 2 or student.ndim != 2 or teacher.shape != student.shape:
        raise ShapeMismatchError(
            f"teacher {teacher.shape} and student {student.shape} must be equal (N, D)"
        )
    if teacher.shape[0] < 1:
        raise ShapeMismatchError("need at least one pair")
    return teacher, student


def _logits(teacher, student, tau):
    t_hat, _ = _unit_rows(teacher, "teacher")
    s_hat, s_norms = _unit_rows(student, "student")
    return (t_hat @ s_hat.T) / tau, t_hat, s_hat, s_norms


def _row_ce(logits):
    # mean over anchors of (logsumexp(row) - diagonal), max-stabilized
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    return float(np.mean(lse - np.diag(logits)))


def ckd_loss(teacher, student, tau: float = 10.0,
             direction: str = "one_way") -> float:
    """Contrastive distillation loss over a batch of embedding pairs."""
    teacher, student = _check_batch(teacher, student)
    logits, _, _, _ = _logits(teacher, student, tau)
    loss = _row_ce(logits)
    if direction == "symmetric":
        loss = 0.5 * (loss + _row_ce(logits.T))
    return loss


def ckd_loss_and_grad(teacher, student, tau: float = 10.0,
                      direction: str = "one_way"):
    """Loss plus its exact gradient with respect to the student batch."""
    teacher, student = _check_batch(teacher, student)
    logits, t_hat, s_hat, s_norms = _logits(teacher, student, tau)
    n = logits.shape[0]
    eye = np.eye(n)

    def row_terms(lg):
        m = lg.max(axis=1, keepdims=True)
        e = np.exp(lg - m)
        p = e / e.sum(axis=1, keepdims=True)
        loss = float(np.mean((m[:, 0] + np.log(e.sum(axis=1))) - np.diag(lg)))
        return loss, p

    loss, p = row_terms(logits)
    dlogits = (p - eye) / n
    if direction == "symmetric":
        loss_t, p_t = row_terms(logits.T)
        loss = 0.5 * (loss + loss_t)
        dlogits = 0.5 * (dlogits + ((p_t - eye) / n).T)

    ds_hat = (dlogits.T @ t_hat) / tau
    # pull back through row normalization: project out the radial component
    radial = (ds_hat * s_hat).sum(axis=1, keepdims=True)
    d_student = (ds_hat - radial * s_hat) / s_norms[:, None]
    return loss, d_student


def mse_kd_loss(teacher, student) -> float:
    """Element-wise MSE between embedding batches (the conventional KD loss)."""
    teacher, student = _check_batch(teacher, student)
    return float(np.mean((student - teacher) ** 2))


def mse_kd_loss_and_grad(teacher, student):
    teacher, student = _check_batch(teacher, student)
    diff = student - teacher
    return float(np.mean(diff ** 2)), (2.0 / diff.size) * diff


@dataclass
class CorrelationReport:
    """Pearson correlation of embedding dimensions, teacher vs student."""

    r_teacher: np.ndarray
    r_student: np.ndarray
    mean_abs_diff: float
    teacher_degenerate_dims: list
    student_degenerate_dims: list


def _pearson_matrix(e):
    e = np.asarray(e, dtype=np.float64)
    centered = e - e.mean(axis=0)
    std = centered.std(axis=0)
    degenerate = np.flatnonzero(std == 0.0)
    safe = np.where(std == 0.0, 1.0, std)
    z = centered / safe
    r = (z.T @ z) / e.shape[0]
    r = np.clip(r, -1.0, 1.0)
    r = 0.5 * (r + r.T)
    np.fill_diagonal(r, 1.0)
    # zero-variance dimensions carry no correlation by convention
    r[degenerate, :] = 0.0
    r[:, degenerate] = 0.0
    return r, degenerate.tolist()


def correlation_report(teacher, student) -> CorrelationReport:
    """Dimension-by-dimension correlation structure of both embedding sets."""
    teacher = np.asarray(teacher, dtype=np.float64)
    student = np.asarray(student, dtype=np.float64)
    if teacher.ndim != 2 or student.ndim != 2 or teacher.shape[1] != student.shape[1]:
        raise ShapeMismatchError("need (N, D) sets with a common D")
    if teacher.shape[0] < 2 or student.shape[0] < 2:
        raise InsufficientSamplesError("correlation needs at least 2 samples")
    r_t, deg_t = _pearson_matrix(teacher)
    r_s, deg_s = _pearson_matrix(student)
    return CorrelationReport(r_t, r_s, float(np.mean(np.abs(r_t - r_s))),
                             deg_t, deg_s)


class Adam:
    """Standard Adam over a dict of named tensors, updated in place."""

    def __init__(self, lr: float = 0.001, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, tensors: dict, grads: dict):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for key in tensors:
            g = grads[key]
            if key not in self.m:
                self.m[key] = np.zeros_like(tensors[key])
                self.v[key] = np.zeros_like(tensors[key])
            self.m[key] = self.beta1 * self.m[key] + (1.0 - self.beta1) * g
            self.v[key] = self.beta2 * self.v[key] + (1.0 - self.beta2) * (g * g)
            update = (self.m[key] / b1c) / (np.sqrt(self.v[key] / b2c) + self.eps)
            tensors[key] -= self.lr * update


LOSSES = ("ckd", "mse")


def train(train_samples: Sequence[PairedSample],
          encoder_config: EncoderConfig,
          ckd_config: CKDConfig,
          train_config: TrainConfig,
          val_samples: Optional[Sequence[PairedSample]] = None,
          anchors=None,
          v_thresh: float = 0.0,
          loss: str = "ckd",
          log_path=None,
          checkpoint_hook: Optional[Callable] = None):
    """Train the encoder; returns (ModelBundle, per-epoch metrics list).

    Deterministic for a fixed seed in single-threaded execution: shuffling
    and dropout draw from generators derived from train_config.seed. When
    val_samples and anchors are given, each epoch logs held-out zero-shot
    accuracy and the teacher/student correlation gap on that split.
    """
    if loss not in LOSSES:
        raise ValueError(f"loss must be one of {LOSSES}")
    preprocess = PreprocessConfig(v_thresh=v_thresh,
                                  p_fixed=encoder_config.p_fixed,
                                  seed=train_config.seed)
    pre = preprocess_samples(train_samples, preprocess)
    n_kept = len(pre.kept_indices)
    if n_kept == 0:
        raise NoTrainableDataError(
            f"no trainable samples: {pre.dropped_count} frames emptied by filtering"
        )
    if pre.dropped_count:
        logging.getLogger("rfdistill").warning(
            "dropped %d of %d training frames emptied by the Doppler filter",
            pre.dropped_count, len(train_samples))
    if pre.teacher.shape[1] != encoder_config.d_out:
        raise ShapeMismatchError(
            f"teacher width {pre.teacher.shape[1]} != encoder d_out {encoder_config.d_out}"
        )
    mean, std = compute_intensity_stats(pre.frames)
    frames = apply_intensity_stats(pre.frames, mean, std)
    frames = frames.astype(encoder_config.np_dtype)   # convert once, not per batch
    teacher = pre.teacher

    params = init_params(encoder_config, train_config.seed)
    bundle = ModelBundle(params, preprocess, mean, std)
    opt = Adam(train_config.learning_rate, train_config.beta1,
               train_config.beta2, train_config.eps)
    shuffle_ss, dropout_ss = np.random.SeedSequence(train_config.seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    dropout_rng = np.random.default_rng(dropout_ss)

    anchor_matrix = None
    if val_samples is not None and anchors is not None and len(val_samples) > 0:
        anchor_matrix = classify.AnchorMatrix.from_anchors(anchors)

    loss_key = "ckd_loss" if loss == "ckd" else "mse_loss"
    metrics = []
    log_file = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, train_config.epochs + 1):
            t0 = time.perf_counter()
            order = shuffle_rng.permutation(n_kept)
            total, count = 0.0, 0
            for start in range(0, n_kept, ckd_config.batch_size):
                idx = order[start:start + ckd_config.batch_size]
                emb, cache = forward_batch(frames[idx], params, mode="train",
                                           rng=dropout_rng)
                if loss == "ckd":
                    batch_loss, d_emb = ckd_loss_and_grad(
                        teacher[idx], emb, ckd_config.tau, ckd_config.direction)
                else:
                    batch_loss, d_emb = mse_kd_loss_and_grad(teacher[idx], emb)
                grads = encoder_backward(cache, d_emb, params)
                opt.step(params.tensors, grads)
                total += batch_loss * len(idx)
                count += len(idx)
            record = {"epoch": epoch, loss_key: total / count}

            if anchor_matrix is not None:
                val_params = params.copy()
                val_params.mode = "eval"
                val_bundle = ModelBundle(val_params, preprocess, mean, std)
                result = classify.evaluate(val_samples, val_bundle, anchor_matrix)
                record["val_zero_shot_acc"] = result.accuracy
                emb_set = classify.embed_labeled(val_samples, val_bundle)
                if emb_set.embeddings.shape[0] >= 2:
                    report = correlation_report(emb_set.teacher,
                                                emb_set.embeddings)
                    record["mean_abs_corr_diff"] = report.mean_abs_diff

            record["wall_ms"] = int(round((time.perf_counter() - t0) * 1000.0))
            metrics.append(record)
            if log_file is not None:
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()
            if checkpoint_hook is not None and train_config.checkpoint_every > 0 \
                    and epoch % train_config.checkpoint_every == 0:
                checkpoint_hook(epoch, bundle)
    finally:
        if log_file is not None:
            log_file.close()

    params.mode = "eval"
    return bundle, metrics
