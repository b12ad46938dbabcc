import math

import numpy as np
import pytest

from fdcheck import numerical_gradient_array

import rfdistill.distill as di
from rfdistill import synthetic

from rfdistill.distill import (Adam, CKDConfig, TrainConfig, ckd_loss,
                               ckd_loss_and_grad, correlation_report,
                               cosine_sim, mse_kd_loss, mse_kd_loss_and_grad,
                               train)
from rfdistill.encoder import EncoderConfig, init_params
from rfdistill.errors import (InsufficientSamplesError, NoTrainableDataError,
                              ShapeMismatchError, ZeroNormEmbeddingError)


def brute_force_ckd(teacher, student, tau):
    """Independent oracle: scalar-by-scalar softmax cross entropy."""
    n = len(teacher)
    total = 0.0
    for i in range(n):
        sims = []
        for j in range(n):
            t, s = teacher[i], student[j]
            cs = float(np.dot(t, s) / (np.linalg.norm(t) * np.linalg.norm(s)))
            sims.append(cs / tau)
        den = sum(math.exp(v) for v in sims)
        total += -math.log(math.exp(sims[i]) / den)
    return total / n


class TestCosine:
    def test_identical(self):
        v = np.array([1.0, 2.0, -3.0])
        assert cosine_sim(v, v) == pytest.approx(1.0)

    def test_orthogonal(self):
        assert cosine_sim([1, 0], [0, 1]) == pytest.approx(0.0)

    def test_antiparallel(self):
        v = np.array([0.3, -0.7, 2.0])
        assert cosine_sim(v, -v) == pytest.approx(-1.0)

    def test_zero_norm_raises(self):
        with pytest.raises(ZeroNormEmbeddingError):
            cosine_sim([0, 0, 0], [1, 0, 0])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            cosine_sim([1, 0], [1, 0, 0])


class TestCKDLoss:
    def test_single_pair_is_exactly_zero(self):
        rng = np.random.default_rng(0)
        t = rng.normal(size=(1, 16))
        s = rng.normal(size=(1, 16))
        assert ckd_loss(t, s, tau=10.0) == 0.0

    def test_orthonormal_matched_pairs_tau_one(self):
        t = np.zeros((2, 512))
        t[0, 0] = 1.0
        t[1, 1] = 1.0
        loss = ckd_loss(t, t.copy(), tau=1.0)
        # frozen from the brute-force softmax oracle: log(1 + e^-1)
        assert loss == pytest.approx(0.313262, abs=1e-6)
        assert loss == pytest.approx(brute_force_ckd(t, t, 1.0), rel=1e-12)

    def test_collapse_equals_log_n(self):
        v = np.full((5, 32), 0.7)
        assert ckd_loss(v, v, tau=3.0) == pytest.approx(math.log(5), abs=1e-9)

    def test_matches_brute_force_on_random_batches(self):
        rng = np.random.default_rng(1)
        for tau in (0.1, 1.0, 10.0):
            t = rng.normal(size=(7, 24))
            s = rng.normal(size=(7, 24))
            assert ckd_loss(t, s, tau) == pytest.approx(
                brute_force_ckd(t, s, tau), rel=1e-12)

    def test_positive_for_n_greater_than_one(self):
        rng = np.random.default_rng(2)
        t = rng.normal(size=(4, 8))
        s = rng.normal(size=(4, 8))
        assert ckd_loss(t, s, tau=10.0) > 0.0

    def test_rescaling_any_embedding_is_invariant(self):
        rng = np.random.default_rng(3)
        t = rng.normal(size=(5, 16))
        s = rng.normal(size=(5, 16))
        base = ckd_loss(t, s, tau=2.0)
        s2 = s.copy()
        s2[2] *= 37.5
        t2 = t.copy()
        t2[4] *= 0.001
        assert abs(ckd_loss(t2, s2, tau=2.0) - base) < 1e-9

    def test_joint_unitary_rotation_is_invariant(self):
        rng = np.random.default_rng(4)
        t = rng.normal(size=(6, 32))
        s = rng.normal(size=(6, 32))
        q, _ = np.linalg.qr(rng.normal(size=(32, 32)))
        assert abs(ckd_loss(t @ q, s @ q, tau=5.0)
                   - ckd_loss(t, s, tau=5.0)) < 1e-9

    def test_mismatched_lengths(self):
        with pytest.raises(ShapeMismatchError):
            ckd_loss(np.ones((3, 4)), np.ones((2, 4)), tau=1.0)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        t = rng.normal(size=(6, 12))
        s = rng.normal(size=(6, 12))
        for direction in ("one_way", "symmetric"):
            _, grad = ckd_loss_and_grad(t, s, tau=0.7, direction=direction)
            num = numerical_gradient_array(
                lambda: ckd_loss(t, s, tau=0.7, direction=direction), s)
            np.testing.assert_allclose(grad, num, rtol=1e-6, atol=1e-9)

    def test_symmetric_is_mean_of_both_directions(self):
        rng = np.random.default_rng(6)
        t = rng.normal(size=(5, 8))
        s = rng.normal(size=(5, 8))
        one = ckd_loss(t, s, tau=2.0)
        # swapping roles transposes the logit matrix
        other = ckd_loss(s, t, tau=2.0)
        sym = ckd_loss(t, s, tau=2.0, direction="symmetric")
        assert sym == pytest.approx(0.5 * (one + other), rel=1e-12)


class TestMSELoss:
    def test_identical_batches(self):
        v = np.random.default_rng(0).normal(size=(4, 16))
        assert mse_kd_loss(v, v) == 0.0

    def test_constant_shift_of_one(self):
        v = np.random.default_rng(1).normal(size=(3, 9))
        assert mse_kd_loss(v, v + 1.0) == pytest.approx(1.0)

    def test_two_off_elements_over_512(self):
        t = np.zeros((1, 512))
        t[0, 0] = 1.0
        s = np.zeros((1, 512))
        s[0, 1] = 1.0
        assert mse_kd_loss(t, s) == pytest.approx(2.0 / 512.0)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        t = rng.normal(size=(4, 6))
        s = rng.normal(size=(4, 6))
        _, grad = mse_kd_loss_and_grad(t, s)
        num = numerical_gradient_array(lambda: mse_kd_loss(t, s), s)
        np.testing.assert_allclose(grad, num, rtol=1e-6, atol=1e-10)


class TestCorrelationReport:
    def test_identical_sets_have_zero_diff(self):
        e = np.random.default_rng(0).normal(size=(20, 8))
        report = correlation_report(e, e.copy())
        assert report.mean_abs_diff == 0.0

    def test_permuted_dimensions_move_structure(self):
        rng = np.random.default_rng(1)
        base = rng.normal(size=(40, 6))
        mixed = base @ rng.normal(size=(6, 6))   # correlated dims
        perm = mixed[:, [3, 0, 5, 1, 4, 2]]
        report = correlation_report(mixed, perm)
        assert report.mean_abs_diff > 0.0

    def test_matrix_properties(self):
        rng = np.random.default_rng(2)
        t = rng.normal(size=(30, 10))
        s = rng.normal(size=(30, 10))
        report = correlation_report(t, s)
        for r in (report.r_teacher, report.r_student):
            np.testing.assert_array_equal(r, r.T)
            np.testing.assert_allclose(np.diag(r), 1.0)
            assert np.all(r >= -1.0) and np.all(r <= 1.0)

    def test_zero_variance_dimension_flagged(self):
        rng = np.random.default_rng(3)
        t = rng.normal(size=(15, 4))
        t[:, 2] = 3.14
        report = correlation_report(t, rng.normal(size=(15, 4)))
        assert report.teacher_degenerate_dims == [2]
        assert np.all(report.r_teacher[2, :] == 0.0)
        assert np.all(report.r_teacher[:, 2] == 0.0)

    def test_too_few_samples(self):
        with pytest.raises(InsufficientSamplesError):
            correlation_report(np.ones((1, 4)), np.ones((1, 4)))


class TestAdam:
    def test_zero_gradient_leaves_parameters_unchanged(self):
        tensors = {"w": np.array([1.0, -2.0, 3.0])}
        before = tensors["w"].copy()
        opt = Adam(lr=0.1)
        opt.step(tensors, {"w": np.zeros(3)})
        np.testing.assert_array_equal(tensors["w"], before)

    def test_descends_a_quadratic(self):
        tensors = {"w": np.array([5.0])}
        opt = Adam(lr=0.1)
        for _ in range(200):
            opt.step(tensors, {"w": 2.0 * tensors["w"]})
        assert abs(tensors["w"][0]) < 0.5


def tiny_dataset(n_per_class=6, seed=0):
    spec = synthetic.SyntheticSpec(
        n_classes=2, samples_per_class=n_per_class, seed=seed,
        subject_points=12, n_static_points=6, n_dynamic_distractors=0,
        embedding_dim=32)
    return synthetic.gen_dataset(spec)


TINY_ENCODER = EncoderConfig(p_fixed=16, d_out=32, stn_hidden=(8,),
                             d_model=8, d_k=8, phi_hidden=(8, 16),
                             psi_hidden=(16,), dropout_rate=0.3,
                             dtype="float64")


class TestTrain:
    def test_zero_learning_rate_keeps_initial_parameters(self):
        samples, _ = tiny_dataset()
        cfg = TrainConfig(learning_rate=0.0, epochs=1, seed=4)
        bundle, metrics = train(samples, TINY_ENCODER,
                                CKDConfig(tau=10.0, batch_size=8), cfg)
        reference = init_params(TINY_ENCODER, seed=4)
        for key, value in bundle.params.tensors.items():
            np.testing.assert_array_equal(value, reference.tensors[key])
        assert len(metrics) == 1

    def test_deterministic_with_fixed_seed(self):
        samples, anchors = tiny_dataset()
        val = samples[-4:]
        args = (samples[:-4], TINY_ENCODER, CKDConfig(tau=10.0, batch_size=8),
                TrainConfig(learning_rate=0.001, epochs=3, seed=9))
        b1, m1 = train(*args, val_samples=val, anchors=anchors)
        b2, m2 = train(*args, val_samples=val, anchors=anchors)
        for key in b1.params.tensors:
            np.testing.assert_array_equal(b1.params.tensors[key],
                                          b2.params.tensors[key])
        strip = [{k: v for k, v in m.items() if k != "wall_ms"} for m in m1]
        strip2 = [{k: v for k, v in m.items() if k != "wall_ms"} for m in m2]
        assert strip == strip2

    def test_empty_dataset_raises(self):
        with pytest.raises(NoTrainableDataError):
            train([], TINY_ENCODER, CKDConfig(), TrainConfig(epochs=1))

    def test_all_static_frames_raise(self):
        samples, _ = tiny_dataset()
        static = []
        for s in samples[:4]:
            data = s.frame.data.copy()
            data[:, 3] = 0.0
            static.append(di.PairedSample(frame=s.frame.with_data(data),
                                          teacher_embedding=s.teacher_embedding,
                                          label=s.label,
                                          timestamp_ms=s.timestamp_ms))
        with pytest.raises(NoTrainableDataError):
            train(static, TINY_ENCODER, CKDConfig(batch_size=4),
                  TrainConfig(epochs=1))

    def test_loss_decreases_on_easy_data(self):
        samples, _ = tiny_dataset(n_per_class=12, seed=2)
        bundle, metrics = train(
            samples, TINY_ENCODER, CKDConfig(tau=10.0, batch_size=12),
            TrainConfig(learning_rate=0.001, epochs=5, seed=1))
        assert metrics[-1]["ckd_loss"] < metrics[0]["ckd_loss"]

    def test_mse_arm_logs_its_own_key(self):
        samples, _ = tiny_dataset()
        _, metrics = train(samples, TINY_ENCODER, CKDConfig(batch_size=8),
                           TrainConfig(epochs=1, seed=0), loss="mse")
        assert "mse_loss" in metrics[0] and "ckd_loss" not in metrics[0]
