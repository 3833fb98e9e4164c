import math

import numpy as np
import pytest

from vtkit import distill
from vtkit.core import Box, BoxDeltas, DimensionMismatch
from vtkit.distill import (
    AugmentedLabels,
    DistillBatch,
    LossWeights,
    TeacherDetection,
    correct_negatives,
    generate_pseudo_labels,
    hard_label_class_loss,
    kd_class_loss,
    kd_reg_loss,
    semcon_loss,
    tag_positives,
    total_loss,
)
from vtkit.ingest import Instance


def det(box, score, logits=(2.0, 0.0, -1.0)):
    return TeacherDetection(
        box=Box(*box),
        logits=np.array(logits),
        deltas=BoxDeltas(0.0, 0.0, 0.0, 0.0),
        score=score,
    )


def gt(box, cat=1):
    return Instance(box=Box(*box), category_id=cat)


class TestGeneratePseudoLabels:
    def test_score_threshold(self):
        dets = [det((0, 0, 10, 10), 0.29), det((50, 50, 60, 60), 0.31)]
        aug = generate_pseudo_labels(dets, [], score_thresh=0.3)
        assert len(aug.pseudos) == 1
        assert aug.pseudos[0].instance.box == Box(50, 50, 60, 60)

    def test_suppressed_against_gt(self):
        # IoU 0.8 > 0.5 against a gt box -> removed
        dets = [det((0, 0, 10, 10), 0.9)]
        aug = generate_pseudo_labels(dets, [gt((0, 0, 10, 8))], nms_thresh=0.5)
        assert aug.pseudos == ()
        assert len(aug.originals) == 1

    def test_no_teacher_detections(self):
        aug = generate_pseudo_labels([], [gt((0, 0, 10, 10))])
        assert aug.pseudos == ()
        assert len(aug.originals) == 1

    def test_mutual_suppression(self):
        dets = [det((0, 0, 10, 10), 0.9), det((0, 0, 10, 10), 0.8)]
        aug = generate_pseudo_labels(dets, [])
        assert len(aug.pseudos) == 1
        assert aug.pseudos[0].instance.score == 0.9

    def test_soft_logits_retained(self):
        dets = [det((0, 0, 10, 10), 0.9, logits=(3.0, 1.0, -2.0))]
        aug = generate_pseudo_labels(dets, [])
        assert np.allclose(aug.pseudos[0].logits, [3.0, 1.0, -2.0])

    def test_category_from_foreground_argmax(self):
        # background last: logits (fg1, fg2, bg)
        dets = [det((0, 0, 10, 10), 0.9, logits=(0.0, 2.0, 5.0))]
        aug = generate_pseudo_labels(dets, [], background_index=-1)
        assert aug.pseudos[0].instance.category_id == 2
        # background first
        dets = [det((0, 0, 10, 10), 0.9, logits=(5.0, 0.0, 2.0))]
        aug = generate_pseudo_labels(dets, [], background_index=0)
        assert aug.pseudos[0].instance.category_id == 2


def batch(student, teacher, roles=None, n_cls=1, deltas=None, t_deltas=None):
    student = np.atleast_2d(np.asarray(student, dtype=float))
    teacher = np.atleast_2d(np.asarray(teacher, dtype=float))
    n = student.shape[0]
    return DistillBatch(
        boxes=tuple(Box(0, 0, 10, 10) for _ in range(n)),
        student_logits=student,
        teacher_logits=teacher,
        student_deltas=np.zeros((n, 4)) if deltas is None else np.atleast_2d(deltas),
        teacher_deltas=np.zeros((n, 4)) if t_deltas is None else np.atleast_2d(t_deltas),
        roles=np.full(n, -1) if roles is None else np.asarray(roles),
        n_cls=n_cls,
    )


class TestKdClassLoss:
    def test_equal_logits_zero(self):
        b = batch([[1.0, 2.0, 3.0]], [[1.0, 2.0, 3.0]])
        loss, grad = kd_class_loss(b)
        assert loss == 0.0
        assert np.allclose(grad, 0.0)

    def test_shift_invariance(self):
        b1 = batch([[1.0, 2.0, 3.0]], [[0.0, 1.0, -1.0]])
        b2 = batch([[8.0, 9.0, 10.0]], [[-3.0, -2.0, -4.0]])
        l1 = kd_class_loss(b1)[0]
        l2 = kd_class_loss(b2)[0]
        assert abs(l1 - l2) < 1e-9

    def test_hand_value(self):
        b = batch([[1.0, 0.0, -1.0]], [[-1.0, 0.0, 1.0]], n_cls=1)
        loss, _ = kd_class_loss(b)
        assert loss == pytest.approx(8 / 3)

    def test_sum_reduction(self):
        b = batch([[1.0, 0.0, -1.0]], [[-1.0, 0.0, 1.0]], n_cls=1)
        assert kd_class_loss(b, reduction="sum")[0] == pytest.approx(8.0)

    def test_kl_variant_zero_at_equality(self):
        b = batch([[1.0, 2.0, 3.0]], [[1.0, 2.0, 3.0]])
        assert kd_class_loss(b, variant="kl")[0] == pytest.approx(0.0, abs=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            batch([[1.0, 2.0]], [[1.0, 2.0, 3.0]])

    def test_empty_batch(self):
        b = batch(np.zeros((0, 3)), np.zeros((0, 3)))
        assert kd_class_loss(b) == (0.0, pytest.approx(np.zeros((0, 3))))


class TestSoftVsHardGradientSupport:
    def test_hard_touches_argmax_only_soft_touches_all(self):
        rng = np.random.default_rng(0)
        student = rng.normal(size=(5, 6))
        teacher = rng.normal(size=(5, 6))
        b = batch(student, teacher, n_cls=5)
        _, g_soft = kd_class_loss(b)
        _, g_hard = hard_label_class_loss(b)
        labels = teacher.argmax(axis=1)
        for i in range(5):
            # hard: positive pull only on the argmax class
            neg = np.delete(g_hard[i], labels[i])
            assert g_hard[i, labels[i]] < 0
            assert (neg > 0).all()
            # soft MSE: every class with differing centered logits gets gradient
            centered_diff = (student[i] - student[i].mean()) - (
                teacher[i] - teacher[i].mean()
            )
            assert (np.abs(g_soft[i][np.abs(centered_diff) > 1e-9]) > 0).all()


class TestKdRegLoss:
    def test_no_positives(self):
        b = batch([[0.0, 0.0]], [[0.0, 0.0]], roles=[-1])
        loss, grad = kd_reg_loss(b)
        assert loss == 0.0
        assert np.allclose(grad, 0.0)

    def test_equal_deltas_zero(self):
        b = batch([[0.0, 0.0]], [[0.0, 0.0]], roles=[1], deltas=[[0.1, 0.2, 0.3, 0.4]], t_deltas=[[0.1, 0.2, 0.3, 0.4]])
        assert kd_reg_loss(b)[0] == 0.0

    def test_hand_value(self):
        b = batch(
            [[0.0, 0.0]], [[0.0, 0.0]], roles=[1],
            deltas=[[0.5, 0.0, 0.0, 0.0]], t_deltas=[[0.0, 0.0, 0.0, 0.0]],
        )
        assert kd_reg_loss(b)[0] == pytest.approx(0.125)


class TestTagPositivesAndNegatives:
    def test_positive_above_gate(self):
        aug = AugmentedLabels(originals=(gt((0, 0, 10, 10)),), pseudos=())
        roles = tag_positives([Box(0, 0, 10, 8), Box(50, 50, 60, 60)], aug, 0.7)
        assert list(roles) == [1, -1]

    def test_overlap_with_original_blocks_negative(self):
        aug = AugmentedLabels(originals=(gt((0, 0, 10, 10)),), pseudos=())
        mask = correct_negatives([Box(0, 0, 10, 8)], aug, 0.7)
        assert not mask[0]

    def test_overlap_with_pseudo_blocks_negative(self):
        pseudo = distill.PseudoLabel(
            instance=Instance(box=Box(0, 0, 10, 10), category_id=1, score=0.9),
            logits=np.zeros(3),
            deltas=BoxDeltas(0, 0, 0, 0),
        )
        aug = AugmentedLabels(originals=(), pseudos=(pseudo,))
        mask = correct_negatives([Box(0, 0, 10, 8)], aug, 0.5)
        assert not mask[0]

    def test_low_overlap_stays_eligible(self):
        aug = AugmentedLabels(originals=(gt((0, 0, 10, 10)),), pseudos=())
        mask = correct_negatives([Box(5, 0, 15, 10)], aug, 0.5)  # IoU 1/3
        assert mask[0]

    def test_zero_overlap_never_blocked(self):
        aug = AugmentedLabels(originals=(gt((0, 0, 10, 10)),), pseudos=())
        mask = correct_negatives([Box(50, 50, 60, 60)], aug, 0.0)
        assert mask[0]


class TestSemconLoss:
    def test_identical_zero(self):
        loss, ga, gb = semcon_loss(np.array([1.0, 0.0, -1.0]), np.array([1.0, 0.0, -1.0]))
        assert loss == 0.0
        assert np.allclose(ga, 0.0) and np.allclose(gb, 0.0)

    def test_hand_norm(self):
        loss, _, _ = semcon_loss(np.array([1.0, 0.0, -1.0]), np.array([-1.0, 0.0, 1.0]))
        assert loss == pytest.approx(math.sqrt(8))

    def test_batched_average(self):
        a = np.array([[1.0, 0.0, -1.0], [1.0, 0.0, -1.0]])
        b = np.array([[-1.0, 0.0, 1.0], [1.0, 0.0, -1.0]])
        loss, _, _ = semcon_loss(a, b)
        assert loss == pytest.approx(math.sqrt(8) / 2)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            semcon_loss(np.zeros(3), np.zeros(4))


class TestTotalLoss:
    def test_all_zero_weights(self):
        w = LossWeights(0, 0, 0, 0)
        assert total_loss(1, 2, 3, 4, w) == 0.0

    def test_unit_weights(self):
        assert total_loss(1, 2, 3, 4, LossWeights()) == 10.0

    def test_pretrain_drops_transfer_terms(self):
        assert total_loss(1, 2, 3, 4, LossWeights(), phase="pretrain") == 3.0

    def test_rejects_negative_weight(self):
        with pytest.raises(ValueError):
            LossWeights(det=-1.0)
