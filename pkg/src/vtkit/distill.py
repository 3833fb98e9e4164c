"""Teacher-student distillation machinery.

Pseudo-label generation from frozen-teacher detections, the RPN/RCNN
knowledge-distillation losses over mean-centered logits and box deltas,
negative-sample correction against the augmented labels, the semantic
consistency penalty between paired frames, and the combined objective.

No networks run here: teacher outputs are precomputed values passed in.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .core import Box, BoxDeltas, DimensionMismatch, iou, mean_center, nms, smooth_l1, softmax
from .ingest import Instance

PSEUDO_SCORE_THRESH = 0.3
PSEUDO_NMS_THRESH = 0.5
RPN_N_CLS = 256
RPN_POS_IOU = 0.7
RCNN_M_CLS = 512
RCNN_POS_IOU = 0.5


@dataclass(frozen=True)
class TeacherDetection:
    box: Box
    logits: np.ndarray
    deltas: BoxDeltas
    score: float


@dataclass(frozen=True)
class PseudoLabel:
    instance: Instance
    logits: np.ndarray
    deltas: BoxDeltas


@dataclass(frozen=True)
class AugmentedLabels:
    """Original ground truth merged with surviving teacher pseudo labels."""

    originals: Tuple[Instance, ...]
    pseudos: Tuple[PseudoLabel, ...]

    def all_boxes(self) -> List[Box]:
        return [i.box for i in self.originals] + [p.instance.box for p in self.pseudos]


def generate_pseudo_labels(
    teacher_dets: Sequence[TeacherDetection],
    gt: Sequence[Instance],
    score_thresh: float = PSEUDO_SCORE_THRESH,
    nms_thresh: float = PSEUDO_NMS_THRESH,
    background_index: int = -1,
) -> AugmentedLabels:
    """Fill in missing annotations with thresholded teacher detections.

    Detections below score_thresh are dropped; the rest are NMS'd
    jointly with the ground truth, which participates with infinite
    score so pseudos never displace a real label. The pseudo category
    is the argmax over foreground logits; background_index names the
    background entry of the logit vector (-1 = last).
    """
    survivors = [d for d in teacher_dets if d.score >= score_thresh]
    items: List[Tuple[Box, float]] = [(g.box, float("inf")) for g in gt]
    items += [(d.box, d.score) for d in survivors]
    kept = set(nms(items, nms_thresh))
    pseudos = []
    for offset, det in enumerate(survivors):
        if len(gt) + offset in kept:
            logits = np.asarray(det.logits, dtype=np.float64)
            bg = background_index % logits.size
            fg = [i for i in range(logits.size) if i != bg]
            category = 1 + max(range(len(fg)), key=lambda k: logits[fg[k]]) if fg else 1
            pseudos.append(
                PseudoLabel(
                    instance=Instance(
                        box=det.box, category_id=category, score=det.score
                    ),
                    logits=np.asarray(det.logits, dtype=np.float64),
                    deltas=det.deltas,
                )
            )
    return AugmentedLabels(originals=tuple(gt), pseudos=tuple(pseudos))


@dataclass
class DistillBatch:
    """Candidate boxes with paired student/teacher head outputs.

    Role tags: 1 = positive (IoU above the positive gate against the
    augmented ground truth), -1 = negative, 0 = ignored. n_cls is the
    fixed classification normalizer (256 for RPN, 512 for RCNN).
    """

    boxes: Tuple[Box, ...]
    student_logits: np.ndarray  # (N, C)
    teacher_logits: np.ndarray  # (N, C)
    student_deltas: np.ndarray  # (N, 4)
    teacher_deltas: np.ndarray  # (N, 4)
    roles: np.ndarray  # (N,) in {-1, 0, 1}
    n_cls: int = RPN_N_CLS

    def __post_init__(self):
        self.student_logits = np.asarray(self.student_logits, dtype=np.float64)
        self.teacher_logits = np.asarray(self.teacher_logits, dtype=np.float64)
        self.student_deltas = np.asarray(self.student_deltas, dtype=np.float64)
        self.teacher_deltas = np.asarray(self.teacher_deltas, dtype=np.float64)
        self.roles = np.asarray(self.roles, dtype=np.int64)
        if self.student_logits.shape != self.teacher_logits.shape:
            raise DimensionMismatch(
                f"logit shapes differ: {self.student_logits.shape} "
                f"vs {self.teacher_logits.shape}"
            )
        if self.student_deltas.shape != self.teacher_deltas.shape:
            raise DimensionMismatch("delta shapes differ")


def tag_positives(
    candidates: Sequence[Box],
    aug: AugmentedLabels,
    pos_iou: float,
) -> np.ndarray:
    """Role tags for a candidate set: positive above the IoU gate, else negative."""
    boxes = aug.all_boxes()
    roles = np.full(len(candidates), -1, dtype=np.int64)
    for i, c in enumerate(candidates):
        if boxes and max(iou(c, b) for b in boxes) > pos_iou:
            roles[i] = 1
    return roles


def kd_class_loss(
    batch: DistillBatch,
    variant: str = "mse",
    reduction: str = "mean",
) -> Tuple[float, np.ndarray]:
    """Classification-logit distillation over mean-centered logits.

    MSE variant: per candidate, the squared difference of centered
    student and teacher logits reduced over the logit dimension (mean
    by default, sum selectable), summed over candidates and divided by
    the fixed normalizer n_cls. The KL variant softmaxes the centered
    logits at temperature 1. Returns the loss and its gradient w.r.t.
    the raw student logits.
    """
    u = batch.student_logits
    u_star = batch.teacher_logits
    if u.size == 0:
        return 0.0, np.zeros_like(u)
    n, c = u.shape
    cu = mean_center(u)
    ct = mean_center(u_star)
    if variant == "mse":
        d = cu - ct
        if reduction == "mean":
            loss = float((d * d).mean(axis=1).sum() / batch.n_cls)
            grad_centered = 2.0 * d / (c * batch.n_cls)
        elif reduction == "sum":
            loss = float((d * d).sum() / batch.n_cls)
            grad_centered = 2.0 * d / batch.n_cls
        else:
            raise ValueError(f"unknown reduction: {reduction}")
    elif variant == "kl":
        p = softmax(cu)
        p_star = softmax(ct)
        loss = float((p_star * (np.log(p_star) - np.log(p))).sum() / batch.n_cls)
        grad_centered = (p - p_star) / batch.n_cls
    else:
        raise ValueError(f"unknown kd variant: {variant}")
    # chain rule through mean-centering: project out the per-row mean
    grad = grad_centered - grad_centered.mean(axis=1, keepdims=True)
    return loss, grad


def hard_label_class_loss(batch: DistillBatch) -> Tuple[float, np.ndarray]:
    """Hard pseudo-label ablation: cross-entropy against the teacher argmax."""
    u = batch.student_logits
    if u.size == 0:
        return 0.0, np.zeros_like(u)
    labels = np.argmax(batch.teacher_logits, axis=1)
    p = softmax(u)
    z = u - u.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(u.shape[0])
    loss = float((lse - z[rows, labels]).sum() / batch.n_cls)
    grad = p.copy()
    grad[rows, labels] -= 1.0
    return loss, grad / batch.n_cls


def kd_reg_loss(batch: DistillBatch, beta: float = 1.0) -> Tuple[float, np.ndarray]:
    """Box-delta distillation over positive candidates only.

    Smooth L1 summed over the four coordinates, averaged over the
    positive count; zero with an all-zero gradient when there are no
    positives.
    """
    grad = np.zeros_like(batch.student_deltas)
    pos = np.flatnonzero(batch.roles == 1)
    if pos.size == 0:
        return 0.0, grad
    total = 0.0
    for i in pos:
        for k in range(4):
            l, g = smooth_l1(
                batch.student_deltas[i, k], batch.teacher_deltas[i, k], beta
            )
            total += l
            grad[i, k] = g / pos.size
    return total / pos.size, grad


def correct_negatives(
    candidates: Sequence[Box],
    aug: AugmentedLabels,
    iou_thresh: float,
) -> np.ndarray:
    """Mask of candidates still eligible as background samples.

    A candidate is excluded whenever it overlaps any augmented label
    (original or pseudo) above iou_thresh, so previously-seen objects
    never get pushed toward background.
    """
    boxes = aug.all_boxes()
    mask = np.ones(len(candidates), dtype=bool)
    if not boxes:
        return mask
    for i, c in enumerate(candidates):
        if max(iou(c, b) for b in boxes) > iou_thresh:
            mask[i] = False
    return mask


def semcon_loss(
    p_t: np.ndarray, p_t_tau: np.ndarray
) -> Tuple[float, np.ndarray, np.ndarray]:
    """Semantic consistency: L2 distance between centered paired logits.

    Accepts a single logit vector per view or a (N, C) batch of matched
    instances; batches are averaged over instances. Gradients are taken
    w.r.t. the raw inputs (the centering projection is part of the op)
    and are zero at exact equality.
    """
    a = np.atleast_2d(np.asarray(p_t, dtype=np.float64))
    b = np.atleast_2d(np.asarray(p_t_tau, dtype=np.float64))
    if a.shape != b.shape:
        raise DimensionMismatch(f"logit shapes differ: {a.shape} vs {b.shape}")
    n = a.shape[0]
    d = mean_center(a) - mean_center(b)
    norms = np.sqrt((d * d).sum(axis=1))
    loss = float(norms.sum() / n)
    grad_a = np.zeros_like(a)
    nz = norms > 0.0
    grad_a[nz] = d[nz] / norms[nz, None] / n
    grad_a -= grad_a.mean(axis=1, keepdims=True)
    grad_b = -grad_a
    if np.asarray(p_t).ndim == 1:
        return loss, grad_a[0], grad_b[0]
    return loss, grad_a, grad_b


@dataclass(frozen=True)
class LossWeights:
    det: float = 1.0
    track: float = 1.0
    kd: float = 1.0
    semcon: float = 1.0

    def __post_init__(self):
        for v in (self.det, self.track, self.kd, self.semcon):
            if not (np.isfinite(v) and v >= 0.0):
                raise ValueError(f"loss weights must be finite and >= 0: {self!r}")


def total_loss(
    det: float,
    track: float,
    kd: float,
    semcon: float,
    w: LossWeights = LossWeights(),
    phase: str = "finetune",
) -> float:
    """Combined objective; distillation terms apply only while fine-tuning."""
    if phase not in ("pretrain", "finetune"):
        raise ValueError(f"unknown phase: {phase}")
    transfer = 1.0 if phase == "finetune" else 0.0
    return (
        w.det * det
        + w.track * track
        + transfer * (w.kd * kd + w.semcon * semcon)
    )


def augmented_labels_to_json(image_id, aug: AugmentedLabels) -> dict:
    def inst_json(i: Instance) -> dict:
        d: dict = {"bbox": i.box.as_list(), "category_id": i.category_id}
        if i.track_id is not None:
            d["track_id"] = i.track_id
        if i.score is not None:
            d["score"] = i.score
        return d

    return {
        "image_id": image_id,
        "originals": [inst_json(i) for i in aug.originals],
        "pseudos": [
            {
                **inst_json(p.instance),
                "logits": list(map(float, p.logits)),
                "deltas": list(map(float, p.deltas)),
            }
            for p in aug.pseudos
        ],
    }
