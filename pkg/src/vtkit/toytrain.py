"""Desk-scale training demo for the image-to-video transfer problem.

A tiny linear detector head (class logits + box deltas + tracking
embedding) is trained on synthetic proposal features drawn from
per-category Gaussian clusters. Fine-tuning on a label subset while the
missing categories keep appearing unannotated reproduces catastrophic
forgetting; the teacher-student scheme (pseudo labels, logit/delta
distillation, negative correction, semantic consistency) prevents it.
Logit layout: index 0 is background, index c is category c, and newly
added categories append columns so the pretrained weights stay a prefix.
"""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import distill, gradcheck
from .core import Box, BoxDeltas, cross_entropy, encode_deltas, iou, smooth_l1, softmax
from .distill import AugmentedLabels, LossWeights, TeacherDetection
from .ingest import Instance
from .tracker import track_contrastive_loss

SCHEMA_VERSION = 1


class DivergenceDetected(RuntimeError):
    pass


@dataclass(frozen=True)
class WorldParams:
    total_categories: int = 12
    feature_dim: int = 16
    embed_dim: int = 8
    canvas: Tuple[int, int] = (200, 200)
    cluster_scale: float = 2.5
    noise_sigma: float = 0.8
    proposal_noise: float = 0.25
    instances_per_scene: Tuple[int, int] = (2, 4)
    positives_per_instance: int = 2
    background_proposals: int = 6
    scenes_per_epoch: int = 20


@dataclass
class SceneInstance:
    category_id: int
    box: Box
    feature: np.ndarray
    feature_tau: np.ndarray
    labeled: bool


@dataclass
class Proposal:
    box: Box
    feature: np.ndarray
    instance_index: Optional[int]  # None for pure background proposals


@dataclass
class Scene:
    instances: List[SceneInstance]
    proposals: List[Proposal]


class SyntheticWorld:
    """Per-category Gaussian feature clusters plus a scene generator."""

    def __init__(self, params: WorldParams = WorldParams(), seed: int = 0):
        self.params = params
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0])))
        self.means = rng.normal(
            size=(params.total_categories, params.feature_dim)
        ) * params.cluster_scale

    def feature(self, category_id: int, rng: np.random.Generator) -> np.ndarray:
        return self.means[category_id - 1] + rng.normal(
            size=self.params.feature_dim
        ) * self.params.noise_sigma

    def _random_box(self, rng: np.random.Generator) -> Box:
        w_c, h_c = self.params.canvas
        w = float(rng.uniform(30, 70))
        h = float(rng.uniform(30, 70))
        x = float(rng.uniform(0, w_c - w))
        y = float(rng.uniform(0, h_c - h))
        return Box(x, y, x + w, y + h)

    def make_scene(
        self,
        rng: np.random.Generator,
        present: Sequence[int],
        labeled: Sequence[int],
    ) -> Scene:
        p = self.params
        labeled_set = set(labeled)
        n = int(rng.integers(p.instances_per_scene[0], p.instances_per_scene[1] + 1))
        instances = []
        for _ in range(n):
            c = int(present[rng.integers(len(present))])
            instances.append(
                SceneInstance(
                    category_id=c,
                    box=self._random_box(rng),
                    feature=self.feature(c, rng),
                    feature_tau=self.feature(c, rng),
                    labeled=c in labeled_set,
                )
            )
        proposals = []
        for i, inst in enumerate(instances):
            for _ in range(p.positives_per_instance):
                b = inst.box
                dx = float(rng.uniform(-0.08, 0.08)) * b.width
                dy = float(rng.uniform(-0.08, 0.08)) * b.height
                jit = Box(b.x1 + dx, b.y1 + dy, b.x2 + dx, b.y2 + dy)
                proposals.append(
                    Proposal(
                        box=jit,
                        feature=inst.feature
                        + rng.normal(size=p.feature_dim) * p.proposal_noise,
                        instance_index=i,
                    )
                )
        for _ in range(p.background_proposals):
            proposals.append(
                Proposal(
                    box=self._random_box(rng),
                    feature=rng.normal(size=p.feature_dim) * p.proposal_noise,
                    instance_index=None,
                )
            )
        return Scene(instances=instances, proposals=proposals)


@dataclass
class ToyHead:
    """Linear detector head: class logits, box deltas, tracking embedding."""

    w_cls: np.ndarray  # (D, C+1); column 0 is background, column c is category c
    b_cls: np.ndarray
    w_reg: np.ndarray  # (D, 4)
    b_reg: np.ndarray
    w_emb: np.ndarray  # (D, E)

    @classmethod
    def init(cls, feature_dim: int, num_categories: int, embed_dim: int, seed: int) -> "ToyHead":
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 1])))
        scale = 1.0 / math.sqrt(feature_dim)
        return cls(
            w_cls=rng.normal(size=(feature_dim, num_categories + 1)) * scale,
            b_cls=np.zeros(num_categories + 1),
            w_reg=rng.normal(size=(feature_dim, 4)) * scale,
            b_reg=np.zeros(4),
            w_emb=rng.normal(size=(feature_dim, embed_dim)) * scale,
        )

    @property
    def num_categories(self) -> int:
        return self.w_cls.shape[1] - 1

    def logits(self, f: np.ndarray) -> np.ndarray:
        return np.asarray(f) @ self.w_cls + self.b_cls

    def deltas(self, f: np.ndarray) -> np.ndarray:
        return np.asarray(f) @ self.w_reg + self.b_reg

    def embed(self, f: np.ndarray) -> np.ndarray:
        return np.asarray(f) @ self.w_emb / math.sqrt(self.w_emb.shape[1])

    def copy(self) -> "ToyHead":
        return ToyHead(*(p.copy() for p in self._params()))

    def _params(self):
        return (self.w_cls, self.b_cls, self.w_reg, self.b_reg, self.w_emb)

    def digest(self) -> str:
        h = hashlib.sha256()
        for p in self._params():
            h.update(np.ascontiguousarray(p).tobytes())
        return h.hexdigest()

    def expand_categories(self, n_new: int, seed: int, init_scale: float = 0.5) -> "ToyHead":
        """Append classifier columns for n_new categories; prefix unchanged."""
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 2])))
        new_cols = rng.normal(size=(self.w_cls.shape[0], n_new)) * init_scale
        return ToyHead(
            w_cls=np.concatenate([self.w_cls, new_cols], axis=1),
            b_cls=np.concatenate([self.b_cls, np.zeros(n_new)]),
            w_reg=self.w_reg.copy(),
            b_reg=self.b_reg.copy(),
            w_emb=self.w_emb.copy(),
        )


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    pos_iou: float = 0.5
    pseudo_score_thresh: float = distill.PSEUDO_SCORE_THRESH
    pseudo_nms_thresh: float = distill.PSEUDO_NMS_THRESH
    weights: LossWeights = LossWeights()
    kd_variant: str = "mse"
    use_pseudo_labels: bool = True
    check_grads: bool = True


@dataclass(frozen=True)
class Scenario:
    """Category splits for one transfer-learning pattern."""

    name: str
    pretrain_cats: Tuple[int, ...]
    finetune_present: Tuple[int, ...]
    finetune_labeled: Tuple[int, ...]
    old_cats: Tuple[int, ...]  # absent from fine-tune labels
    new_cats: Tuple[int, ...]  # categories appended for two-step expansion


def lvis_tao_scenario() -> Scenario:
    """Subset pattern: fine-tune labels cover half the pretrain vocabulary."""
    return Scenario(
        name="lvis-tao",
        pretrain_cats=tuple(range(1, 9)),
        finetune_present=tuple(range(1, 9)),
        finetune_labeled=(5, 6, 7, 8),
        old_cats=(1, 2, 3, 4),
        new_cats=(),
    )


def coco_ytvis_scenario() -> Scenario:
    """Subset-plus-new pattern: overlap categories plus appended new ones."""
    return Scenario(
        name="coco-ytvis",
        pretrain_cats=tuple(range(1, 9)),
        finetune_present=tuple(range(1, 13)),
        finetune_labeled=(5, 6, 7, 8, 9, 10, 11, 12),
        old_cats=(1, 2, 3, 4),
        new_cats=(9, 10, 11, 12),
    )


def _scene_rng(seed: int, epoch: int, scene: int) -> np.random.Generator:
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence([seed, 3, epoch, scene]))
    )


def classification_accuracy(
    head: ToyHead,
    world: SyntheticWorld,
    categories: Sequence[int],
    seed: int,
    n_per_category: int = 100,
) -> Dict[int, float]:
    """Fraction of clean category features whose argmax logit is correct."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 4])))
    acc = {}
    for c in sorted(categories):
        feats = world.means[c - 1] + rng.normal(
            size=(n_per_category, world.params.feature_dim)
        ) * world.params.noise_sigma
        pred = head.logits(feats).argmax(axis=1)
        acc[c] = float((pred == c).mean())
    return acc


def _mean(values) -> float:
    values = list(values)
    return float(np.mean(values)) if values else float("nan")


def _track_anchors(scene: Scene, head: ToyHead):
    """Similarities between view-t and view-t+tau instance embeddings."""
    if len(scene.instances) == 0:
        return None
    f_t = np.stack([i.feature for i in scene.instances])
    f_tau = np.stack([i.feature_tau for i in scene.instances])
    z = head.embed(f_t)
    z_tau = head.embed(f_tau)
    sims = z @ z_tau.T
    anchors = []
    for i in range(len(scene.instances)):
        pos = np.array([sims[i, i]])
        neg = np.delete(sims[i], i)
        anchors.append((pos, neg))
    return f_t, f_tau, z, z_tau, anchors


@dataclass
class Grads:
    w_cls: np.ndarray
    b_cls: np.ndarray
    w_reg: np.ndarray
    b_reg: np.ndarray
    w_emb: np.ndarray

    @classmethod
    def zeros_like(cls, head: ToyHead) -> "Grads":
        return cls(*(np.zeros_like(p) for p in head._params()))


def _scene_losses_and_grads(
    scene: Scene,
    head: ToyHead,
    teacher: Optional[ToyHead],
    scheme: str,
    cfg: TrainConfig,
    phase: str,
) -> Tuple[Dict[str, float], Grads]:
    g = Grads.zeros_like(head)
    losses = {"det": 0.0, "track": 0.0, "kd": 0.0, "semcon": 0.0}
    feats = np.stack([p.feature for p in scene.proposals])
    logits = head.logits(feats)
    deltas = head.deltas(feats)
    prop_boxes = [p.box for p in scene.proposals]
    originals = tuple(
        Instance(box=i.box, category_id=i.category_id)
        for i in scene.instances
        if i.labeled
    )

    # Pseudo labels come from the frozen teacher; every other scheme sees
    # the original annotations only.
    aug = AugmentedLabels(originals=originals, pseudos=())
    teacher_logits = teacher_deltas = None
    if scheme == "teacher_student" and teacher is not None:
        teacher_logits = teacher.logits(feats)
        teacher_deltas = teacher.deltas(feats)
        if cfg.use_pseudo_labels:
            probs = softmax(teacher_logits)
            dets = [
                TeacherDetection(
                    box=p.box,
                    logits=teacher_logits[k],
                    deltas=BoxDeltas(*teacher_deltas[k]),
                    score=float(probs[k, 1:].max()),
                )
                for k, p in enumerate(scene.proposals)
            ]
            aug = distill.generate_pseudo_labels(
                dets,
                originals,
                cfg.pseudo_score_thresh,
                cfg.pseudo_nms_thresh,
                background_index=0,
            )

    # detection loss: positives from original labels only; negatives
    # filtered against the augmented labels (negative correction)
    if scheme != "track_only":
        eligible = distill.correct_negatives(prop_boxes, aug, cfg.pos_iou)
        dlogits = np.zeros_like(logits)
        ddeltas = np.zeros_like(deltas)
        used = []
        positives = []
        for k, prop in enumerate(scene.proposals):
            inst = (
                scene.instances[prop.instance_index]
                if prop.instance_index is not None
                else None
            )
            if (
                inst is not None
                and inst.labeled
                and iou(prop.box, inst.box) > cfg.pos_iou
            ):
                used.append((k, inst.category_id))
                positives.append((k, inst))
            elif eligible[k]:
                used.append((k, 0))
        for k, label in used:
            l, grad = cross_entropy(logits[k], label)
            losses["det"] += l / max(len(used), 1)
            dlogits[k] += grad / max(len(used), 1)
        for k, inst in positives:
            target = encode_deltas(prop_boxes[k], inst.box).as_array()
            for dim in range(4):
                l, grad = smooth_l1(deltas[k, dim], target[dim])
                losses["det"] += l / max(len(positives), 1)
                ddeltas[k, dim] += grad / max(len(positives), 1)
        w_det = cfg.weights.det
        g.w_cls += w_det * feats.T @ dlogits
        g.b_cls += w_det * dlogits.sum(axis=0)
        g.w_reg += w_det * feats.T @ ddeltas
        g.b_reg += w_det * ddeltas.sum(axis=0)

    # distillation losses (fine-tuning only)
    if (
        scheme == "teacher_student"
        and phase == "finetune"
        and teacher_logits is not None
        and cfg.weights.kd > 0.0
    ):
        batch = distill.DistillBatch(
            boxes=tuple(prop_boxes),
            student_logits=logits,
            teacher_logits=teacher_logits,
            student_deltas=deltas,
            teacher_deltas=teacher_deltas,
            roles=distill.tag_positives(prop_boxes, aug, cfg.pos_iou),
            n_cls=len(prop_boxes),
        )
        kd_c, grad_c = distill.kd_class_loss(batch, variant=cfg.kd_variant)
        kd_r, grad_r = distill.kd_reg_loss(batch)
        losses["kd"] = kd_c + kd_r
        g.w_cls += cfg.weights.kd * feats.T @ grad_c
        g.b_cls += cfg.weights.kd * grad_c.sum(axis=0)
        g.w_reg += cfg.weights.kd * feats.T @ grad_r
        g.b_reg += cfg.weights.kd * grad_r.sum(axis=0)

    # semantic consistency between the two views of each instance
    if (
        scheme == "teacher_student"
        and phase == "finetune"
        and cfg.weights.semcon > 0.0
        and scene.instances
    ):
        f_t = np.stack([i.feature for i in scene.instances])
        f_tau = np.stack([i.feature_tau for i in scene.instances])
        sc, grad_t, grad_tau = distill.semcon_loss(
            head.logits(f_t), head.logits(f_tau)
        )
        losses["semcon"] = sc
        g.w_cls += cfg.weights.semcon * (f_t.T @ grad_t + f_tau.T @ grad_tau)
        g.b_cls += cfg.weights.semcon * (grad_t + grad_tau).sum(axis=0)

    # tracking loss on paired instance embeddings (all schemes)
    pack = _track_anchors(scene, head)
    if pack is not None:
        f_t, f_tau, z, z_tau, anchors = pack
        tl, grads = track_contrastive_loss(anchors)
        losses["track"] = tl
        n = len(anchors)
        G = np.zeros((n, n))
        for i, (gpos, gneg) in enumerate(grads):
            G[i, i] = gpos[0]
            G[i, np.arange(n) != i] = gneg
        dz = G @ z_tau
        dz_tau = G.T @ z
        scale = 1.0 / math.sqrt(head.w_emb.shape[1])
        g.w_emb += cfg.weights.track * scale * (f_t.T @ dz + f_tau.T @ dz_tau)
    return losses, g


def _apply(head: ToyHead, g: Grads, lr: float, mask: Optional[Grads] = None) -> None:
    for param, grad, m in zip(
        head._params(),
        (g.w_cls, g.b_cls, g.w_reg, g.b_reg, g.w_emb),
        (mask.w_cls, mask.b_cls, mask.w_reg, mask.b_reg, mask.w_emb)
        if mask
        else (None,) * 5,
    ):
        step = grad if m is None else grad * m
        param -= lr * step


def _train(
    world: SyntheticWorld,
    head: ToyHead,
    epochs: int,
    seed: int,
    present: Sequence[int],
    labeled: Sequence[int],
    scheme: str,
    cfg: TrainConfig,
    phase: str,
    teacher: Optional[ToyHead] = None,
    update_mask: Optional[Grads] = None,
) -> List[Dict[str, float]]:
    if cfg.check_grads:
        gradcheck.gate(points=3, seed=seed)
    teacher_digest = teacher.digest() if teacher is not None else None
    det_digest_before = None
    if scheme == "track_only":
        det_digest_before = hashlib.sha256(
            head.w_cls.tobytes() + head.b_cls.tobytes() + head.w_reg.tobytes() + head.b_reg.tobytes()
        ).hexdigest()
    history = []
    for epoch in range(epochs):
        sums = {"det": 0.0, "track": 0.0, "kd": 0.0, "semcon": 0.0}
        for s in range(world.params.scenes_per_epoch):
            rng = _scene_rng(seed, epoch, s)
            scene = world.make_scene(rng, list(present), list(labeled))
            losses, g = _scene_losses_and_grads(scene, head, teacher, scheme, cfg, phase)
            total = sum(losses.values())
            if not math.isfinite(total):
                raise DivergenceDetected(f"non-finite loss at epoch {epoch}")
            mask = update_mask
            if scheme == "track_only" and mask is None:
                mask = Grads.zeros_like(head)
                mask.w_emb[:] = 1.0
            _apply(head, g, cfg.lr, mask)
            for k in sums:
                sums[k] += losses[k]
        if teacher is not None and teacher.digest() != teacher_digest:
            raise RuntimeError("teacher parameters changed during fine-tuning")
        history.append(
            {k: v / world.params.scenes_per_epoch for k, v in sums.items()}
            | {"epoch": epoch}
        )
    if scheme == "track_only":
        det_digest_after = hashlib.sha256(
            head.w_cls.tobytes() + head.b_cls.tobytes() + head.w_reg.tobytes() + head.b_reg.tobytes()
        ).hexdigest()
        if det_digest_after != det_digest_before:
            raise RuntimeError("track_only fine-tune touched detection parameters")
    return history


def _accuracy_report(
    head: ToyHead, world: SyntheticWorld, scenario: Scenario, seed: int
) -> Dict[str, object]:
    cats = sorted(set(scenario.pretrain_cats) | set(scenario.finetune_labeled))
    cats = [c for c in cats if c <= head.num_categories]
    per_cat = classification_accuracy(head, world, cats, seed)
    old = [per_cat[c] for c in scenario.old_cats if c in per_cat]
    new_cats = scenario.new_cats or tuple(
        c for c in scenario.finetune_labeled if c not in scenario.old_cats
    )
    new = [per_cat[c] for c in new_cats if c in per_cat]
    return {
        "per_category": {str(c): v for c, v in per_cat.items()},
        "old": _mean(old),
        "new": _mean(new),
        "all": _mean(per_cat.values()),
    }


def pretrain(
    world: SyntheticWorld,
    head: ToyHead,
    epochs: int,
    seed: int,
    scenario: Scenario,
    cfg: TrainConfig = TrainConfig(),
) -> Dict[str, object]:
    """Joint detection + tracking training on the full pretrain vocabulary."""
    history = _train(
        world,
        head,
        epochs,
        seed,
        present=scenario.pretrain_cats,
        labeled=scenario.pretrain_cats,
        scheme="pretrain",
        cfg=cfg,
        phase="pretrain",
    )
    return {
        "phase": "pretrain",
        "epochs": epochs,
        "losses": history,
        "accuracy": _accuracy_report(head, world, scenario, seed),
    }


def finetune(
    world: SyntheticWorld,
    head: ToyHead,
    scheme: str,
    epochs: int,
    seed: int,
    scenario: Scenario,
    cfg: TrainConfig = TrainConfig(),
) -> Dict[str, object]:
    """Fine-tune on the scenario's label subset under one of three schemes.

    naive: detection loss against the subset labels only. track_only:
    detection parameters frozen. teacher_student: a frozen copy of the
    incoming head provides pseudo labels and distillation targets.
    """
    if scheme not in ("naive", "track_only", "teacher_student"):
        raise ValueError(f"unknown fine-tune scheme: {scheme}")
    teacher = head.copy() if scheme == "teacher_student" else None
    history = _train(
        world,
        head,
        epochs,
        seed,
        present=scenario.finetune_present,
        labeled=scenario.finetune_labeled,
        scheme=scheme,
        cfg=cfg,
        phase="finetune",
        teacher=teacher,
    )
    return {
        "phase": "finetune",
        "scheme": scheme,
        "epochs": epochs,
        "losses": history,
        "accuracy": _accuracy_report(head, world, scenario, seed),
    }


def two_step_expand(
    world: SyntheticWorld,
    head: ToyHead,
    scenario: Scenario,
    epochs_step1: int,
    epochs_step2: int,
    seed: int,
    cfg: TrainConfig = TrainConfig(),
) -> Tuple[ToyHead, Dict[str, object]]:
    """Anchor-then-unlock expansion for the subset-plus-new pattern.

    Step 1 appends classifier columns for the new categories and trains
    only them (original weights frozen, checked bit-identical). Step 2
    unlocks everything under the teacher-student scheme on the
    overlapping-category data.
    """
    n_new = len(scenario.new_cats)
    expanded = head.expand_categories(n_new, seed)
    report: Dict[str, object] = {"phase": "two_step", "new_categories": n_new}
    if n_new == 0:
        result = finetune(world, expanded, "teacher_student", epochs_step2, seed, scenario, cfg)
        report["step2"] = result
        report["accuracy"] = result["accuracy"]
        return expanded, report

    before = {
        "w_cls": expanded.w_cls[:, : head.w_cls.shape[1]].copy(),
        "b_cls": expanded.b_cls[: head.b_cls.shape[0]].copy(),
        "w_reg": expanded.w_reg.copy(),
        "b_reg": expanded.b_reg.copy(),
        "w_emb": expanded.w_emb.copy(),
    }
    mask = Grads.zeros_like(expanded)
    mask.w_cls[:, head.w_cls.shape[1]:] = 1.0
    mask.b_cls[head.b_cls.shape[0]:] = 1.0
    step1 = _train(
        world,
        expanded,
        epochs_step1,
        seed,
        present=scenario.new_cats,
        labeled=scenario.new_cats,
        scheme="naive",
        cfg=cfg,
        phase="finetune",
        update_mask=mask,
    )
    frozen_ok = (
        np.array_equal(before["w_cls"], expanded.w_cls[:, : head.w_cls.shape[1]])
        and np.array_equal(before["b_cls"], expanded.b_cls[: head.b_cls.shape[0]])
        and np.array_equal(before["w_reg"], expanded.w_reg)
        and np.array_equal(before["b_reg"], expanded.b_reg)
        and np.array_equal(before["w_emb"], expanded.w_emb)
    )
    if not frozen_ok:
        raise RuntimeError("step 1 modified frozen pretrained weights")

    overlap = tuple(
        c for c in scenario.finetune_labeled if c not in scenario.new_cats
    )
    step2_scenario = replace(
        scenario, finetune_labeled=overlap, finetune_present=scenario.finetune_present
    )
    step2 = finetune(
        world, expanded, "teacher_student", epochs_step2, seed + 1, step2_scenario, cfg
    )
    report["step1_losses"] = step1
    report["step2"] = step2
    report["accuracy"] = _accuracy_report(expanded, world, scenario, seed)
    return expanded, report
