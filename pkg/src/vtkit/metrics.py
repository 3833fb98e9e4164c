"""Track-level evaluation: 3D IoU, Track AP, and the two oracle analyses.

Track AP follows the COCO convention: 101-point interpolated
precision-recall per category, averaged over categories with at least
one ground-truth track. Prediction-to-truth matching walks predictions
in descending score order and marks a prediction true-positive whenever
it can still be fitted into a one-to-one matching (augmenting-path
greedy), which coincides with the best achievable matching.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import Box

IOU_GATE = 0.5
SUITE_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


class NoGroundTruth(ValueError):
    pass


@dataclass(frozen=True)
class Track:
    """Per-video sequence of boxes with one category and one score."""

    video_id: int
    track_id: int
    category_id: int
    score: float
    boxes: Dict[int, Box]

    def __post_init__(self):
        if not self.boxes:
            raise ValueError("a track must span at least one frame")


def track_score_from_detections(scores: Sequence[float]) -> float:
    """Track confidence is the mean of its member detection scores."""
    return float(np.mean(scores))


def track_iou_3d(a: Track, b: Track) -> float:
    """Spatio-temporal IoU: summed per-frame intersections over unions.

    Frames where only one track exists contribute that box's area to
    the union and nothing to the intersection.
    """
    if a.video_id != b.video_id:
        raise ValueError("3D IoU is only defined within one video")
    inter = 0.0
    union = 0.0
    for f in set(a.boxes) | set(b.boxes):
        ba = a.boxes.get(f)
        bb = b.boxes.get(f)
        if ba is None:
            union += bb.area
            continue
        if bb is None:
            union += ba.area
            continue
        ix = min(ba.x2, bb.x2) - max(ba.x1, bb.x1)
        iy = min(ba.y2, bb.y2) - max(ba.y1, bb.y1)
        i = ix * iy if ix > 0 and iy > 0 else 0.0
        inter += i
        union += ba.area + bb.area - i
    return inter / union if union > 0 else 0.0


def interpolated_ap(tp_flags: Sequence[bool], num_gt: int) -> float:
    """101-point interpolated AP from score-ordered TP/FP flags."""
    if num_gt == 0:
        raise NoGroundTruth("AP undefined without ground truth")
    if not tp_flags:
        return 0.0
    tp = np.cumsum(np.asarray(tp_flags, dtype=np.float64))
    ranks = np.arange(1, len(tp_flags) + 1, dtype=np.float64)
    recall = tp / num_gt
    precision = tp / ranks
    # precision envelope: max precision at recall >= r
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    levels = np.linspace(0.0, 1.0, 101)
    idx = np.searchsorted(recall, levels, side="left")
    interp = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(interp.mean())


def _match_flags(
    preds: Sequence[Track],
    gts: Sequence[Track],
    iou_thresh: float,
) -> List[bool]:
    """TP flags for score-sorted predictions via augmenting-path matching.

    A prediction is a true positive iff it can be added to a one-to-one
    matching against ground truth over edges with 3D IoU >= iou_thresh.
    Walking predictions in score order and augmenting greedily yields,
    for every score prefix, the maximum true-positive count, so the
    resulting AP is the optimum over all valid matchings.
    """
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))
    edges: Dict[int, List[int]] = {}
    for i in order:
        edges[i] = [
            j
            for j, g in enumerate(gts)
            if preds[i].video_id == g.video_id
            and track_iou_3d(preds[i], g) >= iou_thresh
        ]
    gt_owner: Dict[int, int] = {}

    def try_assign(i: int, banned: set) -> bool:
        for j in edges[i]:
            if j in banned:
                continue
            banned.add(j)
            if j not in gt_owner or try_assign(gt_owner[j], banned):
                gt_owner[j] = i
                return True
        return False

    flags_by_pred = {}
    for i in order:
        flags_by_pred[i] = try_assign(i, set())
    return [flags_by_pred[i] for i in order]


def track_ap(
    preds: Sequence[Track],
    gts: Sequence[Track],
    iou_thresh: float = IOU_GATE,
) -> Dict[str, object]:
    """AP per category (categories with >= 1 gt track) and their mean."""
    categories = sorted({g.category_id for g in gts})
    per_category: Dict[int, float] = {}
    for c in categories:
        p_c = [p for p in preds if p.category_id == c]
        g_c = [g for g in gts if g.category_id == c]
        per_category[c] = interpolated_ap(_match_flags(p_c, g_c, iou_thresh), len(g_c))
    mean = float(np.mean(list(per_category.values()))) if per_category else 0.0
    return {"per_category": per_category, "mean": mean, "iou_thresh": iou_thresh}


def track_ap_suite(preds: Sequence[Track], gts: Sequence[Track]) -> Dict[str, object]:
    """AP50, AP75, their average, and the 0.5:0.95 sweep."""
    sweep = {t: track_ap(preds, gts, t)["mean"] for t in SUITE_THRESHOLDS}
    ap50 = sweep[0.5]
    ap75 = sweep[0.75]
    return {
        "AP50": ap50,
        "AP75": ap75,
        "AP_avg": 0.5 * (ap50 + ap75),
        "AP50_95": float(np.mean(list(sweep.values()))),
        "per_threshold": {f"{t:.2f}": v for t, v in sweep.items()},
        "per_category_at_50": track_ap(preds, gts, 0.5)["per_category"],
    }


def _optimal_track_matching(
    preds: Sequence[Track], gts: Sequence[Track], gate: float
) -> List[Tuple[int, int]]:
    """One-to-one matching maximizing total 3D IoU over gated pairs."""
    if not preds or not gts:
        return []
    iou_m = np.zeros((len(preds), len(gts)))
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            if p.video_id == g.video_id:
                iou_m[i, j] = track_iou_3d(p, g)
    rows, cols = linear_sum_assignment(-iou_m)
    return [(int(i), int(j)) for i, j in zip(rows, cols) if iou_m[i, j] >= gate]


def class_oracle(
    preds: Sequence[Track], gts: Sequence[Track], gate: float = IOU_GATE
) -> List[Track]:
    """Relabel matched predictions with their ground-truth category.

    Matching is optimal one-to-one per video on 3D IoU above the gate;
    unmatched predictions keep their own category (false positives).
    Isolates pure tracking ability.
    """
    out = list(preds)
    videos = sorted({p.video_id for p in preds} | {g.video_id for g in gts})
    for v in videos:
        p_idx = [i for i, p in enumerate(preds) if p.video_id == v]
        g_v = [g for g in gts if g.video_id == v]
        for pi, gj in _optimal_track_matching([preds[i] for i in p_idx], g_v, gate):
            src = out[p_idx[pi]]
            out[p_idx[pi]] = Track(
                video_id=src.video_id,
                track_id=src.track_id,
                category_id=g_v[gj].category_id,
                score=src.score,
                boxes=src.boxes,
            )
    return out


@dataclass(frozen=True)
class FrameDetection:
    video_id: int
    frame_index: int
    box: Box
    category_id: int
    score: float


def track_oracle(
    dets: Sequence[FrameDetection],
    gts: Sequence[Track],
    gate: float = IOU_GATE,
) -> List[Track]:
    """Optimally link per-frame detections onto ground-truth tracks.

    Per frame, detections are assigned one-to-one to gt boxes maximizing
    total IoU (pairs below the gate forbidden); assigned detections
    inherit the gt track identity, unmatched detections are removed.
    Class predictions are held constant: the resulting track's category
    is the majority vote of its member detections (lowest id on ties)
    and its score the mean of theirs. Isolates pure classification.
    """
    assigned: Dict[Tuple[int, int], List[FrameDetection]] = {}
    frames = sorted({(d.video_id, d.frame_index) for d in dets})
    for video, frame in frames:
        frame_dets = [
            d for d in dets if d.video_id == video and d.frame_index == frame
        ]
        frame_gts = [
            (g, g.boxes[frame])
            for g in gts
            if g.video_id == video and frame in g.boxes
        ]
        if not frame_gts:
            continue
        iou_m = np.zeros((len(frame_dets), len(frame_gts)))
        for i, d in enumerate(frame_dets):
            for j, (_, gb) in enumerate(frame_gts):
                ix = min(d.box.x2, gb.x2) - max(d.box.x1, gb.x1)
                iy = min(d.box.y2, gb.y2) - max(d.box.y1, gb.y1)
                if ix > 0 and iy > 0:
                    inter = ix * iy
                    iou_m[i, j] = inter / (d.box.area + gb.area - inter)
        if iou_m.size == 0:
            continue
        rows, cols = linear_sum_assignment(-iou_m)
        for i, j in zip(rows, cols):
            if iou_m[i, j] >= gate:
                g = frame_gts[j][0]
                assigned.setdefault((video, g.track_id), []).append(frame_dets[i])
    out = []
    for (video, track_id), members in sorted(assigned.items()):
        votes: Dict[int, int] = {}
        for d in members:
            votes[d.category_id] = votes.get(d.category_id, 0) + 1
        category = min(votes, key=lambda c: (-votes[c], c))
        out.append(
            Track(
                video_id=video,
                track_id=track_id,
                category_id=category,
                score=track_score_from_detections([d.score for d in members]),
                boxes={d.frame_index: d.box for d in members},
            )
        )
    return out


def track_to_json(t: Track) -> dict:
    return {
        "video_id": t.video_id,
        "track_id": t.track_id,
        "category_id": t.category_id,
        "score": t.score,
        "boxes": {str(f): b.as_list() for f, b in sorted(t.boxes.items())},
    }


def track_from_json(obj: dict) -> Track:
    return Track(
        video_id=int(obj["video_id"]),
        track_id=int(obj["track_id"]),
        category_id=int(obj["category_id"]),
        score=float(obj.get("score", 1.0)),
        boxes={int(f): Box(*map(float, b)) for f, b in obj["boxes"].items()},
    )


def load_tracks_jsonl(path) -> List[Track]:
    tracks = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                tracks.append(track_from_json(json.loads(line)))
    return tracks


def write_tracks_jsonl(tracks: Sequence[Track], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for t in tracks:
            f.write(json.dumps(track_to_json(t)) + "\n")
