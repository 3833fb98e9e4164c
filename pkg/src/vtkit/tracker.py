"""Appearance-only track association.

Detections are linked across frames purely by embedding similarity:
a bi-directional softmax picks mutual nearest neighbors, matched tracks
are extended, unmatched detections above a start threshold open new
tracks, and tracks unmatched for more than the retention window are
terminated. Also holds the multi-positive contrastive training loss and
the binary embedding-file format.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import Box

EMBEDDING_MAGIC = b"VTKE"
RETENTION_FRAMES = 30
MAX_DETECTIONS_PER_FRAME = 1000


class NoPositives(ValueError):
    """An anchor arrived without any positive pair."""


@dataclass(frozen=True)
class Detection:
    frame_index: int
    box: Box
    category_id: int
    score: float
    embedding: np.ndarray

    def __post_init__(self):
        emb = np.asarray(self.embedding, dtype=np.float64)
        object.__setattr__(self, "embedding", emb)
        norm = float(np.linalg.norm(emb))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"embedding norm {norm} not unit within 1e-6")


@dataclass
class TrackState:
    track_id: int
    embedding: np.ndarray
    last_matched_frame: int
    frames_since_match: int = 0
    history: List[Tuple[int, Box, float, int]] = field(default_factory=list)

    def record(self, frame: int, det: Detection) -> None:
        self.history.append((frame, det.box, det.score, det.category_id))
        self.embedding = det.embedding
        self.last_matched_frame = frame
        self.frames_since_match = 0


@dataclass(frozen=True)
class TrackerParams:
    match_score_thresh: float = 0.5
    new_track_score_thresh: float = 0.7
    retention_frames: int = RETENTION_FRAMES
    max_detections: int = MAX_DETECTIONS_PER_FRAME


def bisoftmax(sim: np.ndarray) -> Tuple[np.ndarray, List[Tuple[int, int]]]:
    """Averaged row/column softmax plus mutual-argmax candidate pairs.

    Returns the (dets x tracks) match-score matrix and the pairs (i, j)
    where j is the argmax of row i and i is the argmax of column j.
    """
    sim = np.asarray(sim, dtype=np.float64)
    if sim.size == 0:
        return np.zeros_like(sim), []
    row = np.exp(sim - sim.max(axis=1, keepdims=True))
    row /= row.sum(axis=1, keepdims=True)
    col = np.exp(sim - sim.max(axis=0, keepdims=True))
    col /= col.sum(axis=0, keepdims=True)
    scores = 0.5 * (row + col)
    matches = []
    row_arg = sim.argmax(axis=1)
    col_arg = sim.argmax(axis=0)
    for i in range(sim.shape[0]):
        j = int(row_arg[i])
        if int(col_arg[j]) == i:
            matches.append((i, j))
    return scores, matches


def associate_step(
    dets: Sequence[Detection],
    tracks: List[TrackState],
    frame_index: int,
    params: TrackerParams = TrackerParams(),
    next_track_id: int = 0,
) -> Tuple[Dict[int, int], List[TrackState], List[TrackState], int]:
    """Advance association by one frame.

    Returns (assignments det-index -> track_id, new tracks, terminated
    tracks, next free track id). Mutual-argmax pairs above the match
    threshold are assigned greedily by descending bi-softmax score with
    ties broken by lower detection index; detection order never changes
    the assignment set.
    """
    if len(dets) > params.max_detections:
        raise ValueError(
            f"{len(dets)} detections exceed the per-frame cap "
            f"{params.max_detections}"
        )
    assignments: Dict[int, int] = {}
    matched_tracks = set()
    if dets and tracks:
        emb_d = np.stack([d.embedding for d in dets])
        emb_t = np.stack([t.embedding for t in tracks])
        sim = emb_d @ emb_t.T
        scores, candidates = bisoftmax(sim)
        candidates.sort(key=lambda ij: (-scores[ij], ij[0]))
        for i, j in candidates:
            if scores[i, j] < params.match_score_thresh:
                continue
            if i in assignments or j in matched_tracks:
                continue
            assignments[i] = tracks[j].track_id
            matched_tracks.add(j)
            tracks[j].record(frame_index, dets[i])

    new_tracks: List[TrackState] = []
    for i, det in enumerate(dets):
        if i in assignments:
            continue
        if det.score >= params.new_track_score_thresh:
            t = TrackState(
                track_id=next_track_id,
                embedding=det.embedding,
                last_matched_frame=frame_index,
            )
            t.record(frame_index, det)
            next_track_id += 1
            assignments[i] = t.track_id
            new_tracks.append(t)
    tracks.extend(new_tracks)

    terminated: List[TrackState] = []
    survivors: List[TrackState] = []
    for j, t in enumerate(tracks):
        if t.last_matched_frame != frame_index:
            t.frames_since_match += 1
        if t.frames_since_match > params.retention_frames:
            terminated.append(t)
        else:
            survivors.append(t)
    tracks[:] = survivors
    return assignments, new_tracks, terminated, next_track_id


def run_video(
    frames: Sequence[Tuple[int, Sequence[Detection]]],
    params: TrackerParams = TrackerParams(),
) -> List[TrackState]:
    """Associate a whole video; returns every track ever opened."""
    live: List[TrackState] = []
    finished: List[TrackState] = []
    next_id = 0
    for frame_index, dets in frames:
        _, _, terminated, next_id = associate_step(
            list(dets), live, frame_index, params, next_id
        )
        finished.extend(terminated)
    finished.extend(live)
    finished.sort(key=lambda t: t.track_id)
    return finished


def track_contrastive_loss(
    anchors: Sequence[Tuple[np.ndarray, np.ndarray]],
) -> Tuple[float, List[Tuple[np.ndarray, np.ndarray]]]:
    """Multi-positive InfoNCE over raw similarities.

    Each anchor carries (positive similarities, negative similarities);
    per anchor the loss is -log(sum_pos e^s / (sum_pos e^s + sum_neg e^s)),
    averaged over anchors. Returns the loss and per-anchor gradients
    w.r.t. the positive and negative similarities.
    """
    if not anchors:
        raise NoPositives("no anchors provided")
    total = 0.0
    grads: List[Tuple[np.ndarray, np.ndarray]] = []
    n = len(anchors)
    for pos, neg in anchors:
        pos = np.asarray(pos, dtype=np.float64)
        neg = np.asarray(neg, dtype=np.float64)
        if pos.size == 0:
            raise NoPositives("anchor without positives")
        m = max(pos.max(), neg.max()) if neg.size else pos.max()
        ep = np.exp(pos - m)
        en = np.exp(neg - m) if neg.size else np.zeros(0)
        a = ep.sum()
        b = en.sum()
        total += float(np.log(a + b) - np.log(a))
        grads.append((ep * (1.0 / (a + b) - 1.0 / a) / n, en / (a + b) / n))
    return total / n, grads


def write_embeddings(path, embeddings: np.ndarray) -> None:
    """Write "VTKE" | u32 count | u32 dim | count*dim little-endian f32."""
    emb = np.ascontiguousarray(np.asarray(embeddings, dtype="<f4"))
    if emb.ndim != 2:
        raise ValueError("embeddings must be a (count, dim) array")
    with open(path, "wb") as f:
        f.write(EMBEDDING_MAGIC)
        f.write(struct.pack("<II", emb.shape[0], emb.shape[1]))
        f.write(emb.tobytes())


def read_embeddings(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != EMBEDDING_MAGIC:
            raise ValueError(f"bad embedding file magic: {magic!r}")
        count, dim = struct.unpack("<II", f.read(8))
        data = np.frombuffer(f.read(count * dim * 4), dtype="<f4")
        if data.size != count * dim:
            raise ValueError("truncated embedding file")
    return data.reshape(count, dim).astype(np.float64)
