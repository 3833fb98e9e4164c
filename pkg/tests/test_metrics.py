import itertools

import numpy as np
import pytest

from vtkit.core import Box
from vtkit.metrics import (
    FrameDetection,
    NoGroundTruth,
    Track,
    class_oracle,
    interpolated_ap,
    load_tracks_jsonl,
    track_ap,
    track_ap_suite,
    track_iou_3d,
    track_oracle,
    track_score_from_detections,
    write_tracks_jsonl,
)


def tr(track_id, boxes, cat=1, score=1.0, video=0):
    return Track(
        video_id=video,
        track_id=track_id,
        category_id=cat,
        score=score,
        boxes={f: Box(*b) for f, b in boxes.items()},
    )


UNIT = {0: (0, 0, 10, 10)}


def brute_force_best_ap(preds, gts, iou_thresh):
    """Max interpolated AP over every valid one-to-one matching."""
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))
    edges = [
        [
            j
            for j, g in enumerate(gts)
            if preds[i].video_id == g.video_id
            and track_iou_3d(preds[i], g) >= iou_thresh
        ]
        for i in order
    ]
    best = -1.0

    def walk(k, used, flags):
        nonlocal best
        if k == len(order):
            best = max(best, interpolated_ap(flags, len(gts)))
            return
        walk(k + 1, used, flags + [False])
        for j in edges[k]:
            if j not in used:
                walk(k + 1, used | {j}, flags + [True])

    walk(0, frozenset(), [])
    return best


class TestTrackIou3d:
    def test_identity(self):
        t = tr(0, {0: (0, 0, 10, 10), 1: (5, 5, 15, 15)})
        assert track_iou_3d(t, t) == 1.0

    def test_temporal_half_overlap(self):
        # same box, one track spans frames {0,1}, the other {1,2}
        a = tr(0, {0: (0, 0, 10, 10), 1: (0, 0, 10, 10)})
        b = tr(1, {1: (0, 0, 10, 10), 2: (0, 0, 10, 10)})
        assert track_iou_3d(a, b) == pytest.approx(1 / 3)

    def test_spatially_disjoint(self):
        a = tr(0, {0: (0, 0, 10, 10)})
        b = tr(1, {0: (20, 20, 30, 30)})
        assert track_iou_3d(a, b) == 0.0

    def test_mixed(self):
        # frame 0: IoU pieces 50/150; frame 1 only in a (area 100 to union)
        a = tr(0, {0: (0, 0, 10, 10), 1: (0, 0, 10, 10)})
        b = tr(1, {0: (5, 0, 15, 10)})
        assert track_iou_3d(a, b) == pytest.approx(50 / 250)

    def test_cross_video_rejected(self):
        with pytest.raises(ValueError):
            track_iou_3d(tr(0, UNIT, video=0), tr(1, UNIT, video=1))

    def test_symmetric(self):
        a = tr(0, {0: (0, 0, 10, 10), 2: (3, 3, 9, 9)})
        b = tr(1, {0: (5, 0, 15, 10), 1: (0, 0, 4, 4)})
        assert track_iou_3d(a, b) == track_iou_3d(b, a)


class TestInterpolatedAp:
    def test_perfect(self):
        assert interpolated_ap([True], 1) == 1.0

    def test_all_false(self):
        assert interpolated_ap([False, False], 2) == 0.0

    def test_no_predictions(self):
        assert interpolated_ap([], 3) == 0.0

    def test_no_gt_raises(self):
        with pytest.raises(NoGroundTruth):
            interpolated_ap([True], 0)

    def test_half_recall(self):
        # one TP then nothing for the second gt: precision 1 at recall .5
        ap = interpolated_ap([True], 2)
        assert ap == pytest.approx(51 / 101)


class TestTrackAp:
    def test_exact_predictions(self):
        gts = [tr(0, UNIT, cat=1), tr(1, {0: (50, 50, 60, 60)}, cat=2)]
        res = track_ap(gts, gts)
        assert res["mean"] == 1.0
        assert res["per_category"] == {1: 1.0, 2: 1.0}

    def test_boundary_iou_counts_at_threshold(self):
        # pred overlaps gt with 3D IoU exactly 0.5
        gt = tr(0, {0: (0.0, 0.0, 10.0, 10.0)})
        pred = tr(1, {0: (0.0, 0.0, 10.0, 5.0)})  # inter 50, union 100 -> 0.5
        assert track_iou_3d(pred, gt) == pytest.approx(0.5)
        assert track_ap([pred], [gt], 0.5)["mean"] == 1.0
        assert track_ap([pred], [gt], 0.5 + 1e-9)["mean"] == 0.0

    def test_false_positive_after_tp_keeps_ap(self):
        gt = tr(0, UNIT)
        fp = tr(2, {0: (50, 50, 60, 60)}, score=0.3)
        assert track_ap([tr(1, UNIT, score=0.9), fp], [gt])["mean"] == 1.0

    def test_monotone_score_transform_invariance(self):
        rng = np.random.default_rng(0)
        gts, preds = _random_case(rng, n_gt=4, n_pred=6)
        base = track_ap(preds, gts)["mean"]
        squeezed = [
            Track(p.video_id, p.track_id, p.category_id, p.score**3, p.boxes)
            for p in preds
        ]
        assert track_ap(squeezed, gts)["mean"] == pytest.approx(base)

    def test_suite_keys(self):
        gt = tr(0, UNIT)
        suite = track_ap_suite([gt], [gt])
        assert suite["AP50"] == suite["AP75"] == suite["AP_avg"] == 1.0
        assert suite["AP50_95"] == 1.0
        assert set(suite["per_threshold"]) == {f"{t:.2f}" for t in np.arange(0.5, 1.0, 0.05).round(2)}


def _random_case(rng, n_gt, n_pred, video_count=2):
    gts = []
    for k in range(n_gt):
        frames = sorted(rng.choice(10, size=rng.integers(1, 4), replace=False))
        x, y = rng.uniform(0, 80, 2)
        gts.append(
            tr(
                k,
                {int(f): (x, y, x + rng.uniform(5, 20), y + rng.uniform(5, 20)) for f in frames},
                cat=int(rng.integers(1, 3)),
                video=int(rng.integers(video_count)),
            )
        )
    preds = []
    for k in range(n_pred):
        if k < n_gt and rng.random() < 0.7:
            src = gts[k]
            jitter = rng.uniform(-3, 3, 2)
            boxes = {
                f: (
                    b.x1 + jitter[0],
                    b.y1 + jitter[1],
                    b.x2 + jitter[0],
                    b.y2 + jitter[1],
                )
                for f, b in src.boxes.items()
            }
            cat, video = src.category_id, src.video_id
        else:
            x, y = rng.uniform(0, 80, 2)
            boxes = {int(rng.integers(10)): (x, y, x + 10, y + 10)}
            cat, video = int(rng.integers(1, 3)), int(rng.integers(video_count))
        preds.append(
            tr(100 + k, boxes, cat=cat, score=float(rng.uniform(0.1, 1.0)), video=video)
        )
    return gts, preds


class TestGreedyMatchesBruteForce:
    @pytest.mark.parametrize("seed", range(20))
    def test_random_small_cases(self, seed):
        rng = np.random.default_rng(seed)
        gts, preds = _random_case(rng, n_gt=3, n_pred=5)
        for thresh in (0.3, 0.5, 0.75):
            got = track_ap(preds, gts, thresh)["per_category"]
            for c, ap in got.items():
                p_c = [p for p in preds if p.category_id == c]
                g_c = [g for g in gts if g.category_id == c]
                assert ap == pytest.approx(
                    brute_force_best_ap(p_c, g_c, thresh), abs=1e-12
                )

    def test_crossing_case_needs_augmentation(self):
        # high-score pred overlaps both gts, low-score pred only gt 0;
        # naive greedy would burn gt 0 on the first pred and lose the TP
        g0 = tr(0, {0: (0, 0, 10, 10)})
        g1 = tr(1, {0: (8, 0, 18, 10)})
        both = tr(2, {0: (4, 0, 14, 10)}, score=0.9)
        only0 = tr(3, {0: (0, 0, 10, 10)}, score=0.5)
        thresh = 0.4
        assert track_iou_3d(both, g0) >= thresh and track_iou_3d(both, g1) >= thresh
        assert track_iou_3d(only0, g0) >= thresh > track_iou_3d(only0, g1)
        res = track_ap([both, only0], [g0, g1], thresh)["mean"]
        assert res == pytest.approx(brute_force_best_ap([both, only0], [g0, g1], thresh))
        assert res == 1.0


class TestClassOracle:
    def test_relabels_matched(self):
        gt = tr(0, UNIT, cat=5)
        pred = tr(1, UNIT, cat=2, score=0.8)
        (out,) = class_oracle([pred], [gt])
        assert out.category_id == 5
        assert out.score == 0.8 and out.boxes == pred.boxes

    def test_unmatched_kept_as_fp(self):
        gt = tr(0, UNIT, cat=5)
        far = tr(1, {0: (80, 80, 90, 90)}, cat=2)
        (out,) = class_oracle([far], [gt])
        assert out.category_id == 2

    def test_one_to_one(self):
        gt = tr(0, UNIT, cat=5)
        p1 = tr(1, UNIT, cat=2, score=0.9)
        p2 = tr(2, UNIT, cat=3, score=0.8)
        out = class_oracle([p1, p2], [gt])
        assert sorted(t.category_id for t in out) == [3, 5] or sorted(
            t.category_id for t in out
        ) == [2, 5]
        assert sum(t.category_id == 5 for t in out) == 1

    @pytest.mark.parametrize("seed", range(15))
    def test_never_lowers_ap(self, seed):
        rng = np.random.default_rng(1000 + seed)
        gts, preds = _random_case(rng, n_gt=4, n_pred=6)
        before = track_ap(preds, gts)["mean"]
        after = track_ap(class_oracle(preds, gts), gts)["mean"]
        assert after >= before - 1e-12


class TestTrackOracle:
    def _dets_from_track(self, t, cat=None, score=0.8):
        return [
            FrameDetection(
                video_id=t.video_id,
                frame_index=f,
                box=b,
                category_id=cat if cat is not None else t.category_id,
                score=score,
            )
            for f, b in t.boxes.items()
        ]

    def test_exact_detections_recover_gt_track(self):
        gt = tr(3, {0: (0, 0, 10, 10), 1: (2, 2, 12, 12)}, cat=4)
        (out,) = track_oracle(self._dets_from_track(gt, cat=7), [gt])
        assert out.track_id == 3
        assert out.boxes == gt.boxes
        assert out.category_id == 7  # class predictions held constant
        assert out.score == pytest.approx(0.8)

    def test_spurious_detection_removed(self):
        gt = tr(0, UNIT, cat=1)
        dets = self._dets_from_track(gt) + [
            FrameDetection(0, 0, Box(80, 80, 90, 90), 1, 0.9)
        ]
        (out,) = track_oracle(dets, [gt])
        assert set(out.boxes) == {0}
        assert out.boxes[0] == Box(0, 0, 10, 10)

    def test_majority_vote_category(self):
        gt = tr(0, {0: UNIT[0], 1: UNIT[0], 2: UNIT[0]}, cat=1)
        dets = [
            FrameDetection(0, f, Box(0, 0, 10, 10), cat, 0.5)
            for f, cat in [(0, 2), (1, 2), (2, 3)]
        ]
        (out,) = track_oracle(dets, [gt])
        assert out.category_id == 2

    def test_one_detection_per_gt_per_frame(self):
        gt = tr(0, UNIT, cat=1)
        close = FrameDetection(0, 0, Box(0, 0, 10, 10), 1, 0.5)
        close2 = FrameDetection(0, 0, Box(1, 0, 11, 10), 1, 0.9)
        out = track_oracle([close, close2], [gt])
        assert len(out) == 1
        assert len(out[0].boxes) == 1

    def test_score_is_mean(self):
        gt = tr(0, {0: UNIT[0], 1: UNIT[0]}, cat=1)
        dets = [
            FrameDetection(0, 0, Box(0, 0, 10, 10), 1, 0.2),
            FrameDetection(0, 1, Box(0, 0, 10, 10), 1, 0.6),
        ]
        (out,) = track_oracle(dets, [gt])
        assert out.score == pytest.approx(0.4)


class TestSerialization:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        gts, preds = _random_case(rng, n_gt=3, n_pred=4)
        p = tmp_path / "tracks.jsonl"
        write_tracks_jsonl(preds, p)
        back = load_tracks_jsonl(p)
        assert back == preds

    def test_track_score_helper(self):
        assert track_score_from_detections([0.2, 0.4, 0.6]) == pytest.approx(0.4)
