"""Command-line entry point.

Subcommands: gen-pairs, pseudo-label, track, eval, oracle, demo-train,
grad-check. Every command is deterministic given its configuration and
seed; JSON reports embed the effective configuration and a schema
version, JSONL artifact commands write it to a sibling .meta.json file.
Worker count comes from --workers or the VTK_THREADS environment
variable; parallelism never changes results.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import distill, gradcheck, ingest, metrics, pairgen, report, toytrain, tracker
from .core import Box, BoxDeltas

SCHEMA_VERSION = 1

DEFAULTS: Dict[str, Dict[str, object]] = {
    "gen-pairs": {
        "min_iou": pairgen.DEFAULT_MIN_IOU,
        "zoom_scale_range": list(pairgen.STRONG_SCALE_RANGE),
        "mosaic_affine_scale_range": list(pairgen.STRONG_SCALE_RANGE),
        "mosaic_split_range": [0.25, 0.75],
        "mosaic_output_size": [512, 512],
        "rfs_threshold": ingest.DEFAULT_RFS_THRESHOLD,
    },
    "pseudo-label": {
        "score_thresh": distill.PSEUDO_SCORE_THRESH,
        "nms_thresh": distill.PSEUDO_NMS_THRESH,
        "background_index": -1,
    },
    "track": {
        "match_score_thresh": 0.5,
        "new_track_score_thresh": 0.7,
        "retention_frames": tracker.RETENTION_FRAMES,
        "max_detections": tracker.MAX_DETECTIONS_PER_FRAME,
    },
    "eval": {"iou_thresh": metrics.IOU_GATE},
    "oracle": {"gate": metrics.IOU_GATE},
    "demo-train": {
        "pretrain_epochs": 25,
        "finetune_epochs": 15,
        "step1_epochs": 10,
        "lr": 0.05,
        "lambda_det": 1.0,
        "lambda_track": 1.0,
        "lambda_kd": 1.0,
        "lambda_semcon": 1.0,
        "kd_variant": "mse",
    },
    "grad-check": {"points": 100, "tol": 1e-4},
}


class DataError(Exception):
    pass


def _workers(args) -> int:
    if getattr(args, "workers", None):
        return args.workers
    try:
        return max(1, int(os.environ.get("VTK_THREADS", "1")))
    except ValueError:
        return 1


def build_config(command: str, args) -> Dict[str, object]:
    """Merge defaults, an optional JSON config file, and --set overrides."""
    cfg = dict(DEFAULTS[command])
    sources: List[Dict[str, object]] = []
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise DataError(f"config file not found: {path}")
        try:
            sources.append(json.loads(path.read_text(encoding="utf-8")))
        except json.JSONDecodeError as e:
            raise DataError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}")
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise DataError(f"--set expects key=value, got {item!r}")
        key, _, raw = item.partition("=")
        try:
            overrides[key] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key] = raw
    sources.append(overrides)
    for src in sources:
        for key, value in src.items():
            if key not in cfg:
                raise DataError(
                    f"unknown config key {key!r} for {command}; "
                    f"known keys: {', '.join(sorted(cfg))}"
                )
            cfg[key] = value
    return cfg


def _write_json(obj, path) -> None:
    Path(path).write_text(
        json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _write_meta(out_path, command: str, cfg, seed=None) -> None:
    meta = {"schema_version": SCHEMA_VERSION, "command": command, "config": cfg}
    if seed is not None:
        meta["seed"] = seed
    _write_json(meta, str(out_path) + ".meta.json")


def cmd_gen_pairs(args) -> int:
    cfg = build_config("gen-pairs", args)
    index = ingest.load_dataset(args.data, rfs_threshold=float(cfg["rfs_threshold"]))
    if len(index) == 0:
        raise DataError(f"{args.data}: dataset is empty")
    zoom = pairgen.ZoomParams(
        scale_range=tuple(cfg["zoom_scale_range"]), min_iou=float(cfg["min_iou"])
    )
    mosaic = pairgen.MosaicParams(
        canvas_split_range=tuple(cfg["mosaic_split_range"]),
        affine_scale_range=tuple(cfg["mosaic_affine_scale_range"]),
        output_size=tuple(cfg["mosaic_output_size"]),
        min_iou=float(cfg["min_iou"]),
    )

    def one_pair(i: int) -> pairgen.TrackingPair:
        # independent per-pair stream and rng: parallel equals serial
        stream = ingest.rfs_stream(index, [args.seed, i, 1])
        rng = pairgen.pair_seed(args.seed, i)
        return pairgen.make_pair(
            stream, args.mode, rng, zoom, mosaic, pair_index=i
        )

    workers = _workers(args)
    if workers > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            pairs = list(pool.map(one_pair, range(args.num)))
    else:
        pairs = [one_pair(i) for i in range(args.num)]
    pairgen.write_pairs_jsonl(pairs, args.out)
    _write_meta(args.out, "gen-pairs", cfg, args.seed)
    return 0


def _load_teacher_dets(path) -> Dict[int, List[distill.TeacherDetection]]:
    out: Dict[int, List[distill.TeacherDetection]] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: invalid JSON: {e.msg}")
            try:
                dets = [
                    distill.TeacherDetection(
                        box=Box(*map(float, d["bbox"])),
                        logits=np.asarray(d["logits"], dtype=np.float64),
                        deltas=BoxDeltas(*map(float, d["deltas"])),
                        score=float(d["score"]),
                    )
                    for d in obj["detections"]
                ]
            except (KeyError, TypeError, ValueError) as e:
                raise DataError(f"{path}:{lineno}: bad detection record: {e}")
            out[int(obj["image_id"])] = dets
    return out


def cmd_pseudo_label(args) -> int:
    cfg = build_config("pseudo-label", args)
    gt = ingest.load_dataset(args.gt)
    teacher = _load_teacher_dets(args.teacher)
    with open(args.out, "w", encoding="utf-8", newline="\n") as f:
        for sample in gt.samples:
            aug = distill.generate_pseudo_labels(
                teacher.get(sample.image_id, []),
                sample.instances,
                score_thresh=float(cfg["score_thresh"]),
                nms_thresh=float(cfg["nms_thresh"]),
                background_index=int(cfg["background_index"]),
            )
            f.write(
                json.dumps(distill.augmented_labels_to_json(sample.image_id, aug))
                + "\n"
            )
    _write_meta(args.out, "pseudo-label", cfg)
    return 0


def _load_detections(path, embeddings=None):
    dets = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                dets.append(obj)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: invalid JSON: {e.msg}")
    return dets


def cmd_track(args) -> int:
    cfg = build_config("track", args)
    params = tracker.TrackerParams(
        match_score_thresh=float(cfg["match_score_thresh"]),
        new_track_score_thresh=float(cfg["new_track_score_thresh"]),
        retention_frames=int(cfg["retention_frames"]),
        max_detections=int(cfg["max_detections"]),
    )
    embeddings = tracker.read_embeddings(args.embeddings)
    records = _load_detections(args.dets)
    by_video: Dict[int, Dict[int, List[tracker.Detection]]] = {}
    cats: Dict[int, Dict[int, List]] = {}
    for r in records:
        try:
            emb = embeddings[int(r["embedding"])]
            det = tracker.Detection(
                frame_index=int(r["frame_index"]),
                box=Box(*map(float, r["bbox"])),
                category_id=int(r["category_id"]),
                score=float(r["score"]),
                embedding=emb / np.linalg.norm(emb),
            )
        except (KeyError, IndexError, ValueError) as e:
            raise DataError(f"{args.dets}: bad detection record: {e}")
        by_video.setdefault(int(r["video_id"]), {}).setdefault(
            det.frame_index, []
        ).append(det)
    out_tracks: List[metrics.Track] = []
    for video_id in sorted(by_video):
        frames = sorted(by_video[video_id].items())
        states = tracker.run_video(frames, params)
        for st in states:
            votes: Dict[int, int] = {}
            for _, _, _, c in st.history:
                votes[c] = votes.get(c, 0) + 1
            category = min(votes, key=lambda c: (-votes[c], c))
            out_tracks.append(
                metrics.Track(
                    video_id=video_id,
                    track_id=st.track_id,
                    category_id=category,
                    score=metrics.track_score_from_detections(
                        [s for _, _, s, _ in st.history]
                    ),
                    boxes={f: b for f, b, _, _ in st.history},
                )
            )
    metrics.write_tracks_jsonl(out_tracks, args.out)
    _write_meta(args.out, "track", cfg)
    return 0


def cmd_eval(args) -> int:
    cfg = build_config("eval", args)
    preds = metrics.load_tracks_jsonl(args.pred)
    gts = metrics.load_tracks_jsonl(args.gt)
    if args.suite:
        results = metrics.track_ap_suite(preds, gts)
        per_category = results.pop("per_category_at_50")
    else:
        thresh = args.iou if args.iou is not None else float(cfg["iou_thresh"])
        r = metrics.track_ap(preds, gts, thresh)
        per_category = r["per_category"]
        results = {"mean": r["mean"], "iou_thresh": r["iou_thresh"]}
    out = {
        "schema_version": SCHEMA_VERSION,
        "config": cfg,
        "suite": bool(args.suite),
        "per_category": {str(c): v for c, v in per_category.items()},
        **results,
    }
    _write_json(out, args.out)
    if args.figures:
        fig_dir = Path(args.figures)
        fig_dir.mkdir(parents=True, exist_ok=True)
        report.write_ap_csv(out["per_category"], fig_dir / "per_category_ap.csv")
        report.render_ap_bars(
            out["per_category"], fig_dir / "per_category_ap.png"
        )
    return 0


def cmd_oracle(args) -> int:
    cfg = build_config("oracle", args)
    gts = metrics.load_tracks_jsonl(args.gt)
    gate = float(cfg["gate"])
    if args.type == "class":
        preds = metrics.load_tracks_jsonl(args.pred)
        out_tracks = metrics.class_oracle(preds, gts, gate)
    else:
        records = _load_detections(args.pred)
        dets = [
            metrics.FrameDetection(
                video_id=int(r["video_id"]),
                frame_index=int(r["frame_index"]),
                box=Box(*map(float, r["bbox"])),
                category_id=int(r["category_id"]),
                score=float(r["score"]),
            )
            for r in records
        ]
        out_tracks = metrics.track_oracle(dets, gts, gate)
    metrics.write_tracks_jsonl(out_tracks, args.out)
    _write_meta(args.out, "oracle", cfg)
    return 0


def cmd_demo_train(args) -> int:
    cfg = build_config("demo-train", args)
    scheme = args.scheme.replace("-", "_")
    scenario = (
        toytrain.lvis_tao_scenario()
        if args.scenario == "lvis-tao"
        else toytrain.coco_ytvis_scenario()
    )
    if scheme == "two_step" and not scenario.new_cats:
        raise DataError("two-step expansion needs the coco-ytvis scenario")
    weights = distill.LossWeights(
        det=float(cfg["lambda_det"]),
        track=float(cfg["lambda_track"]),
        kd=float(cfg["lambda_kd"]),
        semcon=float(cfg["lambda_semcon"]),
    )
    tcfg = toytrain.TrainConfig(
        lr=float(cfg["lr"]), weights=weights, kd_variant=str(cfg["kd_variant"])
    )
    world = toytrain.SyntheticWorld(seed=args.seed)
    head = toytrain.ToyHead.init(
        world.params.feature_dim,
        len(scenario.pretrain_cats),
        world.params.embed_dim,
        args.seed,
    )
    pre = toytrain.pretrain(
        world, head, int(cfg["pretrain_epochs"]), args.seed, scenario, tcfg
    )
    if scheme == "two_step":
        head, fine = toytrain.two_step_expand(
            world,
            head,
            scenario,
            int(cfg["step1_epochs"]),
            int(cfg["finetune_epochs"]),
            args.seed,
            tcfg,
        )
    else:
        fine = toytrain.finetune(
            world, head, scheme, int(cfg["finetune_epochs"]), args.seed, scenario, tcfg
        )
    out = {
        "schema_version": SCHEMA_VERSION,
        "config": cfg,
        "scenario": args.scenario,
        "scheme": args.scheme,
        "seed": args.seed,
        "pretrain": pre,
        "finetune": fine,
    }
    _write_json(out, args.out)
    if args.figures:
        fig_dir = Path(args.figures)
        fig_dir.mkdir(parents=True, exist_ok=True)
        histories = {"pretrain": pre["losses"]}
        if "losses" in fine:
            histories["finetune"] = fine["losses"]
        elif "step2" in fine:
            histories["finetune-step2"] = fine["step2"]["losses"]
        report.render_loss_curves(histories, fig_dir / "loss_curves.png")
        report.write_loss_csv(pre["losses"], fig_dir / "pretrain_losses.csv")
        accs = {"pretrain": pre["accuracy"], "finetune": fine["accuracy"]}
        report.render_accuracy_bars(accs, fig_dir / "accuracy.png")
        report.write_accuracy_csv(fine["accuracy"], fig_dir / "accuracy.csv")
    return 0


def cmd_grad_check(args) -> int:
    cfg = build_config("grad-check", args)
    results = gradcheck.run_all(points=int(cfg["points"]), seed=args.seed)
    tol = float(cfg["tol"])
    ok = True
    for name, err in sorted(results.items()):
        status = "PASS" if err < tol else "FAIL"
        ok = ok and err < tol
        print(f"{name}: max relative error {err:.3e} {status}")
    if args.out:
        _write_json(
            {
                "schema_version": SCHEMA_VERSION,
                "config": cfg,
                "results": results,
                "pass": ok,
            },
            args.out,
        )
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="vtkit",
        description="Large-vocabulary video tracking toolkit: pair synthesis, "
        "distillation, association, Track-AP evaluation, and a desk-scale "
        "training demo.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument(
            "--set",
            action="append",
            metavar="KEY=VALUE",
            help="override a config key (JSON-parsed value)",
        )
        sp.add_argument(
            "--workers",
            type=int,
            default=0,
            help="worker count (default: VTK_THREADS or 1); never changes results",
        )
        if seed:
            sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("gen-pairs", help="synthesize tracking pairs from images")
    sp.add_argument("--data", required=True, help="dataset JSONL")
    sp.add_argument("--out", required=True)
    sp.add_argument("--num", type=int, default=100)
    sp.add_argument("--mode", choices=["zoom", "mosaic", "mixed"], default="mixed")
    common(sp)
    sp.set_defaults(func=cmd_gen_pairs)

    sp = sub.add_parser("pseudo-label", help="merge teacher detections into labels")
    sp.add_argument("--teacher", required=True, help="teacher detections JSONL")
    sp.add_argument("--gt", required=True, help="ground-truth JSONL")
    sp.add_argument("--out", required=True)
    common(sp, seed=False)
    sp.set_defaults(func=cmd_pseudo_label)

    sp = sub.add_parser("track", help="associate detections into tracks")
    sp.add_argument("--dets", required=True, help="detections JSONL")
    sp.add_argument("--embeddings", required=True, help="VTKE embedding file")
    sp.add_argument("--out", required=True)
    common(sp, seed=False)
    sp.set_defaults(func=cmd_track)

    sp = sub.add_parser("eval", help="evaluate tracks")
    ev = sp.add_subparsers(dest="metric", required=True)
    ap = ev.add_parser("track-ap")
    ap.add_argument("--pred", required=True)
    ap.add_argument("--gt", required=True)
    ap.add_argument("--iou", type=float, default=None)
    ap.add_argument("--suite", action="store_true")
    ap.add_argument("--out", required=True)
    ap.add_argument("--figures", help="directory for CSV + figure output")
    common(ap, seed=False)
    ap.set_defaults(func=cmd_eval)

    sp = sub.add_parser("oracle", help="class or track oracle transforms")
    sp.add_argument("--type", choices=["class", "track"], required=True)
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--out", required=True)
    common(sp, seed=False)
    sp.set_defaults(func=cmd_oracle)

    sp = sub.add_parser("demo-train", help="desk-scale forgetting demo")
    sp.add_argument(
        "--scenario", choices=["lvis-tao", "coco-ytvis"], default="lvis-tao"
    )
    sp.add_argument(
        "--scheme",
        choices=["naive", "track-only", "teacher-student", "two-step"],
        default="teacher-student",
    )
    sp.add_argument("--out", required=True)
    sp.add_argument("--figures", help="directory for CSV + figure output")
    common(sp)
    sp.set_defaults(func=cmd_demo_train)

    sp = sub.add_parser("grad-check", help="finite-difference gradient suite")
    sp.add_argument("--out", help="optional JSON report path")
    common(sp)
    sp.set_defaults(func=cmd_grad_check)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (
        DataError,
        ingest.ParseError,
        ingest.SchemaError,
        ingest.InvariantError,
        ingest.EmptyDataset,
        FileNotFoundError,
        ValueError,
    ) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
