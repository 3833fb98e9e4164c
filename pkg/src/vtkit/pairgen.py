"""Tracking-pair synthesis from still images.

Two jittered views of the same scene form a surrogate video pair: each
surviving instance keeps its track id, so instance correspondence comes
for free from the generating transforms. Two augmentations are provided,
strong zoom-in/out (scale then crop) and four-image mosaicing, mixed
with equal probability in `mixed` mode.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .core import AffineTransform, Box, iou
from .ingest import ImageSample, Instance, sample_to_json

DEFAULT_MIN_IOU = 0.4
STRONG_SCALE_RANGE = (0.1, 2.0)
WEAK_SCALE_RANGE = (0.8, 1.25)


class CropSearchFailed(RuntimeError):
    """No crop window kept any instance within the attempt budget."""


class PairDegenerate(RuntimeError):
    """No instance survived in both views after the retry budget."""


@dataclass(frozen=True)
class ZoomParams:
    scale_range: Tuple[float, float] = STRONG_SCALE_RANGE
    min_iou: float = DEFAULT_MIN_IOU
    max_attempts: int = 100

    def __post_init__(self):
        lo, hi = self.scale_range
        if not 0.0 < lo <= hi:
            raise ValueError(f"bad scale range: {self.scale_range}")
        if not 0.0 <= self.min_iou < 1.0:
            raise ValueError(f"bad min_iou: {self.min_iou}")


@dataclass(frozen=True)
class MosaicParams:
    canvas_split_range: Tuple[float, float] = (0.25, 0.75)
    affine_scale_range: Tuple[float, float] = STRONG_SCALE_RANGE
    output_size: Tuple[int, int] = (512, 512)
    min_iou: float = DEFAULT_MIN_IOU
    allow_hflip: bool = True
    max_attempts: int = 100

    def __post_init__(self):
        lo, hi = self.affine_scale_range
        if not 0.0 < lo <= hi:
            raise ValueError(f"bad affine scale range: {self.affine_scale_range}")
        slo, shi = self.canvas_split_range
        if not 0.0 < slo <= shi < 1.0:
            raise ValueError(f"bad split range: {self.canvas_split_range}")
        if not 0.0 <= self.min_iou < 1.0:
            raise ValueError(f"bad min_iou: {self.min_iou}")


@dataclass(frozen=True)
class TrackingPair:
    """Two views of one (possibly composite) scene plus their provenance.

    transforms_* hold one transform per source image, mapping source
    coordinates into the view canvas; instance_sources_* give, for each
    instance of a view, the index of its source image.
    """

    mode: str
    view_t: ImageSample
    view_t_tau: ImageSample
    transforms_t: Tuple[AffineTransform, ...]
    transforms_t_tau: Tuple[AffineTransform, ...]
    sources: Tuple[ImageSample, ...]
    instance_sources_t: Tuple[int, ...]
    instance_sources_tau: Tuple[int, ...]
    correspondences: frozenset


def ensure_track_ids(sample: ImageSample, start: int = 0) -> Tuple[ImageSample, int]:
    """Relabel every instance with a track id by position, offset by `start`.

    Any pre-existing ids are discarded so that ids from different source
    samples can never collide. Returns the relabeled sample and the next
    free id.
    """
    new_instances = []
    next_id = start
    for i, inst in enumerate(sample.instances):
        new_instances.append(replace(inst, track_id=start + i))
        next_id = start + i + 1
    return replace(sample, instances=tuple(new_instances)), next_id


def _filter_instances(
    instances: Sequence[Instance],
    t: AffineTransform,
    canvas_w: float,
    canvas_h: float,
    min_iou: float,
) -> List[Instance]:
    """Transform, clip, and drop instances truncated below min_iou.

    The gate compares the clipped box against the instance's own
    unclipped transformed box, so it measures truncation only.
    """
    out = []
    for inst in instances:
        full = t.apply_box_unclipped(inst.box)
        clipped = full.clip(canvas_w, canvas_h)
        if clipped is None:
            continue
        if clipped.area / full.area >= min_iou:
            out.append(replace(inst, box=clipped, score=None))
    return out


def _offset_range(extent: float, canvas: float) -> Tuple[float, float]:
    slack = canvas - extent
    return (min(0.0, slack), max(0.0, slack))


def scale_and_crop(
    sample: ImageSample, p: ZoomParams, rng: np.random.Generator
) -> Tuple[AffineTransform, Tuple[Instance, ...]]:
    """Draw a scale and crop window keeping at least one instance.

    Rejection-samples up to max_attempts windows; raises CropSearchFailed
    when none keeps an instance (callers fall back to the identity crop).
    """
    if not sample.instances:
        raise ValueError(f"image {sample.image_id} has no instances")
    w, h = float(sample.width), float(sample.height)
    for _ in range(p.max_attempts):
        s = float(rng.uniform(*p.scale_range))
        ox = float(rng.uniform(*_offset_range(s * w, w)))
        oy = float(rng.uniform(*_offset_range(s * h, h)))
        t = AffineTransform(s, s, ox, oy)
        survivors = _filter_instances(sample.instances, t, w, h, p.min_iou)
        if survivors:
            return t, tuple(survivors)
    raise CropSearchFailed(
        f"image {sample.image_id}: no crop kept an instance "
        f"in {p.max_attempts} attempts"
    )


def _zoom_view(
    sample: ImageSample, p: ZoomParams, rng: np.random.Generator, view_id: int
) -> Tuple[ImageSample, AffineTransform]:
    try:
        t, survivors = scale_and_crop(sample, p, rng)
    except CropSearchFailed:
        t = AffineTransform.identity()
        survivors = tuple(replace(i, score=None) for i in sample.instances)
    view = ImageSample(
        image_id=view_id,
        width=sample.width,
        height=sample.height,
        instances=survivors,
    )
    return view, t


def make_zoom_pair(
    sample: ImageSample,
    p: ZoomParams,
    rng: np.random.Generator,
    max_retries: int = 20,
    pair_index: int = 0,
) -> TrackingPair:
    """Two independent scale-and-crop draws of one image."""
    source, _ = ensure_track_ids(sample)
    for _ in range(max_retries):
        view_t, t_a = _zoom_view(source, p, rng, 2 * pair_index)
        view_tau, t_b = _zoom_view(source, p, rng, 2 * pair_index + 1)
        corr = frozenset(i.track_id for i in view_t.instances) & frozenset(
            i.track_id for i in view_tau.instances
        )
        if corr:
            return TrackingPair(
                mode="zoom",
                view_t=view_t,
                view_t_tau=view_tau,
                transforms_t=(t_a,),
                transforms_t_tau=(t_b,),
                sources=(source,),
                instance_sources_t=(0,) * len(view_t.instances),
                instance_sources_tau=(0,) * len(view_tau.instances),
                correspondences=corr,
            )
    raise PairDegenerate(f"image {sample.image_id}: no shared instance survived")


def _shared_affine(
    p: MosaicParams, rng: np.random.Generator, w: float, h: float
) -> AffineTransform:
    s = float(rng.uniform(*p.affine_scale_range))
    flip = p.allow_hflip and rng.random() < 0.5
    sx = -s if flip else s
    # Transformed canvas spans [min(0, sx*w), max(0, sx*w)]; place that
    # extent so it overlaps the output window.
    ax, bx = sorted((0.0, sx * w))
    offx = float(rng.uniform(*_offset_range(bx - ax, w)))
    offy = float(rng.uniform(*_offset_range(s * h, h)))
    return AffineTransform(sx, s, offx - ax, offy)


def make_mosaic_composite(
    samples: Sequence[ImageSample],
    p: MosaicParams,
    rng: np.random.Generator,
    composite_id: int = 0,
) -> Tuple[ImageSample, Tuple[AffineTransform, ...], Tuple[int, ...]]:
    """Stitch four images into quadrants, then jitter with a shared affine.

    Track ids must already be unique across the four sources. Returns
    the composite sample, the per-source composed transforms, and the
    source index of each surviving instance.
    """
    if len(samples) != 4:
        raise ValueError(f"mosaic needs exactly 4 images, got {len(samples)}")
    W, H = float(p.output_size[0]), float(p.output_size[1])
    px = float(rng.uniform(*p.canvas_split_range)) * W
    py = float(rng.uniform(*p.canvas_split_range)) * H
    quadrants = (
        (0.0, 0.0, px, py),
        (px, 0.0, W, py),
        (0.0, py, px, H),
        (px, py, W, H),
    )
    base = tuple(
        AffineTransform(
            (qx2 - qx1) / s.width, (qy2 - qy1) / s.height, qx1, qy1
        )
        for s, (qx1, qy1, qx2, qy2) in zip(samples, quadrants)
    )

    def build(shared: AffineTransform):
        transforms = tuple(shared.compose(b) for b in base)
        instances: List[Instance] = []
        origins: List[int] = []
        for src_idx, (src, t) in enumerate(zip(samples, transforms)):
            for inst in _filter_instances(src.instances, t, W, H, p.min_iou):
                instances.append(inst)
                origins.append(src_idx)
        return transforms, instances, origins

    for _ in range(p.max_attempts):
        transforms, instances, origins = build(_shared_affine(p, rng, W, H))
        if instances:
            break
    else:
        transforms, instances, origins = build(AffineTransform.identity())
    composite = ImageSample(
        image_id=composite_id,
        width=int(W),
        height=int(H),
        instances=tuple(instances),
    )
    return composite, transforms, tuple(origins)


def make_mosaic_pair(
    samples: Sequence[ImageSample],
    p: MosaicParams,
    rng: np.random.Generator,
    max_retries: int = 20,
    pair_index: int = 0,
) -> TrackingPair:
    """Two mosaics of the same four sources under one track-id remap."""
    sources = []
    next_id = 0
    for s in samples:
        relabeled, next_id = ensure_track_ids(s, start=next_id)
        sources.append(relabeled)
    sources = tuple(sources)
    for _ in range(max_retries):
        view_t, tf_t, src_t = make_mosaic_composite(
            sources, p, rng, composite_id=2 * pair_index
        )
        view_tau, tf_tau, src_tau = make_mosaic_composite(
            sources, p, rng, composite_id=2 * pair_index + 1
        )
        corr = frozenset(i.track_id for i in view_t.instances) & frozenset(
            i.track_id for i in view_tau.instances
        )
        if corr:
            return TrackingPair(
                mode="mosaic",
                view_t=view_t,
                view_t_tau=view_tau,
                transforms_t=tf_t,
                transforms_t_tau=tf_tau,
                sources=sources,
                instance_sources_t=src_t,
                instance_sources_tau=src_tau,
                correspondences=corr,
            )
    raise PairDegenerate("no shared instance survived the mosaic retries")


def make_pair(
    stream: Iterator[ImageSample],
    mode: str,
    rng: np.random.Generator,
    zoom_params: Optional[ZoomParams] = None,
    mosaic_params: Optional[MosaicParams] = None,
    pair_index: int = 0,
) -> TrackingPair:
    """Draw one tracking pair from a sample stream.

    Mixed mode flips a fair seeded coin between zoom and mosaic.
    """
    if mode not in ("zoom", "mosaic", "mixed"):
        raise ValueError(f"unknown pair mode: {mode}")
    zoom_params = zoom_params or ZoomParams()
    mosaic_params = mosaic_params or MosaicParams()
    chosen = mode
    if mode == "mixed":
        chosen = "zoom" if rng.random() < 0.5 else "mosaic"
    if chosen == "zoom":
        sample = next(stream)
        while not sample.instances:
            sample = next(stream)
        return make_zoom_pair(sample, zoom_params, rng, pair_index=pair_index)
    while True:
        samples = [next(stream) for _ in range(4)]
        if any(s.instances for s in samples):
            return make_mosaic_pair(samples, mosaic_params, rng, pair_index=pair_index)


def pair_seed(master_seed: int, pair_index: int) -> np.random.Generator:
    """Per-pair generator; parallel generation matches serial generation."""
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence([master_seed, pair_index]))
    )


def back_projection_sound(pair: TrackingPair, min_iou: float) -> bool:
    """Check track-id soundness: view boxes map back onto their source box."""
    by_id = {}
    for src_idx, src in enumerate(pair.sources):
        for inst in src.instances:
            by_id[inst.track_id] = (src_idx, inst)
    for view, transforms, origins in (
        (pair.view_t, pair.transforms_t, pair.instance_sources_t),
        (pair.view_t_tau, pair.transforms_t_tau, pair.instance_sources_tau),
    ):
        for inst, origin in zip(view.instances, origins):
            src_idx, src_inst = by_id[inst.track_id]
            if src_idx != origin:
                return False
            back = transforms[origin].invert().apply_box_unclipped(inst.box)
            if iou(back, src_inst.box) < min_iou - 1e-9:
                return False
    return True


def min_iou_satisfied(pair: TrackingPair, min_iou: float) -> bool:
    """Check the truncation gate on every emitted instance of both views."""
    by_id = {i.track_id: i for s in pair.sources for i in s.instances}
    for view, transforms, origins in (
        (pair.view_t, pair.transforms_t, pair.instance_sources_t),
        (pair.view_t_tau, pair.transforms_t_tau, pair.instance_sources_tau),
    ):
        for inst, origin in zip(view.instances, origins):
            full = transforms[origin].apply_box_unclipped(by_id[inst.track_id].box)
            if inst.box.area / full.area < min_iou - 1e-9:
                return False
    return True


def pair_to_json(pair: TrackingPair) -> dict:
    return {
        "mode": pair.mode,
        "view_t": sample_to_json(pair.view_t),
        "view_t_tau": sample_to_json(pair.view_t_tau),
        "transforms_t": [t.matrix() for t in pair.transforms_t],
        "transforms_t_tau": [t.matrix() for t in pair.transforms_t_tau],
        "instance_sources_t": list(pair.instance_sources_t),
        "instance_sources_tau": list(pair.instance_sources_tau),
        "source_image_ids": [s.image_id for s in pair.sources],
        "correspondences": sorted(pair.correspondences),
    }


def write_pairs_jsonl(pairs: Sequence[TrackingPair], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for pair in pairs:
            f.write(json.dumps(pair_to_json(pair)) + "\n")
