"""Annotation loading and repeat-factor sampling.

Datasets are simplified JSONL, one image per line:

    {"image_id": int, "width": int, "height": int,
     "video_id": int?, "frame_index": int?,
     "instances": [{"bbox": [x1, y1, x2, y2], "category_id": int,
                    "track_id": int?, "score": float?}]}

Loading validates every invariant up front; the resulting DatasetIndex
is immutable and safe to share across workers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, Iterator, Optional, Sequence, Tuple

import numpy as np

from .core import Box, GeometryError

DEFAULT_RFS_THRESHOLD = 0.001


class ParseError(ValueError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class SchemaError(ValueError):
    pass


class InvariantError(ValueError):
    def __init__(self, image_id, reason: str):
        super().__init__(f"image {image_id}: {reason}")
        self.image_id = image_id


class EmptyDataset(ValueError):
    pass


@dataclass(frozen=True)
class Instance:
    """One annotated or predicted object."""

    box: Box
    category_id: int
    track_id: Optional[int] = None
    score: Optional[float] = None

    def __post_init__(self):
        if self.category_id <= 0:
            raise SchemaError(f"category_id must be positive, got {self.category_id}")
        if self.track_id is not None and self.track_id < 0:
            raise SchemaError("track_id must be non-negative")
        if self.score is not None and not (0.0 <= self.score <= 1.0):
            raise SchemaError(f"score out of [0,1]: {self.score}")


@dataclass(frozen=True)
class ImageSample:
    image_id: int
    width: int
    height: int
    instances: Tuple[Instance, ...]
    video_id: Optional[int] = None
    frame_index: Optional[int] = None

    @property
    def categories(self) -> frozenset:
        return frozenset(inst.category_id for inst in self.instances)


@dataclass(frozen=True)
class DatasetIndex:
    """Loaded samples plus per-category frequencies and repeat factors."""

    samples: Tuple[ImageSample, ...]
    frequencies: Dict[int, float] = field(default_factory=dict)
    rfs_threshold: float = DEFAULT_RFS_THRESHOLD

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def repeat_factor_per_image(self) -> np.ndarray:
        return repeat_factors(self, self.rfs_threshold)


def _instance_from_json(obj: dict, image_id) -> Instance:
    if "bbox" not in obj or "category_id" not in obj:
        raise SchemaError(f"image {image_id}: instance missing bbox/category_id")
    bbox = obj["bbox"]
    if not (isinstance(bbox, list) and len(bbox) == 4):
        raise SchemaError(f"image {image_id}: bbox must be [x1,y1,x2,y2]")
    try:
        box = Box(*(float(v) for v in bbox))
    except GeometryError as e:
        raise InvariantError(image_id, str(e)) from e
    return Instance(
        box=box,
        category_id=int(obj["category_id"]),
        track_id=obj.get("track_id"),
        score=obj.get("score"),
    )


def _sample_from_json(obj: dict) -> ImageSample:
    for key in ("image_id", "width", "height", "instances"):
        if key not in obj:
            raise SchemaError(f"missing required key {key!r}")
    image_id = obj["image_id"]
    width = int(obj["width"])
    height = int(obj["height"])
    if width <= 0 or height <= 0:
        raise InvariantError(image_id, "non-positive image size")
    instances = tuple(_instance_from_json(i, image_id) for i in obj["instances"])
    for inst in instances:
        b = inst.box
        if b.x1 < 0 or b.y1 < 0 or b.x2 > width or b.y2 > height:
            raise InvariantError(
                image_id, f"box {b.as_list()} outside canvas {width}x{height}"
            )
    return ImageSample(
        image_id=image_id,
        width=width,
        height=height,
        instances=instances,
        video_id=obj.get("video_id"),
        frame_index=obj.get("frame_index"),
    )


def sample_to_json(s: ImageSample) -> dict:
    obj: dict = {"image_id": s.image_id, "width": s.width, "height": s.height}
    if s.video_id is not None:
        obj["video_id"] = s.video_id
    if s.frame_index is not None:
        obj["frame_index"] = s.frame_index
    insts = []
    for inst in s.instances:
        d: dict = {"bbox": inst.box.as_list(), "category_id": inst.category_id}
        if inst.track_id is not None:
            d["track_id"] = inst.track_id
        if inst.score is not None:
            d["score"] = inst.score
        insts.append(d)
    obj["instances"] = insts
    return obj


def category_frequencies(samples: Sequence[ImageSample]) -> Dict[int, float]:
    """f(c): fraction of images that contain at least one instance of c."""
    if not samples:
        return {}
    counts: Dict[int, int] = {}
    for s in samples:
        for c in s.categories:
            counts[c] = counts.get(c, 0) + 1
    n = len(samples)
    return {c: k / n for c, k in sorted(counts.items())}


def load_dataset(path, rfs_threshold: float = DEFAULT_RFS_THRESHOLD) -> DatasetIndex:
    """Load and validate a JSONL dataset file."""
    samples = []
    seen_video_frames = set()
    seen_image_ids = set()
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as e:
                raise ParseError(lineno, f"invalid JSON: {e.msg}") from e
            if not isinstance(obj, dict):
                raise ParseError(lineno, "expected a JSON object")
            sample = _sample_from_json(obj)
            if sample.image_id in seen_image_ids:
                raise InvariantError(sample.image_id, "duplicate image_id")
            seen_image_ids.add(sample.image_id)
            if sample.video_id is not None and sample.frame_index is not None:
                key = (sample.video_id, sample.frame_index)
                if key in seen_video_frames:
                    raise InvariantError(
                        sample.image_id, f"duplicate (video_id, frame_index) {key}"
                    )
                seen_video_frames.add(key)
            samples.append(sample)
    return DatasetIndex(
        samples=tuple(samples),
        frequencies=category_frequencies(samples),
        rfs_threshold=rfs_threshold,
    )


def dump_dataset(index: DatasetIndex, path) -> None:
    """Serialize back to the JSONL schema (load -> dump -> load fixed point)."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for s in index.samples:
            f.write(json.dumps(sample_to_json(s)) + "\n")


def repeat_factors(index: DatasetIndex, t: float = DEFAULT_RFS_THRESHOLD) -> np.ndarray:
    """Per-image repeat factor: max over its categories of max(1, sqrt(t/f(c)))."""
    if not 0.0 < t <= 1.0:
        raise ValueError(f"threshold t must be in (0, 1], got {t}")
    factors = np.ones(len(index.samples), dtype=np.float64)
    for i, s in enumerate(index.samples):
        for c in s.categories:
            factors[i] = max(factors[i], max(1.0, math.sqrt(t / index.frequencies[c])))
    return factors


def _epoch_indices(
    rng: np.random.Generator, whole: np.ndarray, frac: np.ndarray
) -> np.ndarray:
    counts = whole + (rng.random(len(whole)) < frac)
    epoch = np.repeat(np.arange(len(whole)), counts)
    rng.shuffle(epoch)
    return epoch


def rfs_stream(index: DatasetIndex, seed) -> Iterator[ImageSample]:
    """Deterministic infinite stream with repeat-factor oversampling.

    Per epoch every image appears floor(r) times plus one more with
    probability frac(r) (stochastic rounding), then the epoch is shuffled.
    """
    if len(index) == 0:
        raise EmptyDataset("cannot stream from an empty dataset")
    factors = repeat_factors(index, index.rfs_threshold)
    rng = np.random.Generator(np.random.PCG64(seed))
    whole = np.floor(factors).astype(np.int64)
    frac = factors - whole
    while True:
        for i in _epoch_indices(rng, whole, frac):
            yield index.samples[int(i)]


def rfs_epoch_counts(index: DatasetIndex, seed, epochs: int) -> np.ndarray:
    """(epochs, images) occurrence counts, matching rfs_stream's epochs."""
    if len(index) == 0:
        raise EmptyDataset("cannot stream from an empty dataset")
    factors = repeat_factors(index, index.rfs_threshold)
    rng = np.random.Generator(np.random.PCG64(seed))
    whole = np.floor(factors).astype(np.int64)
    frac = factors - whole
    out = np.zeros((epochs, len(factors)), dtype=np.int64)
    for e in range(epochs):
        epoch = _epoch_indices(rng, whole, frac)
        np.add.at(out[e], epoch, 1)
    return out
