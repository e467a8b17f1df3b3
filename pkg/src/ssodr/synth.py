"""Seeded generator of weakly labeled region datasets with a planted object.

Embeddings are isotropic Gaussian blobs around unit-norm centroids. A
``spread`` is the RMS distance of a blob member from its centroid, so the
per-coordinate standard deviation is ``spread / sqrt(dim)``.

Videos are split into positive videos (the object is "mentioned") and
negative videos. A ``noise_level`` fraction of positive frames carries no
object at all. Clean positive frames hold one object instance, covered by a
handful of jittered proposals (IoU >= 0.5 with the annotation) plus a few
near-miss proposals that only clip the object (IoU < 0.4).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ssodr.core import Box, Dataset, FrameRecord, GroundTruth, iou
from ssodr.errors import ConfigError, FormatError

FRAME_W, FRAME_H = 640.0, 360.0

# random stream keys; each stream is a pure function of (seed, key[, index])
_STREAM_CENTROIDS = 0
_STREAM_NOISE = 2
_STREAM_FRAME = 3


@dataclass(frozen=True)
class SynthConfig:
    n_videos: int = 20
    frames_per_video: int = 25
    regions_per_frame: int = 50
    dim: int = 64
    noise_level: float = 0.515
    n_distractor_clusters: int = 3
    n_background_clusters: int = 4
    object_spread: float = 0.15
    distractor_spread: float = 0.2
    background_spread: float = 0.25
    object_box_scale: float = 0.3
    proposals_per_object: int = 8
    near_miss_per_object: int = 1
    distractor_rate_pos: float = 0.15
    distractor_rate_neg: float = 0.1
    positive_video_fraction: float = 0.5
    seed: int = 0
    object_name: str = "object"

    def validate(self) -> None:
        if self.n_videos < 2:
            raise ConfigError("n_videos must be >= 2 (positive and negative videos)")
        if self.frames_per_video < 1:
            raise ConfigError("frames_per_video must be >= 1")
        if self.regions_per_frame < 2:
            raise ConfigError("regions_per_frame must be >= 2")
        if self.dim < 1:
            raise ConfigError("dim must be >= 1")
        if not 0.0 <= self.noise_level < 1.0:
            raise ConfigError(f"noise_level must be in [0, 1), got {self.noise_level}")
        for name in ("object_spread", "distractor_spread", "background_spread", "object_box_scale"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        if self.object_box_scale >= 1:
            raise ConfigError("object_box_scale must be < 1")
        if self.n_background_clusters < 1:
            raise ConfigError("need at least one background cluster")
        if self.n_distractor_clusters < 0:
            raise ConfigError("n_distractor_clusters must be >= 0")
        if self.proposals_per_object < 1:
            raise ConfigError("proposals_per_object must be >= 1")
        if self.near_miss_per_object < 0:
            raise ConfigError("near_miss_per_object must be >= 0")
        if self.proposals_per_object + self.near_miss_per_object > self.regions_per_frame:
            raise ConfigError("object proposals do not fit in regions_per_frame")
        for name in ("distractor_rate_pos", "distractor_rate_neg"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1]")
        n_pos = self.n_positive_videos
        if n_pos < 1 or n_pos >= self.n_videos:
            raise ConfigError("positive_video_fraction leaves no positive or no negative video")
        n_pos_frames = n_pos * self.frames_per_video
        if self.n_noisy_frames >= n_pos_frames:
            raise ConfigError(
                f"noise_level {self.noise_level} makes all {n_pos_frames} positive frames noisy"
            )

    @property
    def n_positive_videos(self) -> int:
        return int(math.floor(self.n_videos * self.positive_video_fraction + 0.5))

    @property
    def n_noisy_frames(self) -> int:
        n_pos_frames = self.n_positive_videos * self.frames_per_video
        return int(math.floor(self.noise_level * n_pos_frames + 0.5))


@dataclass
class PlantReport:
    """Oracle labels for a generated dataset; never consumed by training."""

    object_centroid: int
    centroid_roles: list[str]
    centroids: list[list[float]]
    object_region_ids: list[int]
    near_miss_region_ids: list[int]
    clean_frame_ids: list[str]
    noisy_frame_ids: list[str]
    config: dict = field(default_factory=dict)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path: str | Path) -> PlantReport:
        try:
            return cls(**json.loads(Path(path).read_text(encoding="utf-8")))
        except (OSError, TypeError, json.JSONDecodeError) as exc:
            raise FormatError(f"cannot read plant report {path}: {exc}") from exc

    @property
    def object_centroid_vector(self) -> np.ndarray:
        return np.asarray(self.centroids[self.object_centroid], dtype=np.float64)


def _centroids(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    n = 1 + cfg.n_distractor_clusters + cfg.n_background_clusters
    min_dist = 4.0 * max(cfg.object_spread, cfg.distractor_spread, cfg.background_spread)
    for _ in range(1000):
        c = rng.standard_normal((n, cfg.dim))
        c /= np.linalg.norm(c, axis=1, keepdims=True)
        d = np.linalg.norm(c[:, None] - c[None], axis=-1)
        if n == 1 or d[np.triu_indices(n, 1)].min() >= min_dist:
            return c
    raise ConfigError(
        f"could not place {n} centroids {min_dist:.3g} apart in {cfg.dim} dims; reduce the spreads"
    )


def _clutter(
    cfg: SynthConfig,
    rng: np.random.Generator,
    n: int,
    rate: float,
    distractors: np.ndarray,
    backgrounds: np.ndarray,
) -> list[tuple[Box, np.ndarray, str]]:
    """Distractor and background regions with uniformly placed random boxes."""
    if n <= 0:
        return []
    is_distractor = rng.random(n) < rate if len(distractors) else np.zeros(n, dtype=bool)
    d_idx = rng.integers(max(len(distractors), 1), size=n)
    b_idx = rng.integers(len(backgrounds), size=n)
    centres = np.where(
        is_distractor[:, None],
        distractors[d_idx] if len(distractors) else 0.0,
        backgrounds[b_idx],
    )
    spread = np.where(is_distractor, cfg.distractor_spread, cfg.background_spread)
    z = centres + rng.standard_normal((n, cfg.dim)) * (spread / np.sqrt(cfg.dim))[:, None]
    w = FRAME_W * rng.uniform(0.05, 0.5, n)
    h = FRAME_H * rng.uniform(0.05, 0.5, n)
    x1 = rng.uniform(0, 1, n) * (FRAME_W - w)
    y1 = rng.uniform(0, 1, n) * (FRAME_H - h)
    return [(Box(x1[i], y1[i], x1[i] + w[i], y1[i] + h[i]), z[i], "clutter") for i in range(n)]


def _object_box(cfg: SynthConfig, rng: np.random.Generator) -> Box:
    w = FRAME_W * cfg.object_box_scale * rng.uniform(0.7, 1.3)
    h = FRAME_H * cfg.object_box_scale * rng.uniform(0.7, 1.3)
    w, h = min(w, FRAME_W - 1), min(h, FRAME_H - 1)
    x1 = rng.uniform(0, FRAME_W - w)
    y1 = rng.uniform(0, FRAME_H - h)
    return Box(x1, y1, x1 + w, y1 + h)


def _jittered(gt: Box, rng: np.random.Generator) -> Box:
    w, h = gt.x2 - gt.x1, gt.y2 - gt.y1
    while True:
        dx1, dx2 = rng.normal(0, 0.06 * w, 2)
        dy1, dy2 = rng.normal(0, 0.06 * h, 2)
        x1, x2, y1, y2 = gt.x1 + dx1, gt.x2 + dx2, gt.y1 + dy1, gt.y2 + dy2
        if x1 < x2 and y1 < y2:
            box = Box(x1, y1, x2, y2)
            if iou(box, gt) >= 0.5:
                return box


def _near_miss(gt: Box, rng: np.random.Generator) -> Box:
    # same-size box shifted by s of its extent along one axis: IoU = (1 - s) / (1 + s)
    s = rng.uniform(0.5, 0.9)
    sign = 1.0 if rng.random() < 0.5 else -1.0
    if rng.random() < 0.5:
        return gt.shifted(sign * s * (gt.x2 - gt.x1), 0.0)
    return gt.shifted(0.0, sign * s * (gt.y2 - gt.y1))


def generate(cfg: SynthConfig) -> tuple[Dataset, GroundTruth, PlantReport]:
    """Generate a dataset, its ground truth and the oracle report.

    Output depends only on ``cfg``; every frame draws from its own random
    stream derived from ``(seed, frame index)``.
    """
    cfg.validate()
    centroids = _centroids(cfg, np.random.default_rng([cfg.seed, _STREAM_CENTROIDS]))
    obj_c = centroids[0]
    distractors = centroids[1:1 + cfg.n_distractor_clusters]
    backgrounds = centroids[1 + cfg.n_distractor_clusters:]
    roles = ["object"] + ["distractor"] * len(distractors) + ["background"] * len(backgrounds)
    scale = 1.0 / math.sqrt(cfg.dim)

    n_pos_videos = cfg.n_positive_videos
    frames: list[FrameRecord] = []
    for v in range(cfg.n_videos):
        label = 1 if v < n_pos_videos else 0
        for f in range(cfg.frames_per_video):
            frames.append(FrameRecord(f"v{v:03d}_f{f:03d}", f"v{v:03d}", label))
    pos_idx = [i for i, f in enumerate(frames) if f.frame_label == 1]
    noise_rng = np.random.default_rng([cfg.seed, _STREAM_NOISE])
    noisy = set(int(i) for i in noise_rng.choice(pos_idx, size=cfg.n_noisy_frames, replace=False))

    region_ids, region_frames, boxes, embs, labels = [], [], [], [], []
    object_ids, near_ids = [], []
    gt: dict[str, list[Box]] = {}
    next_id = 0
    for fi, frame in enumerate(frames):
        rng = np.random.default_rng([cfg.seed, _STREAM_FRAME, fi])
        items: list[tuple[Box, np.ndarray, str]] = []
        clean = frame.frame_label == 1 and fi not in noisy
        if clean:
            gt_box = _object_box(cfg, rng)
            gt[frame.frame_id] = [gt_box]
            for _ in range(cfg.proposals_per_object):
                z = obj_c + rng.normal(0, cfg.object_spread * scale, cfg.dim)
                items.append((_jittered(gt_box, rng), z, "object"))
            for _ in range(cfg.near_miss_per_object):
                alpha = rng.uniform(0.75, 0.9)
                bg = backgrounds[rng.integers(len(backgrounds))]
                z = alpha * obj_c + (1 - alpha) * bg + rng.normal(0, cfg.object_spread * scale, cfg.dim)
                items.append((_near_miss(gt_box, rng), z, "near_miss"))
        elif frame.frame_label == 1:
            gt[frame.frame_id] = []
        rate = cfg.distractor_rate_pos if frame.frame_label == 1 else cfg.distractor_rate_neg
        items.extend(_clutter(cfg, rng, cfg.regions_per_frame - len(items), rate, distractors, backgrounds))
        for k in rng.permutation(len(items)):
            box, z, kind = items[k]
            region_ids.append(next_id)
            region_frames.append(fi)
            boxes.append(box.as_list())
            embs.append(z)
            labels.append(frame.frame_label)
            if kind == "object":
                object_ids.append(next_id)
            elif kind == "near_miss":
                near_ids.append(next_id)
            next_id += 1

    dataset = Dataset(
        object_name=cfg.object_name,
        dim=cfg.dim,
        frames=tuple(frames),
        region_ids=np.array(region_ids, dtype=np.int64),
        region_frames=np.array(region_frames, dtype=np.int64),
        boxes=np.array(boxes, dtype=np.float64),
        embeddings=np.array(embs, dtype=np.float64).astype(np.float32),
        weak_labels=np.array(labels, dtype=np.int8),
        n_per_frame=cfg.regions_per_frame,
    )
    report = PlantReport(
        object_centroid=0,
        centroid_roles=roles,
        centroids=centroids.tolist(),
        object_region_ids=object_ids,
        near_miss_region_ids=near_ids,
        clean_frame_ids=[f.frame_id for i, f in enumerate(frames) if f.frame_label == 1 and i not in noisy],
        noisy_frame_ids=[frames[i].frame_id for i in sorted(noisy)],
        config=asdict(cfg),
    )
    return dataset, GroundTruth(gt), report
