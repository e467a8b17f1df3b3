"""Detection AP / mAP and nearest-to-centroid retrieval."""

from __future__ import annotations

import json
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ssodr.core import Dataset, GroundTruth, iou_matrix
from ssodr.detector import Detection, DetectorParams, detect
from ssodr.dsd import MinedSet
from ssodr.errors import FormatError, InvalidInputError, RetrievalError, UndefinedAPError
from ssodr.scoring import ClusterScorecard
from ssodr.wdec import ClusterState


def match_detections(detections: Sequence[Detection], gt: GroundTruth, iou_threshold: float) -> np.ndarray:
    """True-positive flags, in descending-score order (ties keep input order).

    Each detection takes the best-overlapping *unmatched* annotation of its
    frame; it is a hit when that overlap reaches the threshold.
    """
    order = sorted(range(len(detections)), key=lambda i: -detections[i].score)
    gt_arrays = {k: np.array([b.as_list() for b in v]).reshape(-1, 4) for k, v in gt.items()}
    used = {k: np.zeros(len(v), dtype=bool) for k, v in gt_arrays.items()}
    tp = np.zeros(len(order), dtype=bool)
    for rank, i in enumerate(order):
        det = detections[i]
        boxes = gt_arrays.get(det.frame_id)
        if boxes is None or len(boxes) == 0:
            continue
        overlaps = iou_matrix(np.array([det.box.as_list()]), boxes)[0]
        overlaps[used[det.frame_id]] = -1.0
        best = int(np.argmax(overlaps))
        if overlaps[best] >= iou_threshold:
            tp[rank] = True
            used[det.frame_id][best] = True
    return tp


def average_precision(detections: Sequence[Detection], gt: GroundTruth, iou_threshold: float = 0.5) -> float:
    """All-points interpolated area under the precision/recall curve."""
    n_gt = gt.n_boxes
    if n_gt == 0:
        raise UndefinedAPError("ground truth has no boxes; AP is undefined")
    tp = match_detections(detections, gt, iou_threshold)
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def _key(threshold: float) -> str:
    return repr(float(threshold))


@dataclass
class EvalReport:
    object_name: str
    ap_by_threshold: dict[str, float]
    n_frames: int
    n_gt: int
    seed: int | None = None
    config_digest: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def map_by_threshold(self) -> dict[str, float]:
        return mean_ap([self])

    def ap(self, threshold: float) -> float:
        return self.ap_by_threshold[_key(threshold)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["map_by_threshold"] = self.map_by_threshold
        return d

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> EvalReport:
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
            d.pop("map_by_threshold", None)
            return cls(**d)
        except (OSError, TypeError, json.JSONDecodeError) as exc:
            raise FormatError(f"cannot read report {path}: {exc}") from exc


def mean_ap(reports: Iterable[EvalReport]) -> dict[str, float]:
    """Mean AP across per-class reports, per IoU threshold they all share."""
    reports = list(reports)
    if not reports:
        raise InvalidInputError("no reports to average")
    keys = set(reports[0].ap_by_threshold)
    for r in reports[1:]:
        keys &= set(r.ap_by_threshold)
    return {k: float(np.mean([r.ap_by_threshold[k] for r in reports])) for k in sorted(keys, key=float, reverse=True)}


def evaluate_detections(
    detections: Sequence[Detection],
    dataset: Dataset,
    gt: GroundTruth,
    iou_thresholds: Sequence[float] = (0.5, 0.3),
    frame_ids: Sequence[str] | None = None,
    seed: int | None = None,
    config_digest: str = "",
) -> EvalReport:
    gt.bind(dataset)
    frames = list(dataset.frame_index) if frame_ids is None else list(frame_ids)
    scoped = gt.restrict(frames)
    keep = set(frames)
    dets = [d for d in detections if d.frame_id in keep]
    return EvalReport(
        object_name=dataset.object_name,
        ap_by_threshold={_key(t): average_precision(dets, scoped, t) for t in iou_thresholds},
        n_frames=len(frames),
        n_gt=scoped.n_boxes,
        seed=seed,
        config_digest=config_digest,
    )


def evaluate(
    params: DetectorParams,
    dataset: Dataset,
    gt: GroundTruth,
    iou_thresholds: Sequence[float] = (0.5, 0.3),
    frame_ids: Sequence[str] | None = None,
    nms_iou: float = 0.3,
    score_threshold: float = 0.5,
    seed: int | None = None,
    config_digest: str = "",
) -> tuple[EvalReport, list[Detection]]:
    """Detect on every requested frame (positive or negative) and score AP."""
    gt.bind(dataset)
    detections = detect(params, dataset, frame_ids, nms_iou, score_threshold)
    report = evaluate_detections(detections, dataset, gt, iou_thresholds, frame_ids, seed, config_digest)
    return report, detections


@dataclass(frozen=True)
class Retrieved:
    region_id: int
    video_id: str
    frame_id: str
    distance: float
    relaxed: bool  # filled without the distinct-video constraint


def retrieve_top_n(
    dataset: Dataset,
    state: ClusterState,
    scorecard: ClusterScorecard,
    mined: MinedSet,
    n: int = 3,
) -> list[Retrieved]:
    """The ``n`` DSD survivors of the top cluster nearest its centroid, one per video.

    When the survivors span fewer than ``n`` videos the remaining slots are
    filled by the nearest leftovers, marked ``relaxed``.
    """
    if n < 1:
        raise InvalidInputError("n must be >= 1")
    top = scorecard.top()
    survivors = mined.by_cluster().get(top, [])
    if not survivors:
        raise RetrievalError(f"top cluster {top} has no DSD survivors")
    rows = np.array([dataset.region_index[r] for r in survivors], dtype=np.int64)
    diff = dataset.embeddings[rows].astype(np.float64) - state.centroids[top].astype(np.float64)
    dist = np.sqrt((diff * diff).sum(axis=1))
    order = np.lexsort((dataset.region_ids[rows], dist))
    picked, seen_videos = [], set()
    for i in order:
        video = dataset.video_of(rows[i])
        if video not in seen_videos:
            seen_videos.add(video)
            picked.append((i, False))
            if len(picked) == n:
                break
    if len(picked) < n:
        taken = {i for i, _ in picked}
        for i in order:
            if i not in taken:
                picked.append((i, True))
                if len(picked) == n:
                    break
    return [
        Retrieved(
            region_id=int(dataset.region_ids[rows[i]]),
            video_id=dataset.video_of(rows[i]),
            frame_id=dataset.frame_of(rows[i]),
            distance=float(dist[i]),
            relaxed=relaxed,
        )
        for i, relaxed in picked
    ]
