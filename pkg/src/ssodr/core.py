"""Domain types, box geometry and the on-disk dataset / ground-truth formats."""

from __future__ import annotations

import json
import struct
from collections.abc import Iterable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from ssodr.errors import FormatError, InvalidInputError, ValidationError

DATASET_FORMAT = "ssodr-dataset"
DATASET_VERSION = 1
SIDECAR_MAGIC = b"SSOR"
SIDECAR_VERSION = 1
_SIDECAR_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True)
class Box:
    """Axis-aligned box, half-open pixel coordinates."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(np.isfinite(v) for v in vals):
            raise InvalidInputError(f"non-finite box coordinates {vals}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise InvalidInputError(f"degenerate box {vals}: need x1 < x2 and y1 < y2")

    @classmethod
    def of(cls, value: Box | Sequence[float]) -> Box:
        if isinstance(value, Box):
            return value
        if len(value) != 4:
            raise InvalidInputError(f"box needs 4 coordinates, got {len(value)}")
        return cls(*(float(v) for v in value))

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    def shifted(self, dx: float, dy: float) -> Box:
        return Box(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)


def iou(a: Box | Sequence[float], b: Box | Sequence[float]) -> float:
    """Intersection over union of two valid boxes."""
    a, b = Box.of(a), Box.of(b)
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between box arrays of shape (n, 4) and (m, 4).

    Boxes are assumed valid; use :func:`iou` when inputs are untrusted.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


@dataclass(frozen=True)
class FrameRecord:
    frame_id: str
    video_id: str
    frame_label: int


@dataclass(frozen=True)
class RegionRecord:
    region_id: int
    frame_id: str
    box: Box
    embedding: np.ndarray = field(compare=False)
    weak_label: int


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Dataset:
    """Frames plus their region proposals, stored column-wise.

    Region ``i`` lives in frame ``frames[region_frames[i]]``. Arrays are
    read-only after construction.
    """

    object_name: str
    dim: int
    frames: tuple[FrameRecord, ...]
    region_ids: np.ndarray
    region_frames: np.ndarray
    boxes: np.ndarray
    embeddings: np.ndarray
    weak_labels: np.ndarray
    n_per_frame: int = 0

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        object.__setattr__(self, "region_ids", _frozen(np.asarray(self.region_ids, dtype=np.int64)))
        object.__setattr__(self, "region_frames", _frozen(np.asarray(self.region_frames, dtype=np.int64)))
        object.__setattr__(self, "boxes", _frozen(np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)))
        emb = np.asarray(self.embeddings, dtype=np.float32)
        object.__setattr__(self, "embeddings", _frozen(emb.reshape(len(self.region_ids), self.dim)))
        object.__setattr__(self, "weak_labels", _frozen(np.asarray(self.weak_labels, dtype=np.int8)))
        self.validate()

    @classmethod
    def from_records(
        cls,
        object_name: str,
        dim: int,
        frames: Sequence[FrameRecord],
        regions: Sequence[RegionRecord],
        n_per_frame: int = 0,
    ) -> Dataset:
        index = {f.frame_id: i for i, f in enumerate(frames)}
        missing = [r.frame_id for r in regions if r.frame_id not in index]
        if missing:
            raise ValidationError(f"regions reference unknown frame ids: {sorted(set(missing))[:5]}")
        emb = np.zeros((len(regions), dim), dtype=np.float32)
        for i, r in enumerate(regions):
            if np.shape(r.embedding) != (dim,):
                raise ValidationError(f"region {r.region_id}: embedding shape {np.shape(r.embedding)} != ({dim},)")
            emb[i] = r.embedding
        return cls(
            object_name=object_name,
            dim=dim,
            frames=tuple(frames),
            region_ids=np.array([r.region_id for r in regions], dtype=np.int64),
            region_frames=np.array([index[r.frame_id] for r in regions], dtype=np.int64),
            boxes=np.array([r.box.as_list() for r in regions], dtype=np.float64).reshape(-1, 4),
            embeddings=emb,
            weak_labels=np.array([r.weak_label for r in regions], dtype=np.int8),
            n_per_frame=n_per_frame,
        )

    def validate(self) -> None:
        if self.dim < 1:
            raise ValidationError(f"dim must be positive, got {self.dim}")
        n = len(self.region_ids)
        for name in ("region_frames", "weak_labels"):
            if len(getattr(self, name)) != n:
                raise ValidationError(f"{name} has {len(getattr(self, name))} entries, expected {n}")
        if len(self.boxes) != n:
            raise ValidationError(f"boxes has {len(self.boxes)} rows, expected {n}")
        frame_ids = [f.frame_id for f in self.frames]
        if len(set(frame_ids)) != len(frame_ids):
            raise ValidationError("duplicate frame ids")
        if len(np.unique(self.region_ids)) != n:
            raise ValidationError("duplicate region ids")
        for f in self.frames:
            if f.frame_label not in (0, 1):
                raise ValidationError(f"frame {f.frame_id}: label {f.frame_label} not in {{0, 1}}")
        if n and (self.region_frames.min() < 0 or self.region_frames.max() >= len(self.frames)):
            raise ValidationError("region frame index out of range")
        if not np.all(np.isfinite(self.embeddings)):
            bad = int(np.argwhere(~np.isfinite(self.embeddings))[0, 0])
            raise ValidationError(f"region {self.region_ids[bad]}: non-finite embedding value")
        b = self.boxes
        bad_box = ~(np.isfinite(b).all(axis=1) & (b[:, 0] < b[:, 2]) & (b[:, 1] < b[:, 3]))
        if bad_box.any():
            i = int(np.flatnonzero(bad_box)[0])
            raise ValidationError(f"region {self.region_ids[i]}: invalid box {b[i].tolist()}")
        expected = self.frame_labels[self.region_frames]
        mismatch = np.flatnonzero(expected != self.weak_labels)
        if len(mismatch):
            raise ValidationError(
                f"region {self.region_ids[mismatch[0]]}: weak label differs from its frame label"
            )
        counts = np.bincount(self.region_frames, minlength=len(self.frames))
        if len(self.frames) and counts.min() == 0:
            raise ValidationError(f"frame {self.frames[int(np.argmin(counts))].frame_id} has no regions")
        labels = set(int(v) for v in self.frame_labels)
        if labels != {0, 1}:
            raise ValidationError("dataset needs at least one positive and one negative frame")

    # derived views ------------------------------------------------------

    @property
    def n_regions(self) -> int:
        return len(self.region_ids)

    @cached_property
    def frame_labels(self) -> np.ndarray:
        return np.array([f.frame_label for f in self.frames], dtype=np.int8)

    @cached_property
    def frame_index(self) -> dict[str, int]:
        return {f.frame_id: i for i, f in enumerate(self.frames)}

    @cached_property
    def region_index(self) -> dict[int, int]:
        return {int(r): i for i, r in enumerate(self.region_ids)}

    @cached_property
    def region_videos(self) -> np.ndarray:
        """Per-region integer video code (codes follow first appearance)."""
        codes: dict[str, int] = {}
        per_frame = np.array([codes.setdefault(f.video_id, len(codes)) for f in self.frames], dtype=np.int64)
        return per_frame[self.region_frames]

    def video_of(self, row: int) -> str:
        return self.frames[self.region_frames[row]].video_id

    def frame_of(self, row: int) -> str:
        return self.frames[self.region_frames[row]].frame_id

    def rows_by_frame(self) -> list[np.ndarray]:
        order = np.argsort(self.region_frames, kind="stable")
        bounds = np.searchsorted(self.region_frames[order], np.arange(len(self.frames) + 1))
        return [order[bounds[i]:bounds[i + 1]] for i in range(len(self.frames))]

    def region(self, row: int) -> RegionRecord:
        return RegionRecord(
            region_id=int(self.region_ids[row]),
            frame_id=self.frame_of(row),
            box=Box(*self.boxes[row].tolist()),
            embedding=self.embeddings[row],
            weak_label=int(self.weak_labels[row]),
        )

    @property
    def regions(self) -> list[RegionRecord]:
        return [self.region(i) for i in range(self.n_regions)]

    def subset(self, frame_ids: Iterable[str]) -> Dataset:
        """Dataset restricted to ``frame_ids``; frame and region order is preserved."""
        keep = set(frame_ids)
        unknown = keep - set(self.frame_index)
        if unknown:
            raise ValidationError(f"unknown frame ids: {sorted(unknown)[:5]}")
        frame_mask = np.array([f.frame_id in keep for f in self.frames])
        remap = np.cumsum(frame_mask) - 1
        rows = np.flatnonzero(frame_mask[self.region_frames])
        return Dataset(
            object_name=self.object_name,
            dim=self.dim,
            frames=tuple(f for f, k in zip(self.frames, frame_mask) if k),
            region_ids=self.region_ids[rows],
            region_frames=remap[self.region_frames[rows]],
            boxes=self.boxes[rows],
            embeddings=self.embeddings[rows],
            weak_labels=self.weak_labels[rows],
            n_per_frame=self.n_per_frame,
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.object_name == other.object_name
            and self.dim == other.dim
            and self.n_per_frame == other.n_per_frame
            and self.frames == other.frames
            and np.array_equal(self.region_ids, other.region_ids)
            and np.array_equal(self.region_frames, other.region_frames)
            and np.array_equal(self.boxes, other.boxes)
            and self.embeddings.tobytes() == other.embeddings.tobytes()
            and np.array_equal(self.weak_labels, other.weak_labels)
        )

    __hash__ = None  # type: ignore[assignment]


class GroundTruth(Mapping):
    """Annotated object boxes per frame; frames may map to an empty list."""

    def __init__(self, boxes: Mapping[str, Iterable[Box | Sequence[float]]]):
        self._boxes = {str(k): tuple(Box.of(b) for b in v) for k, v in boxes.items()}

    def __getitem__(self, frame_id: str) -> tuple[Box, ...]:
        return self._boxes[frame_id]

    def __iter__(self) -> Iterator[str]:
        return iter(self._boxes)

    def __len__(self) -> int:
        return len(self._boxes)

    def __repr__(self) -> str:
        return f"GroundTruth({len(self)} frames, {self.n_boxes} boxes)"

    @property
    def n_boxes(self) -> int:
        return sum(len(v) for v in self._boxes.values())

    def bind(self, dataset: Dataset) -> None:
        """Reject annotations for frames the dataset does not know."""
        unknown = [k for k in self._boxes if k not in dataset.frame_index]
        if unknown:
            raise ValidationError(f"ground truth references unknown frames: {unknown[:5]}")

    def restrict(self, frame_ids: Iterable[str]) -> GroundTruth:
        keep = set(frame_ids)
        return GroundTruth({k: v for k, v in self._boxes.items() if k in keep})


# file formats -------------------------------------------------------------


def sidecar_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".emb")


def _dumps(record: dict) -> str:
    return json.dumps(record, separators=(",", ":"), ensure_ascii=False)


def write_embeddings(path: str | Path, matrix: np.ndarray) -> None:
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    n_rows, dim = matrix.shape
    try:
        with open(path, "wb") as fh:
            fh.write(_SIDECAR_HEADER.pack(SIDECAR_MAGIC, SIDECAR_VERSION, n_rows, dim))
            fh.write(matrix.tobytes())
    except OSError as exc:
        raise OSError(f"cannot write embeddings to {path}: {exc}") from exc


def read_embeddings(path: str | Path) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read embedding sidecar {path}: {exc}") from exc
    if len(raw) < _SIDECAR_HEADER.size:
        raise FormatError(f"{path}: truncated sidecar header")
    magic, version, n_rows, dim = _SIDECAR_HEADER.unpack_from(raw)
    if magic != SIDECAR_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != SIDECAR_VERSION:
        raise FormatError(f"{path}: unsupported sidecar version {version}")
    payload = raw[_SIDECAR_HEADER.size:]
    if len(payload) != 4 * n_rows * dim:
        raise FormatError(
            f"{path}: payload has {len(payload)} bytes, header promises {n_rows}x{dim} float32"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(n_rows, dim).astype(np.float32)


def _box_list(dataset: Dataset, row: int) -> list[float]:
    return [float(v) for v in dataset.boxes[row]]


def write_dataset(dataset: Dataset, path: str | Path) -> None:
    """Write the metadata file at ``path`` and its ``.emb`` sidecar."""
    path = Path(path)
    lines = [
        _dumps(
            {
                "format": DATASET_FORMAT,
                "version": DATASET_VERSION,
                "object_name": dataset.object_name,
                "dim": dataset.dim,
                "n_frames": len(dataset.frames),
                "n_regions": dataset.n_regions,
                "n_per_frame": dataset.n_per_frame,
            }
        )
    ]
    for f in dataset.frames:
        lines.append(_dumps({"frame_id": f.frame_id, "video_id": f.video_id, "frame_label": f.frame_label}))
    for i in range(dataset.n_regions):
        lines.append(
            _dumps(
                {
                    "region_id": int(dataset.region_ids[i]),
                    "frame_id": dataset.frame_of(i),
                    "box": _box_list(dataset, i),
                    "weak_label": int(dataset.weak_labels[i]),
                    "emb_row": i,
                }
            )
        )
    try:
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write dataset to {path}: {exc}") from exc
    write_embeddings(sidecar_path(path), dataset.embeddings)


def _parse_line(path: Path, lineno: int, line: str) -> dict:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}:{lineno}: malformed record: {exc}") from exc
    if not isinstance(rec, dict):
        raise FormatError(f"{path}:{lineno}: record is not an object")
    return rec


def _field(rec: dict, key: str, kind, where: str):
    if key not in rec:
        raise FormatError(f"{where}: missing field {key!r}")
    val = rec[key]
    if kind is int and (isinstance(val, bool) or not isinstance(val, int)):
        raise FormatError(f"{where}: field {key!r} must be an integer")
    if kind is str and not isinstance(val, str):
        raise FormatError(f"{where}: field {key!r} must be a string")
    return val


def read_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise FormatError(f"cannot read dataset {path}: {exc}") from exc
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise FormatError(f"{path}: empty file")
    header = _parse_line(path, 1, lines[0])
    if header.get("format") != DATASET_FORMAT:
        raise FormatError(f"{path}: not an {DATASET_FORMAT} file (format={header.get('format')!r})")
    if header.get("version") != DATASET_VERSION:
        raise FormatError(f"{path}: unsupported version {header.get('version')!r}")
    where = f"{path}:1"
    dim = _field(header, "dim", int, where)
    n_frames = _field(header, "n_frames", int, where)
    n_regions = _field(header, "n_regions", int, where)
    object_name = _field(header, "object_name", str, where)
    if len(lines) != 1 + n_frames + n_regions:
        raise FormatError(
            f"{path}: header promises {n_frames} frames + {n_regions} regions, file has {len(lines) - 1} records"
        )

    frames = []
    for k in range(n_frames):
        lineno = 2 + k
        rec = _parse_line(path, lineno, lines[1 + k])
        w = f"{path}:{lineno}"
        frames.append(
            FrameRecord(
                frame_id=_field(rec, "frame_id", str, w),
                video_id=_field(rec, "video_id", str, w),
                frame_label=_field(rec, "frame_label", int, w),
            )
        )
    index = {f.frame_id: i for i, f in enumerate(frames)}

    emb = read_embeddings(sidecar_path(path))
    if emb.shape[1] != dim:
        raise FormatError(f"{path}: header dim {dim} but sidecar dim {emb.shape[1]}")

    region_ids = np.empty(n_regions, dtype=np.int64)
    region_frames = np.empty(n_regions, dtype=np.int64)
    boxes = np.empty((n_regions, 4), dtype=np.float64)
    labels = np.empty(n_regions, dtype=np.int8)
    rows = np.empty(n_regions, dtype=np.int64)
    for k in range(n_regions):
        lineno = 2 + n_frames + k
        rec = _parse_line(path, lineno, lines[1 + n_frames + k])
        w = f"{path}:{lineno}"
        region_ids[k] = _field(rec, "region_id", int, w)
        fid = _field(rec, "frame_id", str, w)
        if fid not in index:
            raise ValidationError(f"{w}: unknown frame id {fid!r}")
        region_frames[k] = index[fid]
        box = _field(rec, "box", list, w)
        if len(box) != 4 or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in box):
            raise FormatError(f"{w}: box must be 4 numbers")
        boxes[k] = box
        labels[k] = _field(rec, "weak_label", int, w)
        rows[k] = _field(rec, "emb_row", int, w)
        if not 0 <= rows[k] < emb.shape[0]:
            raise FormatError(f"{w}: emb_row {rows[k]} outside sidecar rows [0, {emb.shape[0]})")

    return Dataset(
        object_name=object_name,
        dim=dim,
        frames=tuple(frames),
        region_ids=region_ids,
        region_frames=region_frames,
        boxes=boxes,
        embeddings=emb[rows],
        weak_labels=labels,
        n_per_frame=int(header.get("n_per_frame", 0)),
    )


def write_groundtruth(gt: GroundTruth, path: str | Path) -> None:
    lines = [_dumps({"frame_id": k, "boxes": [b.as_list() for b in gt[k]]}) for k in gt]
    Path(path).write_text("".join(ln + "\n" for ln in lines), encoding="utf-8")


def read_groundtruth(path: str | Path) -> GroundTruth:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise FormatError(f"cannot read ground truth {path}: {exc}") from exc
    out: dict[str, list[Box]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        rec = _parse_line(path, lineno, line)
        w = f"{path}:{lineno}"
        fid = _field(rec, "frame_id", str, w)
        boxes = _field(rec, "boxes", list, w)
        if fid in out:
            raise FormatError(f"{w}: duplicate frame id {fid!r}")
        parsed = []
        for b in boxes:
            if not isinstance(b, list) or len(b) != 4:
                raise FormatError(f"{w}: each box must be a list of 4 numbers")
            try:
                parsed.append(Box.of(b))
            except InvalidInputError as exc:
                raise ValidationError(f"{w}: {exc}") from exc
        out[fid] = parsed
    return GroundTruth(out)
