"""Region classifier: noise-robust batch sampling, a numpy MLP trained with
Adam, and per-frame detection with non-maximum suppression."""

from __future__ import annotations

import json
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ssodr.core import Box, Dataset, iou_matrix, read_embeddings, write_embeddings
from ssodr.dsd import MinedSet
from ssodr.errors import FormatError, InvalidInputError, NumericalError, SamplingError
from ssodr.scoring import ClusterScorecard

HIDDEN = (1024, 1024)
N_CLASSES = 2


@dataclass(frozen=True)
class TrainHyper:
    lr: float = 1e-4
    decay: float = 0.6
    decay_every: int = 6
    epochs: int = 35
    keep_prob: float = 0.8
    batch_size: int = 64
    steps_per_epoch: int = 20
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self) -> None:
        if not (self.lr > 0 and 0 < self.decay <= 1 and self.decay_every >= 1):
            raise InvalidInputError("learning rate schedule parameters must be positive")
        if not 0 < self.keep_prob <= 1:
            raise InvalidInputError(f"keep_prob must be in (0, 1], got {self.keep_prob}")
        if self.batch_size < 2 or self.batch_size % 2:
            raise InvalidInputError(f"batch_size must be even and >= 2, got {self.batch_size}")
        if self.epochs < 0 or self.steps_per_epoch < 1:
            raise InvalidInputError("epochs must be >= 0 and steps_per_epoch >= 1")


def learning_rate(epoch: int, base: float = 1e-4, decay: float = 0.6, every: int = 6) -> float:
    """Step schedule: ``base * decay ** (epoch // every)``."""
    return base * decay ** (epoch // every)


# parameters ---------------------------------------------------------------


@dataclass(eq=False)
class DetectorParams:
    """MLP weights plus Adam state. ``arrays`` order is W1, b1, W2, b2, W3, b3."""

    arrays: list[np.ndarray]
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    step: int = 0
    epoch: int = 0
    cycle: int = 0

    def __post_init__(self):
        if not self.m:
            self.m = [np.zeros_like(a) for a in self.arrays]
        if not self.v:
            self.v = [np.zeros_like(a) for a in self.arrays]
        for w, b in zip(self.arrays[0::2], self.arrays[1::2]):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise InvalidInputError("inconsistent layer shapes")
        for w_prev, w_next in zip(self.arrays[0::2], self.arrays[2::2]):
            if w_prev.shape[1] != w_next.shape[0]:
                raise InvalidInputError("consecutive layer dims disagree")

    @classmethod
    def init(
        cls,
        dim: int,
        hidden: Sequence[int] = HIDDEN,
        seed: int = 0,
        dtype=np.float32,
    ) -> DetectorParams:
        """He-uniform weights (bound sqrt(6 / fan_in)), zero biases."""
        rng = np.random.default_rng([seed, 0xD37])
        dims = [dim, *hidden, N_CLASSES]
        arrays = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = np.sqrt(6.0 / fan_in)
            arrays.append(rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype))
            arrays.append(np.zeros(fan_out, dtype=dtype))
        return cls(arrays)

    @property
    def dims(self) -> list[int]:
        return [self.arrays[0].shape[0]] + [w.shape[1] for w in self.arrays[0::2]]

    @property
    def dtype(self):
        return self.arrays[0].dtype

    def copy(self) -> DetectorParams:
        return DetectorParams(
            [a.copy() for a in self.arrays],
            [a.copy() for a in self.m],
            [a.copy() for a in self.v],
            self.step,
            self.epoch,
            self.cycle,
        )

    def state_bytes(self) -> bytes:
        return b"".join(a.tobytes() for a in self.arrays + self.m + self.v)

    def save(self, path: str | Path, config_digest: str = "") -> None:
        """JSON header at ``path``; weights, then Adam moments, as a float32 payload beside it."""
        path = Path(path)
        header = {
            "format": "ssodr-detector",
            "version": 1,
            "dims": self.dims,
            "step": self.step,
            "epoch": self.epoch,
            "cycle": self.cycle,
            "config_digest": config_digest,
        }
        path.write_text(json.dumps(header) + "\n", encoding="utf-8")
        flat = np.concatenate([a.ravel() for a in self.arrays + self.m + self.v]).astype(np.float32)
        write_embeddings(path.with_suffix(".f32"), flat[:, None])

    @classmethod
    def load(cls, path: str | Path) -> DetectorParams:
        path = Path(path)
        try:
            header = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise FormatError(f"cannot read detector {path}: {exc}") from exc
        if header.get("format") != "ssodr-detector" or header.get("version") != 1:
            raise FormatError(f"{path}: not an ssodr-detector v1 file")
        dims = header["dims"]
        shapes = []
        for a, b in zip(dims[:-1], dims[1:]):
            shapes += [(a, b), (b,)]
        sizes = [int(np.prod(s)) for s in shapes]
        flat = read_embeddings(path.with_suffix(".f32")).ravel()
        if len(flat) != 3 * sum(sizes):
            raise FormatError(f"{path}: payload has {len(flat)} values, expected {3 * sum(sizes)}")
        chunks, offset = [], 0
        for _ in range(3):
            for shape, size in zip(shapes, sizes):
                chunks.append(flat[offset:offset + size].reshape(shape).copy())
                offset += size
        n = len(shapes)
        return cls(chunks[:n], chunks[n:2 * n], chunks[2 * n:], header["step"], header["epoch"], header["cycle"])


# forward / backward ------------------------------------------------------


def _softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def dropout_masks(
    params: DetectorParams, n: int, keep_prob: float, rng: np.random.Generator
) -> list[np.ndarray]:
    """Inverted-dropout masks for the hidden layers (scaled by 1 / keep_prob)."""
    dt = params.dtype
    return [
        (rng.random((n, w.shape[1]), dtype=np.float64) < keep_prob).astype(dt) / dt.type(keep_prob)
        for w in params.arrays[0:-2:2]
    ]


def _forward(params: DetectorParams, X: np.ndarray, masks: Sequence[np.ndarray] | None):
    a = params.arrays
    if X.ndim != 2 or X.shape[1] != a[0].shape[0]:
        raise InvalidInputError(f"input shape {X.shape} incompatible with input dim {a[0].shape[0]}")
    acts = [X]
    pre = []
    h = X
    n_hidden = len(a) // 2 - 1
    for layer in range(n_hidden):
        z = h @ a[2 * layer] + a[2 * layer + 1]
        pre.append(z)
        h = np.maximum(z, 0)
        if masks is not None:
            h = h * masks[layer]
        acts.append(h)
    logits = h @ a[-2] + a[-1]
    return logits, acts, pre


def forward(
    params: DetectorParams,
    X: np.ndarray,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
    keep_prob: float = 0.8,
) -> np.ndarray:
    """Class probabilities (n, 2); column 1 is the object class."""
    X = np.asarray(X, dtype=params.dtype)
    masks = None
    if train_mode:
        if rng is None:
            raise InvalidInputError("train_mode forward needs an rng for dropout")
        masks = dropout_masks(params, len(X), keep_prob, rng)
    logits, _, _ = _forward(params, X, masks)
    return _softmax(logits)


def loss_and_grads(
    params: DetectorParams,
    X: np.ndarray,
    y: np.ndarray,
    masks: Sequence[np.ndarray] | None = None,
) -> tuple[float, list[np.ndarray]]:
    """Mean cross-entropy and its gradient for every entry of ``params.arrays``."""
    X = np.asarray(X, dtype=params.dtype)
    y = np.asarray(y, dtype=np.int64)
    n = len(X)
    logits, acts, pre = _forward(params, X, masks)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(-log_probs[np.arange(n), y].mean())
    delta = np.exp(log_probs)
    delta[np.arange(n), y] -= 1
    delta /= n
    a = params.arrays
    grads: list[np.ndarray] = [None] * len(a)  # type: ignore[list-item]
    n_hidden = len(a) // 2 - 1
    for layer in range(n_hidden, -1, -1):
        grads[2 * layer] = acts[layer].T @ delta
        grads[2 * layer + 1] = delta.sum(axis=0)
        if layer == 0:
            break
        delta = delta @ a[2 * layer].T
        if masks is not None:
            delta = delta * masks[layer - 1]
        delta = delta * (pre[layer - 1] > 0)
    return loss, grads


def adam_step(params: DetectorParams, grads: Sequence[np.ndarray], lr: float, hyper: TrainHyper) -> None:
    """In-place Adam update with bias correction."""
    params.step += 1
    t = params.step
    c1 = 1.0 - hyper.beta1**t
    c2 = 1.0 - hyper.beta2**t
    for p, g, m, v in zip(params.arrays, grads, params.m, params.v):
        m *= hyper.beta1
        m += (1 - hyper.beta1) * g
        v *= hyper.beta2
        v += (1 - hyper.beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + hyper.eps)).astype(p.dtype)


Sampler = Callable[[np.random.Generator], tuple[np.ndarray, np.ndarray]]


def train(
    params: DetectorParams,
    sampler: Sampler,
    hyper: TrainHyper,
    epochs: int | None = None,
    on_epoch: Callable[[int, float], None] | None = None,
) -> DetectorParams:
    """Mini-batch Adam on cross-entropy; returns a new, warm-started params.

    The learning rate follows the global epoch counter stored in ``params``,
    so consecutive calls continue one schedule. Randomness (batches and
    dropout) comes from a stream keyed by ``(hyper.seed, params.cycle)``.
    """
    hyper.validate()
    epochs = hyper.epochs if epochs is None else epochs
    out = params.copy()
    if epochs == 0:
        return out
    rng = np.random.default_rng([hyper.seed, 0x7EA1, out.cycle])
    for _ in range(epochs):
        lr = learning_rate(out.epoch, hyper.lr, hyper.decay, hyper.decay_every)
        total = 0.0
        for b in range(hyper.steps_per_epoch):
            X, y = sampler(rng)
            masks = dropout_masks(out, len(X), hyper.keep_prob, rng) if hyper.keep_prob < 1 else None
            loss, grads = loss_and_grads(out, X, y, masks)
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite loss at batch {b} of epoch {out.epoch}")
            adam_step(out, grads, lr, hyper)
            total += loss
        if on_epoch is not None:
            on_epoch(out.epoch, total / hyper.steps_per_epoch)
        out.epoch += 1
    out.cycle += 1
    return out


# sampling -----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Batch:
    rows: np.ndarray  # dataset row indices
    labels: np.ndarray  # 1 object, 0 background
    clusters: np.ndarray  # source cluster for positives, -1 for negatives
    hard: np.ndarray  # negative drawn from the hard-negative pool


class BatchSampler:
    """Class-balanced batches from a mined set.

    Positives: pick a cluster with probability proportional to its potential
    score (among clusters that have DSD survivors), then a uniform survivor.
    Negatives: half uniform over negative-frame regions, half uniform over
    hard negatives (all uniform when there are no hard negatives).
    """

    def __init__(self, mined: MinedSet, dataset: Dataset, scorecard: ClusterScorecard, batch_size: int):
        if batch_size < 2 or batch_size % 2:
            raise InvalidInputError(f"batch_size must be even and >= 2, got {batch_size}")
        if not mined.positives:
            raise SamplingError("mined set has no positives to sample")
        self.dataset = dataset
        self.batch_size = batch_size
        index = dataset.region_index
        by_cluster = mined.by_cluster()
        self.clusters = np.array(sorted(by_cluster), dtype=np.int64)
        self.members = [np.array([index[r] for r in by_cluster[k]], dtype=np.int64) for k in self.clusters]
        weights = np.array([scorecard.score[k] for k in self.clusters], dtype=np.float64)
        if weights.sum() <= 0:
            weights = np.ones_like(weights)
        self.cluster_probs = weights / weights.sum()
        self.negative_rows = np.flatnonzero(dataset.frame_labels[dataset.region_frames] == 0)
        if len(self.negative_rows) == 0:
            raise SamplingError("dataset has no negative-frame regions")
        self.hard_rows = np.array([index[r] for r in mined.hard_negatives], dtype=np.int64)

    def draw(self, rng: np.random.Generator) -> Batch:
        n_pos = self.batch_size // 2
        n_neg = self.batch_size - n_pos
        n_hard = n_neg // 2 if len(self.hard_rows) else 0
        n_uniform = n_neg - n_hard
        picks = rng.choice(len(self.clusters), size=n_pos, p=self.cluster_probs)
        u = rng.random(n_pos)
        pos_rows = np.empty(n_pos, dtype=np.int64)
        for i, (c, r) in enumerate(zip(picks, u)):
            members = self.members[c]
            pos_rows[i] = members[int(r * len(members))]
        uni_rows = self.negative_rows[rng.integers(len(self.negative_rows), size=n_uniform)]
        hard_rows = self.hard_rows[rng.integers(len(self.hard_rows), size=n_hard)] if n_hard else np.empty(0, np.int64)
        return Batch(
            rows=np.concatenate([pos_rows, uni_rows, hard_rows]),
            labels=np.concatenate([np.ones(n_pos, np.int64), np.zeros(n_neg, np.int64)]),
            clusters=np.concatenate([self.clusters[picks], -np.ones(n_neg, np.int64)]),
            hard=np.concatenate([np.zeros(n_pos + n_uniform, bool), np.ones(n_hard, bool)]),
        )

    def __call__(self, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        batch = self.draw(rng)
        return self.dataset.embeddings[batch.rows], batch.labels


def sample_batch(
    mined: MinedSet,
    dataset: Dataset,
    scorecard: ClusterScorecard,
    batch_size: int,
    rng: np.random.Generator,
) -> Batch:
    return BatchSampler(mined, dataset, scorecard, batch_size).draw(rng)


# inference ----------------------------------------------------------------


@dataclass(frozen=True)
class Detection:
    frame_id: str
    box: Box
    score: float
    region_id: int = -1

    def to_record(self) -> dict:
        return {"frame_id": self.frame_id, "region_id": self.region_id, "box": self.box.as_list(), "score": self.score}

    @classmethod
    def from_record(cls, rec: dict) -> Detection:
        return cls(rec["frame_id"], Box.of(rec["box"]), float(rec["score"]), int(rec.get("region_id", -1)))


def nms(detections: Sequence[Detection], iou_threshold: float = 0.3) -> list[Detection]:
    """Greedy NMS; equal scores keep input order."""
    if not detections:
        return []
    order = sorted(range(len(detections)), key=lambda i: -detections[i].score)
    boxes = np.array([detections[i].box.as_list() for i in order])
    overlap = iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(order), dtype=bool)
    keep = []
    for a in range(len(order)):
        if suppressed[a]:
            continue
        keep.append(detections[order[a]])
        suppressed[a + 1:] |= overlap[a, a + 1:] >= iou_threshold
    return keep


def _frame_detections(
    frame_id: str,
    region_ids: np.ndarray,
    boxes: np.ndarray,
    scores: np.ndarray,
    nms_iou: float,
    score_threshold: float,
) -> list[Detection]:
    dets = [
        Detection(frame_id, Box(*boxes[i].tolist()), float(scores[i]), int(region_ids[i]))
        for i in range(len(scores))
        if scores[i] >= score_threshold
    ]
    return nms(dets, nms_iou)


def detect_frame(
    params: DetectorParams,
    frame_id: str,
    region_ids: Sequence[int],
    boxes: np.ndarray,
    embeddings: np.ndarray,
    nms_iou: float = 0.3,
    score_threshold: float = 0.5,
) -> list[Detection]:
    """Score one frame's regions, threshold, and suppress overlaps."""
    if len(region_ids) == 0:
        return []
    scores = forward(params, np.asarray(embeddings))[:, 1]
    return _frame_detections(frame_id, np.asarray(region_ids), np.asarray(boxes, dtype=np.float64), scores, nms_iou, score_threshold)


def detect(
    params: DetectorParams,
    dataset: Dataset,
    frame_ids: Sequence[str] | None = None,
    nms_iou: float = 0.3,
    score_threshold: float = 0.5,
) -> list[Detection]:
    """Detections over ``frame_ids`` (default: every frame), in dataset frame order."""
    wanted = set(dataset.frame_index) if frame_ids is None else set(frame_ids)
    scores = forward(params, dataset.embeddings)[:, 1]
    out: list[Detection] = []
    for fi, rows in enumerate(dataset.rows_by_frame()):
        frame = dataset.frames[fi]
        if frame.frame_id not in wanted:
            continue
        out.extend(
            _frame_detections(
                frame.frame_id, dataset.region_ids[rows], dataset.boxes[rows], scores[rows], nms_iou, score_threshold
            )
        )
    return out


def write_detections(detections: Sequence[Detection], path: str | Path, config_digest: str = "") -> None:
    """JSONL: a header record, then one record per detection."""
    header = {"format": "ssodr-detections", "version": 1, "config_digest": config_digest, "n": len(detections)}
    lines = [json.dumps(header)] + [json.dumps(d.to_record()) for d in detections]
    Path(path).write_text("".join(ln + "\n" for ln in lines), encoding="utf-8")


def read_detections(path: str | Path) -> list[Detection]:
    try:
        records = [json.loads(ln) for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
        if records and records[0].get("format") == "ssodr-detections":
            records = records[1:]
        return [Detection.from_record(r) for r in records]
    except (OSError, KeyError, TypeError, AttributeError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read detections {path}: {exc}") from exc
