"""Stage-by-stage orchestration of the cluster / score / mine / train loop.

Every stage reads its inputs from and writes its outputs to one working
directory, so the full loop and a sequence of single-stage CLI calls produce
the same files.
"""

from __future__ import annotations

import json
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ssodr import dsd, scoring, wdec
from ssodr.config import PipelineConfig
from ssodr.core import Dataset, GroundTruth, read_dataset, read_groundtruth
from ssodr.detector import (
    BatchSampler,
    DetectorParams,
    TrainHyper,
    detect,
    read_detections,
    train,
    write_detections,
)
from ssodr.dsd import MinedSet
from ssodr.errors import SSODRError, StageError
from ssodr.evaluation import EvalReport, Retrieved, evaluate_detections, mean_ap, retrieve_top_n
from ssodr.scoring import ClusterScorecard
from ssodr.wdec import ClusterState

log = logging.getLogger(__name__)

_SPLIT_STREAM = 0x5B17


def split_frames(dataset: Dataset, test_fraction: float, seed: int, fold: int = 0) -> tuple[list[str], list[str]]:
    """Random frame-level train/test split; both lists keep dataset order.

    Frames of one video may land on both sides.
    """
    ids = [f.frame_id for f in dataset.frames]
    if test_fraction <= 0:
        return ids, []
    rng = np.random.default_rng([seed, _SPLIT_STREAM, fold])
    n_test = int(round(test_fraction * len(ids)))
    test = set(rng.permutation(len(ids))[:n_test].tolist())
    return [f for i, f in enumerate(ids) if i not in test], [f for i, f in enumerate(ids) if i in test]


@contextmanager
def stage(name: str, cycle: int | None = None):
    try:
        yield
    except SSODRError as exc:
        where = name if cycle is None else f"{name} (cycle {cycle})"
        raise type(exc)(f"{where}: {exc}") from exc


class Workspace:
    """Output directory holding every stage file for one config."""

    def __init__(self, root: str | Path, cfg: PipelineConfig, force: bool = False):
        self.root = Path(root)
        self.cfg = cfg
        self.digest = cfg.digest()
        self.root.mkdir(parents=True, exist_ok=True)
        manifest = self.root / "manifest.json"
        if manifest.exists() and not force:
            try:
                old = json.loads(manifest.read_text(encoding="utf-8")).get("config_digest")
            except json.JSONDecodeError:
                old = None
            if old != self.digest:
                raise StageError(
                    f"{self.root} holds outputs of config {old}, not {self.digest}; "
                    "use a fresh --out directory or --force"
                )
        manifest.write_text(
            json.dumps({"config_digest": self.digest, "config": cfg.to_dict()}, indent=1, sort_keys=True) + "\n",
            encoding="utf-8",
        )

    clusters = property(lambda self: self.root / "clusters.json")
    scorecard = property(lambda self: self.root / "scorecard.jsonl")
    mined = property(lambda self: self.root / "mined.json")
    model = property(lambda self: self.root / "model.json")
    detections = property(lambda self: self.root / "detections.jsonl")
    report = property(lambda self: self.root / "report.json")
    retrieval = property(lambda self: self.root / "retrieval.json")

    def history(self, cycle: int) -> Path:
        path = self.root / "cycles" / f"c{cycle:02d}"
        path.mkdir(parents=True, exist_ok=True)
        return path

    def require(self, path: Path, producer: str) -> Path:
        if not path.exists():
            raise StageError(f"missing {path.name}; run `{producer}` first")
        return path


@dataclass
class Context:
    cfg: PipelineConfig
    dataset: Dataset
    train: Dataset
    test_ids: list[str]


def load_context(cfg: PipelineConfig, dataset_path: str | Path) -> Context:
    dataset = read_dataset(dataset_path)
    train_ids, test_ids = split_frames(dataset, cfg.test_fraction, cfg.seed, cfg.fold)
    train = dataset.subset(train_ids) if test_ids else dataset
    return Context(cfg, dataset, train, test_ids)


# stages -------------------------------------------------------------------


def run_cluster(ctx: Context, ws: Workspace) -> ClusterState:
    cfg, data = ctx.cfg, ctx.train
    if ws.clusters.exists():
        state = ClusterState.load(ws.clusters)
    else:
        state = wdec.initial_state(data.embeddings, cfg.K, cfg.seed, cfg.I, cfg.lloyd_iters)
    state = wdec.refine(state, data.embeddings, data.weak_labels, cfg.I, cfg.centroid_step, cfg.grad_clip)
    state.save(ws.clusters, ws.digest)
    if state.empty_clusters():
        log.info("empty clusters after refinement: %s", state.empty_clusters())
    return state


def run_score(ctx: Context, ws: Workspace) -> ClusterScorecard:
    state = ClusterState.load(ws.require(ws.clusters, "cluster"))
    card = scoring.score_clusters(ctx.train, state, ctx.cfg.tau)
    card.save(ws.scorecard, ws.digest)
    card.save(ws.history(state.cycle - 1) / "scorecard.jsonl", ws.digest)
    return card


def run_mine(ctx: Context, ws: Workspace) -> MinedSet:
    state = ClusterState.load(ws.require(ws.clusters, "cluster"))
    card = ClusterScorecard.load(ws.require(ws.scorecard, "score"))
    mined = dsd.mine_regions(ctx.train, state, card, ctx.cfg.edge_iou, ctx.cfg.top_m)
    mined.save(ws.mined, ws.digest)
    mined.save(ws.history(state.cycle - 1) / "mined.json", ws.digest)
    return mined


def train_hyper(cfg: PipelineConfig, n_positives: int) -> TrainHyper:
    steps = cfg.steps_per_epoch or max(1, math.ceil(n_positives / (cfg.batch_size // 2)))
    return TrainHyper(
        lr=cfg.lr,
        decay=cfg.decay,
        decay_every=cfg.decay_every,
        epochs=cfg.epochs,
        keep_prob=cfg.keep_prob,
        batch_size=cfg.batch_size,
        steps_per_epoch=steps,
        seed=cfg.seed,
    )


def run_train(ctx: Context, ws: Workspace) -> DetectorParams:
    cfg = ctx.cfg
    card = ClusterScorecard.load(ws.require(ws.scorecard, "score"))
    mined = MinedSet.load(ws.require(ws.mined, "mine"))
    if ws.model.exists():
        params = DetectorParams.load(ws.model)
    else:
        params = DetectorParams.init(ctx.dataset.dim, seed=cfg.seed)
    if params.cycle >= cfg.cycles:
        raise StageError(f"detector already trained for all {cfg.cycles} cycles")
    sampler = BatchSampler(mined, ctx.train, card, cfg.batch_size)
    hyper = train_hyper(cfg, len(mined.positives))
    epochs = cfg.epochs_for_cycle(params.cycle)
    params = train(params, sampler, hyper, epochs, on_epoch=lambda e, loss: log.info("epoch %d loss %.4f", e, loss))
    params.save(ws.model, ws.digest)
    return params


def eval_frames(ctx: Context) -> list[str]:
    return ctx.test_ids or [f.frame_id for f in ctx.dataset.frames]


def run_detect(ctx: Context, ws: Workspace):
    params = DetectorParams.load(ws.require(ws.model, "train"))
    cfg = ctx.cfg
    dets = detect(params, ctx.dataset, eval_frames(ctx), cfg.nms_iou, cfg.score_threshold)
    write_detections(dets, ws.detections, ws.digest)
    return dets


def run_eval(ctx: Context, ws: Workspace, gt: GroundTruth) -> EvalReport:
    cfg = ctx.cfg
    dets = read_detections(ws.require(ws.detections, "detect"))
    report = evaluate_detections(dets, ctx.dataset, gt, cfg.iou_thresholds, eval_frames(ctx), cfg.seed, ws.digest)
    report.extra = {
        "fold": cfg.fold,
        "test_fraction": cfg.test_fraction,
        "n_detections": len(dets),
        "n_train_frames": len(ctx.train.frames),
    }
    report.save(ws.report)
    return report


def run_retrieve(ctx: Context, ws: Workspace) -> list[Retrieved]:
    state = ClusterState.load(ws.require(ws.clusters, "cluster"))
    card = ClusterScorecard.load(ws.require(ws.scorecard, "score"))
    mined = MinedSet.load(ws.require(ws.mined, "mine"))
    hits = retrieve_top_n(ctx.train, state, card, mined, ctx.cfg.retrieve_n)
    rec = {
        "config_digest": ws.digest,
        "cluster": card.top(),
        "results": [h.__dict__ for h in hits],
    }
    ws.retrieval.write_text(json.dumps(rec, indent=1) + "\n", encoding="utf-8")
    return hits


# full loop ----------------------------------------------------------------


@dataclass
class RunResult:
    out_dir: Path
    report: EvalReport | None
    retrieval: list[Retrieved]
    folds: list[RunResult] = field(default_factory=list)
    mean_ap_by_threshold: dict[str, float] | None = None


def _run_fold(cfg: PipelineConfig, dataset_path, gt: GroundTruth | None, out_dir: Path, force: bool) -> RunResult:
    ws = Workspace(out_dir, cfg, force)
    for name in ("clusters.json", "clusters.f32", "scorecard.jsonl", "mined.json", "model.json", "model.f32"):
        (ws.root / name).unlink(missing_ok=True)
    with stage("load"):
        ctx = load_context(cfg, dataset_path)
    for cycle in range(cfg.cycles):
        with stage("cluster", cycle):
            run_cluster(ctx, ws)
        with stage("score", cycle):
            card = run_score(ctx, ws)
        with stage("mine", cycle):
            mined = run_mine(ctx, ws)
        log.info("cycle %d: top cluster %d, %d positives, %d hard negatives",
                 cycle, card.top(), len(mined.positives), len(mined.hard_negatives))
        with stage("train", cycle):
            run_train(ctx, ws)
    report = None
    if gt is not None:
        with stage("detect"):
            run_detect(ctx, ws)
        with stage("eval"):
            report = run_eval(ctx, ws, gt)
    with stage("retrieve"):
        hits = run_retrieve(ctx, ws)
    return RunResult(ws.root, report, hits)


def run_pipeline(
    cfg: PipelineConfig,
    dataset_path: str | Path,
    gt_path: str | Path | None,
    out_dir: str | Path,
    force: bool = False,
) -> RunResult:
    """Run every cycle, then evaluate (when ground truth is given) and retrieve.

    With ``cfg.folds > 1`` each fold runs in ``out_dir/foldN`` and
    ``out_dir/summary.json`` holds the AP averaged over folds.
    """
    gt = None
    if gt_path is not None:
        with stage("load"):
            gt = read_groundtruth(gt_path)
    out_dir = Path(out_dir)
    if cfg.folds == 1:
        return _run_fold(cfg, dataset_path, gt, out_dir, force)
    Workspace(out_dir, cfg, force)
    results = [
        _run_fold(replace(cfg, fold=f, folds=1), dataset_path, gt, out_dir / f"fold{f}", force)
        for f in range(cfg.folds)
    ]
    combined = RunResult(out_dir, None, results[0].retrieval, folds=results)
    if gt is not None:
        reports = [r.report for r in results]
        combined.mean_ap_by_threshold = mean_ap(reports)
        summary = {
            "config_digest": cfg.digest(),
            "folds": cfg.folds,
            "mean_ap_by_threshold": combined.mean_ap_by_threshold,
            "ap_by_fold": [r.ap_by_threshold for r in reports],
        }
        (out_dir / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return combined
