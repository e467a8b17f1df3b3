"""Per-cluster purity, compactness and video variety, and the potential score.

The potential score of cluster k is a softmax over clusters of

    tau * raw_k / sum(raw),    raw_k = P_k**2 * log(U_k) / V_k

where P_k is the fraction of members from positive frames, U_k the number of
distinct videos among members and V_k the mean squared member distance to the
centroid. U_k enters the log un-normalized (a unit-sum U would make the log
negative and flip the ranking); dividing raw by its sum normalizes the P and
1/V factors jointly and keeps the softmax argument in [0, tau].
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ssodr.core import Dataset
from ssodr.errors import FormatError, InvalidInputError, ScoringError
from ssodr.wdec import ClusterState, squared_distances

VARIANCE_FLOOR = 1e-8


@dataclass(frozen=True, eq=False)
class ClusterStats:
    positive_ratio: np.ndarray  # P_k
    variance: np.ndarray  # V_k
    n_videos: np.ndarray  # U_k
    count: np.ndarray

    @property
    def K(self) -> int:
        return len(self.count)


@dataclass(frozen=True, eq=False)
class ClusterScorecard:
    stats: ClusterStats
    raw: np.ndarray
    score: np.ndarray  # S_k, sums to one
    masked: np.ndarray
    tau: float

    @property
    def K(self) -> int:
        return self.stats.K

    def ranking(self) -> np.ndarray:
        """Cluster indices by descending score; ties go to the lower index."""
        return np.lexsort((np.arange(self.K), -self.score))

    def top(self) -> int:
        return int(self.ranking()[0])

    def records(self) -> list[dict]:
        s = self.stats
        return [
            {
                "k": k,
                "count": int(s.count[k]),
                "P": float(s.positive_ratio[k]),
                "V": float(s.variance[k]),
                "U": int(s.n_videos[k]),
                "raw": float(self.raw[k]),
                "S": float(self.score[k]),
                "masked": bool(self.masked[k]),
            }
            for k in range(self.K)
        ]

    def save(self, path: str | Path, config_digest: str = "") -> None:
        lines = [json.dumps({"format": "ssodr-scorecard", "version": 1, "tau": self.tau, "config_digest": config_digest})]
        lines += [json.dumps(r) for r in self.records()]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> ClusterScorecard:
        try:
            rows = [json.loads(ln) for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
        except (OSError, json.JSONDecodeError) as exc:
            raise FormatError(f"cannot read scorecard {path}: {exc}") from exc
        if not rows or rows[0].get("format") != "ssodr-scorecard":
            raise FormatError(f"{path}: not an ssodr-scorecard file")
        recs = sorted(rows[1:], key=lambda r: r["k"])
        stats = ClusterStats(
            positive_ratio=np.array([r["P"] for r in recs]),
            variance=np.array([r["V"] for r in recs]),
            n_videos=np.array([r["U"] for r in recs], dtype=np.int64),
            count=np.array([r["count"] for r in recs], dtype=np.int64),
        )
        return cls(
            stats=stats,
            raw=np.array([r["raw"] for r in recs]),
            score=np.array([r["S"] for r in recs]),
            masked=np.array([r["masked"] for r in recs], dtype=bool),
            tau=rows[0]["tau"],
        )


def cluster_stats(dataset: Dataset, state: ClusterState) -> ClusterStats:
    if len(state.assignments) != dataset.n_regions:
        raise InvalidInputError(
            f"{len(state.assignments)} assignments for {dataset.n_regions} regions"
        )
    K = state.K
    assign = state.assignments
    count = np.bincount(assign, minlength=K)
    pos = np.bincount(assign, weights=(dataset.weak_labels == 1).astype(np.float64), minlength=K)
    d2 = squared_distances(dataset.embeddings, state.centroids)[np.arange(len(assign)), assign]
    sq = np.bincount(assign, weights=d2, minlength=K)
    with np.errstate(invalid="ignore", divide="ignore"):
        P = np.where(count > 0, pos / count, 0.0)
        V = np.where(count > 0, sq / count, 0.0)
    pairs = np.unique(np.stack([assign, dataset.region_videos]), axis=1)
    U = np.bincount(pairs[0], minlength=K)
    return ClusterStats(positive_ratio=P, variance=V, n_videos=U, count=count)


def potential_score(stats: ClusterStats, tau: float) -> ClusterScorecard:
    P = np.asarray(stats.positive_ratio, dtype=np.float64)
    V = np.asarray(stats.variance, dtype=np.float64)
    U = np.asarray(stats.n_videos, dtype=np.float64)
    # empty clusters and clusters whose members all sit on the centroid carry no evidence
    masked = (np.asarray(stats.count) == 0) | (V <= VARIANCE_FLOOR)
    if masked.all():
        raise ScoringError("every cluster is empty or degenerate; nothing to score")
    live = ~masked
    raw = np.zeros_like(P)
    raw[live] = P[live] ** 2 * np.log(np.maximum(U[live], 1.0)) / np.maximum(V[live], VARIANCE_FLOOR)
    total = raw[live].sum()
    norm = raw / total if total > 0 else raw
    logits = tau * norm[live]
    e = np.exp(logits - logits.max())
    score = np.zeros_like(P)
    score[live] = e / e.sum()
    return ClusterScorecard(stats=stats, raw=raw, score=score, masked=masked, tau=float(tau))


def score_clusters(dataset: Dataset, state: ClusterState, tau: float) -> ClusterScorecard:
    return potential_score(cluster_stats(dataset, state), tau)
