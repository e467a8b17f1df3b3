"""Weighted deep embedded clustering over fixed region embeddings.

Only the centroids move; embeddings stay as given. Soft assignments use the
Student's t kernel ``(1 + ||z - mu||^2)^-1`` with a per-sample weight that is
0.5 for regions from negative frames and 1 otherwise. Because that weight does
not depend on the cluster it cancels in the row normalization, so the weight
is also applied where it does have an effect: as a per-sample multiplier on
the KL self-training loss.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ssodr.core import read_embeddings, write_embeddings
from ssodr.errors import FormatError, InvalidInputError, NumericalError

NEGATIVE_WEIGHT = 0.5
POSITIVE_WEIGHT = 1.0


@dataclass(eq=False)
class ClusterState:
    centroids: np.ndarray  # (K, d) float32
    assignments: np.ndarray  # (n,) hard argmax of q
    epoch: int = 0
    interval: int = 5
    cycle: int = 0

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float32)
        self.assignments = np.asarray(self.assignments, dtype=np.int64)
        if self.K < 2:
            raise InvalidInputError(f"need K >= 2 clusters, got {self.K}")
        if not np.all(np.isfinite(self.centroids)):
            raise NumericalError("non-finite centroid")
        if len(self.assignments) and (self.assignments.min() < 0 or self.assignments.max() >= self.K):
            raise InvalidInputError("cluster assignment out of range")

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    def empty_clusters(self) -> list[int]:
        counts = np.bincount(self.assignments, minlength=self.K)
        return [int(k) for k in np.flatnonzero(counts == 0)]

    def __eq__(self, other):
        if not isinstance(other, ClusterState):
            return NotImplemented
        return (
            self.centroids.tobytes() == other.centroids.tobytes()
            and np.array_equal(self.assignments, other.assignments)
            and (self.epoch, self.interval, self.cycle) == (other.epoch, other.interval, other.cycle)
        )

    def save(self, path: str | Path, config_digest: str = "") -> None:
        path = Path(path)
        header = {
            "format": "ssodr-clusters",
            "version": 1,
            "K": self.K,
            "dim": int(self.centroids.shape[1]),
            "epoch": self.epoch,
            "interval": self.interval,
            "cycle": self.cycle,
            "empty_clusters": self.empty_clusters(),
            "config_digest": config_digest,
            "assignments": self.assignments.tolist(),
        }
        path.write_text(json.dumps(header, separators=(",", ":")) + "\n", encoding="utf-8")
        write_embeddings(path.with_suffix(".f32"), self.centroids)

    @classmethod
    def load(cls, path: str | Path) -> ClusterState:
        path = Path(path)
        try:
            header = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise FormatError(f"cannot read cluster state {path}: {exc}") from exc
        if header.get("format") != "ssodr-clusters" or header.get("version") != 1:
            raise FormatError(f"{path}: not an ssodr-clusters v1 file")
        centroids = read_embeddings(path.with_suffix(".f32"))
        if centroids.shape != (header["K"], header["dim"]):
            raise FormatError(f"{path}: centroid payload shape {centroids.shape} disagrees with header")
        return cls(
            centroids=centroids,
            assignments=np.array(header["assignments"], dtype=np.int64),
            epoch=header["epoch"],
            interval=header["interval"],
            cycle=header["cycle"],
        )


def sample_weights(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    return np.where(labels == 0, NEGATIVE_WEIGHT, POSITIVE_WEIGHT)


def squared_distances(Z: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    C = np.asarray(centroids, dtype=np.float64)
    d = (Z * Z).sum(1)[:, None] + (C * C).sum(1)[None, :] - 2.0 * Z @ C.T
    return np.maximum(d, 0.0)


def hard_assign(Z: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return np.argmin(squared_distances(Z, centroids), axis=1)


def init_centroids(Z: np.ndarray, K: int, seed: int, lloyd_iters: int = 10) -> np.ndarray:
    """Greedy k-means++ seeding followed by ``lloyd_iters`` Lloyd iterations.

    Each seeding step draws ``2 + log K`` candidates by D^2 sampling and keeps
    the one that most reduces the total squared distance.
    """
    Z = np.asarray(Z, dtype=np.float64)
    n = len(Z)
    if K < 1 or n < K:
        raise InvalidInputError(f"cannot seed {K} centroids from {n} samples")
    rng = np.random.default_rng(seed)
    n_trials = 2 + int(np.log(K))
    chosen = [int(rng.integers(n))]
    d2 = squared_distances(Z, Z[chosen[0]][None])[:, 0]
    d2[chosen[0]] = 0.0
    for _ in range(1, K):
        total = d2.sum()
        if total > 0:
            cand = rng.choice(n, size=n_trials, p=d2 / total)
            cand_d2 = np.minimum(d2[None, :], squared_distances(Z[cand], Z))
            cand_d2[np.arange(n_trials), cand] = 0.0
            best = int(np.argmin(cand_d2.sum(axis=1)))
            idx, new_d2 = int(cand[best]), cand_d2[best]
        else:
            # fewer distinct points than K: fall back to an unused index
            rest = np.setdiff1d(np.arange(n), chosen)
            idx = int(rest[rng.integers(len(rest))])
            new_d2 = np.minimum(d2, squared_distances(Z, Z[idx][None])[:, 0])
        chosen.append(idx)
        d2 = new_d2
        d2[chosen] = 0.0
    centroids = Z[chosen].copy()
    for _ in range(lloyd_iters):
        assign = hard_assign(Z, centroids)
        counts = np.bincount(assign, minlength=K)
        sums = (assign[None, :] == np.arange(K)[:, None]).astype(np.float64) @ Z
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
    return centroids


def soft_assign(Z: np.ndarray, labels: np.ndarray, centroids: np.ndarray, weighted: bool = True) -> np.ndarray:
    """Weighted Student's t soft assignment, rows normalized to one."""
    Z = np.asarray(Z, dtype=np.float64)
    C = np.asarray(centroids, dtype=np.float64)
    if Z.ndim != 2 or C.ndim != 2 or Z.shape[1] != C.shape[1]:
        raise InvalidInputError(f"embedding shape {Z.shape} incompatible with centroids {C.shape}")
    if len(labels) != len(Z):
        raise InvalidInputError("one label per embedding required")
    kernel = 1.0 / (1.0 + squared_distances(Z, C))
    if weighted:
        kernel = kernel * sample_weights(labels)[:, None]
    return kernel / kernel.sum(axis=1, keepdims=True)


def target_distribution(Q: np.ndarray) -> np.ndarray:
    """Sharpened self-training target: q^2 / f_j, renormalized per row."""
    Q = np.asarray(Q, dtype=np.float64)
    w = Q**2 / Q.sum(axis=0)
    return w / w.sum(axis=1, keepdims=True)


def kl_loss(P: np.ndarray, Q: np.ndarray, labels: np.ndarray) -> float:
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    if P.shape != Q.shape:
        raise InvalidInputError(f"P shape {P.shape} != Q shape {Q.shape}")
    if len(labels) != len(P):
        raise InvalidInputError("one label per row required")
    terms = np.where(P > 0, P * np.log(np.where(P > 0, P, 1.0) / Q), 0.0)
    return float(sample_weights(labels) @ terms.sum(axis=1))


def centroid_gradient(Z: np.ndarray, labels: np.ndarray, centroids: np.ndarray, P: np.ndarray) -> np.ndarray:
    """d kl_loss / d centroids with the target P held fixed."""
    Z = np.asarray(Z, dtype=np.float64)
    C = np.asarray(centroids, dtype=np.float64)
    kernel = 1.0 / (1.0 + squared_distances(Z, C))
    Q = kernel / kernel.sum(axis=1, keepdims=True)
    coef = sample_weights(labels)[:, None] * (P - Q) * kernel  # (n, K)
    # -2 sum_i coef_ij (z_i - mu_j)
    return -2.0 * (coef.T @ Z - coef.sum(axis=0)[:, None] * C)


def refine_centroids(
    centroids: np.ndarray,
    Z: np.ndarray,
    labels: np.ndarray,
    P: np.ndarray,
    epochs: int,
    step_size: float = 1e-2,
    clip: float = 10.0,
) -> tuple[np.ndarray, list[float]]:
    """Full-batch gradient descent on the KL loss against a fixed target.

    Returns the new centroids and the loss before each step plus the final
    loss (``epochs + 1`` values).
    """
    C = np.array(centroids, dtype=np.float64)
    losses = [kl_loss(P, soft_assign(Z, labels, C), labels)]
    for epoch in range(epochs):
        grad = centroid_gradient(Z, labels, C, P)
        if not np.all(np.isfinite(grad)):
            raise NumericalError(f"non-finite centroid gradient at epoch {epoch}")
        norm = np.linalg.norm(grad)
        if clip and norm > clip:
            grad *= clip / norm
        C -= step_size * grad
        loss = kl_loss(P, soft_assign(Z, labels, C), labels)
        if not np.isfinite(loss):
            raise NumericalError(f"non-finite clustering loss at epoch {epoch}")
        losses.append(loss)
    return C, losses


def initial_state(Z: np.ndarray, K: int, seed: int, interval: int = 5, lloyd_iters: int = 10) -> ClusterState:
    centroids = init_centroids(Z, K, seed, lloyd_iters).astype(np.float32)
    return ClusterState(centroids=centroids, assignments=hard_assign(Z, centroids), interval=interval)


def refine(
    state: ClusterState,
    Z: np.ndarray,
    labels: np.ndarray,
    epochs: int | None = None,
    step_size: float = 1e-2,
    clip: float = 10.0,
) -> ClusterState:
    """One refinement call: recompute the target from the current soft
    assignment, then take ``epochs`` (default: the state's interval) steps."""
    epochs = state.interval if epochs is None else epochs
    if epochs == 0:
        return state
    P = target_distribution(soft_assign(Z, labels, state.centroids))
    C, _ = refine_centroids(state.centroids, Z, labels, P, epochs, step_size, clip)
    C = C.astype(np.float32)
    Q = soft_assign(Z, labels, C)
    return replace(
        state,
        centroids=C,
        assignments=np.argmax(Q, axis=1),
        epoch=state.epoch + epochs,
        cycle=state.cycle + 1,
    )
