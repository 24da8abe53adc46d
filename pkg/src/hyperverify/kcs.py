"""Identity clustering and balanced batch sampling (uniform or cluster-centered)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import DataError, LabeledImageSet
from .tensor import ConfigError

UNIFORM = "uniform"
KCS = "kcs"


@dataclass
class TrainingBatch:
    """``n`` images from each of ``B`` identities, identity-major order."""

    X: np.ndarray  # [nB, 3, h, w]
    M: np.ndarray  # [nB] identity index per sample
    n: int
    B: int
    indices: np.ndarray  # [nB] rows of the source dataset
    embeddings: np.ndarray | None = None
    mode: str = UNIFORM

    def __post_init__(self):
        if len(self.X) != self.n * self.B or len(self.M) != self.n * self.B:
            raise ConfigError(f"batch holds {len(self.X)} samples, expected n*B={self.n * self.B}")
        ids, counts = np.unique(self.M, return_counts=True)
        if len(ids) != self.B or np.any(counts != self.n):
            raise ConfigError("batch is not balanced: every identity needs exactly n samples")

    @property
    def size(self) -> int:
        return self.n * self.B


@dataclass(frozen=True)
class IdentityCentroid:
    identity: int
    embedding: np.ndarray
    count: int


def compute_identity_centroids(dataset: LabeledImageSet, backbone=None,
                               embeddings: np.ndarray | None = None) -> list[IdentityCentroid]:
    """Per-identity mean of unit image embeddings, re-normalized."""
    if embeddings is None:
        if backbone is None:
            raise ConfigError("need a backbone or precomputed embeddings")
        embeddings = backbone.embed_batch(dataset.images)
    out = []
    for i, members in enumerate(dataset.indices_by_identity()):
        if len(members) == 0:
            raise DataError(f"identity {dataset.identity_names[i]!r} has no images")
        e = embeddings[members]
        e = e / np.linalg.norm(e, axis=1, keepdims=True)
        m = e.mean(axis=0)
        out.append(IdentityCentroid(i, m / np.linalg.norm(m), len(members)))
    return out


# ------------------------------------------------------------------ k-means


@dataclass
class ClusterIndex:
    K: int
    assignment: np.ndarray  # [N] point -> cluster
    centers: np.ndarray  # [K, d]
    inertia: float
    inertia_history: list[float] = field(default_factory=list)

    @property
    def members(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.assignment == k) for k in range(self.K)]

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {"centers": self.centers, "assignment": self.assignment.astype(np.float64),
                "inertia": np.array([self.inertia])}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> ClusterIndex:
        centers = np.asarray(arrays["centers"], dtype=np.float64)
        return cls(len(centers), np.asarray(arrays["assignment"]).astype(np.int64), centers,
                   float(np.asarray(arrays["inertia"]).ravel()[0]))


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d = (points ** 2).sum(1)[:, None] - 2 * points @ centers.T + (centers ** 2).sum(1)[None]
    return np.maximum(d, 0.0)


def _kmeanspp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    chosen = [int(rng.integers(n))]
    d2 = _sq_dists(points, points[chosen])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # all remaining points coincide with a center; pick any unused one
            rest = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(rest))
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        chosen.append(nxt)
        d2 = np.minimum(d2, _sq_dists(points, points[nxt: nxt + 1])[:, 0])
    return points[chosen].copy()


def kmeans(points, K: int, max_iters: int = 100, seed: int = 0) -> ClusterIndex:
    """Lloyd's algorithm from k-means++ seeds, Euclidean distance.

    An emptied cluster takes the point of the largest cluster that lies
    farthest from that cluster's center.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if K < 1 or K > n:
        raise ConfigError(f"K={K} must be in [1, {n}]")
    rng = np.random.default_rng(seed)
    centers = _kmeanspp(points, K, rng)
    assign = _sq_dists(points, centers).argmin(1)
    history = []
    for _ in range(max_iters):
        assign = _repair_empty(points, centers, assign, K)
        new_centers = np.stack([points[assign == k].mean(0) for k in range(K)])
        d2 = _sq_dists(points, new_centers)
        history.append(float(d2[np.arange(n), assign].sum()))
        new_assign = _repair_empty(points, new_centers, d2.argmin(1), K)
        centers = new_centers
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    centers = np.stack([points[assign == k].mean(0) for k in range(K)])
    inertia = float(((points - centers[assign]) ** 2).sum())
    history.append(inertia)
    return ClusterIndex(K, assign, centers, inertia, history)


def _repair_empty(points, centers, assign, K):
    assign = assign.copy()
    for k in range(K):
        if np.any(assign == k):
            continue
        sizes = np.bincount(assign, minlength=K)
        big = int(sizes.argmax())
        idx = np.flatnonzero(assign == big)
        far = idx[((points[idx] - centers[big]) ** 2).sum(1).argmax()]
        assign[far] = k
    return assign


def default_k(num_identities: int) -> int:
    return max(2, num_identities // 10)


# ----------------------------------------------------------------- sampling


class BatchSampler:
    """Draws balanced batches from a dataset, uniformly or within one cluster."""

    def __init__(self, dataset: LabeledImageSet, index: ClusterIndex | None = None,
                 embeddings: np.ndarray | None = None):
        self.dataset = dataset
        self.members = dataset.indices_by_identity()
        self.embeddings = embeddings
        self.index = index
        if index is not None:
            self._set_index(index)

    def _set_index(self, index: ClusterIndex):
        if len(index.assignment) != self.dataset.num_identities:
            raise ConfigError("cluster index does not cover this dataset's identities")
        self.index = index
        self._clusters = index.members
        self._sizes = np.array([len(c) for c in self._clusters], dtype=float)
        d = _sq_dists(index.centers, index.centers)
        self._near = np.argsort(d, axis=1, kind="stable")

    def _kcs_identities(self, B: int, rng: np.random.Generator) -> np.ndarray:
        k = int(rng.choice(self.index.K, p=self._sizes / self._sizes.sum()))
        picked: list[int] = []
        for c in self._near[k]:
            pool = self._clusters[c]
            need = B - len(picked)
            if need <= 0:
                break
            take = pool if len(pool) <= need else rng.choice(pool, size=need, replace=False)
            picked.extend(int(i) for i in take)
        return np.array(picked)

    def sample(self, B: int, n: int, mode: str, rng: np.random.Generator) -> TrainingBatch:
        if B > self.dataset.num_identities:
            raise ConfigError(f"batch needs {B} identities, dataset has {self.dataset.num_identities}")
        if mode == KCS:
            if self.index is None:
                raise ConfigError("kcs sampling needs a cluster index")
            ids = self._kcs_identities(B, rng)
        elif mode == UNIFORM:
            ids = rng.choice(self.dataset.num_identities, size=B, replace=False)
        else:
            raise ConfigError(f"unknown sampling mode {mode!r}")
        rows = []
        for i in ids:
            pool = self.members[i]
            rows.append(rng.choice(pool, size=n, replace=len(pool) < n))
        rows = np.concatenate(rows)
        emb = None if self.embeddings is None else self.embeddings[rows]
        return TrainingBatch(self.dataset.images[rows], self.dataset.labels[rows], n, B, rows,
                             emb, mode)


def sample_batch(index: ClusterIndex | None, dataset: LabeledImageSet, B: int, n: int,
                 mode: str, rng: np.random.Generator) -> TrainingBatch:
    return BatchSampler(dataset, index).sample(B, n, mode, rng)


def batch_centroid_similarity(batch: TrainingBatch, centroids: np.ndarray) -> float:
    """Mean pairwise cosine similarity between the batch's identity centroids."""
    ids = np.unique(batch.M)
    c = centroids[ids]
    s = c @ c.T
    b = len(ids)
    return float((s.sum() - np.trace(s)) / (b * (b - 1)))
