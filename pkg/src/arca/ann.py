"""Two-tier approximate nearest-neighbor search over unit-norm vectors.

Tier one is spherical k-means: centroids sit on the unit sphere and
vectors are assigned by maximum cosine. Tier two scans the probed
clusters exhaustively. Probing all clusters reproduces exact search,
including tie-breaking, which is what the test oracle relies on.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .embed import EmbeddingVector
from .errors import EmptyIndex, TooFewVectors

MAX_ITERATIONS = 50
CONVERGENCE_EPS = 1e-6


@dataclass
class AnnIndex:
    """Immutable after build; rows of ``vectors`` are in ascending-id order
    so row order doubles as the similarity tie-break order."""

    centroids: np.ndarray  # C x D float32, unit-norm rows
    ids: list[str]  # row i of vectors belongs to ids[i]
    vectors: np.ndarray  # N x D float32, unit-norm rows
    assignments: dict[str, int]  # id -> cluster
    cluster_rows: list[np.ndarray]  # cluster -> row indices (ascending)
    build_seed: int

    @property
    def n_clusters(self) -> int:
        return int(self.centroids.shape[0])

    @property
    def size(self) -> int:
        return int(self.vectors.shape[0])

    @property
    def inverted_lists(self) -> list[list[tuple[str, np.ndarray]]]:
        """Cluster -> [(bug_id, vector), ...]; materialized on demand."""
        return [
            [(self.ids[r], self.vectors[r]) for r in rows] for rows in self.cluster_rows
        ]


def _stack(vectors: Mapping[str, EmbeddingVector]) -> tuple[list[str], np.ndarray]:
    ids = sorted(vectors)
    if not ids:
        raise EmptyIndex("no vectors to index or search")
    matrix = np.stack([np.asarray(vectors[i].components, dtype=np.float32) for i in ids])
    return ids, matrix


def _kmeans_pp_init(x: np.ndarray, c: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding with squared chord distance (2 - 2cos)."""
    n = x.shape[0]
    chosen = np.empty(c, dtype=np.int64)
    chosen[0] = rng.integers(n)
    d2 = np.maximum(0.0, 2.0 - 2.0 * (x @ x[chosen[0]]))
    for i in range(1, c):
        total = float(d2.sum())
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        chosen[i] = idx
        d2 = np.minimum(d2, np.maximum(0.0, 2.0 - 2.0 * (x @ x[idx])))
    return x[chosen].copy()


def _normalize_rows(m: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1)
    out = m.copy()
    degenerate = norms == 0.0
    out[degenerate] = fallback[degenerate]
    out[~degenerate] = m[~degenerate] / norms[~degenerate, None]
    return out


def build_index(
    vectors: Mapping[str, EmbeddingVector], n_clusters: int, seed: int
) -> AnnIndex:
    """Cluster the vectors with seeded spherical k-means.

    Runs k-means++ initialization then Lloyd iterations with cosine
    assignment, renormalizing centroids each round, for at most
    MAX_ITERATIONS or until the largest centroid movement drops below
    CONVERGENCE_EPS. Deterministic given (vectors, n_clusters, seed).
    """
    if n_clusters < 1:
        raise ValueError(f"cluster count must be >= 1, got {n_clusters}")
    ids, matrix32 = _stack(vectors)
    n = len(ids)
    if n < n_clusters:
        raise TooFewVectors(f"{n} vectors cannot fill {n_clusters} clusters")

    x = matrix32.astype(np.float64)
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(x, n_clusters, rng)

    assign = np.zeros(n, dtype=np.int64)
    for _ in range(MAX_ITERATIONS):
        sims = x @ centroids.T
        assign = np.argmax(sims, axis=1)
        counts = np.bincount(assign, minlength=n_clusters)
        # Re-seed empty clusters with the worst-fit points, one each,
        # picked deterministically and without reuse.
        if (counts == 0).any():
            fit = sims[np.arange(n), assign].copy()
            for cluster in np.flatnonzero(counts == 0):
                worst = int(np.argmin(fit))
                assign[worst] = cluster
                fit[worst] = np.inf
            counts = np.bincount(assign, minlength=n_clusters)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, x)
        new_centroids = _normalize_rows(sums, centroids)
        movement = float(np.linalg.norm(new_centroids - centroids, axis=1).max())
        centroids = new_centroids
        if movement < CONVERGENCE_EPS:
            break

    centroids32 = centroids.astype(np.float32)
    return _finish_index(ids, matrix32, centroids32, seed)


def _finish_index(
    ids: list[str], matrix32: np.ndarray, centroids32: np.ndarray, seed: int
) -> AnnIndex:
    """Final assignment against the stored float32 centroids, so a saved
    and reloaded index reproduces searches bit for bit."""
    sims = matrix32.astype(np.float64) @ centroids32.astype(np.float64).T
    assign = np.argmax(sims, axis=1)
    cluster_rows = [
        np.flatnonzero(assign == c) for c in range(centroids32.shape[0])
    ]
    assignments = {ids[i]: int(assign[i]) for i in range(len(ids))}
    return AnnIndex(
        centroids=centroids32,
        ids=ids,
        vectors=matrix32,
        assignments=assignments,
        cluster_rows=cluster_rows,
        build_seed=seed,
    )


def _rank_rows(
    scores: np.ndarray, rows: np.ndarray, k: int
) -> tuple[np.ndarray, np.ndarray]:
    """Order by descending score, ties by ascending row (= ascending id)."""
    order = np.lexsort((rows, -scores))[:k]
    return scores[order], rows[order]


def search(
    index: AnnIndex, query: EmbeddingVector, k: int, nprobe: int
) -> list[tuple[str, float]]:
    """Probe the nprobe closest centroids, scan their members by cosine.

    Returns up to k (id, score) pairs sorted by descending score with ties
    broken by ascending id; fewer than k when the probed clusters hold
    fewer members. nprobe equal to the cluster count gives exact search.
    """
    if index.size == 0:
        raise EmptyIndex("index holds no vectors")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not 1 <= nprobe <= index.n_clusters:
        raise ValueError(f"nprobe must be in [1, {index.n_clusters}], got {nprobe}")
    q = np.asarray(query.components, dtype=np.float64)
    centroid_scores = index.centroids.astype(np.float64) @ q
    centroid_order = np.lexsort(
        (np.arange(index.n_clusters), -centroid_scores)
    )[:nprobe]
    rows = np.concatenate([index.cluster_rows[c] for c in centroid_order])
    if rows.size == 0:
        return []
    scores = index.vectors[rows].astype(np.float64) @ q
    top_scores, top_rows = _rank_rows(scores, rows, k)
    return [(index.ids[r], float(s)) for s, r in zip(top_scores, top_rows)]


def exact_search(
    vectors: Mapping[str, EmbeddingVector], query: EmbeddingVector, k: int
) -> list[tuple[str, float]]:
    """Brute-force cosine over every vector; same ordering contract as
    search, used as the exactness oracle."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    ids, matrix32 = _stack(vectors)
    q = np.asarray(query.components, dtype=np.float64)
    scores = matrix32.astype(np.float64) @ q
    top_scores, top_rows = _rank_rows(scores, np.arange(len(ids)), k)
    return [(ids[r], float(s)) for s, r in zip(top_scores, top_rows)]


def default_cluster_count(n_vectors: int) -> int:
    """ceil(sqrt(N)) clusters; standard inverted-file sizing."""
    return max(1, int(np.ceil(np.sqrt(n_vectors))))


def default_nprobe(n_clusters: int) -> int:
    return max(1, int(np.ceil(n_clusters / 4)))
