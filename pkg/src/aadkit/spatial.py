"""Clustering analysis of learned spatial-projection filters.

Each trained model contributes one spatial filter per feature channel (the
stem's incoming weights over electrodes). Filters are grouped per subject
with k-means (sign-aligned, unit-normalized), then subject centroids are
merged across subjects by average-linkage agglomerative clustering under a
sign-invariant cosine distance. The "first" global cluster is the one with
the most members.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial.distance import squareform

from .checkpoint import Checkpoint
from .errors import ConfigurationError, DegenerateInputError

log = None  # clustering is pure; no logging needed


@dataclass
class SpatialFilter:
    """One stem output channel's incoming electrode weights."""

    weights: np.ndarray
    subject_id: str
    fold_id: int

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if not np.isfinite(self.weights).all() or np.linalg.norm(self.weights) == 0:
            raise DegenerateInputError("spatial filter must be finite and nonzero")


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DegenerateInputError("cosine similarity of a zero vector")
    return float(u @ v / (nu * nv))


def _as_matrix(filters) -> np.ndarray:
    rows = [f.weights if isinstance(f, SpatialFilter) else np.asarray(f, float)
            for f in filters]
    x = np.asarray(rows, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0):
        raise DegenerateInputError("zero-norm filter in clustering input")
    return x / norms[:, None]


@dataclass
class KMeansResult:
    centroids: np.ndarray          # (k, C), recomputed after sign alignment
    labels: np.ndarray             # (n,)
    inertia: float
    inertia_history: List[float]   # per Lloyd iteration of the winning restart
    aligned: np.ndarray            # sign-aligned unit filters


def _lloyd(x: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = 100):
    n = len(x)
    centroids = x[rng.choice(n, size=k, replace=False)].copy()
    labels = np.full(n, -1)
    history: List[float] = []
    for _ in range(max_iter):
        d2 = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_labels = np.argmin(d2, axis=1)
        # empty clusters re-seed from the point farthest from its centroid
        for c in range(k):
            if not np.any(new_labels == c):
                residuals = d2[np.arange(n), new_labels]
                far = int(np.argmax(residuals))
                centroids[c] = x[far]
                new_labels[far] = c
                d2[:, c] = ((x - centroids[c]) ** 2).sum(axis=1)
        for c in range(k):
            centroids[c] = x[new_labels == c].mean(axis=0)
        d2 = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        inertia = float(d2[np.arange(n), new_labels].sum())
        history.append(inertia)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return centroids, labels, history[-1], history


def kmeans_subject(filters, k: int = 4, seed: int = 0, restarts: int = 20,
                   max_iter: int = 100) -> KMeansResult:
    """Cluster one subject's unit-normalized filters; best of `restarts`
    seeded Lloyd runs by inertia, then sign-align members to centroids."""
    x = _as_matrix(filters)
    if len(x) < k:
        raise ConfigurationError(f"need at least {k} filters, got {len(x)}")
    streams = np.random.SeedSequence(seed).spawn(restarts)
    best = None
    for r in range(restarts):
        rng = np.random.default_rng(streams[r])
        centroids, labels, inertia, history = _lloyd(x, k, rng, max_iter)
        if best is None or inertia < best[2] - 1e-15:
            best = (centroids, labels, inertia, history)
    centroids, labels, inertia, history = best
    flips = np.ones(len(x))
    for i in range(len(x)):
        if x[i] @ centroids[labels[i]] < 0:
            flips[i] = -1.0
    aligned = x * flips[:, None]
    final = np.stack([aligned[labels == c].mean(axis=0) for c in range(k)])
    return KMeansResult(centroids=final, labels=labels, inertia=inertia,
                        inertia_history=history, aligned=aligned)


@dataclass
class HierResult:
    labels: np.ndarray               # cluster index per input, 0 = largest
    clusters: List[List[int]]        # member indices, descending size
    centroids: np.ndarray            # sign-aligned means, one per cluster


def _cluster_signature(x: np.ndarray, members: List[int]):
    """Permutation-invariant, sign-invariant sort key for tie-breaking."""
    return sorted(tuple(np.round(np.abs(x[m]), 9)) for m in members)


def _aligned_mean(x: np.ndarray, members: List[int]) -> np.ndarray:
    sigs = [tuple(np.round(np.abs(x[m]), 12)) for m in members]
    ref = x[members[int(np.argmax([s for s in sigs]))]] if False else None
    # reference member: the one with the lexicographically largest
    # absolute-value signature (stable under input permutation)
    ref_idx = members[max(range(len(members)), key=lambda i: sigs[i])]
    ref = x[ref_idx]
    acc = np.zeros_like(ref)
    for m in members:
        v = x[m]
        acc += v if v @ ref >= 0 else -v
    return acc / len(members)


def hier_cluster(centroids, n_clusters: int = 3) -> HierResult:
    """Average-linkage agglomerative clustering under the sign-invariant
    cosine distance 1 - |cos|; clusters are ordered by descending size."""
    x = _as_matrix(centroids)
    if len(x) < n_clusters:
        raise ConfigurationError(
            f"need at least {n_clusters} centroids, got {len(x)}")
    sim = np.abs(x @ x.T)
    dist = np.clip(1.0 - sim, 0.0, None)
    np.fill_diagonal(dist, 0.0)
    z = linkage(squareform(dist, checks=False), method="average")
    raw = fcluster(z, t=n_clusters, criterion="maxclust")
    groups: Dict[int, List[int]] = {}
    for i, lab in enumerate(raw):
        groups.setdefault(int(lab), []).append(i)
    ordered = sorted(groups.values(),
                     key=lambda ms: (-len(ms), _cluster_signature(x, ms)))
    labels = np.empty(len(x), dtype=int)
    cents = []
    for rank, members in enumerate(ordered):
        for m in members:
            labels[m] = rank
        cents.append(_aligned_mean(x, members))
    return HierResult(labels=labels, clusters=[list(m) for m in ordered],
                      centroids=np.stack(cents))


def stem_filters(checkpoint: Checkpoint, fold_id: int = 0) -> List[SpatialFilter]:
    """All spatial-projection filters of one trained model (one per stem
    output channel)."""
    if "eeg_stem.weight" not in checkpoint.arrays:
        raise ConfigurationError("checkpoint has no spatial-projection stem")
    w = checkpoint.arrays["eeg_stem.weight"]  # (features, channels, 1)
    subject = str(checkpoint.metadata.get("subject", "unknown"))
    fold = int(checkpoint.metadata.get("fold", fold_id))
    return [SpatialFilter(weights=w[i, :, 0], subject_id=subject, fold_id=fold)
            for i in range(w.shape[0])]


@dataclass
class ClusterReport:
    per_subject: Dict[str, KMeansResult]
    global_clusters: HierResult
    subject_centroid_owner: List[str]

    @property
    def first_cluster_centroid(self) -> np.ndarray:
        return self.global_clusters.centroids[0]


def cluster_filters(filters: Sequence[SpatialFilter], k: int = 4,
                    n_global: int = 3, seed: int = 0) -> ClusterReport:
    """Per-subject k-means followed by cross-subject agglomeration."""
    by_subject: Dict[str, List[SpatialFilter]] = {}
    for f in filters:
        by_subject.setdefault(f.subject_id, []).append(f)
    per_subject = {}
    stacked = []
    owners = []
    for subject in sorted(by_subject):
        res = kmeans_subject(by_subject[subject], k=k, seed=seed)
        per_subject[subject] = res
        for c in res.centroids:
            stacked.append(c)
            owners.append(subject)
    global_clusters = hier_cluster(stacked, n_clusters=n_global)
    return ClusterReport(per_subject=per_subject,
                         global_clusters=global_clusters,
                         subject_centroid_owner=owners)


def write_centroid_csv(path, centroid: np.ndarray) -> None:
    """Centroid as (channel, weight) rows for external topographic plotting."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["channel", "weight"])
        for i, w in enumerate(np.asarray(centroid, dtype=np.float64)):
            writer.writerow([i, f"{w:.9g}"])
