"""Clustering-quality evaluation against ground-truth physical states."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np


class DegenerateClusteringError(ValueError):
    """The Calinski-Harabasz index is undefined for this clustering."""


def nearest_prototype_assign(latents, prototypes, chunk: int = 512) -> np.ndarray:
    """Index of the Euclidean-nearest prototype per latent; ties go to the lower index."""
    latents = np.atleast_2d(np.asarray(latents, dtype=np.float64))
    prototypes = np.atleast_2d(np.asarray(prototypes, dtype=np.float64))
    if len(prototypes) == 0:
        raise ValueError("empty prototype set")
    out = np.empty(len(latents), dtype=np.int64)
    for start in range(0, len(latents), chunk):
        block = latents[start:start + chunk]
        # direct differences rather than the expanded form, so exact ties stay exact
        sq = np.sum((block[:, None, :] - prototypes[None, :, :]) ** 2, axis=2)
        out[start:start + chunk] = np.argmin(sq, axis=1)
    return out


@dataclass
class ChReport:
    ch: float
    sizes: dict
    k: int
    n: int
    between: float
    within: float


def ch_index(points, assignment) -> ChReport:
    """Calinski-Harabasz index of ``points`` grouped by ``assignment``.

    CH = [sum_k n_k |C_k - C|^2 / sum_k sum_{i in k} |x_i - C_k|^2] * (N - K) / (K - 1),
    where K counts the nonempty clusters only.

    Raises:
        DegenerateClusteringError: fewer than two nonempty clusters, N <= K,
            or all points identical.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    labels = np.asarray(assignment)
    if len(labels) != len(x):
        raise ValueError("one cluster index per point is required")
    clusters, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    k, n = len(clusters), len(x)
    if k < 2:
        raise DegenerateClusteringError("need at least two nonempty clusters")
    if n <= k:
        raise DegenerateClusteringError("need more points than clusters")
    centroid = x.mean(axis=0)
    sums = np.zeros((k, x.shape[1]))
    np.add.at(sums, inverse, x)
    centers = sums / counts[:, None]
    between = float(np.sum(counts * np.sum((centers - centroid) ** 2, axis=1)))
    within = float(np.sum((x - centers[inverse]) ** 2))
    if within == 0.0:
        if between == 0.0:
            raise DegenerateClusteringError("all points are identical")
        ch = float("inf")
    else:
        ch = between / within * (n - k) / (k - 1)
    sizes = {int(c): int(m) for c, m in zip(clusters, counts)}
    return ChReport(ch, sizes, k, n, between, within)


@dataclass
class CoherenceReport:
    """Spread of Monte-Carlo returns inside each cluster."""

    means: dict = field(default_factory=dict)
    spreads: dict = field(default_factory=dict)    # max pairwise |return difference|
    sizes: dict = field(default_factory=dict)
    skipped: list = field(default_factory=list)    # requested clusters with no members

    @property
    def median_spread(self) -> float:
        return float(np.median(list(self.spreads.values())))

    @property
    def max_between_gap(self) -> float:
        means = list(self.means.values())
        return float(max(means) - min(means)) if means else 0.0


def cluster_reward_coherence(returns, assignment, n_clusters: int | None = None) -> CoherenceReport:
    returns = np.asarray(returns, dtype=np.float64)
    labels = np.asarray(assignment)
    if len(labels) != len(returns):
        raise ValueError("one cluster index per return is required")
    report = CoherenceReport()
    ids = range(n_clusters) if n_clusters is not None else np.unique(labels)
    for c in ids:
        members = returns[labels == c]
        if len(members) == 0:
            report.skipped.append(int(c))
            continue
        report.means[int(c)] = float(members.mean())
        report.spreads[int(c)] = float(members.max() - members.min())
        report.sizes[int(c)] = len(members)
    return report


def embedding_header(latent_dim: int) -> list:
    return [f"z{i}" for i in range(latent_dim)] + ["task_label", "distractor_label", "cluster"]


def export_embeddings(latents, task_labels, distractor_labels, clusters, path) -> None:
    """CSV: latent coordinates, task-state label, distractor label, cluster index."""
    latents = np.atleast_2d(np.asarray(latents, dtype=np.float64))
    n, d = latents.shape
    if not (len(task_labels) == len(distractor_labels) == len(clusters) == n):
        raise ValueError("labels and clusters must have one entry per latent")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(embedding_header(d))
        for z, t, s, c in zip(latents, task_labels, distractor_labels, clusters):
            writer.writerow([repr(float(v)) for v in z] + [int(t), int(s), int(c)])


def read_embeddings(path: str | os.PathLike):
    """Inverse of :func:`export_embeddings`: ``(latents, task, distractor, cluster)``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    d = len(header) - 3
    latents = np.array([[float(v) for v in row[:d]] for row in body]).reshape(len(body), d)
    ints = np.array([[int(v) for v in row[d:]] for row in body], dtype=np.int64).reshape(len(body), 3)
    return latents, ints[:, 0], ints[:, 1], ints[:, 2]
