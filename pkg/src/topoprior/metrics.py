"""Evaluation metrics: motif scores, latent-space summaries, routing, CSV.

The latent diagnostics quantify what the adversarial term is supposed to do:
per-domain centroids and silhouette describe clustering, and a freshly
trained domain probe measures how much domain identity is still decodable
from z.  Unseen-domain routing ranks training domains by cosine similarity
between the query's prior mean and the stored centroids.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import silhouette_score

from .embeddings import EmbeddingProvider
from .errors import ValidationError
from .evosim import perf
from .graphs import CollaborationGraph
from .model import TopoPriorModel


def motif_score(graph: CollaborationGraph,
                oracle_graph: CollaborationGraph) -> float:
    """Edge F1 between a generated graph and the oracle for its query.

    Same statistic the simulator uses as Perf, exposed without utility
    parameters so generator quality can be scored on its own.
    """
    return perf(graph, oracle_graph)


@dataclass
class LatentSummary:
    """Per-domain centroids plus two scalar separability diagnostics.

    ``centroids[i]`` belongs to ``domain_ids[i]``.  Silhouette uses
    Euclidean distances; probe_accuracy is the held-out accuracy of an
    affine softmax probe trained on an interleaved split.
    """

    domain_ids: tuple[int, ...]
    centroids: np.ndarray
    silhouette: float
    probe_accuracy: float

    def centroid(self, domain_id: int) -> np.ndarray:
        return self.centroids[self.domain_ids.index(domain_id)]


def _probe_accuracy(z: np.ndarray, domains: np.ndarray) -> float:
    # Even positions within each domain train the probe, odd evaluate it;
    # the split is deterministic so repeated calls agree exactly.
    train_idx, eval_idx = [], []
    for d in np.unique(domains):
        members = np.flatnonzero(domains == d)
        train_idx.extend(members[0::2])
        eval_idx.extend(members[1::2])
    train_idx = np.array(sorted(train_idx))
    eval_idx = np.array(sorted(eval_idx))
    probe = LogisticRegression(max_iter=1000)
    probe.fit(z[train_idx], domains[train_idx])
    return float(np.mean(probe.predict(z[eval_idx]) == domains[eval_idx]))


def latent_summary(z_samples, domain_ids) -> LatentSummary:
    """Summarize labelled latent samples; needs >= 2 domains, >= 10 each."""
    z = np.asarray(z_samples, dtype=np.float64)
    domains = np.asarray(domain_ids, dtype=np.int64)
    if z.ndim != 2 or z.shape[0] != domains.shape[0]:
        raise ValidationError(
            f"need matching (n, d) samples and n labels,"
            f" got {z.shape} and {domains.shape}")
    unique = np.unique(domains)
    if unique.size < 2:
        raise ValidationError("latent_summary needs at least two domains")
    counts = {int(d): int(np.sum(domains == d)) for d in unique}
    small = {d: c for d, c in counts.items() if c < 10}
    if small:
        raise ValidationError(
            f"every domain needs at least 10 samples, got {small}")
    centroids = np.stack([z[domains == d].mean(axis=0) for d in unique])
    return LatentSummary(
        domain_ids=tuple(int(d) for d in unique),
        centroids=centroids,
        silhouette=float(silhouette_score(z, domains, metric="euclidean")),
        probe_accuracy=_probe_accuracy(z, domains))


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def route_unseen(query: str, model: TopoPriorModel,
                 provider: EmbeddingProvider,
                 summary: LatentSummary) -> list[tuple[int, float]]:
    """Rank known domains by cosine between prior mean and centroids.

    Descending similarity, ties broken by ascending domain id; an all-zero
    prior mean yields similarity 0 for every domain.
    """
    query_vec = torch.as_tensor(
        provider.embed_query(query), dtype=torch.float64)
    with torch.no_grad():
        z_new = model.prior.mean(query_vec).numpy()
    scored = [(domain_id, _cosine(z_new, summary.centroid(domain_id)))
              for domain_id in summary.domain_ids]
    return sorted(scored, key=lambda pair: (-pair[1], pair[0]))


def pca_2d(z_samples) -> np.ndarray:
    """Top-2 principal-component projection, deterministic up to data.

    Each component's sign is fixed so its largest-magnitude loading is
    positive, which keeps repeated runs and library versions in agreement.
    """
    z = np.asarray(z_samples, dtype=np.float64)
    if z.size == 0:
        return np.zeros((0, 2))
    centered = z - z.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:2]
    if components.shape[0] < 2:
        components = np.vstack(
            [components, np.zeros((2 - components.shape[0], z.shape[1]))])
    for i in range(2):
        pivot = np.argmax(np.abs(components[i]))
        if components[i][pivot] < 0:
            components[i] = -components[i]
    return centered @ components.T


def write_latent_points(path, z_samples, domain_ids) -> np.ndarray:
    """Emit domain_id, pc1, pc2 rows; returns the projection."""
    z = np.asarray(z_samples, dtype=np.float64)
    domains = list(domain_ids)
    if len(domains) != z.shape[0] and z.size > 0:
        raise ValidationError("one domain label per sample required")
    projection = pca_2d(z)
    with open(path, "w", newline="") as fh:
        fh.write("domain_id,pc1,pc2\n")
        for d, row in zip(domains, projection):
            fh.write(f"{int(d)},{float(row[0])!r},{float(row[1])!r}\n")
    return projection


def write_centroid_similarity(path, rows) -> None:
    """Emit query_id, domain_id, cosine rows (empty input -> header only)."""
    with open(path, "w", newline="") as fh:
        fh.write("query_id,domain_id,cosine\n")
        for query_id, domain_id, cosine in rows:
            fh.write(f"{query_id},{int(domain_id)},{float(cosine)!r}\n")
