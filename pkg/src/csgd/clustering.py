"""Filter clustering: k-means, even and imbalanced schemes, plus propagation
of pacesetter clusters onto constrained followers."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .model import ConstraintGroup, NetworkSpec, infer_shapes

Clusters = list[list[int]]


class ClusteringError(ValueError):
    pass


@dataclass
class ClusterAssignment:
    """Per-layer partition of filter indices; layers absent are unclustered."""

    layers: dict[str, Clusters] = field(default_factory=dict)

    def __contains__(self, layer_id: str) -> bool:
        return layer_id in self.layers

    def __getitem__(self, layer_id: str) -> Clusters:
        return self.layers[layer_id]

    def __setitem__(self, layer_id: str, clusters: Clusters) -> None:
        self.layers[layer_id] = canonical(clusters)

    def lookup(self, layer_id: str) -> list[int]:
        """``lookup(l)[j]`` is the index of the cluster holding filter j."""
        clusters = self.layers[layer_id]
        owner = [0] * sum(len(h) for h in clusters)
        for k, h in enumerate(clusters):
            for j in h:
                owner[j] = k
        return owner

    def cluster_of(self, layer_id: str, j: int) -> list[int]:
        return self.layers[layer_id][self.lookup(layer_id)[j]]

    def copy(self) -> "ClusterAssignment":
        return ClusterAssignment({k: [list(h) for h in v] for k, v in self.layers.items()})

    def to_dict(self) -> dict[str, Clusters]:
        return {k: [list(h) for h in v] for k, v in self.layers.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ClusterAssignment":
        out = cls()
        for k, v in d.items():
            out[k] = [[int(j) for j in h] for h in v]
        return out

    def __eq__(self, other) -> bool:
        return isinstance(other, ClusterAssignment) and self.to_dict() == other.to_dict()


def canonical(clusters: Sequence[Sequence[int]]) -> Clusters:
    """Sort indices inside clusters and clusters by their smallest member."""
    return sorted((sorted(int(j) for j in h) for h in clusters), key=lambda h: h[0] if h else -1)


def check_partition(clusters: Clusters, c: int, r: Optional[int] = None) -> None:
    flat = [j for h in clusters for j in h]
    if any(len(h) == 0 for h in clusters):
        raise ClusteringError("empty cluster")
    if sorted(flat) != list(range(c)):
        raise ClusteringError(f"clusters do not partition range({c}): {clusters}")
    if r is not None and len(clusters) != r:
        raise ClusteringError(f"expected {r} clusters, got {len(clusters)}")


def _check_target(c: int, r: int) -> None:
    if not 1 <= r <= c:
        raise ClusteringError(f"target cluster count {r} must lie in [1, {c}]")


def even_clusters(c: int, r: int) -> Clusters:
    """Contiguous blocks of at most ceil(c/r) filters, larger blocks first."""
    _check_target(c, r)
    base, extra = divmod(c, r)
    out, start = [], 0
    for k in range(r):
        size = base + (1 if k < extra else 0)
        out.append(list(range(start, start + size)))
        start += size
    return out


def imbalanced_clusters(c: int, r: int) -> Clusters:
    """One cluster of c - r + 1 filters, the rest singletons."""
    _check_target(c, r)
    big = c - r + 1
    return [list(range(big))] + [[j] for j in range(big, c)]


# --------------------------------------------------------------------------
# k-means


@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    objectives: list[float]


def _sq_dists(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)


def kmeans_plusplus(x: np.ndarray, r: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centroids = [x[rng.integers(n)]]
    d2 = ((x - centroids[0]) ** 2).sum(axis=1)
    for _ in range(1, r):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            idx = int(rng.integers(n))
        centroids.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return np.array(centroids)


def _repair_empty(x, labels, centroids, r):
    """Give each empty cluster the point farthest from its own centroid."""
    for k in range(r):
        if np.any(labels == k):
            continue
        sizes = np.bincount(labels, minlength=r)
        movable = sizes[labels] > 1
        cost = ((x - centroids[labels]) ** 2).sum(axis=1)
        cost = np.where(movable, cost, -1.0)
        p = int(np.argmax(cost))  # lowest index among ties
        labels[p] = k
        centroids[k] = x[p]
    return labels, centroids


def lloyd(x: np.ndarray, r: int, seed: int = 0, max_iters: int = 100) -> KMeansResult:
    """Lloyd iterations from k-means++ seeds on the rows of ``x``.

    Ties go to the lower-indexed centroid; empty clusters are reseeded so every
    returned cluster is nonempty. ``objectives`` holds the within-cluster sum of
    squares after each iteration.
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    _check_target(n, r)
    rng = np.random.default_rng(seed)
    centroids = kmeans_plusplus(x, r, rng)
    labels = np.full(n, -1)
    objectives = []
    for _ in range(max_iters):
        new = np.argmin(_sq_dists(x, centroids), axis=1)
        new, centroids = _repair_empty(x, new, centroids, r)
        for k in range(r):
            centroids[k] = x[new == k].mean(axis=0)
        objectives.append(float(((x - centroids[new]) ** 2).sum()))
        if np.array_equal(new, labels):
            break
        labels = new
    return KMeansResult(labels, centroids, objectives)


def kmeans_clusters(kernel: np.ndarray, r: int, seed: int = 0, max_iters: int = 100) -> Clusters:
    """Cluster the filters of ``kernel`` ([u,v,c_in,c]) on their flattened weights."""
    kernel = np.asarray(kernel)
    c = kernel.shape[-1]
    _check_target(c, r)
    if r == c:
        return [[j] for j in range(c)]
    feats = kernel.reshape(-1, c).T
    labels = lloyd(feats, r, seed, max_iters).labels
    return canonical([np.flatnonzero(labels == k).tolist() for k in range(r)])


SCHEMES = ("kmeans", "even", "imbalanced")


def cluster_layer(scheme: str, kernel: np.ndarray, r: int, seed: int = 0) -> Clusters:
    c = kernel.shape[-1]
    if scheme == "kmeans":
        return kmeans_clusters(kernel, r, seed)
    if scheme == "even":
        return even_clusters(c, r)
    if scheme == "imbalanced":
        return imbalanced_clusters(c, r)
    raise ClusteringError(f"unknown clustering scheme {scheme!r}")


# --------------------------------------------------------------------------
# propagation


def propagate_clusters(groups: Sequence[ConstraintGroup], assignment: ClusterAssignment,
                       spec: Optional[NetworkSpec] = None) -> ClusterAssignment:
    """Copy each pacesetter's clusters onto its followers.

    Residual followers receive the pacesetter's clusters verbatim. A dense-bn
    follower's partition is assembled from every pacesetter feeding it, shifted
    by the channel offset; uncovered channels stay singletons. ``spec`` is
    required when dense-bn groups are present (it supplies bn widths).
    """
    out = assignment.copy()
    dense: dict[str, list[list[int]]] = {}
    for g in groups:
        if g.pacesetter not in assignment:
            raise ClusteringError(f"pacesetter {g.pacesetter} has no clusters")
        base = assignment[g.pacesetter]
        if g.kind == "residual-stem":
            for f in g.followers:
                out[f] = [list(h) for h in base]
        else:
            for f, off in zip(g.followers, g.offsets):
                dense.setdefault(f, []).extend([[j + off for j in h] for h in base])
    if dense:
        if spec is None:
            raise ClusteringError("dense-bn propagation needs the network spec for widths")
        shapes = infer_shapes(spec)
        for f, clusters in dense.items():
            width = shapes[f][-1]
            covered = {j for h in clusters for j in h}
            full = clusters + [[j] for j in range(width) if j not in covered]
            check_partition(canonical(full), width)
            out[f] = full
    return out


def clusterable_layers(spec: NetworkSpec, groups: Sequence[ConstraintGroup]) -> list[str]:
    """Conv layers clustered directly (every conv that is not a follower)."""
    followers = {f for g in groups for f in g.followers}
    return [lid for lid in spec.conv_ids() if lid not in followers]


def target_widths(spec: NetworkSpec, ratio: float, layers: Sequence[str],
                  overrides: Optional[dict[str, int]] = None) -> dict[str, int]:
    """Per-layer cluster counts: ``ratio`` of the width unless overridden."""
    overrides = overrides or {}
    out = {}
    for lid in layers:
        c = spec.layer(lid).filters
        r = overrides.get(lid, c * ratio)
        if isinstance(r, float):
            if abs(r - round(r)) > 1e-9:
                r = math.ceil(r)
            r = int(round(r))
        out[lid] = max(1, min(c, int(r)))
    for lid in overrides:
        if lid not in out:
            raise ClusteringError(f"target for {lid!r}, which is not a clusterable conv layer")
    return out


def build_assignment(model, scheme: str, targets: dict[str, int], groups: Sequence[ConstraintGroup],
                     seed: int = 0) -> ClusterAssignment:
    """Cluster every targeted layer, then propagate to followers."""
    assignment = ClusterAssignment()
    for k, (lid, r) in enumerate(targets.items()):
        kernel = model.params[lid]["kernel"].data
        c = kernel.shape[-1]
        if r > c:
            raise ClusteringError(f"{lid}: target {r} exceeds width {c}")
        assignment[lid] = cluster_layer(scheme, kernel, r, seed + k)
    for g in groups:
        if g.pacesetter not in assignment:
            c = model.spec.layer(g.pacesetter).filters
            assignment[g.pacesetter] = [[j] for j in range(c)]
    return propagate_clusters(groups, assignment, model.spec)
