"""Centripetal SGD, its redundancy metrics, and the comparison baselines.

Kernels are handled in matrix form: ``K`` of shape [u, v, c_in, c] is viewed
as ``W`` of shape [u*v*c_in, c] so that column j is filter j. Vector
parameters (gamma, beta) are viewed as [1, c].
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .clustering import ClusterAssignment, Clusters
from .model import Model
from .tensor import DTYPE, Tensor

DEFAULT_LR = 3e-2
DEFAULT_WEIGHT_DECAY = 1e-4
DEFAULT_CENTRIPETAL = 3e-3


@dataclass
class CsgdConfig:
    lr: float = DEFAULT_LR
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    centripetal: float = DEFAULT_CENTRIPETAL
    # (epoch, lr) pairs; the last pair whose epoch <= current epoch wins
    schedule: list[tuple[int, float]] = field(default_factory=list)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.weight_decay < 0 or self.centripetal < 0:
            raise ValueError("weight decay and centripetal strength must be non-negative")
        self.schedule = [(int(e), float(v)) for e, v in self.schedule]
        epochs = [e for e, _ in self.schedule]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ValueError(f"schedule epochs must increase strictly: {epochs}")
        if any(v <= 0 for _, v in self.schedule):
            raise ValueError("scheduled learning rates must be positive")

    def lr_at(self, epoch: int) -> float:
        lr = self.lr
        for e, v in self.schedule:
            if e <= epoch:
                lr = v
        return lr


def step_schedule(lr: float, epochs: int) -> list[tuple[int, float]]:
    """Multiply by 0.1 at 1/2 and 3/4 of the budget."""
    if epochs < 2:
        return []
    half, late = epochs // 2, (3 * epochs) // 4
    out = [(half, lr * 0.1)]
    if late > half:
        out.append((late, lr * 0.01))
    return out


# --------------------------------------------------------------------------
# matrices


def build_gamma(clusters: Clusters, c: Optional[int] = None) -> np.ndarray:
    """Averaging matrix: 1/|H| between members of one cluster, else 0."""
    c = c if c is not None else sum(len(h) for h in clusters)
    g = np.zeros((c, c), dtype=DTYPE)
    for h in clusters:
        idx = np.asarray(h)
        g[np.ix_(idx, idx)] = DTYPE(1.0 / len(h))
    return g


def build_lambda(clusters: Clusters, eta: float, eps: float, c: Optional[int] = None) -> np.ndarray:
    """Decaying matrix: eta + eps - eps/|H| on the diagonal, -eps/|H| within a cluster."""
    c = c if c is not None else sum(len(h) for h in clusters)
    lam = np.zeros((c, c), dtype=np.float64)
    for h in clusters:
        idx = np.asarray(h)
        lam[np.ix_(idx, idx)] = -eps / len(h)
        for m in h:
            lam[m, m] = eta + eps - eps / len(h)
    return lam.astype(DTYPE)


def csgd_step_matrix(w: np.ndarray, grad: np.ndarray, gamma: np.ndarray, lam: np.ndarray,
                     lr: float) -> np.ndarray:
    """W - lr * (dL/dW @ Gamma + W @ Lambda)."""
    if w.shape != grad.shape or w.shape[-1] != gamma.shape[0] or gamma.shape != lam.shape:
        raise ValueError(f"shape mismatch: W {w.shape}, grad {grad.shape}, "
                         f"Gamma {gamma.shape}, Lambda {lam.shape}")
    step = grad @ gamma
    step = step + w @ lam
    return w - DTYPE(lr) * step


def csgd_step_naive(filters: np.ndarray, grads: np.ndarray, clusters: Clusters, lr: float,
                    eta: float, eps: float) -> np.ndarray:
    """Per-filter update written out filter by filter (last axis indexes filters)."""
    filters = np.asarray(filters, dtype=DTYPE)
    grads = np.asarray(grads, dtype=DTYPE)
    out = np.empty_like(filters)
    for h in clusters:
        mean_grad = sum(grads[..., k] for k in h) / DTYPE(len(h))
        center = sum(filters[..., k] for k in h) / DTYPE(len(h))
        for j in h:
            f = filters[..., j]
            delta = -mean_grad - DTYPE(eta) * f + DTYPE(eps) * (center - f)
            out[..., j] = f + DTYPE(lr) * delta
    return out


def sgd_step(w: np.ndarray, grad: np.ndarray, lr: float, eta: float) -> np.ndarray:
    return w - DTYPE(lr) * (grad + w * DTYPE(eta))


# --------------------------------------------------------------------------
# metrics


def cluster_deviation_sq(kernel: np.ndarray, clusters: Clusters) -> float:
    w = np.asarray(kernel, dtype=np.float64).reshape(-1, kernel.shape[-1])
    total = 0.0
    for h in clusters:
        if len(h) < 2:
            continue
        block = w[:, h]
        total += float(((block - block.mean(axis=1, keepdims=True)) ** 2).sum())
    return total


def chi(model: Model, assignment: ClusterAssignment) -> float:
    """Sum over clustered conv layers of squared kernel distances to cluster means."""
    total = 0.0
    for lid, clusters in assignment.layers.items():
        p = model.params.get(lid, {})
        if "kernel" in p:
            total += cluster_deviation_sq(p["kernel"].data, clusters)
    return total


def phi(model: Model, prune_sets: dict[str, Sequence[int]]) -> float:
    """Sum over layers of squared norms of the to-be-pruned kernels."""
    total = 0.0
    for lid, idx in prune_sets.items():
        if len(idx) == 0:
            continue
        k = np.asarray(model.params[lid]["kernel"].data, dtype=np.float64)
        total += float((k[..., list(idx)] ** 2).sum())
    return total


def max_cluster_deviation(model: Model, assignment: ClusterAssignment,
                          names: Iterable[str] = ("kernel", "gamma", "beta")) -> float:
    """Largest |value - cluster mean| over the given parameter names."""
    worst = 0.0
    for lid, clusters in assignment.layers.items():
        p = model.params.get(lid, {})
        for name in names:
            if name not in p:
                continue
            a = np.asarray(p[name].data, dtype=np.float64)
            w = a.reshape(-1, a.shape[-1])
            for h in clusters:
                if len(h) < 2:
                    continue
                block = w[:, h]
                worst = max(worst, float(np.abs(block - block.mean(axis=1, keepdims=True)).max()))
    return worst


# --------------------------------------------------------------------------
# baselines


def group_lasso_step(filters: np.ndarray, grads: np.ndarray, prune_set: Sequence[int], lr: float,
                     eta: float, strength: float) -> np.ndarray:
    """SGD step plus the group-Lasso subgradient strength * K_j / ||K_j|| for j in the prune set."""
    w = np.asarray(filters, dtype=DTYPE).reshape(-1, filters.shape[-1])
    g = np.asarray(grads, dtype=DTYPE).reshape(w.shape).copy()
    if strength and len(prune_set):
        idx = list(prune_set)
        norms = np.linalg.norm(w[:, idx], axis=0)
        safe = np.where(norms > 0, norms, 1)
        g[:, idx] += DTYPE(strength) * np.where(norms > 0, w[:, idx] / safe, 0)
    return sgd_step(w, g, lr, eta).reshape(filters.shape)


def magnitude_remaining_set(kernel: np.ndarray, r: int) -> list[int]:
    """Indices of the r filters with the largest l1 norm, ascending; ties favour lower indices."""
    kernel = np.asarray(kernel)
    c = kernel.shape[-1]
    if not 0 <= r <= c:
        raise ValueError(f"remaining count {r} must lie in [0, {c}]")
    l1 = np.abs(kernel.reshape(-1, c).astype(np.float64)).sum(axis=0)
    order = sorted(range(c), key=lambda j: (-l1[j], j))
    return sorted(order[:r])


# --------------------------------------------------------------------------
# optimizers over a model


def _as_matrix(t: Tensor) -> tuple[int, ...]:
    return (-1, t.shape[-1]) if t.ndim > 1 else (1, t.shape[0])


class SGD:
    """Plain SGD with L2 weight decay on every trainable tensor."""

    def __init__(self, model: Model, weight_decay: float = DEFAULT_WEIGHT_DECAY):
        self.model = model
        self.weight_decay = weight_decay

    def step(self, grads: dict[Tensor, np.ndarray], lr: float) -> None:
        for _, _, t in self.model.trainable():
            g = grads.get(t)
            if g is not None:
                t.data = sgd_step(t.data, g, lr, self.weight_decay)


class CentripetalSGD:
    """C-SGD over every conv/bn layer of a model; the classifier uses plain SGD.

    Layers absent from the assignment are treated as all-singleton clusters,
    which reduces their update to SGD with weight decay.
    """

    def __init__(self, model: Model, assignment: ClusterAssignment,
                 weight_decay: float = DEFAULT_WEIGHT_DECAY, centripetal: float = DEFAULT_CENTRIPETAL):
        self.model = model
        self.assignment = assignment
        self.weight_decay = weight_decay
        self.centripetal = centripetal
        self.matrices: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        for layer in model.spec.layers:
            if layer.kind not in ("conv", "bn"):
                continue
            c = model.width(layer.id)
            clusters = assignment.layers.get(layer.id) or [[j] for j in range(c)]
            self.matrices[layer.id] = (build_gamma(clusters, c),
                                       build_lambda(clusters, weight_decay, centripetal, c))

    def step(self, grads: dict[Tensor, np.ndarray], lr: float) -> None:
        for lid, _, t in self.model.trainable():
            g = grads.get(t)
            if g is None:
                continue
            if lid in self.matrices:
                gamma, lam = self.matrices[lid]
                shape = _as_matrix(t)
                w = csgd_step_matrix(t.data.reshape(shape), g.reshape(shape), gamma, lam, lr)
                t.data = w.reshape(t.shape)
            else:
                t.data = sgd_step(t.data, g, lr, self.weight_decay)


class GroupLassoSGD:
    """SGD plus a group-Lasso penalty on the kernels listed in ``prune_sets``."""

    def __init__(self, model: Model, prune_sets: dict[str, Sequence[int]], strength: float,
                 weight_decay: float = DEFAULT_WEIGHT_DECAY):
        self.model = model
        self.prune_sets = {k: list(v) for k, v in prune_sets.items()}
        self.strength = strength
        self.weight_decay = weight_decay

    def step(self, grads: dict[Tensor, np.ndarray], lr: float) -> None:
        for lid, name, t in self.model.trainable():
            g = grads.get(t)
            if g is None:
                continue
            if name == "kernel" and lid in self.prune_sets:
                t.data = group_lasso_step(t.data, g, self.prune_sets[lid], lr, self.weight_decay,
                                          self.strength)
            else:
                t.data = sgd_step(t.data, g, lr, self.weight_decay)


def lasso_strength_for(model: Model, grads: dict[Tensor, np.ndarray],
                       prune_sets: dict[str, Sequence[int]], fraction: float = 0.1) -> float:
    """Strength whose penalty gradient norm is ``fraction`` of the task gradient norm."""
    task = 0.0
    count = 0
    for lid, idx in prune_sets.items():
        t = model.params[lid]["kernel"]
        g = grads.get(t)
        if g is not None:
            task += float((np.asarray(g, dtype=np.float64) ** 2).sum())
        count += len(idx)
    if count == 0:
        return 0.0
    # each penalised filter contributes a unit-norm direction scaled by the strength
    return fraction * np.sqrt(task) / np.sqrt(count)
