"""Turn a model with identical filters into a narrower, equivalent one.

Trimming walks the graph once, tracking for every node which original
channels survive and which original channels were folded into each survivor.
A consumer conv (or the classifier) then sums the input slices of every folded
group into the survivor's slot, which is exact when the folded channels carry
identical values.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .clustering import ClusterAssignment, Clusters, canonical
from .model import INPUT, Model, make_params, predict, with_widths
from .tensor import DTYPE

DEFAULT_SNAP_TOLERANCE = 1e-3
FIVE_TUPLE = ("kernel", "mu", "sigma", "gamma", "beta")


class TrimError(ValueError):
    pass


class LossyTrimWarning(UserWarning):
    pass


@dataclass
class TrimPlan:
    """Per layer: surviving filters and where each removed filter is folded."""

    remaining: dict[str, list[int]] = field(default_factory=dict)
    merge: dict[str, dict[int, int]] = field(default_factory=dict)
    dropped: dict[str, list[int]] = field(default_factory=dict)

    def groups(self, layer_id: str) -> list[list[int]]:
        """Survivor-first channel groups in output order."""
        members = {k: [k] for k in self.remaining[layer_id]}
        for j, leader in sorted(self.merge.get(layer_id, {}).items()):
            members[leader].append(j)
        return [members[k] for k in self.remaining[layer_id]]

    def to_dict(self) -> dict:
        return {
            "remaining": self.remaining,
            "merge": {k: {str(j): v for j, v in m.items()} for k, m in self.merge.items()},
            "dropped": self.dropped,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrimPlan":
        return cls(
            remaining={k: list(v) for k, v in d.get("remaining", {}).items()},
            merge={k: {int(j): int(v) for j, v in m.items()} for k, m in d.get("merge", {}).items()},
            dropped={k: list(v) for k, v in d.get("dropped", {}).items()},
        )


def select_remaining(assignment: ClusterAssignment) -> TrimPlan:
    """Keep the smallest index of every cluster."""
    plan = TrimPlan()
    for lid, clusters in assignment.layers.items():
        clusters = canonical(clusters)
        plan.remaining[lid] = [h[0] for h in clusters]
        plan.merge[lid] = {j: h[0] for h in clusters for j in h[1:]}
    return plan


def drop_plan(remaining_sets: dict[str, Sequence[int]], widths: dict[str, int]) -> TrimPlan:
    """Plan that deletes every filter outside the remaining sets, folding nothing."""
    plan = TrimPlan()
    for lid, keep in remaining_sets.items():
        keep = sorted(int(j) for j in keep)
        plan.remaining[lid] = keep
        plan.merge[lid] = {}
        plan.dropped[lid] = [j for j in range(widths[lid]) if j not in set(keep)]
    return plan


# --------------------------------------------------------------------------
# primitives


TRAINABLE = ("kernel", "gamma", "beta")


def snap_clusters(model: Model, assignment: ClusterAssignment,
                  tolerance: float = DEFAULT_SNAP_TOLERANCE) -> tuple[Model, float]:
    """Set every parameter of every clustered filter to its cluster mean.

    Returns the snapped copy and the largest pre-snap deviation from a cluster
    mean; warns with :class:`LossyTrimWarning` when that exceeds ``tolerance``.
    The deviation covers the trainable parameters only. Running statistics are
    moving averages that lag the kernels; they are snapped but not gated.
    """
    out = model.copy()
    worst = 0.0
    for lid, clusters in assignment.layers.items():
        params = out.params.get(lid)
        if params is None:
            raise TrimError(f"assignment names unknown layer {lid!r}")
        for name in FIVE_TUPLE:
            if name not in params:
                continue
            t = params[name]
            a = t.data.astype(np.float64)
            w = a.reshape(-1, a.shape[-1])
            for h in clusters:
                if len(h) < 2:
                    continue
                mean = w[:, h].mean(axis=1, keepdims=True)
                if name in TRAINABLE:
                    worst = max(worst, float(np.abs(w[:, h] - mean).max()))
                w[:, h] = mean
            t.data = w.reshape(t.shape).astype(DTYPE)
    if worst > tolerance:
        warnings.warn(f"max cluster deviation {worst:.3g} exceeds {tolerance:g}; trimming will be lossy",
                      LossyTrimWarning, stacklevel=2)
    return out, worst


def trim_layer(params: dict[str, np.ndarray], remaining: Sequence[int]) -> dict[str, np.ndarray]:
    """Slice the filter axis (last axis) of every parameter to ``remaining``."""
    idx = list(remaining)
    out = {}
    for name, a in params.items():
        a = np.asarray(getattr(a, "data", a))
        c = a.shape[-1]
        if idx and (min(idx) < 0 or max(idx) >= c):
            raise TrimError(f"remaining index out of range for {name} with {c} filters: {idx}")
        out[name] = np.ascontiguousarray(a[..., idx])
    return out


def trim_following_inputs(kernel: np.ndarray, groups: Sequence[Sequence[int]]) -> np.ndarray:
    """Fold input channels of a consumer kernel ([u,v,c_in,c_out]).

    Output input-channel k is the sum of the original input channels in
    ``groups[k]``; channels in no group are discarded.
    """
    kernel = np.asarray(kernel)
    cin = kernel.shape[2]
    flat = [j for g in groups for j in g]
    if flat and (min(flat) < 0 or max(flat) >= cin):
        raise TrimError(f"group index out of range for {cin} input channels")
    return np.stack([kernel[:, :, list(g), :].sum(axis=2) for g in groups], axis=2).astype(DTYPE)


def _fold_linear(weight: np.ndarray, in_shape: tuple, groups: Sequence[Sequence[int]]) -> np.ndarray:
    c = in_shape[-1]
    w = weight.reshape(-1, c, weight.shape[-1])
    folded = np.stack([w[:, list(g), :].sum(axis=1) for g in groups], axis=1)
    return folded.reshape(-1, weight.shape[-1]).astype(DTYPE)


# --------------------------------------------------------------------------
# network


def _singletons(c: int) -> list[list[int]]:
    return [[j] for j in range(c)]


def _same_groups(a, b) -> bool:
    return canonical(a) == canonical(b)


def apply_plan(model: Model, plan: TrimPlan) -> Model:
    """Build the narrower model described by ``plan``."""
    spec = model.spec
    groups_of: dict[str, list[list[int]]] = {INPUT: _singletons(spec.input_shape[-1])}
    arrays: dict[str, dict[str, np.ndarray]] = {}
    widths: dict[str, int] = {}
    for lid in model.order:
        layer = spec.layer(lid)
        p = model.params.get(lid, {})
        ins = [groups_of[i] for i in layer.inputs]
        if layer.kind == "conv":
            kernel = trim_following_inputs(p["kernel"].data, ins[0])
            out_groups = plan.groups(lid) if lid in plan.remaining else _singletons(layer.filters)
            leaders = [g[0] for g in out_groups]
            sliced = trim_layer({k: p[k].data for k in ("mu", "sigma", "gamma", "beta")}, leaders)
            sliced["kernel"] = trim_layer({"kernel": kernel}, leaders)["kernel"]
            arrays[lid] = sliced
            widths[lid] = len(leaders)
            groups_of[lid] = out_groups
        elif layer.kind == "bn":
            in_groups = ins[0]
            if lid in plan.remaining and not _same_groups(plan.groups(lid), in_groups):
                raise TrimError(f"{lid}: plan does not match the channels it receives")
            if lid not in plan.remaining and any(len(g) > 1 for g in in_groups):
                raise TrimError(f"{lid}: consumes folded channels but has no matching plan")
            arrays[lid] = trim_layer({k: v.data for k, v in p.items()}, [g[0] for g in in_groups])
            groups_of[lid] = in_groups
        elif layer.kind == "add":
            if not _same_groups(ins[0], ins[1]):
                raise TrimError(f"{lid}: operands {layer.inputs} would be pruned in different patterns")
            groups_of[lid] = ins[0]
        elif layer.kind == "concat":
            merged, offset = [], 0
            for src, g in zip(layer.inputs, ins):
                merged.extend([[j + offset for j in grp] for grp in g])
                offset += model.shapes[src][-1]
            groups_of[lid] = merged
        elif layer.kind == "pool":
            groups_of[lid] = ins[0]
        else:
            in_shape = model.shapes[layer.inputs[0]]
            arrays[lid] = {"weight": _fold_linear(p["weight"].data, in_shape, ins[0]),
                           "bias": p["bias"].data.copy()}
            groups_of[lid] = _singletons(layer.filters)
    new_spec = with_widths(spec, widths)
    return Model(new_spec, make_params(new_spec, arrays))


def trim_network(model: Model, assignment: ClusterAssignment) -> Model:
    """Fold every cluster onto its smallest index and drop the rest.

    Expects clusters to be identical already (see :func:`snap_clusters`).
    """
    for lid, clusters in assignment.layers.items():
        if lid not in model.params:
            raise TrimError(f"assignment names unknown layer {lid!r}")
    return apply_plan(model, select_remaining(assignment))


def prune_filters(model: Model, remaining_sets: dict[str, Sequence[int]]) -> Model:
    """Delete filters outside ``remaining_sets`` with no folding (lossy pruning)."""
    widths = {lid: model.width(lid) for lid in remaining_sets}
    return apply_plan(model, drop_plan(remaining_sets, widths))


def verify_equivalence(original: Model, trimmed: Model, n_samples: int = 100, seed: int = 0,
                       inputs: Optional[np.ndarray] = None) -> float:
    """Max absolute eval-mode logit difference over random (or given) inputs."""
    if original.spec.input_shape != trimmed.spec.input_shape:
        raise TrimError("models take different input shapes")
    if inputs is None:
        rng = np.random.default_rng(seed)
        inputs = rng.standard_normal((n_samples, *original.spec.input_shape)).astype(DTYPE)
    a = predict(original, inputs).astype(np.float64)
    b = predict(trimmed, inputs).astype(np.float64)
    return float(np.abs(a - b).max())
