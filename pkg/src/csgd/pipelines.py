"""Experiment workflows: training, C-SGD pruning and the comparison studies.

Every pipeline is a deterministic function of (config, seed, data): mini-batch
order comes from ``default_rng([seed, epoch])`` and clustering is seeded.
"""
from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .checkpoint import save_checkpoint
from .clustering import ClusterAssignment, build_assignment, clusterable_layers
from .config import ExperimentConfig
from .data import Split, load_mnist, synth_split
from .metrics import MetricsLog, write_summary
from .model import (Model, NetworkSpec, accuracy, build_model, derive_constraint_groups, flops,
                    forward, scale_widths, with_widths)
from .optim import (SGD, CentripetalSGD, CsgdConfig, GroupLassoSGD, chi, lasso_strength_for,
                    magnitude_remaining_set, max_cluster_deviation, phi)
from .tensor import Tape, softmax_xent
from .trim import (LossyTrimWarning, prune_filters, select_remaining, snap_clusters, trim_network,
                   verify_equivalence)


class EquivalenceError(RuntimeError):
    """The trimmed network does not reproduce the snapped one."""


def load_data(cfg: ExperimentConfig) -> Split:
    d = cfg.dataset
    if d.kind == "mnist":
        return load_mnist(d.path, d.n_train, d.n_test)
    n_test = d.n_test if d.n_test is not None else max(1, d.n_train // 4)
    return synth_split(d.kind, d.n_train, n_test, d.classes, cfg.seed, tuple(d.shape),
                       separation=d.separation, noise=d.noise)


def _out(cfg: ExperimentConfig, out, name: str) -> Optional[Path]:
    base = out if out is not None else cfg.out
    return Path(base) / name if base else None


# --------------------------------------------------------------------------
# training loop


@dataclass
class LoopResult:
    steps: int
    stopped_early: bool
    last_loss: float


def train_loop(model: Model, optimizer, data: Split, epochs: int, lr_at: Callable[[int], float],
               batch_size: int, seed: int, log: MetricsLog, *,
               monitor: Optional[Callable[[Model], dict]] = None,
               stop: Optional[Callable[[Model], bool]] = None, check_every: int = 50,
               on_step: Optional[Callable[[int, float, float], bool]] = None,
               evaluate: bool = True) -> LoopResult:
    """Mini-batch training; one metrics record per epoch.

    ``stop`` is polled every ``check_every`` steps and at epoch ends.
    ``on_step(step, loss, lr)`` runs after each update and may return True to
    halt. ``monitor`` adds columns (chi, phi) to each record.
    """
    n = len(data.train)
    step = 0
    last = float("nan")
    t0 = time.perf_counter()
    for epoch in range(epochs):
        lr = lr_at(epoch)
        order = np.random.default_rng([seed, epoch]).permutation(n)
        losses = []
        halted = False
        for k in range(0, n, batch_size):
            idx = order[k:k + batch_size]
            with Tape() as tape:
                loss = softmax_xent(forward(model, data.train.images[idx], "train"),
                                    data.train.labels[idx])
            grads = tape.backward(loss)
            optimizer.step(grads, lr)
            step += 1
            last = loss.data.item()
            losses.append(last)
            if on_step is not None and on_step(step, last, lr):
                halted = True
                break
            if stop is not None and step % check_every == 0 and stop(model):
                halted = True
                break
        extra = monitor(model) if monitor else {}
        acc = accuracy(model, data.test.images, data.test.labels) if evaluate else float("nan")
        log.log(epoch=epoch, step=step, loss=float(np.mean(losses)), accuracy=acc, lr=lr,
                seconds=time.perf_counter() - t0, **extra)
        if halted or (stop is not None and stop(model)):
            return LoopResult(step, True, last)
    return LoopResult(step, False, last)


# --------------------------------------------------------------------------
# baseline


@dataclass
class BaselineResult:
    model: Model
    log: MetricsLog
    test_accuracy: float
    train_accuracy: float


def train_baseline(cfg: ExperimentConfig, data: Optional[Split] = None,
                   spec: Optional[NetworkSpec] = None, out=None, name: str = "baseline",
                   epochs: Optional[int] = None) -> BaselineResult:
    data = data or load_data(cfg)
    spec = spec or cfg.spec()
    epochs = cfg.train.epochs if epochs is None else epochs
    model = build_model(spec, cfg.seed)
    run_dir = _out(cfg, out, name)
    log = MetricsLog(run_dir / "metrics.csv" if run_dir else None)
    sched = cfg.csgd(epochs)
    train_loop(model, SGD(model, sched.weight_decay), data, epochs, sched.lr_at,
               cfg.optimizer.batch_size, cfg.seed, log)
    test_acc = accuracy(model, data.test.images, data.test.labels)
    train_acc = accuracy(model, data.train.images, data.train.labels)
    if epochs == 0:
        log.log(epoch=0, step=0, accuracy=test_acc, lr=sched.lr_at(0))
    if run_dir:
        save_checkpoint(run_dir / "checkpoint", model, {"config": cfg.to_dict()})
        write_summary(run_dir / "summary.json", {"test_accuracy": test_acc, "train_accuracy": train_acc,
                                                 "epochs": epochs, "flops": flops(spec)})
    return BaselineResult(model, log, test_acc, train_acc)


# --------------------------------------------------------------------------
# C-SGD prune


@dataclass
class PruneResult:
    trimmed: Model
    trained: Model  # C-SGD-trained model before snapping
    assignment: ClusterAssignment
    log: MetricsLog
    base_accuracy: float
    pre_trim_accuracy: float
    post_trim_accuracy: float
    max_deviation: float  # largest pre-snap distance to a cluster mean
    equivalence: float  # snapped vs trimmed, max logit difference
    snap_gap: float  # unsnapped vs trimmed, max logit difference
    steps: int
    stopped_early: bool
    chi_initial: float
    flops_before: int
    flops_after: int
    extra: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "base_accuracy": self.base_accuracy,
            "pre_trim_accuracy": self.pre_trim_accuracy,
            "post_trim_accuracy": self.post_trim_accuracy,
            "trim_accuracy_drop": self.pre_trim_accuracy - self.post_trim_accuracy,
            "max_deviation": self.max_deviation,
            "equivalence": self.equivalence,
            "snap_gap": self.snap_gap,
            "steps": self.steps,
            "stopped_early": self.stopped_early,
            "chi_initial": self.chi_initial,
            "chi_final": self.log.records[-1].chi if self.log.records else None,
            "flops_before": self.flops_before,
            "flops_after": self.flops_after,
            "widths": {l.id: l.filters for l in self.trimmed.spec.layers if l.kind == "conv"},
            "clusters": self.assignment.to_dict(),
            **self.extra,
        }


def _has_redundancy(assignment: ClusterAssignment) -> bool:
    return any(len(h) > 1 for clusters in assignment.layers.values() for h in clusters)


def snap_trim_verify(model: Model, assignment: ClusterAssignment, data: Split,
                     cfg: ExperimentConfig) -> tuple[Model, float, float, float]:
    """Snap, trim and gate; returns (trimmed, max_dev, equivalence, snap_gap)."""
    snapped, dev = snap_clusters(model, assignment, cfg.train.snap_tolerance)
    trimmed = trim_network(snapped, assignment)
    gap = verify_equivalence(snapped, trimmed, 100, cfg.seed)
    if not gap <= cfg.train.equivalence_tolerance:
        raise EquivalenceError(f"trimmed model deviates from the snapped one by {gap:.3g} "
                               f"(tolerance {cfg.train.equivalence_tolerance:g})")
    snap_gap = verify_equivalence(model, trimmed, 100, cfg.seed)
    return trimmed, dev, gap, snap_gap


def csgd_train_and_trim(cfg: ExperimentConfig, model: Model, assignment: ClusterAssignment,
                        data: Split, epochs: int, log: MetricsLog, *,
                        centripetal: Optional[float] = None, early_trim: Optional[bool] = None,
                        schedule: Optional[CsgdConfig] = None,
                        on_epoch: Optional[Callable[[Model], dict]] = None) -> PruneResult:
    """Train ``model`` in place with C-SGD, then snap, trim and verify."""
    base_acc = accuracy(model, data.test.images, data.test.labels)
    sched = schedule or cfg.csgd(epochs)
    eps = sched.centripetal if centripetal is None else centripetal
    early = cfg.train.early_trim if early_trim is None else early_trim
    chi0 = chi(model, assignment)
    steps, stopped = 0, False
    if _has_redundancy(assignment) and epochs > 0:
        opt = CentripetalSGD(model, assignment, sched.weight_decay, eps)
        threshold = cfg.train.trim_threshold

        def monitor(m):
            row = {"chi": chi(m, assignment)}
            if on_epoch:
                row.update(on_epoch(m))
            return row

        stop = (lambda m: max_cluster_deviation(m, assignment) <= threshold) if early else None
        res = train_loop(model, opt, data, epochs, sched.lr_at, cfg.optimizer.batch_size, cfg.seed,
                         log, monitor=monitor, stop=stop, check_every=cfg.train.check_every)
        steps, stopped = res.steps, res.stopped_early
    pre = accuracy(model, data.test.images, data.test.labels)
    if not log.records:
        log.log(epoch=0, step=0, accuracy=pre, chi=chi0, lr=sched.lr_at(0))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", LossyTrimWarning)
        trimmed, dev, gap, snap_gap = snap_trim_verify(model, assignment, data, cfg)
    for w in caught:
        warnings.warn(w.message, w.category, stacklevel=2)
    post = accuracy(trimmed, data.test.images, data.test.labels)
    return PruneResult(trimmed, model, assignment, log, base_acc, pre, post, dev, gap, snap_gap,
                       steps, stopped, chi0, flops(model.spec), flops(trimmed.spec))


def _save_prune(run_dir: Optional[Path], result: PruneResult, cfg: ExperimentConfig) -> None:
    if not run_dir:
        return
    extra = {"config": cfg.to_dict(), "clusters": result.assignment.to_dict(),
             "trim_plan": select_remaining(result.assignment).to_dict()}
    save_checkpoint(run_dir / "checkpoint", result.trimmed, extra)
    save_checkpoint(run_dir / "trained", result.trained, extra)
    write_summary(run_dir / "summary.json", result.summary())


def prune_pretrained(cfg: ExperimentConfig, base: Model, data: Optional[Split] = None,
                     targets: Optional[dict] = None, out=None, name: str = "prune",
                     **kw) -> PruneResult:
    """Cluster, propagate, C-SGD train, snap, trim, verify and evaluate."""
    data = data or load_data(cfg)
    model = base.copy()
    groups = derive_constraint_groups(model.spec)
    targets = targets if targets is not None else cfg.targets(model.spec)
    assignment = build_assignment(model, cfg.clustering.scheme, targets, groups, cfg.seed)
    run_dir = _out(cfg, out, name)
    log = MetricsLog(run_dir / "metrics.csv" if run_dir else None)
    result = csgd_train_and_trim(cfg, model, assignment, data, cfg.train.prune_epochs, log, **kw)
    _save_prune(run_dir, result, cfg)
    return result


# --------------------------------------------------------------------------
# scaling and squeezing / redundant from scratch


def _narrow_targets(wide: NetworkSpec, narrow: NetworkSpec) -> dict[str, int]:
    groups = derive_constraint_groups(wide)
    return {lid: narrow.layer(lid).filters for lid in clusterable_layers(wide, groups)}


@dataclass
class SqueezeResult:
    baseline: BaselineResult
    wide: BaselineResult
    squeezed: PruneResult

    def triple(self) -> tuple[float, float, float]:
        return (self.baseline.test_accuracy, self.wide.test_accuracy,
                self.squeezed.post_trim_accuracy)


def scale_and_squeeze(cfg: ExperimentConfig, data: Optional[Split] = None, out=None) -> SqueezeResult:
    data = data or load_data(cfg)
    spec = cfg.spec()
    wide_spec = scale_widths(spec, cfg.experiment.scale)
    baseline = train_baseline(cfg, data, spec, out, "baseline")
    wide = train_baseline(cfg, data, wide_spec, out, "wide")
    squeezed = prune_pretrained(cfg, wide.model, data, _narrow_targets(wide_spec, spec), out, "squeezed")
    want = {l.id: l.filters for l in spec.layers if l.kind == "conv"}
    got = {l.id: l.filters for l in squeezed.trimmed.spec.layers if l.kind == "conv"}
    if want != got:
        raise RuntimeError(f"squeezed widths {got} differ from the baseline {want}")
    run_dir = _out(cfg, out, "")
    if run_dir:
        b, w, s = SqueezeResult(baseline, wide, squeezed).triple()
        write_summary(run_dir / "summary.json", {"baseline_accuracy": b, "wide_accuracy": w,
                                                 "squeezed_accuracy": s, "scale": cfg.experiment.scale,
                                                 "baseline_flops": flops(spec),
                                                 "squeezed_flops": squeezed.flops_after})
    return SqueezeResult(baseline, wide, squeezed)


@dataclass
class RedundantResult:
    narrow: BaselineResult
    redundant: PruneResult


def redundant_from_scratch(cfg: ExperimentConfig, data: Optional[Split] = None,
                           out=None) -> RedundantResult:
    """Normal-SGD narrow model against a wide model trained by C-SGD from scratch to the same width."""
    data = data or load_data(cfg)
    spec = cfg.spec()
    wide_spec = scale_widths(spec, cfg.experiment.scale)
    narrow = train_baseline(cfg, data, spec, out, "narrow")
    wide = build_model(wide_spec, cfg.seed)
    groups = derive_constraint_groups(wide_spec)
    assignment = build_assignment(wide, cfg.clustering.scheme, _narrow_targets(wide_spec, spec),
                                  groups, cfg.seed)
    run_dir = _out(cfg, out, "redundant")
    log = MetricsLog(run_dir / "metrics.csv" if run_dir else None)
    red = csgd_train_and_trim(cfg, wide, assignment, data, cfg.train.epochs, log, early_trim=False)
    _save_prune(run_dir, red, cfg)
    summary_dir = _out(cfg, out, "")
    if summary_dir:
        write_summary(summary_dir / "summary.json", {"narrow_accuracy": narrow.test_accuracy,
                                                     "redundant_accuracy": red.post_trim_accuracy})
    return RedundantResult(narrow, red)


# --------------------------------------------------------------------------
# group-Lasso comparison


def _prune_sets_for(model: Model, targets: dict[str, int]) -> tuple[dict, dict]:
    """Magnitude-based remaining sets for the targets, copied onto residual followers."""
    groups = derive_constraint_groups(model.spec)
    remaining = {}
    for lid, r in targets.items():
        remaining[lid] = magnitude_remaining_set(model.params[lid]["kernel"].data, r)
    for g in groups:
        if g.kind != "residual-stem" or g.pacesetter not in remaining:
            continue
        for f in g.followers:
            remaining[f] = list(remaining[g.pacesetter])
    prune = {lid: [j for j in range(model.width(lid)) if j not in set(keep)]
             for lid, keep in remaining.items()}
    return remaining, prune


@dataclass
class LassoComparison:
    csgd: PruneResult
    csgd_pruned_log: MetricsLog
    lasso_log: MetricsLog
    lasso_pruned_log: MetricsLog
    lasso_strength: float
    lasso_before: float
    lasso_after: float
    phi_initial: float

    @property
    def csgd_drop(self) -> float:
        return self.csgd.pre_trim_accuracy - self.csgd.post_trim_accuracy

    @property
    def lasso_drop(self) -> float:
        return self.lasso_before - self.lasso_after


def compare_lasso(cfg: ExperimentConfig, base: Model, data: Optional[Split] = None,
                  out=None) -> LassoComparison:
    """C-SGD (trim at the end) against group Lasso (zero-out at the end) under one schedule."""
    data = data or load_data(cfg)
    epochs = cfg.train.prune_epochs
    sched = cfg.csgd(epochs)
    targets = cfg.targets(base.spec)
    t_out = lambda n: (_out(cfg, out, n) / "metrics.csv") if _out(cfg, out, n) else None

    # C-SGD arm: the "after pruning" curve trims a snapped copy each epoch
    model = base.copy()
    groups = derive_constraint_groups(model.spec)
    assignment = build_assignment(model, cfg.clustering.scheme, targets, groups, cfg.seed)
    csgd_pruned = MetricsLog(t_out("csgd_pruned"))

    def after_trim(m):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", LossyTrimWarning)
            snapped, _ = snap_clusters(m, assignment, cfg.train.snap_tolerance)
        acc = accuracy(trim_network(snapped, assignment), data.test.images, data.test.labels)
        csgd_pruned.log(epoch=len(csgd_pruned), step=0, accuracy=acc)
        return {}

    csgd_log = MetricsLog(t_out("csgd"))
    csgd_res = csgd_train_and_trim(cfg, model, assignment, data, epochs, csgd_log, early_trim=False,
                                   schedule=sched, on_epoch=after_trim)

    # group-Lasso arm
    lasso_model = base.copy()
    remaining, prune_sets = _prune_sets_for(lasso_model, targets)
    strength = cfg.experiment.lasso_strength
    if strength is None:
        idx = np.random.default_rng([cfg.seed, 0]).permutation(len(data.train))[:cfg.optimizer.batch_size]
        probe = lasso_model.copy()
        with Tape() as tape:
            loss = softmax_xent(forward(probe, data.train.images[idx], "train"), data.train.labels[idx])
        grads = tape.backward(loss)
        strength = lasso_strength_for(probe, grads, prune_sets, cfg.experiment.lasso_fraction)
    phi0 = phi(lasso_model, prune_sets)
    lasso_log = MetricsLog(t_out("lasso"))
    lasso_pruned = MetricsLog(t_out("lasso_pruned"))

    def lasso_monitor(m):
        acc = accuracy(prune_filters(m, remaining), data.test.images, data.test.labels)
        lasso_pruned.log(epoch=len(lasso_pruned), step=0, accuracy=acc, phi=phi(m, prune_sets))
        return {"phi": phi(m, prune_sets)}

    opt = GroupLassoSGD(lasso_model, prune_sets, strength, sched.weight_decay)
    train_loop(lasso_model, opt, data, epochs, sched.lr_at, cfg.optimizer.batch_size, cfg.seed,
               lasso_log, monitor=lasso_monitor)
    before = accuracy(lasso_model, data.test.images, data.test.labels)
    zeroed = prune_filters(lasso_model, remaining)
    after = accuracy(zeroed, data.test.images, data.test.labels)
    result = LassoComparison(csgd_res, csgd_pruned, lasso_log, lasso_pruned, strength, before, after, phi0)
    run_dir = _out(cfg, out, "")
    if run_dir:
        write_summary(run_dir / "summary.json", {
            "csgd": csgd_res.summary(), "csgd_drop": result.csgd_drop,
            "lasso_before": before, "lasso_after": after, "lasso_drop": result.lasso_drop,
            "lasso_strength": strength, "phi_initial": phi0,
            "phi_final": lasso_log.records[-1].phi if lasso_log.records else phi0,
        })
    return result


# --------------------------------------------------------------------------
# epsilon sweep


@dataclass
class SweepArm:
    eps: float
    crossing_step: Optional[int]
    log: MetricsLog
    chi_trace: np.ndarray
    prune: Optional[PruneResult]


def epsilon_sweep(cfg: ExperimentConfig, base: Model, data: Optional[Split] = None,
                  eps_list=None, out=None, log_every: int = 100) -> list[SweepArm]:
    """C-SGD at constant learning rate for each centripetal strength.

    Each arm runs until the per-cluster max deviation first drops to the trim
    threshold (the crossing step) or ``experiment.sweep_steps`` elapse, and is
    then trimmed when it crossed.
    """
    data = data or load_data(cfg)
    eps_list = list(cfg.experiment.eps_list if eps_list is None else eps_list)
    budget = cfg.experiment.sweep_steps
    steps_per_epoch = -(-len(data.train) // cfg.optimizer.batch_size)
    epochs = -(-budget // steps_per_epoch)
    const = CsgdConfig(cfg.optimizer.lr, cfg.optimizer.weight_decay, cfg.optimizer.centripetal, [])
    groups = derive_constraint_groups(base.spec)
    targets = cfg.targets(base.spec)
    arms = []
    for eps in eps_list:
        model = base.copy()
        assignment = build_assignment(model, cfg.clustering.scheme, targets, groups, cfg.seed)
        run_dir = _out(cfg, out, f"eps_{eps:g}")
        log = MetricsLog(run_dir / "metrics.csv" if run_dir else None)
        trace = [chi(model, assignment)]
        crossing: list[Optional[int]] = [None]
        t0 = time.perf_counter()

        def on_step(step, loss, lr, model=model, assignment=assignment, trace=trace,
                    crossing=crossing, log=log):
            trace.append(chi(model, assignment))
            crossed = max_cluster_deviation(model, assignment) <= cfg.train.trim_threshold
            if step % log_every == 0 or crossed or step >= budget:
                log.log(epoch=(step - 1) // steps_per_epoch, step=step, loss=loss, chi=trace[-1],
                        lr=lr, seconds=time.perf_counter() - t0)
            if crossed:
                crossing[0] = step
            return crossed or step >= budget

        opt = CentripetalSGD(model, assignment, const.weight_decay, eps)
        ignore = MetricsLog()
        train_loop(model, opt, data, epochs, const.lr_at, cfg.optimizer.batch_size, cfg.seed, ignore,
                   on_step=on_step, evaluate=False)
        prune = None
        if crossing[0] is not None:
            prune = csgd_train_and_trim(cfg, model, assignment, data, 0, MetricsLog())
            prune.steps = crossing[0]
            _save_prune(run_dir, prune, cfg)
        arms.append(SweepArm(eps, crossing[0], log, np.asarray(trace), prune))
    run_dir = _out(cfg, out, "")
    if run_dir:
        write_summary(run_dir / "summary.json", {
            "lr": const.lr, "threshold": cfg.train.trim_threshold,
            "arms": [{"eps": a.eps, "crossing_step": a.crossing_step,
                      "equivalence": a.prune.equivalence if a.prune else None,
                      "post_trim_accuracy": a.prune.post_trim_accuracy if a.prune else None}
                     for a in arms]})
    return arms


# --------------------------------------------------------------------------
# slimming against clipping


def pruned_spec(spec: NetworkSpec, targets: dict[str, int]) -> NetworkSpec:
    """Spec after pruning ``targets``, with residual followers matching their pacesetters."""
    widths = dict(targets)
    for g in derive_constraint_groups(spec):
        if g.kind == "residual-stem" and g.pacesetter in widths:
            for f in g.followers:
                widths[f] = widths[g.pacesetter]
    return with_widths(spec, widths)


def stage_notation(spec: NetworkSpec) -> str:
    """Residual widths as ``[internal,stage]`` per stage, e.g. ``[10,10]-[20,20]-[40,40]``."""
    stages: dict[str, list[int]] = {}
    for l in spec.layers:
        if l.kind == "conv" and l.id.startswith("s") and l.id.endswith("b1a"):
            stages.setdefault(l.id[:2], []).append(l.filters)
        if l.kind == "conv" and l.id.startswith("s") and l.id.endswith("b1b"):
            stages.setdefault(l.id[:2], []).append(l.filters)
    return "-".join(f"[{a},{b}]" for a, b in stages.values())


@dataclass
class SlimClipResult:
    slim: PruneResult
    clip: PruneResult

    @property
    def flops_mismatch(self) -> float:
        a, b = self.slim.flops_after, self.clip.flops_after
        return abs(a - b) / max(a, b)


def slim_vs_clip(cfg: ExperimentConfig, base: Model, data: Optional[Split] = None,
                 out=None) -> SlimClipResult:
    """Uniform slimming of every layer against clipping internal layers only, at matched FLOPs."""
    data = data or load_data(cfg)
    slim_t = cfg.targets(base.spec, cfg.experiment.slim_ratio, "all")
    clip_t = cfg.targets(base.spec, cfg.experiment.clip_ratio, "internal")
    slim = prune_pretrained(cfg, base, data, slim_t, out, "slim")
    clip = prune_pretrained(cfg, base, data, clip_t, out, "clip")
    res = SlimClipResult(slim, clip)
    run_dir = _out(cfg, out, "")
    if run_dir:
        write_summary(run_dir / "summary.json", {
            "slim_accuracy": slim.post_trim_accuracy, "clip_accuracy": clip.post_trim_accuracy,
            "slim_flops": slim.flops_after, "clip_flops": clip.flops_after,
            "base_flops": flops(base.spec), "flops_mismatch": res.flops_mismatch,
            "slim_structure": stage_notation(slim.trimmed.spec),
            "clip_structure": stage_notation(clip.trimmed.spec)})
    return res
