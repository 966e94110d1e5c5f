import warnings

import numpy as np
import pytest

from csgd.checkpoint import load_checkpoint, read_manifest
from csgd.clustering import ClusterAssignment
from csgd.config import config_from_dict
from csgd.metrics import read_metrics, read_summary
from csgd.model import accuracy, build_model, forward
from csgd import pipelines as P
from csgd.trim import LossyTrimWarning, TrimError, trim_network, verify_equivalence


def make_cfg(tmp_path=None, factory="toy-vgg", **sections):
    opts = {"toy-vgg": {"widths": [4, 8], "input_shape": [8, 8, 1], "num_classes": 2},
            "resnet": {"stage_widths": [4, 8], "input_shape": [8, 8, 1], "num_classes": 2}}[factory]
    data = {"network": {"factory": factory, "options": opts},
            "dataset": {"kind": "blobs", "n_train": 512, "n_test": 128, "separation": 4.0},
            "optimizer": {"lr": 0.1, "batch_size": 32},
            "train": {"epochs": 4, "prune_epochs": 4},
            "out": str(tmp_path) if tmp_path else ""}
    for k, v in sections.items():
        data[k] = {**data.get(k, {}), **v}
    return config_from_dict(data)


@pytest.fixture(scope="module")
def base():
    cfg = make_cfg()
    data = P.load_data(cfg)
    return cfg, data, P.train_baseline(cfg, data)


def test_baseline_learns_blobs(base):
    _, _, res = base
    assert res.train_accuracy >= 0.99
    assert res.test_accuracy >= 0.95
    assert len(res.log.records) == 4


def test_baseline_writes_artifacts(tmp_path):
    cfg = make_cfg(tmp_path, train={"epochs": 1})
    res = P.train_baseline(cfg)
    run = tmp_path / "baseline"
    assert len(read_metrics(run / "metrics.csv")) == 1
    assert read_summary(run / "summary.json")["test_accuracy"] == pytest.approx(res.test_accuracy)
    loaded = load_checkpoint(run / "checkpoint")
    x = np.zeros((2, 8, 8, 1), np.float32)
    assert forward(loaded, x).data.tobytes() == forward(res.model, x).data.tobytes()


def test_zero_epochs_equals_init():
    cfg = make_cfg(train={"epochs": 0})
    res = P.train_baseline(cfg)
    init = build_model(cfg.spec(), cfg.seed)
    for k, t in init.named_tensors().items():
        assert t.data.tobytes() == res.model.named_tensors()[k].data.tobytes()


def test_baseline_deterministic():
    cfg = make_cfg(train={"epochs": 1})
    a, b = P.train_baseline(cfg).model, P.train_baseline(cfg).model
    for k, t in a.named_tensors().items():
        assert t.data.tobytes() == b.named_tensors()[k].data.tobytes()


def test_prune_reaches_targets_losslessly(base, tmp_path):
    cfg, data, res = base
    cfg = make_cfg(tmp_path, optimizer={"centripetal": 3.0})
    out = P.prune_pretrained(cfg, res.model, data)
    assert out.equivalence <= 1e-4
    assert out.pre_trim_accuracy - out.post_trim_accuracy <= 0.01
    assert out.flops_after < out.flops_before
    widths = out.summary()["widths"]
    assert widths == {"conv1_1": 3, "conv2_1": 5}
    manifest = read_manifest(tmp_path / "prune" / "checkpoint")
    assert set(manifest["extra"]) >= {"config", "clusters", "trim_plan"}


def test_singleton_targets_are_identity(base):
    cfg, data, res = base
    targets = {"conv1_1": 4, "conv2_1": 8}
    out = P.prune_pretrained(cfg, res.model, data, targets)
    assert out.steps == 0
    assert out.equivalence == 0.0
    assert out.post_trim_accuracy == out.base_accuracy


def test_equivalence_gate_raises(base):
    cfg, data, res = base
    cfg = make_cfg(train={"equivalence_tolerance": 1e-12, "snap_tolerance": 1e9})
    a = ClusterAssignment({"conv1_1": [[0, 1], [2], [3]]})
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LossyTrimWarning)
        try:
            P.snap_trim_verify(res.model, a, data, cfg)
        except P.EquivalenceError:
            return
    # a zero-gap trim would pass any tolerance; accept only if that is what happened
    snapped = P.snap_clusters(res.model, a, np.inf)[0]
    assert verify_equivalence(snapped, trim_network(snapped, a)) <= 1e-12


def test_residual_prune(tmp_path):
    cfg = make_cfg(None, "resnet", optimizer={"centripetal": 3.0}, train={"prune_epochs": 6})
    data = P.load_data(cfg)
    base = P.train_baseline(cfg, data, epochs=2)
    out = P.prune_pretrained(cfg, base.model, data)
    assert out.equivalence <= 1e-4
    for l in out.trimmed.spec.layers:
        if l.kind == "add":
            assert len({out.trimmed.shapes[i][-1] for i in l.inputs}) == 1


def test_scale_one_squeeze_is_identity():
    cfg = make_cfg(experiment={"scale": 1.0}, train={"epochs": 1})
    res = P.scale_and_squeeze(cfg)
    assert res.squeezed.steps == 0
    assert res.baseline.test_accuracy == res.wide.test_accuracy == res.squeezed.post_trim_accuracy


def test_scale_squeeze_restores_widths():
    cfg = make_cfg(experiment={"scale": 2.0}, train={"epochs": 1, "prune_epochs": 4},
                   optimizer={"centripetal": 3.0})
    res = P.scale_and_squeeze(cfg)
    assert res.squeezed.trimmed.spec.layer("conv2_1").filters == 8
    assert res.squeezed.equivalence <= 1e-4


def test_sweep_zero_eps_never_crosses(base):
    cfg, data, res = base
    cfg = make_cfg(experiment={"sweep_steps": 120})
    arms = P.epsilon_sweep(cfg, res.model, data, [0.0, 3.0], log_every=10)
    assert arms[0].crossing_step is None and arms[0].prune is None
    assert arms[1].crossing_step is not None and arms[1].crossing_step <= 120
    assert arms[1].prune.equivalence <= 1e-4
    # chi shrinks under the centripetal term only
    assert arms[1].chi_trace[-1] < 1e-3 * arms[1].chi_trace[0]
    assert arms[0].chi_trace[-1] > 0.1 * arms[0].chi_trace[0]


def test_compare_lasso_runs(base):
    cfg, data, res = base
    cfg = make_cfg(optimizer={"centripetal": 5.0}, train={"prune_epochs": 4})
    cmp = P.compare_lasso(cfg, res.model, data)
    assert cmp.csgd.equivalence <= 1e-4
    assert len(cmp.lasso_pruned_log) == 4 == len(cmp.csgd_pruned_log)
    assert cmp.lasso_strength > 0
    assert cmp.csgd_drop == 0.0


def test_independent_sets_negative_control():
    cfg = make_cfg(None, "resnet")
    model = build_model(cfg.spec(), 0)
    a = ClusterAssignment({"stem": [[0, 1], [2], [3]], "s1b1b": [[0], [1], [2, 3]]})
    with pytest.raises(TrimError):
        trim_network(model, a)


def test_stage_notation_and_pruned_spec():
    cfg = make_cfg(None, "resnet")
    spec = P.pruned_spec(cfg.spec(), {"stem": 2, "s1b1a": 3, "s2b1a": 5, "s2proj": 6})
    assert P.stage_notation(spec) == "[3,2]-[5,6]"


def test_compare_lasso_chi_monotone(base):
    cfg, data, res = base
    # small eps keeps chi far above the float32 rounding floor
    cfg = make_cfg(optimizer={"centripetal": 0.5}, train={"prune_epochs": 4})
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LossyTrimWarning)
        cmp = P.compare_lasso(cfg, res.model, data)
    chis = [cmp.csgd.chi_initial] + [r.chi for r in cmp.csgd.log.records]
    assert chis[-1] > 1e-9
    assert all(b < a for a, b in zip(chis, chis[1:]))


def test_redundant_from_scratch():
    cfg = make_cfg(experiment={"scale": 2.0}, optimizer={"centripetal": 3.0},
                   train={"epochs": 6})
    a = P.redundant_from_scratch(cfg)
    b = P.redundant_from_scratch(cfg)
    narrow, red = a.narrow, a.redundant
    assert red.trimmed.spec.layers == narrow.model.spec.layers
    assert red.equivalence <= 1e-4
    assert red.post_trim_accuracy >= narrow.test_accuracy - 0.002
    assert red.post_trim_accuracy == b.redundant.post_trim_accuracy
    assert narrow.test_accuracy == b.narrow.test_accuracy


def test_slim_and_clip_flops_match():
    from csgd.model import flops, resnet
    from csgd.config import config_from_dict
    for blocks in (1, 2, 3):
        cfg = config_from_dict({"network": {"factory": "resnet", "options": {
            "stage_widths": [16, 32, 64], "blocks": blocks, "input_shape": [28, 28, 1], "stem_stride": 2}},
            "dataset": {"kind": "mnist"}})
        spec = cfg.spec()
        slim = flops(P.pruned_spec(spec, cfg.targets(spec, 0.625, "all")))
        clip = flops(P.pruned_spec(spec, cfg.targets(spec, 0.375, "internal")))
        assert abs(slim - clip) / max(slim, clip) <= 0.03, blocks


def test_slim_vs_clip_run():
    cfg = make_cfg(None, "resnet", optimizer={"centripetal": 3.0}, train={"prune_epochs": 6})
    cfg.network.options["stage_widths"] = [8, 16]
    data = P.load_data(cfg)
    base = P.train_baseline(cfg, data, epochs=2)
    res = P.slim_vs_clip(cfg, base.model, data)
    assert res.slim.equivalence <= 1e-4 and res.clip.equivalence <= 1e-4
    assert P.stage_notation(res.slim.trimmed.spec) == "[5,5]-[10,10]"
    assert P.stage_notation(res.clip.trimmed.spec) == "[3,8]-[6,16]"
