import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from csgd.clustering import ClusterAssignment, build_assignment, even_clusters, imbalanced_clusters, \
    kmeans_clusters
from csgd.model import build_model, derive_constraint_groups, forward
from csgd.optim import (SGD, CentripetalSGD, CsgdConfig, GroupLassoSGD, build_gamma, build_lambda,
                        chi, cluster_deviation_sq, csgd_step_matrix, csgd_step_naive,
                        group_lasso_step, lasso_strength_for, magnitude_remaining_set,
                        max_cluster_deviation, phi, sgd_step, step_schedule)
from csgd.tensor import Tape, softmax_xent

from conftest import plain_spec, residual_spec


def test_gamma_example():
    g = build_gamma([[0, 1], [2], [3]])
    want = [[.5, .5, 0, 0], [.5, .5, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]]
    np.testing.assert_array_equal(g, np.array(want, dtype=np.float32))


def test_gamma_singletons_identity():
    np.testing.assert_array_equal(build_gamma([[j] for j in range(5)]), np.eye(5))


def test_gamma_single_cluster():
    np.testing.assert_array_equal(build_gamma([[0, 1, 2, 3]]), np.full((4, 4), 0.25))


@settings(max_examples=50, deadline=None)
@given(c=st.integers(1, 32), data=st.data())
def test_gamma_idempotent_row_stochastic(c, data):
    r = data.draw(st.integers(1, c))
    clusters = even_clusters(c, r) if data.draw(st.booleans()) else imbalanced_clusters(c, r)
    g = build_gamma(clusters).astype(np.float64)
    np.testing.assert_allclose(g.sum(axis=1), 1, atol=1e-6)
    np.testing.assert_allclose(g @ g, g, atol=1e-6)


def test_lambda_example():
    lam = build_lambda([[0, 1]], 1e-4, 3e-3)
    assert lam[0, 0] == pytest.approx(1.6e-3, rel=1e-6)
    assert lam[1, 1] == pytest.approx(1.6e-3, rel=1e-6)
    assert lam[0, 1] == pytest.approx(-1.5e-3, rel=1e-6)


def test_lambda_singletons_diag_eta():
    np.testing.assert_allclose(build_lambda([[0], [1], [2]], 1e-4, 3e-3), np.eye(3) * 1e-4, rtol=1e-6)


@settings(max_examples=50, deadline=None)
@given(c=st.integers(1, 32), seed=st.integers(0, 10**6), eta=st.floats(0, 1e-2), eps=st.floats(0, 1))
def test_lambda_identity(c, seed, eta, eps):
    rng = np.random.default_rng(seed)
    clusters = kmeans_clusters(rng.standard_normal((1, 1, 4, c)), int(rng.integers(1, c + 1)), seed)
    lam = build_lambda(clusters, eta, eps)
    want = (eta + eps) * np.eye(c) - eps * build_gamma(clusters).astype(np.float64)
    np.testing.assert_allclose(lam, want, atol=1e-7)


def test_matrix_step_singletons_equals_sgd_bitwise():
    rng = np.random.default_rng(0)
    w = rng.standard_normal((27, 6)).astype(np.float32)
    g = rng.standard_normal((27, 6)).astype(np.float32)
    clusters = [[j] for j in range(6)]
    out = csgd_step_matrix(w, g, build_gamma(clusters), build_lambda(clusters, 1e-4, 3e-3), 0.03)
    assert out.tobytes() == sgd_step(w, g, 0.03, 1e-4).tobytes()


@pytest.mark.parametrize("scheme", ["even", "imbalanced", "kmeans"])
@pytest.mark.parametrize("seed", range(5))
def test_matrix_matches_naive(scheme, seed):
    rng = np.random.default_rng(seed)
    c = int(rng.integers(2, 33))
    r = int(rng.integers(1, c + 1))
    k = rng.standard_normal((3, 3, 4, c)).astype(np.float32)
    clusters = {"even": even_clusters, "imbalanced": imbalanced_clusters}.get(
        scheme, lambda c, r: kmeans_clusters(k, r, seed))(c, r)
    g = rng.standard_normal(k.shape).astype(np.float32)
    gamma, lam = build_gamma(clusters), build_lambda(clusters, 1e-4, 3e-3)
    w = k.reshape(-1, c)
    a = csgd_step_matrix(w, g.reshape(-1, c), gamma, lam, 0.03).reshape(k.shape)
    b = csgd_step_naive(k, g, clusters, 0.03, 1e-4, 3e-3)
    assert np.abs(a - b).max() <= 1e-6


def test_matrix_step_shape_mismatch():
    with pytest.raises(ValueError):
        csgd_step_matrix(np.zeros((4, 3)), np.zeros((4, 2)), np.eye(3), np.eye(3), 0.1)


def test_zero_grad_zero_decay_contracts_by_one_minus_tau_eps():
    rng = np.random.default_rng(1)
    w = rng.standard_normal((9, 4))
    clusters = [[0, 1, 2], [3]]
    before = cluster_deviation_sq(w.reshape(1, 1, 9, 4), clusters)
    out = csgd_step_naive(w, np.zeros_like(w), clusters, 0.1, 0.0, 0.5)
    after = cluster_deviation_sq(out.reshape(1, 1, 9, 4), clusters)
    assert np.sqrt(after / before) == pytest.approx(1 - 0.1 * 0.5, rel=1e-5)


def test_chi_examples():
    assert chi_of([1.0, 3.0], [[0, 1]]) == pytest.approx(2.0)
    assert chi_of([1.0, 3.0], [[0], [1]]) == 0.0
    assert chi_of([2.0, 2.0], [[0, 1]]) == 0.0


def chi_of(values, clusters):
    from csgd.model import INPUT, LayerSpec, NetworkSpec, Model, make_params
    c = len(values)
    spec = NetworkSpec("t", (2, 2, 1), 2, [
        LayerSpec("c", "conv", [INPUT], filters=c, kernel=(1, 1)),
        LayerSpec("gap", "pool", ["c"], pool="global"),
        LayerSpec("fc", "linear", ["gap"], filters=2),
    ])
    m = build_model(spec, 0)
    m.params["c"]["kernel"].data = np.asarray(values, dtype=np.float32).reshape(1, 1, 1, c)
    return chi(m, ClusterAssignment({"c": clusters}))


def test_phi_examples():
    m = build_model(plain_spec(), 0)
    assert phi(m, {}) == 0.0
    m.params["conv1_1"]["kernel"].data[..., 3] = 0
    m.params["conv1_1"]["kernel"].data[0, 0, 0, 3] = 2.0
    assert phi(m, {"conv1_1": [3]}) == pytest.approx(4.0)


def test_phi_flat_sum_oracle():
    m = build_model(plain_spec(), 5)
    sets = {"conv1_1": [0, 5], "conv2_1": [1, 2, 3], "conv3_1": []}
    want = 0.0
    for lid, idx in sets.items():
        k = m.params[lid]["kernel"].data
        for j in idx:
            want += sum(float(v) ** 2 for v in k[..., j].ravel())
    assert phi(m, sets) == pytest.approx(want, rel=1e-9)


def test_group_lasso_zero_strength_is_sgd():
    rng = np.random.default_rng(2)
    w = rng.standard_normal((3, 3, 2, 4)).astype(np.float32)
    g = rng.standard_normal(w.shape).astype(np.float32)
    out = group_lasso_step(w, g, [0, 2], 0.05, 1e-4, 0.0)
    np.testing.assert_array_equal(out, sgd_step(w, g, 0.05, 1e-4))


def test_group_lasso_norm_shrinks_linearly():
    w = np.zeros((1, 1, 4, 1), dtype=np.float32)
    w[0, 0, :, 0] = 0.5  # norm 1
    tau, strength = 0.01, 0.1
    for step in range(1, 6):
        w = group_lasso_step(w, np.zeros_like(w), [0], tau, 0.0, strength)
        assert np.linalg.norm(w) == pytest.approx(1 - step * tau * strength, abs=1e-6)


def test_group_lasso_zero_filter_subgradient_zero():
    w = np.zeros((1, 1, 2, 2), dtype=np.float32)
    out = group_lasso_step(w, np.zeros_like(w), [0, 1], 0.1, 0.0, 1.0)
    assert not out.any()


def test_magnitude_examples():
    k = np.array([5, 1, 3, 2], dtype=np.float32).reshape(1, 1, 1, 4)
    assert magnitude_remaining_set(k, 2) == [0, 2]
    assert magnitude_remaining_set(k, 4) == [0, 1, 2, 3]
    tie = np.array([1, 2, 2, 2], dtype=np.float32).reshape(1, 1, 1, 4)
    assert magnitude_remaining_set(tie, 2) == [1, 2]
    with pytest.raises(ValueError):
        magnitude_remaining_set(k, 5)


def test_config_validation_and_schedule():
    with pytest.raises(ValueError):
        CsgdConfig(lr=0)
    with pytest.raises(ValueError):
        CsgdConfig(centripetal=-1)
    with pytest.raises(ValueError):
        CsgdConfig(schedule=[(5, 0.1), (3, 0.01)])
    cfg = CsgdConfig(0.03, schedule=step_schedule(0.03, 8))
    assert [cfg.lr_at(e) for e in (0, 3, 4, 5, 6, 7)] == pytest.approx(
        [0.03, 0.03, 0.003, 0.003, 0.0003, 0.0003])


def _train(model, opt, steps, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(steps):
        x = rng.standard_normal((8, *model.spec.input_shape)).astype(np.float32)
        y = rng.integers(0, model.spec.num_classes, 8)
        with Tape() as tape:
            loss = softmax_xent(forward(model, x, "train"), y)
        opt.step(tape.backward(loss), 0.05)


def test_eps_zero_singletons_identical_to_sgd():
    a = build_model(residual_spec(), 0)
    b = build_model(residual_spec(), 0)
    _train(a, SGD(a, 1e-4), 5)
    _train(b, CentripetalSGD(b, ClusterAssignment(), 1e-4, 0.0), 5)
    for k, t in a.named_tensors().items():
        assert t.data.tobytes() == b.named_tensors()[k].data.tobytes(), k


def test_followers_contract_with_pacesetter():
    spec = residual_spec()
    model = build_model(spec, 0)
    groups = derive_constraint_groups(spec)
    a = build_assignment(model, "even", {"stem": 5, "s2proj": 10, "s3proj": 20}, groups)
    opt = CentripetalSGD(model, a, 1e-4, 0.2)
    devs = []
    for _ in range(3):
        devs.append({lid: cluster_deviation_sq(model.params[lid]["kernel"].data, a[lid])
                     for lid in ("stem", "s1b1b", "s1b2b")})
        _train(model, opt, 1)
    rate = 1 - 0.05 * (1e-4 + 0.2)
    for before, after in zip(devs, devs[1:]):
        for lid in before:
            assert after[lid] / before[lid] == pytest.approx(rate ** 2, rel=1e-4)


def test_centripetal_makes_clusters_identical():
    spec = plain_spec()
    model = build_model(spec, 0)
    a = build_assignment(model, "kmeans", {"conv1_1": 4, "conv2_1": 8}, [])
    opt = CentripetalSGD(model, a, 1e-4, 3.0)
    _train(model, opt, 200)
    assert max_cluster_deviation(model, a) < 1e-5


def test_group_lasso_optimizer_targets_prune_sets():
    model = build_model(plain_spec(), 0)
    sets = {"conv2_1": [0, 1, 2, 3]}
    phi0 = phi(model, sets)
    keep0 = float((model.params["conv2_1"]["kernel"].data[..., 4:] ** 2).sum())
    _train(model, GroupLassoSGD(model, sets, strength=0.5), 30)
    assert phi(model, sets) < 0.5 * phi0
    assert float((model.params["conv2_1"]["kernel"].data[..., 4:] ** 2).sum()) > 0.5 * keep0


def test_lasso_strength_scales_with_fraction():
    model = build_model(plain_spec(), 0)
    x = np.random.default_rng(0).standard_normal((8, 12, 12, 1)).astype(np.float32)
    with Tape() as tape:
        loss = softmax_xent(forward(model, x, "train"), np.arange(8) % 5)
    grads = tape.backward(loss)
    sets = {"conv2_1": [0, 1]}
    a = lasso_strength_for(model, grads, sets, 0.1)
    b = lasso_strength_for(model, grads, sets, 0.2)
    assert a > 0 and b == pytest.approx(2 * a)
    assert lasso_strength_for(model, grads, {}, 0.1) == 0.0
