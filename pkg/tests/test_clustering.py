import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from csgd.clustering import (ClusterAssignment, ClusteringError, build_assignment, canonical,
                             check_partition, cluster_layer, clusterable_layers, even_clusters,
                             imbalanced_clusters, kmeans_clusters, lloyd, propagate_clusters,
                             target_widths)
from csgd.model import ConstraintGroup, build_model, derive_constraint_groups, resnet

from conftest import dense_spec, residual_spec


def scalar_kernel(values):
    return np.asarray(values, dtype=np.float32).reshape(1, 1, 1, -1)


def best_two_partition(values):
    """Exhaustive oracle: the 2-partition with least within-cluster variance."""
    n = len(values)
    best, best_cost = None, np.inf
    for mask in itertools.product([0, 1], repeat=n):
        if len(set(mask)) < 2:
            continue
        cost = 0.0
        for k in (0, 1):
            part = [v for v, m in zip(values, mask) if m == k]
            cost += float(np.sum((np.array(part) - np.mean(part)) ** 2))
        if cost < best_cost:
            best_cost = cost
            best = canonical([[j for j in range(n) if mask[j] == k] for k in (0, 1)])
    return best


def test_even_six_into_four():
    assert even_clusters(6, 4) == [[0, 1], [2, 3], [4], [5]]


def test_even_four_into_four():
    assert even_clusters(4, 4) == [[0], [1], [2], [3]]


def test_even_five_into_two():
    assert even_clusters(5, 2) == [[0, 1, 2], [3, 4]]


def test_imbalanced_six_into_four():
    assert imbalanced_clusters(6, 4) == [[0, 1, 2], [3], [4], [5]]


def test_imbalanced_all_singletons():
    assert imbalanced_clusters(5, 5) == [[j] for j in range(5)]


def test_imbalanced_eight_into_five():
    assert imbalanced_clusters(8, 5) == [[0, 1, 2, 3], [4], [5], [6], [7]]


@pytest.mark.parametrize("fn", [even_clusters, imbalanced_clusters])
def test_target_out_of_range(fn):
    with pytest.raises(ClusteringError):
        fn(4, 5)
    with pytest.raises(ClusteringError):
        fn(4, 0)


def test_kmeans_r_equals_c_singletons():
    k = np.random.default_rng(0).standard_normal((3, 3, 2, 6))
    for seed in range(5):
        assert kmeans_clusters(k, 6, seed) == [[j] for j in range(6)]


def test_kmeans_single_cluster():
    k = np.random.default_rng(0).standard_normal((3, 3, 2, 6))
    assert kmeans_clusters(k, 1, 0) == [list(range(6))]


def test_kmeans_two_obvious_groups():
    values = [0, 0.01, 10, 10.01]
    got = kmeans_clusters(scalar_kernel(values), 2, seed=0)
    assert got == [[0, 1], [2, 3]]
    assert got == best_two_partition(values)


def test_kmeans_rejects_large_target():
    with pytest.raises(ClusteringError):
        kmeans_clusters(scalar_kernel([1, 2, 3]), 4)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-5, 5, allow_nan=False, width=32), min_size=3, max_size=7),
       st.integers(0, 1000))
def test_kmeans_two_partition_is_a_valid_split(values, seed):
    got = kmeans_clusters(scalar_kernel(values), 2, seed)
    check_partition(got, len(values), 2)


def test_kmeans_same_seed_same_partition():
    k = np.random.default_rng(1).standard_normal((3, 3, 4, 16))
    a = kmeans_clusters(k, 10, seed=7)
    b = kmeans_clusters(k, 10, seed=7)
    assert a == b


@settings(max_examples=40, deadline=None)
@given(n=st.integers(2, 30), r=st.integers(1, 30), dim=st.integers(1, 5), seed=st.integers(0, 10**6))
def test_lloyd_objective_never_increases(n, r, dim, seed):
    r = min(r, n)
    x = np.random.default_rng(seed).standard_normal((n, dim))
    res = lloyd(x, r, seed)
    obj = res.objectives
    assert all(b <= a + 1e-9 for a, b in zip(obj, obj[1:]))
    assert sorted(set(res.labels.tolist())) == list(range(r))


def test_lloyd_handles_duplicate_points():
    x = np.zeros((6, 2))
    res = lloyd(x, 3, 0)
    assert sorted(set(res.labels.tolist())) == [0, 1, 2]


@settings(max_examples=60, deadline=None)
@given(c=st.integers(1, 64), data=st.data())
def test_partition_validity_all_schemes(c, data):
    r = data.draw(st.integers(1, c))
    kernel = np.random.default_rng(c * 100 + r).standard_normal((1, 1, 3, c))
    for scheme in ("kmeans", "even", "imbalanced"):
        clusters = cluster_layer(scheme, kernel, r, seed=0)
        check_partition(clusters, c, r)
        if scheme == "even":
            sizes = [len(h) for h in clusters]
            assert max(sizes) - min(sizes) <= 1
            assert max(sizes) == -(-c // r)


def test_assignment_lookup_and_serialisation():
    a = ClusterAssignment()
    a["conv"] = [[3, 1], [0], [2]]
    assert a["conv"] == [[0], [1, 3], [2]]
    assert a.lookup("conv") == [0, 1, 2, 1]
    assert a.cluster_of("conv", 3) == [1, 3]
    assert ClusterAssignment.from_dict(a.to_dict()) == a


def fig5_groups():
    return derive_constraint_groups(resnet((8,), blocks=2, input_shape=(8, 8, 3)))


def test_propagate_no_groups_is_identity():
    a = ClusterAssignment({"x": [[0, 1], [2]]})
    assert propagate_clusters([], a) == a


def test_propagate_residual_followers_copy_pacesetter():
    a = ClusterAssignment()
    a["stem"] = [[0, 1], [2], [3], [4], [5], [6], [7]]
    out = propagate_clusters(fig5_groups(), a)
    assert out["s1b1b"] == out["stem"] == out["s1b2b"]


def test_propagate_missing_pacesetter():
    with pytest.raises(ClusteringError):
        propagate_clusters(fig5_groups(), ClusterAssignment())


def test_propagate_dense_offsets():
    spec = dense_spec()
    groups = derive_constraint_groups(spec)
    a = ClusterAssignment()
    a["stem"] = [[0, 1], [2, 3], [4], [5], [6], [7]]
    a["d1_1conv"] = [[0, 2], [1], [3]]
    a["d1_2conv"] = [[0, 1, 2, 3]]
    a["d1_3conv"] = [[0], [1], [2], [3]]
    for g in groups:
        if g.pacesetter not in a:
            a[g.pacesetter] = [[j] for j in range(spec.layer(g.pacesetter).filters)]
    out = propagate_clusters(groups, a, spec)
    # d1_2bn sees stem (8) + d1_1conv (4) = 12 channels
    assert out["d1_2bn"] == canonical([[0, 1], [2, 3], [4], [5], [6], [7], [8, 10], [9], [11]])
    # t1bn sees 8 + 4 + 4 + 4 = 20 channels
    want = [[0, 1], [2, 3], [4], [5], [6], [7], [8, 10], [9], [11], [12, 13, 14, 15],
            [16], [17], [18], [19]]
    assert out["t1bn"] == canonical(want)


def test_propagate_is_idempotent():
    spec = residual_spec()
    model = build_model(spec, 0)
    groups = derive_constraint_groups(spec)
    targets = target_widths(spec, 0.625, clusterable_layers(spec, groups))
    once = build_assignment(model, "kmeans", targets, groups, seed=0)
    assert propagate_clusters(groups, once, spec) == once


def test_clusterable_layers_exclude_followers():
    spec = residual_spec()
    groups = derive_constraint_groups(spec)
    layers = clusterable_layers(spec, groups)
    assert "stem" in layers and "s1b1a" in layers
    assert not any(l.endswith("b") and l.startswith("s") for l in layers)


def test_target_widths_ratio_and_overrides():
    spec = resnet((16, 32, 64))
    groups = derive_constraint_groups(spec)
    t = target_widths(spec, 0.625, clusterable_layers(spec, groups), {"stem": 4})
    assert t["stem"] == 4 and t["s1b1a"] == 10 and t["s2proj"] == 20 and t["s3b1a"] == 40
    with pytest.raises(ClusteringError):
        target_widths(spec, 0.5, ["stem"], {"s1b1b": 3})


def test_build_assignment_rejects_oversized_target():
    spec = residual_spec()
    model = build_model(spec, 0)
    with pytest.raises(ClusteringError):
        build_assignment(model, "even", {"stem": 99}, derive_constraint_groups(spec))
