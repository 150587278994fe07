import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from koopman_training.errors import ConfigurationError
from koopman_training.param_space import (Architecture, Scheme, build_partition, cube_architecture, flatten,
                                          predicted_complexity, unflatten)

DE = Architecture.parse("1:10:10:2")
MNIST = Architecture.parse("784:20:20:20:10", "relu")
PERCEPTRON = Architecture((4, 2), "step", has_bias=False)
ALL_SCHEMES = ["single_weight", "quasi_node:1", "quasi_node:3", "quasi_node:11", "node", "layer", "network"]


@pytest.mark.parametrize("arch, n", [(DE, 152), (MNIST, 16750), (PERCEPTRON, 8)])
def test_param_counts(arch, n):
    assert arch.n_params == n


def test_bad_architecture():
    with pytest.raises(ConfigurationError):
        Architecture((3,))
    with pytest.raises(ConfigurationError):
        Architecture((3, 0, 1))
    with pytest.raises(ConfigurationError):
        Architecture.parse("1:x:2")


def test_flatten_layout_is_node_major_with_bias_last():
    W = [np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[5.0, 6.0]])]
    b = [np.array([10.0, 20.0]), np.array([30.0])]
    v = flatten(W, b, Architecture((2, 2, 1)))
    assert v.tolist() == [1, 2, 10, 3, 4, 20, 5, 6, 30]


def test_round_trip_bitwise():
    rng = np.random.default_rng(3)
    v = rng.standard_normal(DE.n_params)
    W, b = unflatten(v, DE)
    out = flatten(W, b, DE)
    assert out.tobytes() == v.tobytes()


def test_unflatten_zero_and_wrong_length():
    W, b = unflatten(np.zeros(DE.n_params), DE)
    assert all(not w.any() for w in W) and all(not x.any() for x in b)
    with pytest.raises(ConfigurationError):
        unflatten(np.zeros(151), DE)


def test_flatten_shape_mismatch():
    W, b = unflatten(np.zeros(DE.n_params), DE)
    W[1] = W[1][:, :-1]
    with pytest.raises(ConfigurationError):
        flatten(W, b, DE)


def test_perceptron_flatten_without_bias():
    W = np.arange(8.0).reshape(2, 4)
    v = flatten([W], None, PERCEPTRON)
    assert v.tolist() == list(range(8))
    assert unflatten(v, PERCEPTRON)[1] is None


def test_node_partition_of_de_net():
    p = build_partition(DE, "node")
    assert len(p) == 22
    assert p.sizes == [2] * 10 + [11] * 10 + [11] * 2


def test_node_group_count_is_number_of_non_input_nodes():
    for arch in (DE, MNIST, cube_architecture(4)):
        assert len(build_partition(arch, "node")) == sum(arch.layer_sizes[1:])


def test_quasi_node_157_on_mnist_first_layer():
    p = build_partition(MNIST, ["quasi_node:157", "node", "node", "node"])
    first = [g for g in p.groups if g.max() < 15700]
    assert len(first) == 100 and all(len(g) == 157 for g in first)
    assert p.scheme == "quasi_node:157,node,node,node"


def test_quasi_node_short_final_chunk_holds_bias():
    p = build_partition(DE, "quasi_node:4")
    node = DE.node_ranges(1)[0]  # 11 params: chunks 4, 4, 3
    mine = [g for g in p.groups if node.start <= g[0] < node.stop]
    assert [len(g) for g in mine] == [4, 4, 3]
    assert mine[-1][-1] == node.stop - 1  # the bias


def test_single_weight_and_network():
    assert build_partition(DE, "single_weight").sizes == [1] * 152
    assert build_partition(DE, "network").sizes == [152]


@pytest.mark.parametrize("scheme", ALL_SCHEMES)
def test_partition_covers_exactly_once(scheme):
    p = build_partition(DE, scheme)
    idx = np.concatenate(p.groups)
    assert np.array_equal(np.sort(idx), np.arange(DE.n_params))


def test_quasi_node_q_range():
    with pytest.raises(ConfigurationError):
        build_partition(DE, "quasi_node:12")
    with pytest.raises(ConfigurationError):
        Scheme.parse("quasi_node:0")
    with pytest.raises(ConfigurationError):
        build_partition(DE, ["network", "node", "node"])


@settings(max_examples=40, deadline=None)
@given(sizes=st.lists(st.integers(1, 6), min_size=2, max_size=5), bias=st.booleans(),
       scheme=st.sampled_from(["single_weight", "quasi_node:2", "node", "layer", "network"]))
def test_partition_cover_property(sizes, bias, scheme):
    arch = Architecture(tuple(sizes), has_bias=bias)
    if scheme == "quasi_node:2" and max(arch.row_width) < 2:
        return
    p = build_partition(arch, scheme)
    assert sum(p.sizes) == arch.n_params
    assert len(np.unique(np.concatenate(p.groups))) == arch.n_params


def test_predicted_complexity_examples():
    # max{k n^4, n^5} = max{1e6, 1e5}
    c, s = predicted_complexity("node", 10, 100)
    assert c == 1e6 and s == 1e4
    assert predicted_complexity("network", 2, 10) == (640, 64)
    assert predicted_complexity("single_weight", 10, 100) == (1e5, 1e3)


def test_predicted_per_step_ordering():
    for n in range(2, 33):
        for q in range(1, n + 1):
            costs = [predicted_complexity(s, n, 100)[1]
                     for s in ("single_weight", f"quasi_node:{q}", "node", "layer", "network")]
            assert costs == sorted(costs)


def test_cube_architecture():
    a = cube_architecture(4)
    assert a.layer_sizes == (4,) * 5
    assert a.n_params == 4 * 4 * 5
