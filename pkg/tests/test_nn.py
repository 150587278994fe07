import numpy as np
import pytest

from koopman_training.errors import ConfigurationError
from koopman_training.nn import Batch, FlopCounter, Network, forward, init_params, input_jacobian, loss_and_grad
from koopman_training.param_space import Architecture, flatten, layer_blocks
from koopman_training.tasks.de_solver import DESolverTask


def central_diff(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def assert_grad_close(a, b, rel=1e-5, floor=1e-8):
    assert np.all(np.abs(a - b) <= rel * np.maximum(np.abs(a), np.abs(b)) + floor), np.max(np.abs(a - b))


def test_zero_sigmoid_net_outputs_half():
    arch = Architecture.parse("3:4:2", output_activation="sigmoid")
    out = forward(Network(arch, np.zeros(arch.n_params)), np.random.default_rng(0).random((5, 3)))
    assert np.allclose(out, 0.5)


def test_zero_relu_net_outputs_zero():
    arch = Architecture.parse("3:4:2", "relu")
    assert not forward(Network(arch, np.zeros(arch.n_params)), np.ones((2, 3))).any()


def test_single_sigmoid_unit_limits():
    arch = Architecture.parse("1:1", output_activation="sigmoid")
    net = Network(arch, np.array([1.0, 0.0]))
    assert forward(net, [[0.0]])[0, 0] == 0.5
    assert forward(net, [[40.0]])[0, 0] == pytest.approx(1.0)


def test_forward_is_deterministic():
    arch = Architecture.parse("2:5:3")
    w = init_params(arch, 1)
    x = np.random.default_rng(1).random((7, 2))
    assert forward(Network(arch, w), x).tobytes() == forward(Network(arch, w), x).tobytes()


def test_network_rejects_wrong_length():
    with pytest.raises(ConfigurationError):
        Network(Architecture.parse("1:10:10:2"), np.zeros(151))


def test_mse_zero_at_targets():
    arch = Architecture.parse("2:3:2")
    net = Network(arch, init_params(arch, 0))
    x = np.random.default_rng(0).random((4, 2))
    loss, g = loss_and_grad(net, Batch(x, forward(net, x)), "mse")
    assert loss == 0 and not g.any()


def test_cross_entropy_uniform_logits():
    arch = Architecture.parse("3:5")
    net = Network(arch, np.zeros(arch.n_params))
    loss, _ = loss_and_grad(net, Batch(np.ones((4, 3)), np.array([0, 1, 2, 3])), "cross_entropy")
    assert loss == pytest.approx(np.log(5))


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("loss, arch_spec, act, out_act", [
    ("mse", "1:3:2", "sigmoid", "identity"),
    ("mse", "2:3:2", "sigmoid", "sigmoid"),
    ("cross_entropy", "3:4:3", "sigmoid", "identity"),
    ("cross_entropy", "3:4:3", "relu", "identity"),
])
def test_gradient_matches_finite_differences(seed, loss, arch_spec, act, out_act):
    arch = Architecture.parse(arch_spec, act, output_activation=out_act)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((6, arch.layer_sizes[0]))
    y = rng.standard_normal((6, arch.layer_sizes[-1])) if loss == "mse" else rng.integers(0, 3, 6)
    batch = Batch(x, y)
    w = init_params(arch, seed)
    _, g = loss_and_grad(Network(arch, w), batch, loss)
    fd = central_diff(lambda v: loss_and_grad(Network(arch, v), batch, loss)[0], w)
    assert_grad_close(g, fd)


@pytest.mark.parametrize("seed", range(5))
def test_de_residual_gradient_matches_finite_differences(seed):
    task = DESolverTask(Architecture.parse("1:3:2"), DESolverTask.default().hamiltonian, n_points=25)
    w = init_params(task.arch, seed)
    _, g = task.loss_and_grad(w)
    assert_grad_close(g, central_diff(task.loss, w))


def test_de_gradient_on_full_size_net():
    task = DESolverTask.default()
    w = init_params(task.arch, 7)
    _, g = task.loss_and_grad(w)
    assert_grad_close(g, central_diff(task.loss, w))


def test_input_jacobian_of_single_unit():
    arch = Architecture.parse("1:1", output_activation="sigmoid")
    x = np.array([[0.3]])
    s = 1 / (1 + np.exp(-0.3))
    assert input_jacobian(Network(arch, np.array([1.0, 0.0])), x)[0, 0, 0] == pytest.approx(s * (1 - s))


def test_input_jacobian_zero_net():
    arch = Architecture.parse("2:3:2")
    assert not input_jacobian(Network(arch, np.zeros(arch.n_params)), np.ones((3, 2))).any()


def test_input_jacobian_matches_finite_differences():
    arch = Architecture.parse("1:10:10:2")
    net = Network(arch, init_params(arch, 2))
    x = np.linspace(0, 3, 9)[:, None]
    jac = input_jacobian(net, x)[:, :, 0]
    h = 1e-6
    fd = (forward(net, x + h) - forward(net, x - h)) / (2 * h)
    assert np.max(np.abs(jac - fd)) < 1e-5


def test_input_jacobian_chain_rule():
    arch = Architecture.parse("1:2:2", output_activation="sigmoid")
    w = init_params(arch, 4)
    x = np.array([[0.7]])
    blocks = layer_blocks(w, arch)
    W1, b1 = blocks[0][:, :1], blocks[0][:, 1]
    W2, b2 = blocks[1][:, :2], blocks[1][:, 2]
    h = 1 / (1 + np.exp(-(W1 @ x[0] + b1)))
    y = 1 / (1 + np.exp(-(W2 @ h + b2)))
    chain = np.diag(y * (1 - y)) @ W2 @ np.diag(h * (1 - h)) @ W1
    assert np.allclose(input_jacobian(Network(arch, w), x)[0], chain, atol=1e-14)


def test_input_jacobian_rejects_relu():
    arch = Architecture.parse("1:3:1", "relu")
    with pytest.raises(ConfigurationError):
        input_jacobian(Network(arch, np.zeros(arch.n_params)), [[1.0]])


def test_de_loss_rejects_non_sigmoid():
    with pytest.raises(ConfigurationError):
        DESolverTask(Architecture.parse("1:3:2", "relu"), DESolverTask.default().hamiltonian)


def test_init_domain_and_determinism():
    arch = Architecture((4, 2), "step", has_bias=False)
    w = init_params(arch, 5, domain=(0.5, 1.0))
    assert w.size == 8 and w.min() >= 0.5 and w.max() <= 1.0
    assert np.array_equal(w, init_params(arch, 5, domain=(0.5, 1.0)))
    with pytest.raises(ConfigurationError):
        init_params(arch, 0, domain=(1.0, 1.0))


def test_default_init_bounds():
    arch = Architecture.parse("1:10:10:2")
    w = init_params(arch, 0)
    offs = arch.layer_offsets
    for l in range(arch.n_layers):
        a = np.sqrt(6 / (arch.layer_sizes[l] + arch.layer_sizes[l + 1]))
        assert np.all(np.abs(w[offs[l]:offs[l + 1]]) <= a)


def test_flops_double_with_batch():
    arch = Architecture.parse("3:8:2")
    net = Network(arch, init_params(arch, 0))
    rng = np.random.default_rng(0)
    counts = []
    for j in (16, 32):
        fc = FlopCounter()
        loss_and_grad(net, Batch(rng.random((j, 3)), rng.random((j, 2))), "mse", fc)
        counts.append(fc.total)
    assert counts[1] == pytest.approx(2 * counts[0], rel=0.01)


def test_nonfinite_output_raises():
    from koopman_training.errors import NumericError
    arch = Architecture.parse("1:1")
    with pytest.raises(NumericError):
        forward(Network(arch, np.array([np.inf, 0.0])), [[1.0]])
