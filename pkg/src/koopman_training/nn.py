"""Fully connected feedforward networks over a flat float64 parameter vector.

Besides the usual forward/backward pass this module propagates derivatives
with respect to the network input alongside the activations (forward mode),
and can backpropagate a loss that depends on both the outputs and their
input derivatives. The DE-solver task needs that to differentiate its
residual.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_softmax, softmax

from .errors import ConfigurationError, NumericError
from .param_space import Activation, Architecture, layer_blocks

SMOOTH = (Activation.SIGMOID, Activation.IDENTITY)


class FlopCounter:
    """Counts multiply-adds, bucketed by phase."""

    def __init__(self):
        self.counts: dict[str, int] = {}

    def add(self, phase: str, n) -> None:
        self.counts[phase] = self.counts.get(phase, 0) + int(n)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def __getitem__(self, phase):
        return self.counts.get(phase, 0)


@dataclass
class Network:
    arch: Architecture
    params: np.ndarray
    rng_seed: int | None = None

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=float)
        if self.params.shape != (self.arch.n_params,):
            raise ConfigurationError(
                f"{self.params.size} params given, {self.arch} needs {self.arch.n_params}")


@dataclass
class Batch:
    inputs: np.ndarray
    targets: np.ndarray | None = None
    kind: str = "fixed"  # "fixed" or "stochastic"

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        if self.inputs.shape[0] < 1:
            raise ConfigurationError("empty batch")

    def __len__(self):
        return self.inputs.shape[0]


def _act(z, kind):
    if kind is Activation.SIGMOID:
        return expit(z)
    if kind is Activation.RELU:
        return np.maximum(z, 0.0)
    if kind is Activation.STEP:
        return (z > 0).astype(float)
    return z


def _layer_kinds(arch: Architecture):
    return [arch.activation] * (arch.n_layers - 1) + [arch.output_activation]


def _split(block, arch, l):
    n_in = arch.layer_sizes[l]
    W = block[:, :n_in]
    b = block[:, n_in] if arch.has_bias else None
    return W, b


def _check_inputs(arch, x):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != arch.layer_sizes[0]:
        raise ConfigurationError(f"input width {x.shape[1]} != {arch.layer_sizes[0]}")
    return x


def forward(net: Network, inputs, flops: FlopCounter | None = None) -> np.ndarray:
    arch = net.arch
    h = _check_inputs(arch, inputs)
    j = h.shape[0]
    for l, (block, kind) in enumerate(zip(layer_blocks(net.params, arch), _layer_kinds(arch))):
        W, b = _split(block, arch, l)
        z = h @ W.T
        if b is not None:
            z += b
        h = _act(z, kind)
        if flops is not None:
            flops.add("forward", j * W.size + j * W.shape[0])
    if not np.all(np.isfinite(h)):
        raise NumericError("non-finite network output")
    return h


def _forward_tangent(net, x, direction):
    """Forward pass that also carries derivatives along input ``direction``.

    Returns post-activation values, their tangents, and the pre-activation
    tangents (the backward pass of a derivative loss needs all three).
    """
    arch = net.arch
    acts, tans, dzs = [x], [np.broadcast_to(direction, x.shape)], [None]
    h, dh = x, tans[0]
    for l, (block, kind) in enumerate(zip(layer_blocks(net.params, arch), _layer_kinds(arch))):
        W, b = _split(block, arch, l)
        z = h @ W.T
        if b is not None:
            z += b
        dz = dh @ W.T
        if kind is Activation.SIGMOID:
            h = expit(z)
            dh = h * (1.0 - h) * dz
        else:
            h, dh = z, dz
        acts.append(h)
        tans.append(dh)
        dzs.append(dz)
    return acts, tans, dzs


def input_jacobian(net: Network, inputs) -> np.ndarray:
    """d(outputs)/d(inputs) for every sample: shape ``(j, n_out, n_in)``."""
    arch = net.arch
    if any(k not in SMOOTH for k in _layer_kinds(arch)):
        raise ConfigurationError("input derivatives need smooth activations (sigmoid)")
    x = _check_inputs(arch, inputs)
    n_in = arch.layer_sizes[0]
    jac = np.empty((x.shape[0], arch.layer_sizes[-1], n_in))
    for i in range(n_in):
        e = np.zeros(n_in)
        e[i] = 1.0
        _, tans, _ = _forward_tangent(net, x, e)
        jac[:, :, i] = tans[-1]
    return jac


def _mse(y, targets):
    diff = y - targets
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def _cross_entropy(logits, labels):
    labels = np.asarray(labels).astype(np.int64).ravel()
    j = logits.shape[0]
    logp = log_softmax(logits, axis=1)
    loss = -float(np.mean(logp[np.arange(j), labels]))
    g = softmax(logits, axis=1)
    g[np.arange(j), labels] -= 1.0
    return loss, g / j


def loss_and_grad(net: Network, batch: Batch, loss="mse", flops: FlopCounter | None = None):
    """Loss on ``batch`` and its gradient with respect to the flat parameters.

    ``loss`` is ``"mse"``, ``"cross_entropy"`` (targets are class labels and
    the network outputs logits), or an object with an
    ``residual(inputs, outputs, doutputs)`` method returning
    ``(loss, dL/doutputs, dL/d(doutputs))``, where ``doutputs`` is the
    derivative of the outputs along input direction ``loss.direction``.
    """
    arch = net.arch
    kinds = _layer_kinds(arch)
    x = _check_inputs(arch, batch.inputs)
    j = x.shape[0]
    blocks = layer_blocks(net.params, arch)
    grad = np.zeros_like(net.params)
    gblocks = layer_blocks(grad, arch)
    macs = 0

    dual = hasattr(loss, "residual")
    if dual:
        if any(k not in SMOOTH for k in kinds):
            raise ConfigurationError("derivative-based loss needs sigmoid activation")
        if kinds[-1] is not Activation.IDENTITY:
            raise ConfigurationError("derivative-based loss expects a linear output layer")
        acts, tans, dzs = _forward_tangent(net, x, np.asarray(loss.direction, dtype=float))
        value, g_z, g_dz = loss.residual(x, acts[-1], tans[-1])
        macs += 2 * j * sum(b.size for b in blocks)
    else:
        if any(k is Activation.STEP for k in kinds):
            raise ConfigurationError("step activation has no gradient")
        acts, h = [x], x
        for l, (block, kind) in enumerate(zip(blocks, kinds)):
            W, b = _split(block, arch, l)
            z = h @ W.T
            if b is not None:
                z += b
            h = _act(z, kind)
            acts.append(h)
        macs += j * sum(b.size for b in blocks)
        y = acts[-1]
        if loss == "mse":
            value, g_z = _mse(y, batch.targets)
            if kinds[-1] is Activation.SIGMOID:
                g_z = g_z * y * (1.0 - y)
            elif kinds[-1] is Activation.RELU:
                g_z = g_z * (y > 0)
        elif loss == "cross_entropy":
            if kinds[-1] is not Activation.IDENTITY:
                raise ConfigurationError("cross_entropy expects logits from a linear output layer")
            value, g_z = _cross_entropy(y, batch.targets)
        else:
            raise ConfigurationError(f"unknown loss {loss!r}")
        g_dz = None

    if not np.isfinite(value):
        raise NumericError("non-finite loss")

    for l in range(arch.n_layers - 1, -1, -1):
        W, _ = _split(blocks[l], arch, l)
        gW, gb = _split(gblocks[l], arch, l)
        a_prev = acts[l]
        gW[...] = g_z.T @ a_prev
        if gb is not None:
            gb[...] = g_z.sum(axis=0)
        macs += j * W.size
        if g_dz is not None:
            gW += g_dz.T @ tans[l]
            macs += j * W.size
        if l == 0:
            break
        g_a = g_z @ W
        macs += j * W.size
        kind = kinds[l - 1]
        a = acts[l]
        if g_dz is not None:
            g_da = g_dz @ W
            macs += j * W.size
            if kind is Activation.SIGMOID:
                # a = s(z), da = s'(z) dz with s' = a (1 - a), s'' = s' (1 - 2a)
                s1 = a * (1.0 - a)
                g_dz, g_z = g_da * s1, (g_a + g_da * (1.0 - 2.0 * a) * dzs[l]) * s1
            else:
                g_dz, g_z = g_da, g_a
        elif kind is Activation.SIGMOID:
            g_z = g_a * a * (1.0 - a)
        elif kind is Activation.RELU:
            g_z = g_a * (a > 0)
        else:
            g_z = g_a

    if flops is not None:
        flops.add("forward_backward", macs)
    return value, grad


def init_params(arch: Architecture, seed: int, domain=None) -> np.ndarray:
    """Seeded initial parameters.

    With ``domain=(low, high)`` every entry is uniform on that interval.
    Otherwise each layer (weights and biases) is uniform on [-a, a] with
    a = sqrt(6 / (fan_in + fan_out)).
    """
    rng = np.random.default_rng(seed)
    if domain is not None:
        low, high = map(float, domain)
        if not low < high:
            raise ConfigurationError(f"empty init domain [{low}, {high}]")
        return rng.uniform(low, high, size=arch.n_params)
    out = np.empty(arch.n_params)
    offs = arch.layer_offsets
    for l in range(arch.n_layers):
        a = np.sqrt(6.0 / (arch.layer_sizes[l] + arch.layer_sizes[l + 1]))
        out[offs[l]:offs[l + 1]] = rng.uniform(-a, a, size=offs[l + 1] - offs[l])
    return out
