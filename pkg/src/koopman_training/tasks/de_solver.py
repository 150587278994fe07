"""Unsupervised network solver for a one-degree-of-freedom Hamiltonian system.

The network maps time t to two raw outputs (N1, N2). The trial solution

    x(t) = x0 + (1 - exp(-t)) N1(t),    p(t) = p0 + (1 - exp(-t)) N2(t)

satisfies the initial condition exactly, and training minimises the mean
squared Hamilton-equation residual over a fixed grid of collocation times:

    L = mean_t [ (dx/dt - dH/dp)^2 + (dp/dt + dH/dx)^2 ].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigurationError
from ..nn import Batch, Network, _forward_tangent, loss_and_grad
from ..param_space import Activation, Architecture


@dataclass(frozen=True)
class Hamiltonian:
    """Separable H(x, p) = p^2 / 2 + V(x)."""

    name: str = "harmonic"

    def __post_init__(self):
        if self.name not in ("harmonic", "quartic"):
            raise ConfigurationError(f"unknown hamiltonian {self.name!r}")

    def dH_dx(self, x):
        return x + x**3 if self.name == "quartic" else x

    def d2H_dx2(self, x):
        return 1.0 + 3.0 * x**2 if self.name == "quartic" else np.ones_like(x)

    def dH_dp(self, p):
        return p

    def energy(self, x, p):
        v = 0.5 * x**2 + (0.25 * x**4 if self.name == "quartic" else 0.0)
        return 0.5 * p**2 + v


class DEResidual:
    """Hamilton-equation residual loss; plugs into :func:`nn.loss_and_grad`."""

    direction = np.array([1.0])

    def __init__(self, hamiltonian: Hamiltonian, x0: float, p0: float):
        self.H = hamiltonian
        self.x0 = float(x0)
        self.p0 = float(p0)

    def trial(self, t, y, dy):
        """Trial solution (x, p) and its time derivative from raw outputs."""
        env = 1.0 - np.exp(-t)
        denv = np.exp(-t)
        x = self.x0 + env * y[:, 0]
        p = self.p0 + env * y[:, 1]
        dx = denv * y[:, 0] + env * dy[:, 0]
        dp = denv * y[:, 1] + env * dy[:, 1]
        return x, p, dx, dp

    def residual(self, inputs, y, dy):
        t = inputs[:, 0]
        j = t.size
        x, p, dx, dp = self.trial(t, y, dy)
        r1 = dx - self.H.dH_dp(p)
        r2 = dp + self.H.dH_dx(x)
        loss = float(np.mean(r1 * r1 + r2 * r2))

        # dL/d(x, p, dx, dp); H is separable so the mixed second derivative vanishes
        g_x = 2.0 * r2 * self.H.d2H_dx2(x) / j
        g_p = -2.0 * r1 / j
        g_dx = 2.0 * r1 / j
        g_dp = 2.0 * r2 / j

        env = 1.0 - np.exp(-t)
        denv = np.exp(-t)
        g_y = np.column_stack([g_x * env + g_dx * denv, g_p * env + g_dp * denv])
        g_dy = np.column_stack([g_dx * env, g_dp * env])
        return loss, g_y, g_dy


@dataclass
class DESolverTask:
    arch: Architecture
    hamiltonian: Hamiltonian
    x0: float = 1.0
    p0: float = 0.0
    t_max: float = 4 * np.pi
    n_points: int = 200

    def __post_init__(self):
        if self.arch.layer_sizes[0] != 1 or self.arch.layer_sizes[-1] != 2:
            raise ConfigurationError("DE solver network maps t (1 input) to (N1, N2) (2 outputs)")
        if self.arch.activation is not Activation.SIGMOID:
            raise ConfigurationError("DE solver needs sigmoid activations")
        if self.n_points < 1 or self.t_max <= 0:
            raise ConfigurationError("need n_points >= 1 and t_max > 0")
        self.loss_fn = DEResidual(self.hamiltonian, self.x0, self.p0)
        self.batch = Batch(np.linspace(0.0, self.t_max, self.n_points)[:, None], kind="fixed")

    @classmethod
    def default(cls, width=10, **kw):
        arch = Architecture((1, width, width, 2), Activation.SIGMOID)
        return cls(arch, Hamiltonian(kw.pop("hamiltonian", "harmonic")), **kw)

    def loss_and_grad(self, params, flops=None):
        return loss_and_grad(Network(self.arch, params), self.batch, self.loss_fn, flops)

    def loss(self, params) -> float:
        return de_loss(Network(self.arch, params), self)[0]

    def solution(self, params, t=None):
        """Trial (x, p) at times ``t`` (default: the collocation grid)."""
        t = self.batch.inputs if t is None else np.asarray(t, dtype=float).reshape(-1, 1)
        acts, tans, _ = _forward_tangent(Network(self.arch, params), t, self.loss_fn.direction)
        x, p, _, _ = self.loss_fn.trial(t[:, 0], acts[-1], tans[-1])
        return x, p


def de_loss(net: Network, task: DESolverTask, with_grad=False):
    """(loss, grad) of the residual loss; grad is None unless requested."""
    if with_grad:
        return loss_and_grad(net, task.batch, task.loss_fn)
    t = task.batch.inputs
    acts, tans, _ = _forward_tangent(net, t, task.loss_fn.direction)
    value, _, _ = task.loss_fn.residual(t, acts[-1], tans[-1])
    return value, None
