"""Four-input, two-output perceptron learning a logical OR on each half of its inputs."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigurationError, PredictionDiverged
from ..koopman import build_model, predict
from ..nn import init_params
from ..optimizers import perceptron_step
from ..param_space import Activation, Architecture, build_partition
from ..recorder import Trajectory


@dataclass(frozen=True)
class PerceptronTask:
    eta: float = 0.005
    p_active: float = 0.25
    n_steps: int = 1000
    init_domain: tuple[float, float] = (0.5, 1.0)
    correlated: bool = False  # activate both units of a half together

    def __post_init__(self):
        if self.eta <= 0 or not 0 < self.p_active < 1 or self.n_steps < 1:
            raise ConfigurationError("need eta > 0, 0 < p_active < 1 and n_steps >= 1")

    @property
    def arch(self) -> Architecture:
        return Architecture((4, 2), Activation.STEP, has_bias=False, output_activation=Activation.STEP)

    def draw_inputs(self, rng: np.random.Generator, count: int) -> np.ndarray:
        if self.correlated:
            halves = rng.random((count, 2)) < self.p_active
            return np.repeat(halves, 2, axis=1).astype(float)
        return (rng.random((count, 4)) < self.p_active).astype(float)


def targets(x: np.ndarray) -> np.ndarray:
    """y1 = x1 or x2, y2 = x3 or x4."""
    x = np.atleast_2d(x)
    return np.column_stack([np.maximum(x[:, 0], x[:, 1]), np.maximum(x[:, 2], x[:, 3])])


ALL_INPUTS = np.array(list(itertools.product((0.0, 1.0), repeat=4)))
ALL_TARGETS = targets(ALL_INPUTS)


def percent_error(weights: np.ndarray) -> np.ndarray:
    """Percent of (input pattern, output unit) pairs answered wrongly.

    Every one of the 16 binary input patterns counts once. ``weights`` may
    be one flat 8-vector or a stack of them with shape (..., 8).
    """
    W = np.asarray(weights, dtype=float).reshape(*np.shape(weights)[:-1], 2, 4)
    out = np.einsum("...ij,pj->...pi", W, ALL_INPUTS) > 1.0
    return 100.0 * np.mean(out != ALL_TARGETS.astype(bool), axis=(-2, -1))


@dataclass(frozen=True)
class Baseline:
    pass


@dataclass(frozen=True)
class KoopmanAt:
    t_switch: int = 100
    scheme: str = "single_weight"

    def __post_init__(self):
        if self.scheme not in ("single_weight", "node", "network"):
            raise ConfigurationError(f"perceptron Koopman scheme must be single_weight, node or network, "
                                     f"got {self.scheme!r}")
        if self.t_switch < 1:
            raise ConfigurationError("t_switch must be >= 1")


@dataclass
class PerceptronResult:
    errors: np.ndarray       # percent error at steps 0 .. n_steps
    weights: np.ndarray      # flat weights at steps 0 .. n_steps
    diverged: bool = False
    diverged_step: int | None = None

    @property
    def plateau_step(self) -> int:
        """First step from which the error equals its final value for good."""
        e = self.errors
        off = np.flatnonzero(e != e[-1])
        return int(off[-1] + 1) if off.size else 0


def perceptron_baseline(task: PerceptronTask, seed: int) -> np.ndarray:
    """Weights w(0) ... w(n_steps) under the perceptron rule, shape (n_steps + 1, 8)."""
    rng = np.random.default_rng(seed)
    w = init_params(task.arch, seed, domain=task.init_domain)
    xs = task.draw_inputs(rng, task.n_steps)
    ys = targets(xs)
    traj = np.empty((task.n_steps + 1, 8))
    traj[0] = w
    W = w.reshape(2, 4)
    for t in range(task.n_steps):
        W = perceptron_step(W, xs[t], ys[t], task.eta)
        traj[t + 1] = W.ravel()
    return traj


def perceptron_run(task: PerceptronTask, mode, seed: int, baseline: np.ndarray | None = None) -> PerceptronResult:
    """Percent-error series of one simulation.

    ``KoopmanAt`` trains with the perceptron rule for ``t_switch`` steps,
    builds patches from those snapshots, then evolves the weights by
    prediction for the remaining steps. A diverging prediction is cut at the
    step before divergence, and the last valid weights are held from there.
    """
    if baseline is None:
        baseline = perceptron_baseline(task, seed)
    if isinstance(mode, Baseline):
        return PerceptronResult(percent_error(baseline), baseline)
    if mode.t_switch >= task.n_steps:
        raise ConfigurationError("t_switch must be below the number of training steps")

    arch = task.arch
    horizon = task.n_steps - mode.t_switch
    traj = Trajectory(arch, 0, mode.t_switch, baseline[:mode.t_switch + 1].copy())
    model = build_model(traj, build_partition(arch, mode.scheme), horizon)
    weights = np.empty_like(baseline)
    weights[:mode.t_switch + 1] = traj.snapshots
    diverged, where = False, None
    try:
        weights[mode.t_switch + 1:] = predict(model)
    except PredictionDiverged as exc:
        diverged, where = True, mode.t_switch + exc.step
        good = exc.partial
        weights[mode.t_switch + 1:mode.t_switch + 1 + len(good)] = good
        weights[mode.t_switch + 1 + len(good):] = weights[mode.t_switch + len(good)]
    return PerceptronResult(percent_error(weights), weights, diverged, where)


def perceptron_experiment(task: PerceptronTask, seeds, t_switch: int = 100,
                          schemes=("single_weight", "node", "network")) -> dict[str, list[PerceptronResult]]:
    """Baseline plus one Koopman variant per scheme, sharing each seed's data."""
    out: dict[str, list[PerceptronResult]] = {"baseline": []}
    for s in schemes:
        out[s] = []
    for seed in seeds:
        base = perceptron_baseline(task, seed)
        out["baseline"].append(perceptron_run(task, Baseline(), seed, base))
        for s in schemes:
            out[s].append(perceptron_run(task, KoopmanAt(t_switch, s), seed, base))
    return out


def ideal_weights() -> np.ndarray:
    """Relevant weights above one, irrelevant ones small: zero error on every input."""
    return np.array([[1.2, 1.2, 0.1, 0.1], [0.1, 0.1, 1.2, 1.2]]).ravel()

