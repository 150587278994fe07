"""The standard training maps: SGD, Adam, Adagrad, Adadelta and the perceptron rule.

Every optimizer works in place on a flat float64 parameter vector and keeps
its own step counter ``t`` (number of completed updates). The learning-rate
schedule is evaluated at the pre-increment ``t``, so a decay ``a / (b + t)``
starts at ``a / b``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, NumericError


@dataclass(frozen=True)
class LrSchedule:
    """``constant``: lr = a. ``decay``: lr = a / (b + t).
    ``step``: lr = a * gamma ** (t // every), a per-epoch multiplicative decay.
    """

    kind: str = "constant"
    a: float = 1.0
    b: float = 0.0
    gamma: float = 1.0
    every: int = 1

    def __post_init__(self):
        if self.kind not in ("constant", "decay", "step"):
            raise ConfigurationError(f"unknown lr schedule {self.kind!r}")
        if self.a <= 0:
            raise ConfigurationError("learning rate must be positive")
        if self.kind == "decay" and self.b <= 0:
            raise ConfigurationError("decay schedule needs b > 0 so lr(0) is finite")
        if self.kind == "step" and (self.gamma <= 0 or self.every < 1):
            raise ConfigurationError("step schedule needs gamma > 0 and every >= 1")

    @classmethod
    def constant(cls, c):
        return cls("constant", float(c))

    @classmethod
    def decay(cls, a, b):
        return cls("decay", float(a), float(b))

    @classmethod
    def step(cls, a, gamma, every):
        return cls("step", float(a), gamma=float(gamma), every=int(every))

    def __call__(self, t: int) -> float:
        if self.kind == "decay":
            return self.a / (self.b + t)
        if self.kind == "step":
            return self.a * self.gamma ** (t // self.every)
        return self.a


class Optimizer:
    name = "base"
    # multiply-adds per parameter in one update, for the flop ledger
    update_cost = 1

    def __init__(self, n_params: int, lr: LrSchedule | float = 1e-3):
        self.n = int(n_params)
        self.lr = lr if isinstance(lr, LrSchedule) else LrSchedule.constant(lr)
        self.t = 0
        self.flops = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if params.shape != (self.n,) or grad.shape != (self.n,):
            raise ConfigurationError(f"expected vectors of length {self.n}")
        if not np.all(np.isfinite(grad)):
            raise NumericError("non-finite gradient", index=int(np.flatnonzero(~np.isfinite(grad))[0]),
                               step=self.t)
        with np.errstate(over="ignore", invalid="ignore"):
            self._update(params, grad, self.lr(self.t))
        self.t += 1
        self.flops += self.update_cost * self.n
        if not np.all(np.isfinite(params)):
            bad = int(np.flatnonzero(~np.isfinite(params))[0])
            raise NumericError(f"{self.name} produced a non-finite parameter at index {bad}",
                               index=bad, step=self.t)
        return params

    def _update(self, params, grad, lr):
        raise NotImplementedError

    def state_dict(self) -> dict:
        return {"t": self.t, "flops": self.flops}

    def hyper(self) -> dict:
        return {"lr": self.lr.__dict__.copy()}


class SGD(Optimizer):
    name = "sgd"
    update_cost = 1

    def _update(self, params, grad, lr):
        params -= lr * grad


class Adam(Optimizer):
    name = "adam"
    update_cost = 6

    def __init__(self, n_params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        super().__init__(n_params, lr)
        self.beta1, self.beta2 = map(float, betas)
        self.eps = float(eps)
        self.m = np.zeros(self.n)
        self.v = np.zeros(self.n)

    def _update(self, params, grad, lr):
        t = self.t + 1
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**t)
        v_hat = self.v / (1.0 - self.beta2**t)
        params -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def hyper(self):
        return {**super().hyper(), "betas": [self.beta1, self.beta2], "eps": self.eps}


class Adagrad(Optimizer):
    name = "adagrad"
    update_cost = 4

    def __init__(self, n_params, lr=1e-2, eps=1e-6):
        super().__init__(n_params, lr)
        self.eps = float(eps)
        self.sum_sq = np.zeros(self.n)

    def _update(self, params, grad, lr):
        self.sum_sq += grad * grad
        params -= lr * grad / (np.sqrt(self.sum_sq) + self.eps)

    def hyper(self):
        return {**super().hyper(), "eps": self.eps}


class Adadelta(Optimizer):
    """Zeiler's Adadelta; the schedule multiplies the computed update."""

    name = "adadelta"
    update_cost = 8

    def __init__(self, n_params, lr=1.0, rho=0.9, eps=1e-6):
        super().__init__(n_params, lr)
        self.rho = float(rho)
        self.eps = float(eps)
        self.sq_avg = np.zeros(self.n)
        self.acc_delta = np.zeros(self.n)

    def _update(self, params, grad, lr):
        rho = self.rho
        self.sq_avg *= rho
        self.sq_avg += (1.0 - rho) * grad * grad
        delta = np.sqrt(self.acc_delta + self.eps) / np.sqrt(self.sq_avg + self.eps) * grad
        self.acc_delta *= rho
        self.acc_delta += (1.0 - rho) * delta * delta
        params -= lr * delta

    def hyper(self):
        return {**super().hyper(), "rho": self.rho, "eps": self.eps}


OPTIMIZERS = {cls.name: cls for cls in (SGD, Adam, Adagrad, Adadelta)}


def make_optimizer(kind: str, n_params: int, lr, **hyper) -> Optimizer:
    try:
        cls = OPTIMIZERS[kind]
    except KeyError:
        raise ConfigurationError(f"unknown optimizer {kind!r}") from None
    return cls(n_params, lr, **hyper)


def perceptron_output(weights: np.ndarray, x: np.ndarray, threshold: float = 1.0) -> np.ndarray:
    """Unit i fires iff its weighted input strictly exceeds ``threshold``."""
    return (weights @ x > threshold).astype(float)


def perceptron_step(weights: np.ndarray, x, y, eta: float) -> np.ndarray:
    """One perceptron-rule update, ``W <- W - eta * (y_hat - y) x^T``.

    Only columns of active inputs (x_j != 0) can change.
    """
    if eta <= 0:
        raise ConfigurationError("perceptron learning rate must be positive")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    err = perceptron_output(weights, x) - y
    return weights - eta * np.outer(err, x)
