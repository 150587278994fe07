"""Evaluation quantities: equivalent training time, error statistics, speedup, CSV output."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError

SPEEDUP_INF = float("inf")
UNMOVED_THRESHOLD = 1e-12

SUMMARY_COLUMNS = ("seed", "task", "optimizer", "scheme", "T", "t_eq", "t_eq_over_T", "success",
                   "speedup_excl", "speedup_incl", "median_error_ratio", "max_patch_modulus")


def t_eq_iterative(loss_series, final_koopman_loss: float) -> int:
    """Number of standard iterations whose loss is still above the Koopman loss.

    ``loss_series[i]`` is the standard loss after i + 1 further iterations.
    Returns the largest 1-based i with loss_series[i-1] > target (0 if none);
    a value equal to ``len(loss_series)`` means the series never got there.
    """
    s = np.asarray(loss_series, dtype=float)
    if s.size == 0:
        raise ConfigurationError("empty loss series")
    above = np.flatnonzero(s > final_koopman_loss)
    return int(above[-1] + 1) if above.size else 0


@dataclass
class FractionalTEq:
    value: float
    Q: int
    R: float
    flat: bool = False       # l_Q == l_{Q+1}; R set to 0
    clamped: bool = False    # raw R fell outside [0, 1]
    saturated: bool = False  # every epoch loss is above the Koopman loss
    boundary: bool = False   # Q = 0, interpolated against the loss at t2


def t_eq_fractional(epoch_losses, koopman_loss: float, loss_t2: float | None = None) -> FractionalTEq:
    """T^eq = Q + R over epoch losses l_1 .. l_n.

    Q = max{i : l_i > l_KO} (0 if none) and
    R = (l_Q - l_KO) / (l_Q - l_{Q+1}), clamped to [0, 1]. For Q = 0 the
    reference l_0 is ``loss_t2``, the loss where prediction started.
    """
    ell = np.asarray(epoch_losses, dtype=float)
    if ell.size == 0:
        raise ConfigurationError("empty epoch-loss series")
    Q = t_eq_iterative(ell, koopman_loss)
    if Q == ell.size:
        return FractionalTEq(float(Q), Q, 0.0, saturated=True)
    if Q == 0:
        if loss_t2 is None:
            return FractionalTEq(0.0, 0, 0.0, boundary=True)
        hi = float(loss_t2)
    else:
        hi = float(ell[Q - 1])
    lo = float(ell[Q])
    if hi == lo:
        return FractionalTEq(float(Q), Q, 0.0, flat=True, boundary=Q == 0)
    raw = (hi - koopman_loss) / (hi - lo)
    R = min(max(raw, 0.0), 1.0)
    return FractionalTEq(Q + R, Q, R, clamped=R != raw, boundary=Q == 0)


def equivalent_runtime(epoch_times, Q: int, R: float) -> float:
    """Wall-clock of T^eq = Q + R standard epochs: sum of the first Q plus R of the next."""
    tau = np.asarray(epoch_times, dtype=float)
    if Q < 0 or not 0.0 <= R <= 1.0:
        raise ConfigurationError("need Q >= 0 and R in [0, 1]")
    if tau.size < Q + (1 if R > 0 else 0):
        raise ConfigurationError(f"need at least {Q + 1} epoch times, got {tau.size}")
    total = float(tau[:Q].sum())
    if R > 0:
        total += R * float(tau[Q])
    return total


@dataclass
class ErrorStats:
    delta: np.ndarray   # true evolution w(t2 + T) - w(t2)
    error: np.ndarray   # prediction error w_pred(t2 + T) - w(t2 + T)
    median_ratio: float
    n_excluded: int


def error_evolution_stats(w_t2, w_true, w_pred, threshold: float = UNMOVED_THRESHOLD) -> ErrorStats:
    """Per-parameter prediction error against how far the weight truly moved.

    Parameters that moved less than ``threshold`` are left out of the median
    ratio and counted in ``n_excluded``.
    """
    w_t2, w_true, w_pred = (np.asarray(a, dtype=float) for a in (w_t2, w_true, w_pred))
    if not w_t2.shape == w_true.shape == w_pred.shape:
        raise ConfigurationError("parameter vectors differ in length")
    delta = w_true - w_t2
    err = w_pred - w_true
    moved = np.abs(delta) >= threshold
    ratio = np.abs(err[moved]) / np.abs(delta[moved])
    med = float(np.median(ratio)) if ratio.size else float("nan")
    return ErrorStats(delta, err, med, int((~moved).sum()))


def speedup(standard_seconds: float, koopman_seconds: float) -> float:
    """Ratio of standard to Koopman time; zero Koopman time gives the inf sentinel."""
    if koopman_seconds <= 0:
        return SPEEDUP_INF
    return standard_seconds / koopman_seconds


@dataclass
class PhaseTimer:
    """Wall-clock seconds and multiply-add counts per phase."""

    seconds: dict[str, float] = field(default_factory=dict)
    flops: dict[str, int] = field(default_factory=dict)

    def add(self, phase: str, seconds: float, flops: int = 0):
        self.seconds[phase] = self.seconds.get(phase, 0.0) + seconds
        self.flops[phase] = self.flops.get(phase, 0) + int(flops)


@dataclass
class RunMetrics:
    seed: int
    task: str
    optimizer: str
    scheme: str
    T: int
    t_eq: float
    speedup_excl: float
    speedup_incl: float
    median_error_ratio: float
    max_patch_modulus: float
    error_pairs: ErrorStats | None = None
    timing: PhaseTimer | None = None
    notes: dict = field(default_factory=dict)

    @property
    def t_eq_over_T(self) -> float:
        return self.t_eq / self.T

    @property
    def success(self) -> bool:
        return self.t_eq / self.T > 0

    def row(self) -> dict:
        return {
            "seed": self.seed, "task": self.task, "optimizer": self.optimizer, "scheme": self.scheme,
            "T": self.T, "t_eq": self.t_eq, "t_eq_over_T": self.t_eq_over_T, "success": int(self.success),
            "speedup_excl": self.speedup_excl, "speedup_incl": self.speedup_incl,
            "median_error_ratio": self.median_error_ratio, "max_patch_modulus": self.max_patch_modulus,
        }


def _fmt(v):
    if isinstance(v, float):
        if math.isinf(v):
            return "inf"
        return repr(v)
    return str(v)


def write_summary_csv(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SUMMARY_COLUMNS)
        for r in rows:
            r = r.row() if isinstance(r, RunMetrics) else r
            w.writerow([_fmt(r[c]) for c in SUMMARY_COLUMNS])


def read_summary_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def write_error_csv(path, stats: ErrorStats):
    """Long format, one row per parameter: (param_index, delta_true, error)."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("param_index", "delta_true", "error"))
        for i, (d, e) in enumerate(zip(stats.delta, stats.error)):
            w.writerow((i, repr(float(d)), repr(float(e))))
