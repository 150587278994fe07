"""Construction and per-step cost of each partition scheme on cube networks."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from ..koopman import build_model, predict
from ..param_space import SchemeKind, Scheme, build_partition, cube_architecture, predicted_complexity
from ..recorder import Trajectory

BENCH_COLUMNS = ("scheme", "n", "k", "n_params", "n_groups", "construction_flops", "per_step_flops",
                 "predicted_construction", "predicted_per_step", "construction_seconds",
                 "per_step_seconds", "skipped")

# largest single patch (bytes of U) the bench will build
DEFAULT_PATCH_BYTES = 1 << 28


def random_walk(n_params: int, k: int, seed: int = 0, step: float = 0.01) -> np.ndarray:
    rng = np.random.default_rng(seed)
    walk = np.cumsum(step * rng.standard_normal((k, n_params)), axis=0)
    return walk + rng.standard_normal(n_params)


@dataclass
class BenchRow:
    scheme: str
    n: int
    k: int
    n_params: int
    n_groups: int
    construction_flops: int
    per_step_flops: int
    predicted_construction: float
    predicted_per_step: float
    construction_seconds: float
    per_step_seconds: float
    skipped: str = ""

    def as_list(self):
        return [getattr(self, c) for c in BENCH_COLUMNS]


def bench_complexity(widths, k: int = 100, schemes=("single_weight", "node", "layer"), seed: int = 0,
                     timing_steps: int = 20, max_patch_bytes: int = DEFAULT_PATCH_BYTES) -> list[BenchRow]:
    """One row per (scheme, width): counted and predicted multiply-adds, and wall-clock."""
    rows = []
    for n in widths:
        if n < 2:
            raise ValueError("bench widths must be >= 2")
        arch = cube_architecture(n)
        traj = Trajectory(arch, 0, k - 1, random_walk(arch.n_params, k, seed + n))
        for name in schemes:
            scheme = Scheme.parse(name)
            pred_c, pred_s = predicted_complexity(scheme, n, k)
            largest = arch.n_params if scheme.kind is SchemeKind.NETWORK else max(arch.row_width) * n
            if scheme.kind is SchemeKind.NETWORK and largest**2 * 8 > max_patch_bytes:
                rows.append(BenchRow(str(scheme), n, k, arch.n_params, 1, 0, 0, pred_c, pred_s,
                                     float("nan"), float("nan"), "patch exceeds memory guard"))
                continue
            part = build_partition(arch, scheme)
            t0 = time.perf_counter()
            model = build_model(traj, part, timing_steps, diagnostics=False)
            t_con = time.perf_counter() - t0
            t0 = time.perf_counter()
            with np.errstate(all="ignore"):
                try:
                    predict(model, keep="last", divergence_cap=np.inf)
                except Exception:
                    pass
            t_step = (time.perf_counter() - t0) / timing_steps
            rows.append(BenchRow(str(scheme), n, k, arch.n_params, len(part), model.construction_flops,
                                 model.per_step_flops, pred_c, pred_s, t_con, t_step))
    return rows


def fitted_exponent(ns, values) -> float:
    """Slope of log(values) against log(n)."""
    return float(np.polyfit(np.log(ns), np.log(values), 1)[0])


def constant_fit(measured, predicted) -> tuple[float, float]:
    """(c, worst factor) for measured ~ c * predicted with one geometric-mean constant."""
    ratio = np.asarray(measured, dtype=float) / np.asarray(predicted, dtype=float)
    c = float(np.exp(np.mean(np.log(ratio))))
    worst = float(np.max(np.maximum(ratio / c, c / ratio)))
    return c, worst


def summarize(rows: list[BenchRow]) -> dict:
    """Per scheme: per-step exponent and the constant fit of construction counts."""
    out = {}
    for scheme in dict.fromkeys(r.scheme for r in rows):
        rs = [r for r in rows if r.scheme == scheme and not r.skipped]
        if len(rs) < 2:
            continue
        ns = [r.n for r in rs]
        c, worst = constant_fit([r.construction_flops for r in rs], [r.predicted_construction for r in rs])
        out[scheme] = {"per_step_exponent": fitted_exponent(ns, [r.per_step_flops for r in rs]),
                       "construction_constant": c, "construction_worst_factor": worst}
    return out


def write_bench_csv(path, rows: list[BenchRow]):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(BENCH_COLUMNS)
        for r in rows:
            w.writerow(r.as_list())
