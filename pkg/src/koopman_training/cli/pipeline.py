"""The standard-versus-Koopman comparison pipeline, one seed at a time.

Per seed: train to t2 while recording [t1, t2]; branch B builds patches from
the recording and predicts T steps past w(t2); branch A keeps training with
the standard optimizer from the same w(t2). The two are then compared.
"""

from __future__ import annotations

import hashlib
import json
import logging
import platform
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy

from .. import __version__
from ..errors import ConfigurationError, PredictionDiverged
from ..koopman import build_model, predict, save_model
from ..metrics import (PhaseTimer, RunMetrics, equivalent_runtime, error_evolution_stats, speedup,
                       t_eq_fractional, t_eq_iterative, write_error_csv, write_summary_csv)
from ..nn import FlopCounter, init_params
from ..optimizers import LrSchedule, make_optimizer
from ..param_space import Activation, Architecture, build_partition
from ..recorder import Trainer, TrajectoryWriter, record
from ..tasks.de_solver import DESolverTask, Hamiltonian
from ..tasks.mnist import ClassifierTask, make_classifier_task
from ..tasks.perceptron import PerceptronTask, perceptron_experiment
from .config import ExperimentConfig

log = logging.getLogger(__name__)


def param_hash(w: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(w, dtype="<f8").tobytes()).hexdigest()


@lru_cache(maxsize=2)
def _classifier(spec_json: str) -> tuple[ClassifierTask, str]:
    spec = json.loads(spec_json)
    task, source = make_classifier_task(spec["mnist_dir"], spec["data_seed"], spec["synthetic_noise"],
                                        spec["test_count"])
    task.batch_size = spec["batch_size"]
    task.test_batch_size = spec["test_batch_size"]
    return task, source


def build_task(cfg: ExperimentConfig):
    """(task, data source label) for a DE-solver or classifier config."""
    spec = cfg.task
    if spec.kind == "de_solver":
        arch = Architecture((1, spec.width, spec.width, 2), Activation.SIGMOID)
        task = DESolverTask(arch, Hamiltonian(spec.hamiltonian), spec.x0, spec.p0, spec.t_max, spec.n_points)
        return task, "collocation"
    if spec.kind == "classifier":
        return _classifier(spec.model_dump_json())
    raise ConfigurationError(f"task kind {spec.kind!r} has no trainable pipeline")


@dataclass
class Window:
    """Recording window and horizons in optimizer iterations."""

    t1: int
    t2: int
    T: int
    horizon: int
    per_unit: int  # iterations per config unit (1, or the epoch length)


def window_iterations(cfg: ExperimentConfig, epoch_len: int) -> Window:
    w = cfg.window
    if w.unit == "iteration":
        return Window(w.t1, w.t2, w.T, w.horizon, 1)
    return Window((w.t1 - 1) * epoch_len, w.t2 * epoch_len, w.T * epoch_len, w.horizon * epoch_len, epoch_len)


def make_lr(cfg: ExperimentConfig, epoch_len: int) -> LrSchedule:
    lr = cfg.optimizer.lr
    if lr.kind == "constant":
        return LrSchedule.constant(lr.a)
    if lr.kind == "decay":
        return LrSchedule.decay(lr.a, lr.b)
    return LrSchedule.step(lr.a, lr.gamma, lr.every or epoch_len)


def make_opt(cfg: ExperimentConfig, n: int, epoch_len: int):
    o = cfg.optimizer
    hyper = {"eps": o.effective_eps()}
    if o.kind == "adadelta":
        hyper["rho"] = o.rho
    elif o.kind == "adam":
        hyper["betas"] = o.betas
    elif o.kind == "sgd":
        hyper = {}
    return make_optimizer(o.kind, n, make_lr(cfg, epoch_len), **hyper)


def _batch_stream(task: ClassifierTask, rng):
    while True:
        yield from task.epoch_batches(rng)


def start_training(cfg: ExperimentConfig, seed: int, flops: FlopCounter | None = None):
    """(task, trainer, epoch length) with w(0) and optimizer state for ``seed``."""
    task, _ = build_task(cfg)
    classifier = isinstance(task, ClassifierTask)
    epoch_len = task.iterations_per_epoch if classifier else 1
    w0 = init_params(task.arch, seed, cfg.init_domain)
    opt = make_opt(cfg, task.arch.n_params, epoch_len)
    if classifier:
        stream = _batch_stream(task, np.random.default_rng([seed, 1]))
        trainer = Trainer(w0, opt, task.loss_and_grad, stream, flops)
    else:
        trainer = Trainer(w0, opt, task.loss_and_grad, flops=flops)
    return task, trainer, epoch_len


def _seed_dir(out: Path, seed: int) -> Path:
    d = out / f"seed_{seed}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def train_and_record(cfg: ExperimentConfig, seed: int, out: Path, timer: PhaseTimer | None = None):
    """Standard training to t2 with recording; writes the trajectory if configured."""
    flops = FlopCounter() if cfg.record_flops else None
    task, trainer, epoch_len = start_training(cfg, seed, flops)
    win = window_iterations(cfg, epoch_len)
    writer = None
    if cfg.write_trajectories:
        writer = TrajectoryWriter(_seed_dir(out, seed) / "trajectory.ktrj", task.arch, win.t1, win.t2,
                                  cfg.config_hash())
    t0 = time.perf_counter()
    try:
        traj = record(trainer, win.t1, win.t2, task.arch, writer)
    finally:
        if writer is not None:
            writer.close()
    if timer is not None:
        timer.add("standard_train", time.perf_counter() - t0, flops.total if flops else 0)
    return task, trainer, traj, win


def run_seed(cfg: ExperimentConfig, seed: int, out: Path) -> dict:
    timer = PhaseTimer()
    task, trainer, traj, win = train_and_record(cfg, seed, out, timer)
    classifier = isinstance(task, ClassifierTask)
    sdir = _seed_dir(out, seed)
    w_t2 = traj.snapshots[-1].copy()
    if param_hash(w_t2) != param_hash(trainer.params):
        raise RuntimeError("branch contamination: recorded w(t2) differs from the trainer state")
    details: dict = {"seed": seed, "w_t2_sha256": param_hash(w_t2), "window_iterations": win.__dict__}

    # branch B: Koopman
    partition = build_partition(task.arch, cfg.scheme)
    t0 = time.perf_counter()
    model = build_model(traj, partition, win.T, cfg.lam)
    t_con = time.perf_counter() - t0
    timer.add("construction", t_con, model.construction_flops)
    del traj
    diverged = None
    t0 = time.perf_counter()
    try:
        w_pred = predict(model, keep="last", divergence_cap=cfg.divergence_cap)[-1]
    except PredictionDiverged as exc:
        w_pred, diverged = None, {"step": exc.step, "index": exc.index}
    t_pred = time.perf_counter() - t0
    timer.add("prediction", t_pred, model.per_step_flops * win.T)
    save_model(sdir / "model.kmod", model)
    methods = {}
    for p in model.patches:
        methods[p.method] = methods.get(p.method, 0) + 1
    details["patches"] = {"count": len(model.patches), "methods": methods,
                          "max_modulus": model.max_modulus, "per_step_flops": model.per_step_flops,
                          "construction_flops": model.construction_flops}

    # branch A: standard optimizer from the same w(t2)
    fa = FlopCounter()
    trainer.flops = fa
    opt_flops0 = trainer.optimizer.flops
    step_times, losses = [], []
    w_true = None
    if classifier:
        loss_t2 = task.evaluate(w_t2)[0]
        for _ in range(win.horizon // win.per_unit):
            t0 = time.perf_counter()
            for _ in range(win.per_unit):
                trainer.step()
            step_times.append(time.perf_counter() - t0)
            losses.append(task.evaluate(trainer.params)[0])
            if len(losses) * win.per_unit == win.T:
                w_true = trainer.params.copy()
    else:
        loss_t2 = task.loss(w_t2)
        for i in range(win.horizon):
            t0 = time.perf_counter()
            trainer.step()
            step_times.append(time.perf_counter() - t0)
            losses.append(task.loss(trainer.params))
            if i + 1 == win.T:
                w_true = trainer.params.copy()
    std_seconds = float(np.sum(step_times))
    train_flops = fa.total + (trainer.optimizer.flops - opt_flops0)
    timer.add("standard_branch", std_seconds, train_flops)
    per_iter_train_flops = train_flops / win.horizon

    T_units = win.T // win.per_unit
    if diverged is not None:
        koop_loss, t_eq, equiv, frac = float("nan"), 0.0, 0.0, None
        stats = None
    else:
        koop_loss = task.evaluate(w_pred)[0] if classifier else task.loss(w_pred)
        if classifier:
            frac = t_eq_fractional(losses, koop_loss, loss_t2)
            t_eq = frac.value
            equiv = equivalent_runtime(step_times, frac.Q, frac.R)
        else:
            frac = None
            t_eq = float(t_eq_iterative(losses, koop_loss))
            equiv = float(np.sum(step_times[:int(t_eq)]))
        stats = error_evolution_stats(w_t2, w_true, w_pred)
        write_error_csv(sdir / "errors.csv", stats)

    sp_excl = speedup(equiv, t_pred) if diverged is None else 0.0
    sp_incl = speedup(equiv, t_pred + t_con) if diverged is None else 0.0
    metrics = RunMetrics(seed, cfg.task.kind, cfg.optimizer.kind, str(partition.scheme), T_units, t_eq,
                         sp_excl, sp_incl, stats.median_ratio if stats else float("nan"),
                         model.max_modulus, stats, timer)
    details.update({
        "row": metrics.row(),
        "loss_t2": loss_t2,
        "koopman_loss": koop_loss,
        "standard_losses": losses,
        "standard_unit_seconds": step_times,
        "standard_seconds_per_unit": std_seconds / len(step_times),
        "prediction_seconds": t_pred,
        "prediction_seconds_per_unit": t_pred / T_units,
        "construction_seconds": t_con,
        "equivalent_standard_seconds": equiv,
        "per_iteration_train_flops": per_iter_train_flops,
        "per_iteration_koopman_flops": model.per_step_flops,
        "diverged": diverged,
        "saturated": bool(t_eq >= win.horizon // win.per_unit),
        "fractional": frac.__dict__ if frac else None,
        "excluded_unmoved": stats.n_excluded if stats else None,
        "timing": {"seconds": timer.seconds, "flops": timer.flops},
    })
    if classifier:
        details["koopman_accuracy"] = task.evaluate(w_pred)[1] if w_pred is not None else None
        details["standard_accuracy"] = task.evaluate(trainer.params)[1]
    (sdir / "metrics.json").write_text(json.dumps(details, indent=1, default=_json_default))
    return details


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o)}")


def _safe_seed(cfg_json: str, seed: int, out: str) -> dict:
    cfg = ExperimentConfig.model_validate_json(cfg_json)
    try:
        return {"status": "ok", **run_seed(cfg, seed, Path(out))}
    except Exception as exc:  # recorded per seed; other seeds continue
        log.error("seed %s failed: %s", seed, exc)
        return {"status": "failed", "seed": seed, "error": f"{type(exc).__name__}: {exc}",
                "traceback": traceback.format_exc()}


@dataclass
class ExperimentResult:
    out: Path
    seeds: list[dict] = field(default_factory=list)

    @property
    def completed(self) -> list[dict]:
        return [s for s in self.seeds if s["status"] == "ok"]

    @property
    def failed(self) -> list[dict]:
        return [s for s in self.seeds if s["status"] != "ok"]

    @property
    def rows(self) -> list[dict]:
        return [s["row"] for s in self.completed if "row" in s]


def write_manifest(cfg: ExperimentConfig, out: Path, extra: dict | None = None):
    manifest = {
        "config": cfg.resolved(),
        "config_hash": cfg.config_hash(),
        "package_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "derived": {
            "optimizer_eps": cfg.optimizer.effective_eps(),
            "t_max": cfg.window.horizon,
        },
    }
    manifest.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, default=_json_default))
    return manifest


def run_experiment(cfg: ExperimentConfig, out=None) -> ExperimentResult:
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.task.kind == "perceptron":
        return run_perceptron(cfg, out)
    write_manifest(cfg, out, {"status": "running"})
    cfg_json = cfg.model_dump_json()
    result = ExperimentResult(out)
    if cfg.workers == 1 or len(cfg.seeds) == 1:
        for seed in cfg.seeds:
            result.seeds.append(_safe_seed(cfg_json, seed, str(out)))
    else:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            futures = [pool.submit(_safe_seed, cfg_json, s, str(out)) for s in cfg.seeds]
            result.seeds = [f.result() for f in futures]
    write_summary_csv(out / "summary.csv", result.rows)
    (out / "failures.json").write_text(json.dumps(result.failed, indent=1))
    ratios = [r["t_eq_over_T"] for r in result.rows]
    write_manifest(cfg, out, {
        "status": "complete" if not result.failed else "partial",
        "completed_seeds": [s["seed"] for s in result.completed],
        "failed_seeds": [s["seed"] for s in result.failed],
        "median_t_eq_over_T": float(np.median(ratios)) if ratios else None,
        "success_rate": float(np.mean([r["success"] for r in result.rows])) if ratios else None,
    })
    return result


def run_perceptron(cfg: ExperimentConfig, out: Path) -> ExperimentResult:
    """Perceptron task: baseline and one Koopman variant per scheme for every seed.

    The switch step is ``window.t2``; prediction runs to the end of training.
    """
    spec = cfg.task
    task = PerceptronTask(spec.eta, spec.p_active, spec.n_steps, tuple(spec.init_domain), spec.correlated)
    write_manifest(cfg, out, {"status": "running"})
    runs = perceptron_experiment(task, cfg.seeds, cfg.window.t2, spec.schemes)
    result = ExperimentResult(out)
    with open(out / "perceptron_summary.csv", "w") as f:
        f.write("seed,variant,final_error,plateau_step,diverged,diverged_step\n")
        for variant, res in runs.items():
            for seed, r in zip(cfg.seeds, res):
                f.write(f"{seed},{variant},{r.errors[-1]!r},{r.plateau_step},{int(r.diverged)},"
                        f"{'' if r.diverged_step is None else r.diverged_step}\n")
    curves = {v: np.mean([r.errors for r in res], axis=0) for v, res in runs.items()}
    with open(out / "perceptron_mean_error.csv", "w") as f:
        f.write("step," + ",".join(curves) + "\n")
        for t in range(task.n_steps + 1):
            f.write(f"{t}," + ",".join(repr(float(c[t])) for c in curves.values()) + "\n")
    for seed in cfg.seeds:
        result.seeds.append({"status": "ok", "seed": seed})
    write_manifest(cfg, out, {"status": "complete", "completed_seeds": list(cfg.seeds), "failed_seeds": []})
    result.perceptron = runs
    return result
