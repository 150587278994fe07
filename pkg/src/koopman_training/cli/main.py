"""Command line entry point: train, koopman, compare, bench, inspect."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..errors import KoopmanTrainingError
from ..koopman import MODEL_MAGIC, build_model, load_model, predict, save_model
from ..param_space import build_partition
from ..recorder import MAGIC as TRAJ_MAGIC
from ..recorder import read_header, read_sidecar, read_trajectory
from .bench import bench_complexity, summarize, write_bench_csv
from .config import ExperimentConfig, parse_config
from .pipeline import build_task, run_experiment, train_and_record, window_iterations, write_manifest

log = logging.getLogger("koopman_training")


def _load_config(args) -> ExperimentConfig:
    cfg = parse_config(args.config) if args.config else ExperimentConfig()
    seeds = list(range(args.seeds)) if getattr(args, "seeds", None) else None
    return cfg.with_overrides(seeds=seeds, out=getattr(args, "out", None),
                              workers=getattr(args, "workers", None), mnist_dir=getattr(args, "mnist_dir", None))


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = cfg.with_overrides(write_trajectories=True)
    write_manifest(cfg, out, {"stage": "train"})
    failed = 0
    for seed in cfg.seeds:
        try:
            task, trainer, traj, win = train_and_record(cfg, seed, out)
            print(f"seed {seed}: recorded {traj.k} snapshots of {traj.arch.n_params} params "
                  f"(iterations {win.t1}..{win.t2})")
        except (KoopmanTrainingError, OSError) as exc:
            failed += 1
            print(f"seed {seed}: failed: {exc}", file=sys.stderr)
    return 1 if failed else 0


def cmd_koopman(args) -> int:
    cfg = _load_config(args)
    out = Path(cfg.out)
    epoch_len = 1
    if cfg.window.unit == "epoch":
        epoch_len = getattr(build_task(cfg)[0], "iterations_per_epoch", 1)
    failed = 0
    for seed in cfg.seeds:
        sdir = out / f"seed_{seed}"
        try:
            traj = read_trajectory(sdir / "trajectory.ktrj")
            win = window_iterations(cfg, epoch_len)
            model = build_model(traj, build_partition(traj.arch, cfg.scheme), win.T, cfg.lam)
            final = predict(model, keep="last", divergence_cap=cfg.divergence_cap)[-1]
            save_model(sdir / "model.kmod", model)
            np.save(sdir / "prediction_final.npy", final)
            print(f"seed {seed}: {len(model.patches)} patches, T={model.T}, "
                  f"max |eig| {model.max_modulus:.6f}")
        except (KoopmanTrainingError, OSError) as exc:
            failed += 1
            print(f"seed {seed}: failed: {exc}", file=sys.stderr)
    return 1 if failed else 0


def cmd_compare(args) -> int:
    cfg = _load_config(args)
    result = run_experiment(cfg)
    for s in result.seeds:
        if s["status"] != "ok":
            print(f"seed {s['seed']}: FAILED {s['error']}", file=sys.stderr)
        elif "row" in s:
            r = s["row"]
            print(f"seed {r['seed']}: T^eq/T={r['t_eq_over_T']:.3f} success={r['success']} "
                  f"speedup={r['speedup_excl']:.1f}x median|e|/|d|={r['median_error_ratio']:.4g}")
    print(f"results in {result.out}")
    return 1 if result.failed else 0


def cmd_bench(args) -> int:
    rows = bench_complexity(args.widths, args.k, tuple(args.schemes))
    out = Path(args.out) if args.out else Path("bench.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_bench_csv(out, rows)
    for scheme, s in summarize(rows).items():
        print(f"{scheme}: per-step exponent {s['per_step_exponent']:.2f}, construction constant "
              f"{s['construction_constant']:.3g} (worst factor {s['construction_worst_factor']:.2f})")
    skipped = [r for r in rows if r.skipped]
    for r in skipped:
        print(f"skipped {r.scheme} n={r.n}: {r.skipped}")
    print(f"wrote {out}")
    return 0


def cmd_inspect(args) -> int:
    path = Path(args.path)
    with open(path, "rb") as f:
        magic = f.read(4)
    if magic == TRAJ_MAGIC:
        info = {"kind": "trajectory", **read_header(path)}
        try:
            info["sidecar"] = read_sidecar(path)
        except OSError:
            info["sidecar"] = None
    elif magic == MODEL_MAGIC:
        model = load_model(path)
        sizes = [p.m for p in model.patches]
        info = {"kind": "model", "n_params": model.n_params, "T": model.T, "scheme": model.scheme,
                "patches": len(sizes), "patch_sizes": sorted(set(sizes)), "per_step_flops": model.per_step_flops}
    else:
        raise KoopmanTrainingError(f"{path}: not a trajectory or model file (magic {magic!r})")
    print(json.dumps(info, indent=1))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="koopman-training", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="experiment JSON file (defaults if omitted)")
        sp.add_argument("--seeds", type=int, help="use seeds 0..n-1 instead of the config list")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--workers", type=int, help="worker processes over seeds")
        sp.add_argument("--mnist-dir", dest="mnist_dir", help="directory with the IDX files")

    for name, fn, text in (("train", cmd_train, "standard training with trajectory recording"),
                           ("koopman", cmd_koopman, "build patches from recorded trajectories and predict"),
                           ("compare", cmd_compare, "full standard-vs-Koopman pipeline")):
        sp = sub.add_parser(name, help=text)
        common(sp)
        sp.set_defaults(fn=fn)

    sp = sub.add_parser("bench", help="complexity benchmark on cube networks")
    sp.add_argument("--widths", type=int, nargs="+", default=[4, 8, 16])
    sp.add_argument("--k", type=int, default=100)
    sp.add_argument("--schemes", nargs="+", default=["single_weight", "node", "layer"])
    sp.add_argument("--out", help="CSV path (default bench.csv)")
    sp.set_defaults(fn=cmd_bench)

    sp = sub.add_parser("inspect", help="print the header of a trajectory or model file")
    sp.add_argument("path")
    sp.set_defaults(fn=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except KoopmanTrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
