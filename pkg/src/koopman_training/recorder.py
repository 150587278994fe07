"""Recording the weight/bias trajectory w(t) of a training run.

Trajectory files are little-endian: magic ``KTRJ``, u32 format version,
u64 N, u64 t1, u64 t2, then t2 - t1 + 1 records of N float64 values. A
sidecar text file (``<file>.meta``) holds the architecture and config hash.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .errors import ConfigurationError, IngestionError
from .param_space import Architecture

MAGIC = b"KTRJ"
VERSION = 1
_HEADER = struct.Struct("<4sIQQQ")


class Trainer:
    """A standard training loop: ``step()`` applies one optimizer update.

    ``t`` counts completed updates, so ``params`` is w(t). When a batch
    source is given, each step draws the next minibatch from it.
    """

    def __init__(self, params, optimizer, loss_and_grad: Callable, batches: Iterator | None = None,
                 flops=None):
        self.params = np.array(params, dtype=float)
        self.optimizer = optimizer
        self.loss_and_grad = loss_and_grad
        self.batches = batches
        self.flops = flops
        self.t = 0
        self.last_loss = None

    def step(self):
        if self.batches is None:
            loss, grad = self.loss_and_grad(self.params, flops=self.flops)
        else:
            loss, grad = self.loss_and_grad(self.params, next(self.batches), flops=self.flops)
        self.optimizer.step(self.params, grad)
        self.t += 1
        self.last_loss = loss
        return loss

    def run_until(self, t):
        while self.t < t:
            self.step()


@dataclass
class Trajectory:
    arch: Architecture
    t1: int
    t2: int
    snapshots: np.ndarray  # (k, N); row i is w(t1 + i)

    def __post_init__(self):
        if not 0 <= self.t1 < self.t2:
            raise ConfigurationError(f"need 0 <= t1 < t2, got t1={self.t1}, t2={self.t2}")
        k = self.t2 - self.t1 + 1
        if self.snapshots.shape != (k, self.arch.n_params):
            raise ConfigurationError(f"expected {k} snapshots of length {self.arch.n_params}, "
                                     f"got array of shape {self.snapshots.shape}")

    @property
    def k(self) -> int:
        return self.snapshots.shape[0]

    def at(self, t: int) -> np.ndarray:
        return self.snapshots[t - self.t1]


@dataclass
class SnapshotPair:
    F: np.ndarray   # m x (k - 1): w(t1) ... w(t2 - 1)
    Fp: np.ndarray  # m x (k - 1): w(t1 + 1) ... w(t2)
    group: np.ndarray


def record(trainer: Trainer, t1: int, t2: int, arch: Architecture, writer: "TrajectoryWriter | None" = None) -> Trajectory:
    """Advance ``trainer`` to iteration ``t2``, keeping every w(t) for t in [t1, t2].

    Snapshots are taken after each update. Recording copies the parameters
    and never touches the optimizer, so the training run is unchanged.
    """
    if not 0 <= t1 < t2:
        raise ConfigurationError(f"need 0 <= t1 < t2, got t1={t1}, t2={t2}")
    if trainer.t > t1:
        raise ConfigurationError(f"trainer is already at iteration {trainer.t} > t1={t1}")
    trainer.run_until(t1)
    snaps = np.empty((t2 - t1 + 1, arch.n_params))
    snaps[0] = trainer.params
    try:
        if writer is not None:
            writer.append(snaps[0])
        for i in range(1, t2 - t1 + 1):
            trainer.step()
            snaps[i] = trainer.params
            if writer is not None:
                writer.append(snaps[i])
    except OSError as exc:
        raise OSError(f"trajectory write failed at iteration {trainer.t}: {exc}") from exc
    return Trajectory(arch, t1, t2, snaps)


def extract(traj: Trajectory, group) -> SnapshotPair:
    group = np.asarray(group, dtype=np.int64)
    if group.size == 0 or group.min() < 0 or group.max() >= traj.arch.n_params:
        raise ConfigurationError("group index out of range for this trajectory")
    sub = traj.snapshots[:, group].T
    return SnapshotPair(sub[:, :-1], sub[:, 1:], group)


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".meta")


def _write_sidecar(path: Path, arch: Architecture, config_hash: str):
    lines = [
        f"arch={arch}",
        f"activation={arch.activation.value}",
        f"output_activation={arch.output_activation.value}",
        f"has_bias={int(arch.has_bias)}",
        f"config_hash={config_hash}",
    ]
    _sidecar(path).write_text("\n".join(lines) + "\n")


def read_sidecar(path) -> dict:
    meta = {}
    for line in _sidecar(Path(path)).read_text().splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            meta[key.strip()] = value.strip()
    return meta


class TrajectoryWriter:
    """Streams snapshots to disk as they are produced."""

    def __init__(self, path, arch: Architecture, t1: int, t2: int, config_hash: str = ""):
        self.path = Path(path)
        self.expected = t2 - t1 + 1
        self.n = arch.n_params
        self.count = 0
        _write_sidecar(self.path, arch, config_hash)
        self._f = open(self.path, "wb")
        self._f.write(_HEADER.pack(MAGIC, VERSION, self.n, t1, t2))

    def append(self, w: np.ndarray):
        if self.count >= self.expected:
            raise ConfigurationError("more snapshots than the header declares")
        self._f.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
        self.count += 1

    def close(self):
        self._f.close()
        if self.count != self.expected:
            raise IngestionError(f"wrote {self.count} of {self.expected} snapshots", path=self.path)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_trajectory(path, traj: Trajectory, config_hash: str = ""):
    path = Path(path)
    _write_sidecar(path, traj.arch, config_hash)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, traj.arch.n_params, traj.t1, traj.t2))
        f.write(np.ascontiguousarray(traj.snapshots, dtype="<f8").tobytes())


def read_header(path) -> dict:
    with open(path, "rb") as f:
        raw = f.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise IngestionError("truncated trajectory header", offset=len(raw), path=path)
    magic, version, n, t1, t2 = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise IngestionError(f"bad trajectory magic {magic!r}", offset=0, path=path)
    if version != VERSION:
        raise IngestionError(f"unsupported trajectory version {version}", offset=4, path=path)
    return {"n_params": n, "t1": t1, "t2": t2, "snapshots": t2 - t1 + 1}


def read_trajectory(path, arch: Architecture | None = None) -> Trajectory:
    """Load a trajectory; the architecture comes from the sidecar unless given."""
    path = Path(path)
    head = read_header(path)
    if arch is None:
        meta = read_sidecar(path)
        arch = Architecture.parse(meta["arch"], meta.get("activation", "sigmoid"),
                                  bool(int(meta.get("has_bias", 1))),
                                  meta.get("output_activation", "identity"))
    if arch.n_params != head["n_params"]:
        raise IngestionError(f"file holds {head['n_params']} params per snapshot, "
                             f"{arch} has {arch.n_params}", offset=8, path=path)
    k = head["snapshots"]
    nbytes = k * head["n_params"] * 8
    data = np.fromfile(path, dtype="<f8", offset=_HEADER.size)
    if data.size * 8 < nbytes:
        raise IngestionError(f"truncated trajectory: {data.size * 8} of {nbytes} payload bytes",
                             offset=_HEADER.size + data.size * 8, path=path)
    snaps = data[:k * head["n_params"]].reshape(k, head["n_params"]).astype(np.float64)
    return Trajectory(arch, int(head["t1"]), int(head["t2"]), snaps)
