"""Finite-section Koopman operators per parameter group, and the prediction loop.

For one group with snapshot matrices F (states w(t1..t2-1)) and F' (states
w(t1+1..t2)) the finite section is the least-squares map U with U F ~ F',
i.e. U = F' F^+ with F^+ the Moore-Penrose pseudoinverse. When there are at
least as many snapshot pairs as group members the normal-equation form
F' F^T (F F^T + lam I)^-1 is used, solved by Cholesky. A rank-deficient or
badly conditioned Gram matrix falls back to a truncated SVD of F.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla
from scipy.linalg import lapack

from .errors import ConfigurationError, ConstructionError, IngestionError, PredictionDiverged
from .param_space import Partition
from .recorder import SnapshotPair, Trajectory, extract

SPECTRAL_CAP = 256
DIVERGENCE_CAP = 1e12
# below this reciprocal condition number of F F^T the Cholesky path is not trusted
GRAM_RCOND = 1e-10

MODEL_MAGIC = b"KMOD"
MODEL_VERSION = 1
_METHODS = ("cholesky", "svd", "ridge")


@dataclass
class KoopmanPatch:
    U: np.ndarray
    group: np.ndarray
    lam: float = 0.0
    condition_estimate: float = float("nan")
    method: str = "cholesky"
    rank: int = 0
    flops: int = 0
    note: str = ""
    spectrum: np.ndarray | None = None
    max_modulus: float = float("nan")

    def __post_init__(self):
        self.U = np.asarray(self.U, dtype=float)
        self.group = np.asarray(self.group, dtype=np.int64)
        m = self.group.size
        if self.U.shape != (m, m):
            raise ConfigurationError(f"patch matrix {self.U.shape} does not match group size {m}")
        if not np.all(np.isfinite(self.U)):
            raise ConstructionError("patch matrix is not finite")

    @property
    def m(self) -> int:
        return self.group.size


@dataclass
class SpectralReport:
    available: bool
    max_modulus: float
    on_unit_circle: int | None
    estimated: bool = False


def _spectral_radius_estimate(U, iters=200, seed=0):
    """Growth rate of ||U^t x|| for a random start; cheap stand-in for max |eig|."""
    x = np.random.default_rng(seed).standard_normal(U.shape[0])
    x /= np.linalg.norm(x)
    logs = []
    for _ in range(iters):
        x = U @ x
        nrm = np.linalg.norm(x)
        if nrm == 0 or not np.isfinite(nrm):
            return 0.0 if nrm == 0 else float("inf")
        logs.append(np.log(nrm))
        x /= nrm
    return float(np.exp(np.mean(logs[iters // 2:])))


def _attach_spectrum(patch: KoopmanPatch, cap: int):
    if patch.m <= cap:
        try:
            patch.spectrum = np.linalg.eigvals(patch.U)
            patch.max_modulus = float(np.abs(patch.spectrum).max())
        except np.linalg.LinAlgError:
            patch.spectrum = None
            patch.note = (patch.note + "; " if patch.note else "") + "eigensolver failed"
    else:
        patch.max_modulus = _spectral_radius_estimate(patch.U)


def _svd_section(F, Fp, lam):
    m, c = F.shape
    try:
        u, s, vt = np.linalg.svd(F, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise ConstructionError(f"SVD did not converge: {exc}") from exc
    tol = max(m, c) * np.finfo(float).eps * (s[0] if s.size else 0.0)
    r = int(np.sum(s > tol))
    if r == 0:
        # F is zero: the least-squares map of minimum norm is zero
        return np.zeros((m, m)), 0, float("inf"), 4 * max(m, c) * min(m, c) ** 2 + 8 * min(m, c) ** 3
    s_r = s[:r]
    filt = 1.0 / s_r if lam == 0 else s_r / (s_r * s_r + lam)
    U = (Fp @ vt[:r].T * filt) @ u[:, :r].T
    p, q = max(m, c), min(m, c)
    flops = 4 * p * q * q + 8 * q**3 + m * c * r + m * m * r
    return U, r, float(s_r[0] / s_r[-1]), flops


def finite_section(pair: SnapshotPair, lam: float = 0.0, spectral_cap: int = SPECTRAL_CAP,
                   diagnostics: bool = True) -> KoopmanPatch:
    """Least-squares Koopman patch U with U F ~ F' for one group."""
    F, Fp = pair.F, pair.Fp
    if lam < 0:
        raise ConfigurationError("ridge parameter must be >= 0")
    m, c = F.shape
    if c < 1:
        raise ConstructionError("need at least two snapshots (k - 1 >= 1)", group=pair.group)
    if not (np.all(np.isfinite(F)) and np.all(np.isfinite(Fp))):
        raise ConstructionError("snapshot matrix contains non-finite values", group=pair.group)

    method, note, U = None, "", None
    flops = 0
    if c >= m:
        G = F @ F.T
        C = Fp @ F.T
        flops += 2 * m * m * c
        if lam:
            G[np.diag_indices(m)] += lam
        chol, info = lapack.dpotrf(G, lower=0)
        flops += m**3 // 3
        if info == 0:
            rcond, _ = lapack.dpocon(chol, np.abs(G).sum(axis=0).max())
            flops += 2 * m * m
            if rcond > GRAM_RCOND:
                U = sla.cho_solve((chol, False), C.T).T
                flops += m**3
                method = "ridge" if lam else "cholesky"
                rank = m
                cond = float(np.sqrt(1.0 / rcond))
        if U is None:
            note = "gram matrix ill-conditioned; svd fallback"
    else:
        note = "fewer snapshot pairs than group members; svd"
    if U is None:
        U, rank, cond, svd_flops = _svd_section(F, Fp, lam)
        flops += svd_flops
        method = "svd"
    if not np.all(np.isfinite(U)):
        raise ConstructionError("finite section produced non-finite entries", group=pair.group)

    patch = KoopmanPatch(U, pair.group, float(lam), cond, method, rank, int(flops), note)
    if diagnostics:
        _attach_spectrum(patch, spectral_cap)
    return patch


def spectral_report(patch: KoopmanPatch, tol: float = 1e-2, spectral_cap: int = SPECTRAL_CAP) -> SpectralReport:
    """Largest eigenvalue modulus and how many eigenvalues sit near the unit circle."""
    if patch.spectrum is None and patch.m <= spectral_cap:
        _attach_spectrum(patch, spectral_cap)
    if patch.spectrum is not None:
        mod = np.abs(patch.spectrum)
        return SpectralReport(True, float(mod.max()), int(np.sum(np.abs(mod - 1.0) < tol)))
    if patch.m > spectral_cap:
        est = patch.max_modulus if np.isfinite(patch.max_modulus) else _spectral_radius_estimate(patch.U)
        return SpectralReport(True, float(est), None, estimated=True)
    return SpectralReport(False, float("nan"), None)


@dataclass
class KoopmanModel:
    patches: list[KoopmanPatch]
    seed_state: np.ndarray
    T: int
    scheme: str = ""
    construction_flops: int = field(init=False, default=0)

    def __post_init__(self):
        self.seed_state = np.asarray(self.seed_state, dtype=float)
        if self.T < 1:
            raise ConfigurationError("prediction horizon T must be >= 1")
        n = self.seed_state.size
        seen = np.zeros(n, dtype=np.int64)
        for p in self.patches:
            if p.group.size and (p.group.min() < 0 or p.group.max() >= n):
                raise ConfigurationError("patch group index out of range")
            np.add.at(seen, p.group, 1)
        if not np.all(seen == 1):
            raise ConfigurationError("patch groups do not partition the parameter vector")
        self.construction_flops = sum(p.flops for p in self.patches)

    @property
    def n_params(self) -> int:
        return self.seed_state.size

    @property
    def per_step_flops(self) -> int:
        return sum(p.m * p.m for p in self.patches)

    @property
    def max_modulus(self) -> float:
        mods = [p.max_modulus for p in self.patches if np.isfinite(p.max_modulus)]
        return max(mods) if mods else float("nan")


def build_model(traj: Trajectory, partition: Partition, T: int, lam: float = 0.0,
                spectral_cap: int = SPECTRAL_CAP, diagnostics: bool = True) -> KoopmanModel:
    """One patch per partition group, seeded with the last recorded state w(t2)."""
    if traj.k < 2:
        raise ConfigurationError("need a trajectory with at least 2 snapshots")
    if partition.n_params != traj.arch.n_params:
        raise ConfigurationError("partition and trajectory disagree on the parameter count")
    patches = []
    for gi, group in enumerate(partition.groups):
        try:
            patches.append(finite_section(extract(traj, group), lam, spectral_cap, diagnostics))
        except ConstructionError as exc:
            raise ConstructionError(f"group {gi} (size {len(group)}): {exc}", group=gi) from exc
    return KoopmanModel(patches, traj.snapshots[-1].copy(), int(T), partition.scheme)


# lockstep evolution of a whole size class is used while its stacked operators fit in cache
_LOCKSTEP_BYTES = 2 << 20


def _resolve_keep(keep, T):
    if isinstance(keep, str):
        if keep == "all":
            return np.arange(1, T + 1)
        if keep == "last":
            return np.array([T])
        raise ConfigurationError(f"unknown keep mode {keep!r}")
    steps = np.unique(np.asarray(list(keep), dtype=np.int64))
    if steps.size == 0 or steps[0] < 1 or steps[-1] > T:
        raise ConfigurationError(f"kept steps must lie in [1, {T}]")
    return steps


def _bad(x, cap):
    return not (np.abs(x).max() <= cap)


def _evolve(step, x, T, rows, out, idx, cap, check_every):
    """Advance one unit T steps; returns (first bad step, flat position) or None."""
    last_x, last_t = x.copy(), 0
    for t in range(1, T + 1):
        x = step(x)
        r = rows[t]
        if r >= 0:
            out[r][idx] = x
        if t % check_every == 0 or t == T:
            if _bad(x, cap):
                y = last_x
                for s in range(last_t + 1, t + 1):
                    y = step(y)
                    if _bad(y, cap):
                        flat = np.asarray(y).ravel()
                        j = int(np.flatnonzero(~(np.abs(flat) <= cap))[0])
                        return s, j
            last_x, last_t = x.copy(), t
    return None


def predict(model: KoopmanModel, keep="all", divergence_cap: float = DIVERGENCE_CAP,
            check_every: int = 32) -> np.ndarray:
    """Evolve every group by its patch for T steps.

    Returns the predicted parameter vectors at the kept steps (``"all"``:
    rows are w(t2 + 1) ... w(t2 + T); ``"last"``: only w(t2 + T); or an
    explicit list of step numbers in [1, T]). Groups never exchange data,
    so each one is advanced independently. Raises PredictionDiverged at the
    first step where some entry leaves [-cap, cap]; the exception carries
    the states predicted before that step.
    """
    T = model.T
    steps = _resolve_keep(keep, T)
    rows = np.full(T + 1, -1, dtype=np.int64)
    rows[steps] = np.arange(steps.size)
    out = np.empty((steps.size, model.n_params))
    seed = model.seed_state

    by_size: dict[int, list[KoopmanPatch]] = {}
    for p in model.patches:
        by_size.setdefault(p.m, []).append(p)

    worst = None  # (step, param index)
    with np.errstate(over="ignore", invalid="ignore"):
        for m, ps in sorted(by_size.items()):
            if len(ps) * m * m * 8 <= _LOCKSTEP_BYTES:
                idx = np.stack([p.group for p in ps])
                if m == 1:
                    u = np.array([p.U[0, 0] for p in ps])[:, None]
                    step = lambda x, u=u: x * u
                else:
                    Us = np.stack([p.U for p in ps])
                    step = lambda x, Us=Us: np.matmul(Us, x[..., None])[..., 0]
                units = [(step, idx)]
            else:
                units = [(p.U.dot, p.group) for p in ps]
            for step, idx in units:
                hit = _evolve(step, seed[idx], T, rows, out, idx, divergence_cap, check_every)
                if hit is not None:
                    s, j = hit
                    pidx = int(idx.ravel()[j])
                    if worst is None or s < worst[0]:
                        worst = (s, pidx)

    if worst is not None:
        s, pidx = worst
        exc = PredictionDiverged(f"prediction diverged at step {s} (parameter {pidx}); "
                                 f"a patch spectrum left the stable regime", index=pidx, step=s)
        keep_rows = steps < s
        exc.partial_steps = steps[keep_rows]
        exc.partial = out[keep_rows]
        raise exc
    return out


def koopman_train(traj: Trajectory, partition: Partition, T: int, lam: float = 0.0, keep="all"):
    """Build all patches from ``traj`` and predict T steps past w(t2)."""
    model = build_model(traj, partition, T, lam)
    return model, predict(model, keep)


_MODEL_HEAD = struct.Struct("<4sIQQ")


def save_model(path, model: KoopmanModel):
    """Binary model file: header, partition descriptor, seed state, then each patch."""
    label = model.scheme.encode()
    with open(path, "wb") as f:
        f.write(_MODEL_HEAD.pack(MODEL_MAGIC, MODEL_VERSION, model.n_params, model.T))
        f.write(struct.pack("<I", len(label)) + label)
        f.write(struct.pack("<Q", len(model.patches)))
        f.write(np.ascontiguousarray(model.seed_state, dtype="<f8").tobytes())
        for p in model.patches:
            f.write(struct.pack("<QdB", p.m, p.lam, _METHODS.index(p.method)))
            f.write(np.ascontiguousarray(p.group, dtype="<i8").tobytes())
            f.write(np.ascontiguousarray(p.U, dtype="<f8").tobytes())


class _Reader:
    def __init__(self, data, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n):
        if self.pos + n > len(self.data):
            raise IngestionError("truncated model file", offset=len(self.data), path=self.path)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def array(self, dtype, count):
        return np.frombuffer(self.take(count * 8), dtype=dtype).copy()


def model_header(path) -> dict:
    raw = Path(path).read_bytes()[:_MODEL_HEAD.size + 4]
    r = _Reader(raw, path)
    magic, version, n, T = r.unpack("<4sIQQ")
    if magic != MODEL_MAGIC:
        raise IngestionError(f"bad model magic {magic!r}", offset=0, path=path)
    return {"version": version, "n_params": n, "T": T}


def load_model(path) -> KoopmanModel:
    r = _Reader(Path(path).read_bytes(), path)
    magic, version, n, T = r.unpack("<4sIQQ")
    if magic != MODEL_MAGIC:
        raise IngestionError(f"bad model magic {magic!r}", offset=0, path=path)
    if version != MODEL_VERSION:
        raise IngestionError(f"unsupported model version {version}", offset=4, path=path)
    (llen,) = r.unpack("<I")
    scheme = r.take(llen).decode()
    (n_patches,) = r.unpack("<Q")
    seed = r.array("<f8", n)
    patches = []
    for _ in range(n_patches):
        at = r.pos
        m, lam, code = r.unpack("<QdB")
        if m < 1 or m > n or code >= len(_METHODS):
            raise IngestionError("corrupt patch record", offset=at, path=path)
        group = r.array("<i8", m)
        U = r.array("<f8", m * m).reshape(m, m)
        patches.append(KoopmanPatch(U, group, lam, method=_METHODS[code], rank=m))
    return KoopmanModel(patches, seed, int(T), scheme)
