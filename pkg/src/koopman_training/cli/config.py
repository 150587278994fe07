"""Experiment configuration: one JSON document, parsed strictly.

Unknown keys are errors, every field has a documented default, and the
fully resolved config (defaults included) is what gets hashed and written
to the run manifest.
"""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path
from typing import Annotated, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from ..errors import ConfigurationError
from ..param_space import Scheme


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DESolverSpec(_Strict):
    kind: Literal["de_solver"] = "de_solver"
    width: int = Field(10, ge=1)
    hamiltonian: Literal["harmonic", "quartic"] = "harmonic"
    x0: float = 1.0
    p0: float = 0.0
    t_max: float = Field(4 * math.pi, gt=0)
    n_points: int = Field(200, ge=1)


class ClassifierSpec(_Strict):
    kind: Literal["classifier"] = "classifier"
    mnist_dir: Optional[str] = None
    data_seed: int = 0
    synthetic_noise: float = Field(0.45, ge=0)
    test_count: int = Field(10000, ge=10)
    batch_size: int = Field(64, ge=1)
    test_batch_size: int = Field(1000, ge=1)


class PerceptronSpec(_Strict):
    kind: Literal["perceptron"] = "perceptron"
    eta: float = Field(0.005, gt=0)
    p_active: float = Field(0.25, gt=0, lt=1)
    n_steps: int = Field(1000, ge=2)
    init_domain: tuple[float, float] = (0.5, 1.0)
    correlated: bool = False
    schemes: tuple[str, ...] = ("single_weight", "node", "network")


TaskSpec = Annotated[Union[DESolverSpec, ClassifierSpec, PerceptronSpec], Field(discriminator="kind")]


class LrSpec(_Strict):
    kind: Literal["constant", "decay", "step"] = "constant"
    a: float = Field(1.0, gt=0)
    b: float = 0.0
    gamma: float = 1.0
    # for "step": iterations per decay step; 0 means one epoch
    every: int = Field(0, ge=0)


class OptimizerSpec(_Strict):
    kind: Literal["sgd", "adam", "adagrad", "adadelta"] = "adadelta"
    lr: LrSpec = LrSpec(kind="decay", a=8.0, b=1000.0)
    rho: float = Field(0.999, gt=0, lt=1)
    betas: tuple[float, float] = (0.999, 0.9999)
    eps: Optional[float] = None

    def effective_eps(self) -> float:
        if self.eps is not None:
            return self.eps
        return 1e-8 if self.kind == "adam" else 1e-6


class WindowSpec(_Strict):
    """Recording window [t1, t2] and horizon T in ``unit`` (iterations or epochs).

    For epochs, t1 = e means "from the start of epoch e" and t2 = e means
    "to the end of epoch e". ``t_max`` is how far the standard branch runs
    past t2 (default T).
    """

    unit: Literal["iteration", "epoch"] = "iteration"
    t1: int = Field(3500, ge=0)
    t2: int = Field(4500, ge=1)
    T: int = Field(1000, ge=1)
    t_max: Optional[int] = Field(None, ge=1)

    @model_validator(mode="after")
    def _order(self):
        if self.t1 >= self.t2:
            raise ValueError(f"need t1 < t2, got t1={self.t1}, t2={self.t2}")
        if self.unit == "epoch" and self.t1 < 1:
            raise ValueError("epoch windows are 1-based: t1 >= 1")
        if self.t_max is not None and self.t_max < self.T:
            raise ValueError("t_max must be >= T")
        return self

    @property
    def horizon(self) -> int:
        return self.t_max if self.t_max is not None else self.T


class ExperimentConfig(_Strict):
    name: str = "experiment"
    task: TaskSpec = DESolverSpec()
    optimizer: OptimizerSpec = OptimizerSpec()
    window: WindowSpec = WindowSpec()
    scheme: Union[str, list[str]] = "node"
    lam: float = Field(0.0, ge=0)
    seeds: list[int] = Field(default_factory=lambda: list(range(10)), min_length=1)
    out: str = "runs/experiment"
    workers: int = Field(1, ge=1)
    init_domain: Optional[tuple[float, float]] = None
    record_flops: bool = True
    include_construction_in_speedup: bool = False
    write_trajectories: bool = True
    divergence_cap: float = Field(1e12, gt=0)

    @model_validator(mode="after")
    def _check_scheme(self):
        names = [self.scheme] if isinstance(self.scheme, str) else self.scheme
        try:
            for s in names:
                Scheme.parse(s)
        except ConfigurationError as exc:
            raise ValueError(str(exc)) from None
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        return self

    def resolved(self) -> dict:
        return json.loads(self.model_dump_json())

    def config_hash(self) -> str:
        blob = json.dumps(self.resolved(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_overrides(self, **kw) -> "ExperimentConfig":
        data = self.resolved()
        for key, value in kw.items():
            if value is None:
                continue
            if key == "mnist_dir":
                if data["task"]["kind"] != "classifier":
                    continue
                data["task"]["mnist_dir"] = value
            else:
                data[key] = value
        return ExperimentConfig.model_validate(data)


def _locate(text: str, key: str) -> int | None:
    needle = f'"{key}"'
    for lineno, line in enumerate(text.splitlines(), 1):
        if needle in line:
            return lineno
    return None


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{source}: malformed JSON at line {exc.lineno}, column {exc.colno}: "
                                 f"{exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigurationError(f"{source}: top level must be a JSON object")
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        msgs = []
        for err in exc.errors():
            path = ".".join(str(p) for p in err["loc"])
            last = next((str(p) for p in reversed(err["loc"]) if isinstance(p, str)), None)
            line = _locate(text, last) if last else None
            where = f" (line {line})" if line else ""
            msgs.append(f"{path or '<root>'}{where}: {err['msg']}")
        raise ConfigurationError(f"{source}: invalid config\n  " + "\n  ".join(msgs)) from None


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, str(path))
