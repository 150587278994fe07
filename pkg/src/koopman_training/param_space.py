"""Flat parameter layout of a fully connected network and its partitions.

A network's weights and biases live in a single float64 vector ``w``. The
layout is layer-major; inside a layer it is destination-node-major, then
source index, and every node's bias sits right after its incoming weights.
Layer ``l`` is therefore a contiguous ``(n_out, n_in + 1)`` row-major
block, and every node owns one contiguous index range.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigurationError


class Activation(str, enum.Enum):
    SIGMOID = "sigmoid"
    RELU = "relu"
    STEP = "step"
    IDENTITY = "identity"


@dataclass(frozen=True)
class Architecture:
    layer_sizes: tuple[int, ...]
    activation: Activation = Activation.SIGMOID
    has_bias: bool = True
    # hidden layers use ``activation``; the output layer uses this one
    output_activation: Activation = Activation.IDENTITY

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2:
            raise ConfigurationError(f"need at least 2 layers, got {sizes}")
        if any(s < 1 for s in sizes):
            raise ConfigurationError(f"layer sizes must be >= 1, got {sizes}")
        object.__setattr__(self, "layer_sizes", sizes)
        object.__setattr__(self, "activation", Activation(self.activation))
        object.__setattr__(self, "output_activation", Activation(self.output_activation))

    @classmethod
    def parse(cls, spec: str, activation="sigmoid", has_bias=True, output_activation="identity"):
        """Build from the colon notation used in configs, e.g. ``"1:10:10:2"``."""
        try:
            sizes = tuple(int(s) for s in spec.strip().split(":"))
        except ValueError:
            raise ConfigurationError(f"bad architecture string {spec!r}") from None
        return cls(sizes, Activation(activation), has_bias, Activation(output_activation))

    def __str__(self):
        return ":".join(str(s) for s in self.layer_sizes)

    @property
    def n_layers(self) -> int:
        """Number of weight layers."""
        return len(self.layer_sizes) - 1

    @property
    def row_width(self) -> tuple[int, ...]:
        b = int(self.has_bias)
        return tuple(n_in + b for n_in in self.layer_sizes[:-1])

    @property
    def layer_offsets(self) -> tuple[int, ...]:
        """Start offset of each weight layer, plus the total count at the end."""
        offs = [0]
        for width, n_out in zip(self.row_width, self.layer_sizes[1:]):
            offs.append(offs[-1] + width * n_out)
        return tuple(offs)

    @property
    def n_params(self) -> int:
        return self.layer_offsets[-1]

    def node_ranges(self, layer: int) -> list[range]:
        """Index ranges of the nodes of weight layer ``layer`` (0-based)."""
        start = self.layer_offsets[layer]
        width = self.row_width[layer]
        return [range(start + j * width, start + (j + 1) * width)
                for j in range(self.layer_sizes[layer + 1])]


def flatten(weights: Sequence[np.ndarray], biases: Sequence[np.ndarray] | None, arch: Architecture) -> np.ndarray:
    if len(weights) != arch.n_layers:
        raise ConfigurationError(f"expected {arch.n_layers} weight matrices, got {len(weights)}")
    if arch.has_bias and (biases is None or len(biases) != arch.n_layers):
        raise ConfigurationError("architecture has biases but none (or the wrong number) were given")
    out = np.empty(arch.n_params)
    for l, view in enumerate(layer_blocks(out, arch)):
        n_in, n_out = arch.layer_sizes[l], arch.layer_sizes[l + 1]
        W = np.asarray(weights[l], dtype=float)
        if W.shape != (n_out, n_in):
            raise ConfigurationError(f"layer {l} weight shape {W.shape} != {(n_out, n_in)}")
        view[:, :n_in] = W
        if arch.has_bias:
            b = np.asarray(biases[l], dtype=float)
            if b.shape != (n_out,):
                raise ConfigurationError(f"layer {l} bias shape {b.shape} != {(n_out,)}")
            view[:, n_in] = b
    return out


def unflatten(v, arch: Architecture) -> tuple[list[np.ndarray], list[np.ndarray] | None]:
    """Inverse of :func:`flatten`; returns fresh copies of every block."""
    v = np.asarray(v, dtype=float)
    if v.shape != (arch.n_params,):
        raise ConfigurationError(f"parameter vector of shape {v.shape} does not fit {arch} "
                                 f"({arch.n_params} params)")
    weights, biases = [], []
    for l, block in enumerate(layer_blocks(v, arch)):
        n_in = arch.layer_sizes[l]
        weights.append(block[:, :n_in].copy())
        if arch.has_bias:
            biases.append(block[:, n_in].copy())
    return weights, (biases if arch.has_bias else None)


def layer_blocks(v: np.ndarray, arch: Architecture) -> list[np.ndarray]:
    """Writable ``(n_out, n_in + bias)`` views into ``v``, one per layer."""
    offs = arch.layer_offsets
    return [v[offs[l]:offs[l + 1]].reshape(arch.layer_sizes[l + 1], arch.row_width[l])
            for l in range(arch.n_layers)]


class SchemeKind(str, enum.Enum):
    SINGLE_WEIGHT = "single_weight"
    QUASI_NODE = "quasi_node"
    NODE = "node"
    LAYER = "layer"
    NETWORK = "network"


@dataclass(frozen=True)
class Scheme:
    kind: SchemeKind
    q: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", SchemeKind(self.kind))
        if self.kind is SchemeKind.QUASI_NODE:
            if self.q is None or int(self.q) < 1:
                raise ConfigurationError("quasi_node needs a positive chunk size q")
            object.__setattr__(self, "q", int(self.q))
        elif self.q is not None:
            raise ConfigurationError(f"{self.kind.value} takes no chunk size")

    @classmethod
    def parse(cls, text: "str | Scheme") -> "Scheme":
        """``"node"``, ``"layer"``, ``"quasi_node:157"`` ..."""
        if isinstance(text, Scheme):
            return text
        name, _, q = text.strip().lower().partition(":")
        try:
            kind = SchemeKind(name)
        except ValueError:
            raise ConfigurationError(f"unknown partition scheme {text!r}") from None
        return cls(kind, int(q) if q else None)

    def __str__(self):
        return f"{self.kind.value}:{self.q}" if self.q is not None else self.kind.value


@dataclass(frozen=True)
class Partition:
    scheme: str
    groups: tuple[np.ndarray, ...]
    n_params: int

    def __len__(self):
        return len(self.groups)

    @property
    def sizes(self) -> list[int]:
        return [len(g) for g in self.groups]

    def validate(self):
        seen = np.zeros(self.n_params, dtype=np.int64)
        for g in self.groups:
            if len(g) == 0:
                raise ConfigurationError("empty partition group")
            if g.min() < 0 or g.max() >= self.n_params:
                raise ConfigurationError("partition index out of range")
            np.add.at(seen, g, 1)
        if not np.all(seen == 1):
            raise ConfigurationError("partition groups are not a disjoint cover of all parameters")


def _layer_groups(arch: Architecture, layer: int, scheme: Scheme) -> list[np.ndarray]:
    nodes = arch.node_ranges(layer)
    if scheme.kind is SchemeKind.SINGLE_WEIGHT:
        return [np.array([i]) for r in nodes for i in r]
    if scheme.kind is SchemeKind.NODE:
        return [np.arange(r.start, r.stop) for r in nodes]
    if scheme.kind is SchemeKind.QUASI_NODE:
        # contiguous chunks; the bias lands in the final (possibly short) chunk
        return [np.arange(s, min(s + scheme.q, r.stop)) for r in nodes for s in range(r.start, r.stop, scheme.q)]
    if scheme.kind is SchemeKind.LAYER:
        return [np.arange(nodes[0].start, nodes[-1].stop)]
    raise ConfigurationError(f"{scheme.kind.value} cannot be applied per layer")


def build_partition(arch: Architecture, scheme) -> Partition:
    """Split the parameter indices of ``arch`` into Koopman patches.

    ``scheme`` is one scheme for the whole network, or a sequence with one
    scheme per weight layer (e.g. quasi-node for a wide first layer and node
    elsewhere). The network scheme cannot be mixed with others.
    """
    if isinstance(scheme, (str, Scheme)):
        schemes = [Scheme.parse(scheme)] * arch.n_layers
    else:
        schemes = [Scheme.parse(s) for s in scheme]
        if len(schemes) != arch.n_layers:
            raise ConfigurationError(f"need {arch.n_layers} per-layer schemes, got {len(schemes)}")

    max_node = max(arch.row_width)
    for s in schemes:
        if s.kind is SchemeKind.QUASI_NODE and not 1 <= s.q <= max_node:
            raise ConfigurationError(f"quasi_node chunk size {s.q} outside [1, {max_node}]")

    if any(s.kind is SchemeKind.NETWORK for s in schemes):
        if not all(s.kind is SchemeKind.NETWORK for s in schemes):
            raise ConfigurationError("network scheme covers every layer; it cannot be mixed")
        groups = [np.arange(arch.n_params)]
        label = "network"
    else:
        groups = [g for l, s in enumerate(schemes) for g in _layer_groups(arch, l, s)]
        labels = [str(s) for s in schemes]
        label = labels[0] if len(set(labels)) == 1 else ",".join(labels)

    part = Partition(label, tuple(g.astype(np.int64) for g in groups), arch.n_params)
    part.validate()
    return part


def predicted_complexity(scheme, n: int, k: int) -> tuple[float, float]:
    """Asymptotic (construction, per-iteration) cost for the width-``n`` cube network.

    The cube network has n - 1 hidden layers of width n and input/output
    width n, i.e. about n**3 parameters; ``k`` is the number of snapshots.
    Constants are dropped, so only ratios and exponents are meaningful.
    """
    s = Scheme.parse(scheme)
    if n < 1 or k < 2:
        raise ConfigurationError("need n >= 1 and k >= 2")
    n, k = float(n), float(k)
    if s.kind is SchemeKind.SINGLE_WEIGHT:
        return k * n**3, n**3
    if s.kind is SchemeKind.QUASI_NODE:
        q = float(s.q)
        return max(k * q * n**3, n**3 * q**2), q * n**3
    if s.kind is SchemeKind.NODE:
        return max(k * n**4, n**5), n**4
    if s.kind is SchemeKind.LAYER:
        return max(k * n**5, n**7), n**5
    return max(k * n**6, n**9), n**6


def cube_architecture(n: int, activation="sigmoid") -> Architecture:
    if n < 1:
        raise ConfigurationError("cube width must be >= 1")
    return Architecture((n,) * (n + 1), Activation(activation))

