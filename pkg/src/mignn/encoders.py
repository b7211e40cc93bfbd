"""GNN encoders written as pure functions of (graph, flat parameter vector).

Keeping the weights as one flat vector is what lets the meta-learner scale,
shift and gradient-step them as a single array.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gradcore as gc
from .errors import ContractError, ShapeError
from .gradcore import Tensor
from .graphdata import Graph, neighbor_mean_operator, normalized_adjacency, propagated_features

ARCHS = ("sgc", "gcn", "sage")
LEAKY_SLOPE = 0.01


@dataclass(frozen=True)
class EncoderSpec:
    arch: str
    input_dim: int
    hidden_dim: int = 16
    output_dim: int = 2
    propagation_steps: int = 2
    sgc_collapsed: bool = False

    def __post_init__(self) -> None:
        if self.arch not in ARCHS:
            raise ContractError(f"unknown encoder {self.arch!r}; choose from {ARCHS}")
        if self.hidden_dim <= 0 or self.output_dim < 1 or self.input_dim <= 0:
            raise ContractError("encoder dimensions must be positive")

    @property
    def shapes(self) -> tuple[tuple[int, int], ...]:
        d, h, c = self.input_dim, self.hidden_dim, self.output_dim
        if self.arch == "sgc":
            return ((d, c),) if self.sgc_collapsed else ((d, h), (h, c))
        if self.arch == "gcn":
            return ((d, h), (h, c))
        return ((2 * d, h), (2 * h, c))

    @property
    def size(self) -> int:
        return sum(r * c for r, c in self.shapes)


@dataclass
class ParamVector:
    data: np.ndarray
    shapes: tuple[tuple[int, int], ...]
    arch: str

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float64)
        self.shapes = tuple(tuple(s) for s in self.shapes)
        expected = sum(r * c for r, c in self.shapes)
        if self.data.shape != (expected,):
            raise ContractError(f"parameter vector has length {self.data.size}, shapes need {expected}")

    def copy(self) -> "ParamVector":
        return ParamVector(self.data.copy(), self.shapes, self.arch)


def init_params(spec: EncoderSpec, rng: np.random.Generator) -> ParamVector:
    """Glorot-uniform weights, concatenated layer by layer."""
    parts = []
    for fan_in, fan_out in spec.shapes:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        parts.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)).reshape(-1))
    return ParamVector(np.concatenate(parts), spec.shapes, spec.arch)


def flatten(mats, arch: str = "") -> ParamVector:
    mats = [np.asarray(m, dtype=np.float64) for m in mats]
    return ParamVector(np.concatenate([m.reshape(-1) for m in mats]) if mats else np.zeros(0),
                       tuple(m.shape for m in mats), arch)


def unflatten(p: ParamVector) -> list[np.ndarray]:
    out, pos = [], 0
    for r, c in p.shapes:
        out.append(p.data[pos:pos + r * c].reshape(r, c).copy())
        pos += r * c
    return out


def unflatten_tensor(theta: Tensor, shapes) -> list[Tensor]:
    """Differentiable split of a flat parameter tensor into layer matrices."""
    expected = sum(r * c for r, c in shapes)
    if theta.shape != (expected,):
        raise ContractError(f"parameter tensor has shape {theta.shape}, expected ({expected},)")
    out, pos = [], 0
    for r, c in shapes:
        out.append(gc.reshape(gc.take(theta, slice(pos, pos + r * c)), (r, c)))
        pos += r * c
    return out


def _check(spec: EncoderSpec, g: Graph, theta) -> Tensor:
    if isinstance(theta, ParamVector):
        if theta.shapes != spec.shapes:
            raise ContractError(f"parameter shapes {theta.shapes} do not match encoder {spec.shapes}")
        theta = Tensor(theta.data)
    theta = gc.as_tensor(theta)
    if theta.shape != (spec.size,):
        raise ContractError(f"parameter tensor has shape {theta.shape}, encoder needs ({spec.size},)")
    if g.feature_dim != spec.input_dim:
        raise ShapeError(f"graph has {g.feature_dim} features, encoder expects {spec.input_dim}")
    return theta


def forward(spec: EncoderSpec, g: Graph, theta, return_hidden: bool = False):
    """Node logits ``n x |C|``; with ``return_hidden`` also the pre-logit representation."""
    theta = _check(spec, g, theta)
    mats = unflatten_tensor(theta, spec.shapes)
    if spec.arch == "sgc":
        p = Tensor(propagated_features(g, spec.propagation_steps))
        if spec.sgc_collapsed:
            hidden = p
            logits = gc.matmul(p, mats[0])
        else:
            hidden = gc.matmul(p, mats[0])
            logits = gc.matmul(hidden, mats[1])
    elif spec.arch == "gcn":
        s = normalized_adjacency(g)
        x = Tensor(g.features)
        hidden = gc.leaky_relu(gc.spmm(s, gc.matmul(x, mats[0])), LEAKY_SLOPE)
        logits = gc.spmm(s, gc.matmul(hidden, mats[1]))
    else:
        m = neighbor_mean_operator(g)
        h = Tensor(g.features)
        hidden = gc.leaky_relu(gc.matmul(gc.concat_cols(h, gc.spmm(m, h)), mats[0]), LEAKY_SLOPE)
        logits = gc.matmul(gc.concat_cols(hidden, gc.spmm(m, hidden)), mats[1])
    return (logits, hidden) if return_hidden else logits


def node_loss(logits: Tensor, nodes: np.ndarray, targets: np.ndarray, multi_label: bool) -> Tensor:
    """Summed classification loss over ``nodes``: softmax CE, or per-category BCE."""
    nodes = np.asarray(nodes, dtype=np.int64)
    if len(nodes) == 0:
        raise ContractError("loss over an empty node set")
    rows = gc.take(logits, nodes)
    if multi_label:
        return gc.sigmoid_bce(rows, targets)
    return gc.softmax_cross_entropy_rows(rows, targets)
