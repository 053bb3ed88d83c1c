"""The searchable cell space: candidate operators, relaxed mixed edges, and cells.

A cell is a DAG over two inputs and four weighted-sum nodes; every node sums
one branch per allowed source.  In relaxed form each branch evaluates all
candidate operators and mixes them with softmax coefficients, which makes the
operator choice continuous and differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Sequence

import numpy as np

from . import ops
from .layers import (AvgPool, BatchNorm2d, Identity, MaxPool, ParamStore,
                     SeparableConv, DilatedConv, StridedSkip)
from .tensor import Tensor

NUM_NODES = 4
NUM_EDGES = sum(2 + i for i in range(NUM_NODES))  # 14

NORMAL = "normal"
REDUCE = "reduce"
CELL_KINDS = (NORMAL, REDUCE)


class OperatorKind(IntEnum):
    """Canonical candidate operators; index order is frozen because tie
    breaking and serialization depend on it."""

    SEP_CONV_3 = 0
    SEP_CONV_5 = 1
    ATROUS_CONV_3 = 2
    ATROUS_CONV_5 = 3
    AVG_POOL_3 = 4
    MAX_POOL_3 = 5
    SKIP = 6


OPERATOR_NAMES: dict[OperatorKind, str] = {
    OperatorKind.SEP_CONV_3: "sep_conv_3x3",
    OperatorKind.SEP_CONV_5: "sep_conv_5x5",
    OperatorKind.ATROUS_CONV_3: "atr_conv_3x3",
    OperatorKind.ATROUS_CONV_5: "atr_conv_5x5",
    OperatorKind.AVG_POOL_3: "avg_pool_3x3",
    OperatorKind.MAX_POOL_3: "max_pool_3x3",
    OperatorKind.SKIP: "skip",
}

NAME_TO_KIND = {name: kind for kind, name in OPERATOR_NAMES.items()}

FULL_OPERATOR_SET: tuple[OperatorKind, ...] = tuple(OperatorKind)

CONV_KINDS = (OperatorKind.SEP_CONV_3, OperatorKind.SEP_CONV_5,
              OperatorKind.ATROUS_CONV_3, OperatorKind.ATROUS_CONV_5)


def operator_name(kind: OperatorKind) -> str:
    return OPERATOR_NAMES[kind]


def normalize_mask(mask: Sequence[OperatorKind]) -> tuple[OperatorKind, ...]:
    """Validate an operator subset and return it in canonical index order."""
    kinds = sorted(set(OperatorKind(k) for k in mask))
    if not kinds:
        raise ValueError("operator mask must keep at least one operator")
    return tuple(kinds)


def edge_row(node: int, source: int) -> int:
    """Flat row index of edge (node, source) in an alpha matrix."""
    if not 0 <= node < NUM_NODES:
        raise ValueError(f"node {node} out of range")
    if not 0 <= source < 2 + node:
        raise ValueError(f"source {source} invalid for node {node}")
    return sum(2 + i for i in range(node)) + source


@dataclass(frozen=True)
class EdgeId:
    """One connection of the cell DAG: sources 0 and 1 are the two cell
    inputs, sources >= 2 are earlier nodes."""

    cell_kind: str
    node: int
    source: int

    def __post_init__(self):
        if self.cell_kind not in CELL_KINDS:
            raise ValueError(f"unknown cell kind {self.cell_kind!r}")
        edge_row(self.node, self.source)  # range check

    @property
    def row(self) -> int:
        return edge_row(self.node, self.source)

    @property
    def stride(self) -> int:
        return 2 if self.cell_kind == REDUCE and self.source < 2 else 1


def edge_ids(cell_kind: str) -> list[EdgeId]:
    return [EdgeId(cell_kind, node, source)
            for node in range(NUM_NODES) for source in range(2 + node)]


def softmax_coefficients(alpha_row: np.ndarray) -> np.ndarray:
    """Turn one row of architecture coefficients into mixture weights.

    Strictly positive, sums to one; computed with max subtraction so large
    inputs cannot overflow.
    """
    arr = np.asarray(alpha_row, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"expected a 1-d coefficient row, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("coefficient row contains non-finite values")
    shifted = arr - arr.max()
    e = np.exp(shifted)
    return e / e.sum()


class AlphaParams:
    """Architecture coefficients: one (edges x operators) matrix per cell
    kind, shared by all cells of that kind."""

    INIT_STD = 1e-3

    def __init__(self, rng: np.random.Generator, dtype=np.float32,
                 mask: Sequence[OperatorKind] = FULL_OPERATOR_SET):
        self.mask = normalize_mask(mask)
        width = len(self.mask)
        self.normal = Tensor(rng.normal(0.0, self.INIT_STD, size=(NUM_EDGES, width)).astype(dtype),
                             requires_grad=True)
        self.reduce = Tensor(rng.normal(0.0, self.INIT_STD, size=(NUM_EDGES, width)).astype(dtype),
                             requires_grad=True)

    def matrix(self, cell_kind: str) -> Tensor:
        if cell_kind == NORMAL:
            return self.normal
        if cell_kind == REDUCE:
            return self.reduce
        raise ValueError(f"unknown cell kind {cell_kind!r}")

    def tensors(self) -> list[tuple[str, Tensor]]:
        return [(NORMAL, self.normal), (REDUCE, self.reduce)]

    def zero_grad(self):
        self.normal.grad = None
        self.reduce.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {NORMAL: self.normal.data.copy(), REDUCE: self.reduce.data.copy()}

    def load_snapshot(self, snap: dict[str, np.ndarray]):
        self.normal.data[...] = snap[NORMAL]
        self.reduce.data[...] = snap[REDUCE]

    def coefficient_rows(self, cell_kind: str) -> list[Tensor]:
        """Differentiable softmax mixture weights, one row per edge."""
        coeff = ops.softmax(self.matrix(cell_kind), axis=1)
        return [ops.row(coeff, r) for r in range(NUM_EDGES)]


class ConvTriplet:
    """Activation, convolution, normalization; with an identity shortcut when
    the output keeps the input's shape."""

    def __init__(self, store: ParamStore, name: str, kind: OperatorKind, c_in: int,
                 c_out: int, stride: int, rng: np.random.Generator, dtype,
                 affine: bool = True):
        if kind not in CONV_KINDS:
            raise ValueError(f"{kind!r} is not a convolution operator")
        k = 3 if kind in (OperatorKind.SEP_CONV_3, OperatorKind.ATROUS_CONV_3) else 5
        if kind in (OperatorKind.SEP_CONV_3, OperatorKind.SEP_CONV_5):
            self.conv = SeparableConv(store, name, c_in, c_out, k, rng, dtype, stride=stride)
        else:
            self.conv = DilatedConv(store, name, c_in, c_out, k, rng, dtype, stride=stride)
        self.norm = BatchNorm2d(store, name + ".norm", c_out, dtype, affine=affine)
        self.residual = stride == 1 and c_in == c_out

    def __call__(self, x: Tensor) -> Tensor:
        out = self.norm(self.conv(ops.relu(x)))
        if self.residual:
            out = out + x
        return out


def make_operator(store: ParamStore, name: str, kind: OperatorKind, channels: int,
                  stride: int, rng: np.random.Generator, dtype, affine: bool):
    """Instantiate one candidate operator mapping ``channels`` to ``channels``."""
    if kind in CONV_KINDS:
        return ConvTriplet(store, name, kind, channels, channels, stride, rng, dtype,
                           affine=affine)
    if kind == OperatorKind.AVG_POOL_3:
        return AvgPool(stride=stride)
    if kind == OperatorKind.MAX_POOL_3:
        return MaxPool(stride=stride)
    if kind == OperatorKind.SKIP:
        if stride == 1:
            return Identity()
        return StridedSkip(store, name, channels, rng, dtype, affine=affine)
    raise ValueError(f"unknown operator kind {kind!r}")


class MixedEdge:
    """All candidate operators of one edge, mixed by coefficient weights."""

    def __init__(self, store: ParamStore, name: str, edge: EdgeId, channels: int,
                 rng: np.random.Generator, dtype,
                 mask: Sequence[OperatorKind] = FULL_OPERATOR_SET, affine: bool = False,
                 probe_spatial: int = 4):
        self.edge = edge
        self.mask = normalize_mask(mask)
        self.candidates = [
            make_operator(store, f"{name}.op{int(kind)}", kind, channels, edge.stride,
                          rng, dtype, affine)
            for kind in self.mask
        ]
        self._assert_uniform_shapes(store, channels, dtype, probe_spatial)

    def _assert_uniform_shapes(self, store: ParamStore, channels: int, dtype, spatial: int):
        # Probe in eval mode so running statistics stay untouched.
        prior = store.mode
        store.eval()
        try:
            probe = Tensor(np.zeros((1, channels, spatial, spatial), dtype=dtype))
            shapes = {op(probe).shape for op in self.candidates}
        finally:
            store.mode = prior
        if len(shapes) != 1:
            raise AssertionError(
                f"candidate outputs of edge {self.edge} disagree on shape: {sorted(shapes)}"
            )

    def __call__(self, x: Tensor, coeffs: Tensor) -> Tensor:
        return ops.weighted_sum(coeffs, [op(x) for op in self.candidates])


class RelaxedCell:
    """Cell evaluating every edge as a coefficient-weighted operator mix.

    Both inputs must already be adapted to ``channels`` channels and a common
    spatial size (the supernet owns those adapters).
    """

    def __init__(self, store: ParamStore, name: str, channels: int, cell_kind: str,
                 rng: np.random.Generator, dtype,
                 mask: Sequence[OperatorKind] = FULL_OPERATOR_SET):
        self.cell_kind = cell_kind
        self.channels = channels
        self.edges = [
            MixedEdge(store, f"{name}.edge{e.row:02d}", e, channels, rng, dtype,
                      mask=mask, affine=False)
            for e in edge_ids(cell_kind)
        ]

    @property
    def out_channels(self) -> int:
        return NUM_NODES * self.channels

    def __call__(self, prev_prev: Tensor, prev: Tensor, coeff_rows: Sequence[Tensor]) -> Tensor:
        states = [prev_prev, prev]
        k = 0
        for node in range(NUM_NODES):
            acc = None
            for source in range(2 + node):
                term = self.edges[k](states[source], coeff_rows[k])
                acc = term if acc is None else acc + term
                k += 1
            states.append(acc)
        return ops.concat_channels(states[2:])
