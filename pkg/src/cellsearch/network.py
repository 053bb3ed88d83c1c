"""Full network assembly: stem, stacked cells, classifier head.

The same stacking plan serves two modes: ``relaxed`` evaluates every cell as
coefficient-weighted operator mixtures (for architecture search), ``fixed``
instantiates the discrete branches of a genotype (for final training).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from .genotype import Genotype, validate as validate_genotype
from .layers import BatchNorm2d, Conv2d, Linear, ParamStore
from .search_space import (FULL_OPERATOR_SET, NAME_TO_KIND, NORMAL, NUM_NODES,
                           REDUCE, AlphaParams, OperatorKind, RelaxedCell,
                           make_operator, normalize_mask)
from .tensor import Tensor, as_tensor

RELAXED = "relaxed"
FIXED = "fixed"

STEM_MULTIPLIER = 3

CHECKPOINT_MAGIC = "cellsearch-ckpt v1"


class CheckpointError(ValueError):
    """Checkpoint file is malformed or does not match the network."""


def default_reduce_positions(num_cells: int) -> tuple[int, int]:
    return (num_cells // 3, (2 * num_cells) // 3)


@dataclass
class NetworkConfig:
    """Stacking plan: cell count, base width, reduction placement, input size."""

    num_cells: int = 6
    init_channels: int = 16
    num_classes: int = 10
    reduce_positions: Optional[tuple[int, int]] = None
    input_size: int = 32
    operator_mask: tuple[OperatorKind, ...] = FULL_OPERATOR_SET

    def __post_init__(self):
        if self.num_cells < 3:
            raise ValueError(f"num_cells must be at least 3, got {self.num_cells}")
        if self.init_channels < 1:
            raise ValueError("init_channels must be positive")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.reduce_positions is None:
            self.reduce_positions = default_reduce_positions(self.num_cells)
        self.reduce_positions = tuple(int(p) for p in self.reduce_positions)
        if len(self.reduce_positions) != 2 or len(set(self.reduce_positions)) != 2:
            raise ValueError("reduce_positions must be two distinct cell indices")
        for p in self.reduce_positions:
            if not 0 <= p < self.num_cells:
                raise ValueError(
                    f"reduce position {p} outside [0, {self.num_cells})"
                )
        if self.input_size < 8 or self.input_size % 8 != 0:
            raise ValueError(f"input_size must be a positive multiple of 8, got {self.input_size}")
        self.operator_mask = normalize_mask(self.operator_mask)


class InputAdapter:
    """Reshape a cell input to the cell's operating width via a 1x1
    convolution + norm; a stride-2 variant re-aligns resolution after the
    preceding cell halved it."""

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int,
                 rng: np.random.Generator, dtype, halve: bool = False):
        self.conv = Conv2d(store, name + ".conv", c_in, c_out, 1, rng, dtype,
                           stride=2 if halve else 1)
        self.norm = BatchNorm2d(store, name + ".norm", c_out, dtype, affine=True)

    def __call__(self, x: Tensor) -> Tensor:
        return self.norm(self.conv(x))


class FixedCell:
    """Cell with the two concrete branches per node named by a genotype."""

    def __init__(self, store: ParamStore, name: str, channels: int, cell_kind: str,
                 genotype: Genotype, rng: np.random.Generator, dtype):
        self.cell_kind = cell_kind
        self.channels = channels
        self.branches = []
        for node, node_spec in enumerate(genotype.cell(cell_kind)):
            ops_for_node = []
            for b, (source, op_name) in enumerate(node_spec):
                stride = 2 if cell_kind == REDUCE and source < 2 else 1
                op = make_operator(store, f"{name}.node{node}.branch{b}",
                                   NAME_TO_KIND[op_name], channels, stride, rng, dtype,
                                   affine=True)
                ops_for_node.append((source, op))
            self.branches.append(ops_for_node)

    @property
    def out_channels(self) -> int:
        return NUM_NODES * self.channels

    def __call__(self, prev_prev: Tensor, prev: Tensor) -> Tensor:
        states = [prev_prev, prev]
        for node_branches in self.branches:
            (s0, op0), (s1, op1) = node_branches
            states.append(op0(states[s0]) + op1(states[s1]))
        return ops.concat_channels(states[2:])


class SuperNet:
    """Stem + cell stack + head, in relaxed or fixed mode."""

    def __init__(self, config: NetworkConfig, mode: str = RELAXED,
                 genotype: Optional[Genotype] = None,
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        if mode not in (RELAXED, FIXED):
            raise ValueError(f"mode must be {RELAXED!r} or {FIXED!r}")
        if mode == FIXED:
            if genotype is None:
                raise ValueError("fixed mode requires a genotype")
            problems = validate_genotype(genotype)
            if problems:
                raise ValueError("invalid genotype: " + "; ".join(problems))
        elif genotype is not None:
            raise ValueError("relaxed mode does not take a genotype")
        rng = rng if rng is not None else np.random.default_rng(0)

        self.config = config
        self.mode = mode
        self.genotype = genotype
        self.dtype = np.dtype(dtype)
        self.store = ParamStore()

        c_stem = STEM_MULTIPLIER * config.init_channels
        self.stem1_conv = Conv2d(self.store, "stem.conv1", 3, c_stem, 3, rng, dtype, stride=2)
        self.stem1_norm = BatchNorm2d(self.store, "stem.norm1", c_stem, dtype)
        self.stem2_conv = Conv2d(self.store, "stem.conv2", c_stem, c_stem, 3, rng, dtype)
        self.stem2_norm = BatchNorm2d(self.store, "stem.norm2", c_stem, dtype)

        self.cells = []
        self.adapters = []
        c_prev_prev = c_prev = c_stem
        channels = config.init_channels
        prev_was_reduce = False
        for i in range(config.num_cells):
            is_reduce = i in config.reduce_positions
            if is_reduce:
                channels *= 2
            kind = REDUCE if is_reduce else NORMAL
            name = f"cells.{i:02d}"
            pre0 = InputAdapter(self.store, name + ".pre0", c_prev_prev, channels,
                                rng, dtype, halve=prev_was_reduce)
            pre1 = InputAdapter(self.store, name + ".pre1", c_prev, channels, rng, dtype)
            if mode == RELAXED:
                cell = RelaxedCell(self.store, name, channels, kind, rng, dtype,
                                   mask=config.operator_mask)
            else:
                cell = FixedCell(self.store, name, channels, kind, genotype, rng, dtype)
            self.adapters.append((pre0, pre1))
            self.cells.append(cell)
            c_prev_prev, c_prev = c_prev, cell.out_channels
            prev_was_reduce = is_reduce

        self.feature_channels = c_prev
        self.classifier = Linear(self.store, "head.linear", c_prev, config.num_classes,
                                 rng, dtype)

    # -- mode -----------------------------------------------------------

    def train(self):
        self.store.train()
        return self

    def eval(self):
        self.store.eval()
        return self

    # -- forward ----------------------------------------------------------

    def features(self, images, alphas: Optional[AlphaParams] = None) -> Tensor:
        """Pre-pooling feature map of the last cell.

        Relaxed mode requires ``alphas``; fixed mode forbids them.
        """
        if self.mode == RELAXED and alphas is None:
            raise ValueError("relaxed mode requires architecture coefficients")
        if self.mode == FIXED and alphas is not None:
            raise ValueError("fixed mode does not take architecture coefficients")
        x = as_tensor(images, dtype=self.dtype)
        if x.data.ndim != 4 or x.data.shape[1] != 3:
            raise ValueError(f"expected (batch, 3, h, w) images, got shape {x.shape}")
        size = self.config.input_size
        if x.data.shape[2] != size or x.data.shape[3] != size:
            raise ValueError(
                f"expected {size}x{size} input images, got {x.data.shape[2]}x{x.data.shape[3]}"
            )

        s0 = self.stem1_norm(self.stem1_conv(x))
        s1 = self.stem2_norm(self.stem2_conv(s0))
        if self.mode == RELAXED:
            rows = {kind: alphas.coefficient_rows(kind) for kind in (NORMAL, REDUCE)}
            for (pre0, pre1), cell in zip(self.adapters, self.cells):
                s0, s1 = s1, cell(pre0(s0), pre1(s1), rows[cell.cell_kind])
        else:
            for (pre0, pre1), cell in zip(self.adapters, self.cells):
                s0, s1 = s1, cell(pre0(s0), pre1(s1))
        return s1

    def forward(self, images, alphas: Optional[AlphaParams] = None) -> Tensor:
        """Map an image batch to class logits."""
        return self.classifier(ops.global_avg_pool(self.features(images, alphas)))

    __call__ = forward


def count_parameters(net: SuperNet) -> int:
    """Exact number of trainable scalars in the network's parameter store."""
    return net.store.num_parameters()


# -- checkpoint io --------------------------------------------------------
#
# Layout: one header line, then for each entry (params and buffers merged,
# sorted by name) a text line `name d0 d1 ...` followed by the raw values as
# little-endian float32.


def save_checkpoint(net: SuperNet, path) -> None:
    entries = [(name, p.data) for name, p in net.store.params()]
    entries += [(name, buf) for name, buf in net.store.buffers()]
    entries.sort(key=lambda e: e[0])
    with open(path, "wb") as fh:
        fh.write((CHECKPOINT_MAGIC + "\n").encode("ascii"))
        for name, arr in entries:
            dims = " ".join(str(d) for d in arr.shape)
            fh.write(f"{name} {dims}\n".encode("ascii"))
            fh.write(arr.astype("<f4").tobytes())


def _read_line(fh) -> str:
    raw = bytearray()
    while True:
        b = fh.read(1)
        if not b:
            break
        if b == b"\n":
            break
        raw += b
    return raw.decode("ascii")


def load_checkpoint(net: SuperNet, path) -> None:
    params = dict(net.store.params())
    buffers = dict(net.store.buffers())
    seen = set()
    with open(path, "rb") as fh:
        if _read_line(fh) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a {CHECKPOINT_MAGIC!r} file")
        while True:
            header = _read_line(fh)
            if not header:
                break
            fields = header.split()
            name, dims = fields[0], tuple(int(d) for d in fields[1:])
            count = int(np.prod(dims)) if dims else 1
            payload = fh.read(4 * count)
            if len(payload) != 4 * count:
                raise CheckpointError(f"{path}: truncated data for {name!r}")
            values = np.frombuffer(payload, dtype="<f4").reshape(dims)
            if name in params:
                target = params[name]
                if target.data.shape != dims:
                    raise CheckpointError(
                        f"{path}: parameter {name!r} has shape {dims}, "
                        f"network expects {target.data.shape}"
                    )
                target.data[...] = values.astype(target.data.dtype)
            elif name in buffers:
                if buffers[name].shape != dims:
                    raise CheckpointError(
                        f"{path}: buffer {name!r} has shape {dims}, "
                        f"network expects {buffers[name].shape}"
                    )
                buffers[name][...] = values.astype(buffers[name].dtype)
            else:
                raise CheckpointError(f"{path}: unknown entry {name!r} for this network")
            seen.add(name)
    missing = (set(params) | set(buffers)) - seen
    if missing:
        raise CheckpointError(f"{path}: missing entries: {sorted(missing)[:5]}")
