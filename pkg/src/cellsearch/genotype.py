"""Discrete cell descriptions: derivation from coefficients, JSON round trip,
DOT rendering, and the atrous-removal transforms."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .search_space import (CELL_KINDS, FULL_OPERATOR_SET, NAME_TO_KIND, NORMAL,
                           NUM_EDGES, NUM_NODES, OPERATOR_NAMES, OperatorKind,
                           REDUCE, edge_row, normalize_mask, softmax_coefficients)

FORMAT_VERSION = 1

Branch = tuple[int, str]  # (source index, operator name)
NodeSpec = tuple[Branch, Branch]


class GenotypeError(ValueError):
    """Malformed genotype text or an invalid genotype structure."""


@dataclass(frozen=True)
class Genotype:
    """Per cell kind: four nodes, each fed by two (source, operator)
    branches; node outputs are concatenated in order."""

    normal: tuple[NodeSpec, ...]
    reduce: tuple[NodeSpec, ...]
    concat: tuple[int, ...] = tuple(range(2, 2 + NUM_NODES))
    format_version: int = FORMAT_VERSION

    def cell(self, cell_kind: str) -> tuple[NodeSpec, ...]:
        if cell_kind == NORMAL:
            return self.normal
        if cell_kind == REDUCE:
            return self.reduce
        raise ValueError(f"unknown cell kind {cell_kind!r}")

    def operator_names(self) -> set[str]:
        return {op for cell in (self.normal, self.reduce) for node in cell for _, op in node}


@dataclass
class AlphaSnapshot:
    """Serializable coefficient state: one matrix per cell kind plus the
    operator subset the columns refer to."""

    normal: np.ndarray
    reduce: np.ndarray
    mask: tuple[OperatorKind, ...] = FULL_OPERATOR_SET
    seed: Optional[int] = None

    def __post_init__(self):
        self.mask = normalize_mask(self.mask)
        for name in (NORMAL, REDUCE):
            mat = np.asarray(getattr(self, name), dtype=np.float64)
            if mat.shape != (NUM_EDGES, len(self.mask)):
                raise ValueError(
                    f"{name} matrix must be {NUM_EDGES}x{len(self.mask)}, got {mat.shape}"
                )
            if not np.isfinite(mat).all():
                raise ValueError(f"{name} matrix contains non-finite entries")
            setattr(self, name, mat)

    def matrix(self, cell_kind: str) -> np.ndarray:
        return self.normal if cell_kind == NORMAL else self.reduce


def derive(snapshot: AlphaSnapshot) -> Genotype:
    """Discretize coefficients into a genotype.

    Edge strength is the largest softmax coefficient on that edge; every node
    keeps its two strongest sources and, on each kept edge, the operator with
    the largest coefficient.  Ties break toward lower source index and lower
    canonical operator index.
    """
    cells = {}
    for kind in CELL_KINDS:
        mat = snapshot.matrix(kind)
        nodes = []
        for node in range(NUM_NODES):
            coeff_rows = [softmax_coefficients(mat[edge_row(node, s)])
                          for s in range(2 + node)]
            strengths = np.array([r.max() for r in coeff_rows])
            order = sorted(range(len(strengths)), key=lambda s: (-strengths[s], s))
            picked = sorted(order[:2])
            branches = []
            for source in picked:
                op = snapshot.mask[int(np.argmax(coeff_rows[source]))]
                branches.append((source, OPERATOR_NAMES[op]))
            nodes.append(tuple(branches))
        cells[kind] = tuple(nodes)
    return Genotype(normal=cells[NORMAL], reduce=cells[REDUCE])


def validate(genotype: Genotype) -> list[str]:
    """Collect structural problems; an empty list means the genotype is valid."""
    problems = []
    if genotype.format_version != FORMAT_VERSION:
        problems.append(f"unsupported format_version {genotype.format_version}")
    if genotype.concat != tuple(range(2, 2 + NUM_NODES)):
        problems.append(f"concat must be {tuple(range(2, 2 + NUM_NODES))}, got {genotype.concat}")
    for kind in CELL_KINDS:
        cell = genotype.cell(kind)
        if len(cell) != NUM_NODES:
            problems.append(f"{kind} cell must have {NUM_NODES} nodes, got {len(cell)}")
            continue
        for node, branches in enumerate(cell):
            if len(branches) != 2:
                problems.append(f"{kind} node {node}: expected 2 branches, got {len(branches)}")
                continue
            sources = [b[0] for b in branches]
            if len(set(sources)) != 2:
                problems.append(f"{kind} node {node}: branch sources must be distinct")
            for source, op in branches:
                if not 0 <= source < 2 + node:
                    problems.append(
                        f"{kind} node {node}: source must precede node, got {source}"
                    )
                if op not in NAME_TO_KIND:
                    problems.append(f"{kind} node {node}: unknown operator {op!r}")
    return problems


def serialize(genotype: Genotype) -> str:
    """Byte-stable JSON rendering (fixed key order, two-space indent,
    trailing newline)."""
    payload = {
        "format_version": genotype.format_version,
        "normal": [[[source, op] for source, op in node] for node in genotype.normal],
        "reduce": [[[source, op] for source, op in node] for node in genotype.reduce],
        "concat": list(genotype.concat),
    }
    return json.dumps(payload, indent=2) + "\n"


def parse(text: str) -> Genotype:
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GenotypeError(f"genotype is not valid JSON: {exc}") from None
    if not isinstance(payload, dict):
        raise GenotypeError("genotype JSON must be an object")
    missing = {"format_version", "normal", "reduce", "concat"} - payload.keys()
    if missing:
        raise GenotypeError(f"genotype JSON is missing keys: {sorted(missing)}")

    def read_cell(key: str) -> tuple[NodeSpec, ...]:
        raw = payload[key]
        if not isinstance(raw, list):
            raise GenotypeError(f"field {key!r}: expected a list of nodes")
        nodes = []
        for i, node in enumerate(raw):
            if not isinstance(node, list):
                raise GenotypeError(f"field {key!r} node {i}: expected a list of branches")
            branches = []
            for j, branch in enumerate(node):
                if (not isinstance(branch, list) or len(branch) != 2
                        or not isinstance(branch[0], int) or not isinstance(branch[1], str)):
                    raise GenotypeError(
                        f"field {key!r} node {i} branch {j}: expected [source, operator]"
                    )
                branches.append((branch[0], branch[1]))
            nodes.append(tuple(branches))
        return tuple(nodes)

    genotype = Genotype(
        normal=read_cell("normal"),
        reduce=read_cell("reduce"),
        concat=tuple(payload["concat"]),
        format_version=payload["format_version"],
    )
    problems = validate(genotype)
    if problems:
        raise GenotypeError("; ".join(problems))
    return genotype


def write_genotype(genotype: Genotype, path) -> None:
    problems = validate(genotype)
    if problems:
        raise GenotypeError("; ".join(problems))
    with open(path, "w") as fh:
        fh.write(serialize(genotype))


def read_genotype(path) -> Genotype:
    with open(path) as fh:
        return parse(fh.read())


def export_dot(genotype: Genotype) -> str:
    """Render both cells as DOT digraphs with a fixed emission order."""
    problems = validate(genotype)
    if problems:
        raise GenotypeError("; ".join(problems))

    def source_label(source: int) -> str:
        if source == 0:
            return "c_{k-2}"
        if source == 1:
            return "c_{k-1}"
        return f"sum_{source - 2}"

    chunks = []
    for kind in CELL_KINDS:
        lines = [f"digraph {kind} {{", "  rankdir=LR;"]
        lines.append('  "c_{k-2}" [shape=box];')
        lines.append('  "c_{k-1}" [shape=box];')
        for node in range(NUM_NODES):
            lines.append(f'  "sum_{node}" [shape=ellipse];')
        lines.append('  "out" [shape=box];')
        for node, branches in enumerate(genotype.cell(kind)):
            for source, op in branches:
                lines.append(f'  "{source_label(source)}" -> "sum_{node}" [label="{op}"];')
        for node in range(NUM_NODES):
            lines.append(f'  "sum_{node}" -> "out";')
        lines.append("}")
        chunks.append("\n".join(lines))
    return "\n".join(chunks) + "\n"


ATROUS_TO_SEPARABLE = {
    "atr_conv_3x3": "sep_conv_3x3",
    "atr_conv_5x5": "sep_conv_5x5",
}


def ablate_replace_atrous(genotype: Genotype) -> Genotype:
    """Swap every spacing-2 convolution for the separable one of equal size."""

    def map_cell(cell: tuple[NodeSpec, ...]) -> tuple[NodeSpec, ...]:
        return tuple(
            tuple((source, ATROUS_TO_SEPARABLE.get(op, op)) for source, op in node)
            for node in cell
        )

    return Genotype(normal=map_cell(genotype.normal), reduce=map_cell(genotype.reduce),
                    concat=genotype.concat, format_version=genotype.format_version)


def atrous_free_mask() -> tuple[OperatorKind, ...]:
    """Candidate subset without the spacing-2 convolutions (5 operators)."""
    return tuple(k for k in FULL_OPERATOR_SET
                 if k not in (OperatorKind.ATROUS_CONV_3, OperatorKind.ATROUS_CONV_5))


def write_alphas(snapshot: AlphaSnapshot, path) -> None:
    payload = {
        "normal": [[float(v) for v in row] for row in snapshot.normal],
        "reduce": [[float(v) for v in row] for row in snapshot.reduce],
        "mask": [OPERATOR_NAMES[k] for k in snapshot.mask],
        "seed": snapshot.seed,
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(payload, indent=2) + "\n")


def read_alphas(path) -> AlphaSnapshot:
    with open(path) as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise GenotypeError(f"alphas file is not valid JSON: {exc}") from None
    missing = {"normal", "reduce", "mask", "seed"} - payload.keys()
    if missing:
        raise GenotypeError(f"alphas file is missing keys: {sorted(missing)}")
    try:
        mask = tuple(NAME_TO_KIND[name] for name in payload["mask"])
    except KeyError as exc:
        raise GenotypeError(f"alphas file names unknown operator {exc}") from None
    try:
        return AlphaSnapshot(
            normal=np.asarray(payload["normal"], dtype=np.float64),
            reduce=np.asarray(payload["reduce"], dtype=np.float64),
            mask=mask,
            seed=payload["seed"],
        )
    except ValueError as exc:
        raise GenotypeError(str(exc)) from None
