"""Topological feature extraction from architecture graphs.

For every operation kind we emit five descriptors: how often it occurs, the
shortest and longest input-to-output path (in edges) passing through at least
one node of that kind, and the maximum in-/out-degree over its nodes.  Ops
absent from the graph get the sentinel -1 for both path features and 0 for
degrees, so downstream tabular models always see finite values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .compiler import INPUT_KIND, OUTPUT_KIND, ArchGraph
from .errors import SchemaError

# Canonical kind order: branch / aggregation / routing / computation.
DEFAULT_GRAF_KINDS = (
    "clone",
    "group",
    "add",
    "concat",
    "dot_product",
    "im2col",
    "col2im",
    "permute",
    "identity",
    "linear",
    "norm",
    "relu",
    "softmax",
    "pos_enc",
)

MISSING_PATH = -1.0

_FEATURES_PER_KIND = ("count", "min_path", "max_path", "max_in_degree", "max_out_degree")


@dataclass(frozen=True)
class FeatureVector:
    schema: tuple[str, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.schema) != len(self.values):
            raise SchemaError(
                f"schema has {len(self.schema)} names but {len(self.values)} values"
            )
        if any(math.isnan(v) for v in self.values):
            raise SchemaError("feature values must not contain NaN")

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.schema, self.values))


def graf_schema(op_kinds=DEFAULT_GRAF_KINDS) -> tuple[str, ...]:
    return tuple(
        f"{kind}_{feature}" for kind in op_kinds for feature in _FEATURES_PER_KIND
    )


def extract_graf(graph: ArchGraph, op_kinds=DEFAULT_GRAF_KINDS) -> FeatureVector:
    """Compute the topological descriptor of a shape-checked graph."""
    order = graph.topological_order()
    preds: dict[int, list[int]] = {n.id: [] for n in graph.nodes}
    succs: dict[int, list[int]] = {n.id: [] for n in graph.nodes}
    for a, b in graph.edges:
        preds[b].append(a)
        succs[a].append(b)

    # Edge-count distances from the input marker (shortest and longest).
    short_in = {graph.input_id: 0}
    long_in = {graph.input_id: 0}
    for nid in order:
        if nid == graph.input_id:
            continue
        short_in[nid] = min(short_in[p] for p in preds[nid]) + 1
        long_in[nid] = max(long_in[p] for p in preds[nid]) + 1

    short_out = {graph.output_id: 0}
    long_out = {graph.output_id: 0}
    for nid in reversed(order):
        if nid == graph.output_id:
            continue
        short_out[nid] = min(short_out[s] for s in succs[nid]) + 1
        long_out[nid] = max(long_out[s] for s in succs[nid]) + 1

    by_kind: dict[str, list[int]] = {}
    for node in graph.nodes:
        if node.kind in (INPUT_KIND, OUTPUT_KIND):
            continue
        by_kind.setdefault(node.kind, []).append(node.id)

    values = []
    for kind in op_kinds:
        ids = by_kind.get(kind, [])
        if not ids:
            values.extend([0.0, MISSING_PATH, MISSING_PATH, 0.0, 0.0])
            continue
        min_path = min(short_in[i] + short_out[i] for i in ids)
        max_path = max(long_in[i] + long_out[i] for i in ids)
        max_in = max(len(preds[i]) for i in ids)
        max_out = max(len(succs[i]) for i in ids)
        values.extend(
            [float(len(ids)), float(min_path), float(max_path), float(max_in), float(max_out)]
        )
    return FeatureVector(schema=graf_schema(op_kinds), values=tuple(values))


def assemble_input(graf: FeatureVector, extra: FeatureVector | None = None) -> FeatureVector:
    """Concatenate the topological descriptor with optional extra columns."""
    if extra is None:
        return graf
    collisions = set(graf.schema) & set(extra.schema)
    if collisions:
        raise SchemaError(f"extra feature names collide: {sorted(collisions)}")
    return FeatureVector(
        schema=graf.schema + extra.schema, values=graf.values + extra.values
    )
