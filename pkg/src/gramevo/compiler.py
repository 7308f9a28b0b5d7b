"""Compilation of derivation trees into shape-checked architecture DAGs.

Tensors live in one of two layouts: image mode (C, H, W) and column mode
(S, D).  Every graph node carries the inferred shape of its output; an
architecture whose shapes do not line up is rejected with a ShapeError.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from .errors import ShapeError
from .grammar import (
    AGGREGATION_KINDS,
    BRANCHING,
    DerivationTree,
    Grammar,
    OpSpec,
)

IM = "im"
COL = "col"

INPUT_KIND = "input"
OUTPUT_KIND = "output"


@dataclass(frozen=True)
class TensorShape:
    mode: str
    dims: tuple[int, ...]

    def __post_init__(self):
        expected = {IM: 3, COL: 2}
        if self.mode not in expected:
            raise ShapeError(f"unknown tensor mode {self.mode!r}")
        if len(self.dims) != expected[self.mode]:
            raise ShapeError(
                f"{self.mode} mode needs {expected[self.mode]} dims, got {self.dims}"
            )
        if any(d < 1 for d in self.dims):
            raise ShapeError(f"non-positive dimension in {self.dims}")

    @classmethod
    def im(cls, c: int, h: int, w: int) -> "TensorShape":
        return cls(IM, (c, h, w))

    @classmethod
    def col(cls, s: int, d: int) -> "TensorShape":
        return cls(COL, (s, d))


@dataclass
class GraphNode:
    id: int
    kind: str
    params: dict[str, object] = field(default_factory=dict)
    out_shape: TensorShape | None = None


@dataclass
class ArchGraph:
    nodes: list[GraphNode]
    edges: list[tuple[int, int]]
    input_id: int
    output_id: int

    def op_nodes(self) -> list[GraphNode]:
        """Operation nodes in creation (preorder) order, markers excluded."""
        return [n for n in self.nodes if n.kind not in (INPUT_KIND, OUTPUT_KIND)]

    def predecessors(self, node_id: int) -> list[int]:
        return [a for a, b in self.edges if b == node_id]

    def successors(self, node_id: int) -> list[int]:
        return [b for a, b in self.edges if a == node_id]

    def topological_order(self) -> list[int]:
        indeg = {n.id: 0 for n in self.nodes}
        for _, b in self.edges:
            indeg[b] += 1
        ready = [nid for nid, d in sorted(indeg.items()) if d == 0]
        order = []
        succ: dict[int, list[int]] = {n.id: [] for n in self.nodes}
        for a, b in self.edges:
            succ[a].append(b)
        while ready:
            nid = ready.pop(0)
            order.append(nid)
            for nxt in succ[nid]:
                indeg[nxt] -= 1
                if indeg[nxt] == 0:
                    ready.append(nxt)
        if len(order) != len(self.nodes):
            raise ShapeError("graph contains a cycle")
        return order

    def to_json(self) -> str:
        doc = {
            "nodes": [
                {
                    "id": n.id,
                    "kind": n.kind,
                    "params": {k: list(v) if isinstance(v, tuple) else v
                               for k, v in n.params.items()},
                    "out_shape": None
                    if n.out_shape is None
                    else {"mode": n.out_shape.mode, "dims": list(n.out_shape.dims)},
                }
                for n in self.nodes
            ],
            "edges": [list(e) for e in self.edges],
            "input_id": self.input_id,
            "output_id": self.output_id,
        }
        return json.dumps(doc)


def _require_mode(kind: str, shape: TensorShape, mode: str) -> None:
    if shape.mode != mode:
        raise ShapeError(f"{kind} requires {mode} mode input, got {shape.mode}")


def _as_int(kind: str, params: dict, name: str) -> int:
    if name not in params:
        raise ShapeError(f"{kind} is missing parameter {name!r}")
    value = params[name]
    if not isinstance(value, int) or isinstance(value, bool):
        raise ShapeError(f"{kind} parameter {name!r} must be an integer, got {value!r}")
    return value


def infer_shape(kind: str, params: dict, inputs: list[TensorShape]) -> TensorShape:
    """Output shape of one operation given its input shapes."""
    if not inputs:
        raise ShapeError(f"{kind} got no inputs")
    first = inputs[0]

    if kind in ("norm", "relu", "softmax", "identity", "pos_enc"):
        return first

    if kind == "linear":
        _require_mode(kind, first, COL)
        d = _as_int(kind, params, "d")
        if d < 1:
            raise ShapeError(f"linear output dim must be positive, got {d}")
        return TensorShape.col(first.dims[0], d)

    if kind == "im2col":
        _require_mode(kind, first, IM)
        k = _as_int(kind, params, "k")
        s = _as_int(kind, params, "s")
        p = _as_int(kind, params, "p")
        if k < 1 or s < 1 or p < 0:
            raise ShapeError(f"im2col parameters out of range: k={k}, s={s}, p={p}")
        c, h, w = first.dims
        h_out = (h + 2 * p - k) // s + 1
        w_out = (w + 2 * p - k) // s + 1
        if h_out < 1 or w_out < 1:
            raise ShapeError(
                f"im2col(k={k},s={s},p={p}) on {first.dims} yields non-positive "
                f"spatial size ({h_out}x{w_out})"
            )
        return TensorShape.col(h_out * w_out, c * k * k)

    if kind == "col2im":
        _require_mode(kind, first, COL)
        s_len, d = first.dims
        side = math.isqrt(s_len)
        if side * side != s_len:
            raise ShapeError(
                f"col2im requires a square sequence length, got S={s_len}"
            )
        return TensorShape.im(d, side, side)

    if kind == "permute":
        order = params.get("order")
        if order is None:
            raise ShapeError("permute is missing parameter 'order'")
        order = tuple(order)
        if sorted(order) != list(range(len(first.dims))):
            raise ShapeError(
                f"permute order {order} is not a permutation of the {len(first.dims)} dims"
            )
        return TensorShape(first.mode, tuple(first.dims[i] for i in order))

    if kind == "add":
        for shape in inputs[1:]:
            if shape != first:
                raise ShapeError(
                    f"add requires equal shapes, got {first.dims} vs {shape.dims}"
                )
        return first

    if kind == "concat":
        b = _as_int(kind, params, "b")
        dim = _as_int(kind, params, "dim")
        if len(inputs) != b:
            raise ShapeError(f"concat(b={b}) got {len(inputs)} inputs")
        if not 0 <= dim < len(first.dims):
            raise ShapeError(f"concat dim {dim} out of range for {first.dims}")
        total = 0
        for shape in inputs:
            if shape.mode != first.mode:
                raise ShapeError("concat inputs must share a mode")
            for axis, (a, bdim) in enumerate(zip(first.dims, shape.dims)):
                if axis != dim and a != bdim:
                    raise ShapeError(
                        f"concat inputs differ off the concat dim: "
                        f"{first.dims} vs {shape.dims}"
                    )
            total += shape.dims[dim]
        dims = list(first.dims)
        dims[dim] = total
        return TensorShape(first.mode, tuple(dims))

    if kind == "dot_product":
        if len(inputs) != 2:
            raise ShapeError(f"dot_product takes 2 inputs, got {len(inputs)}")
        a, b = inputs
        _require_mode(kind, a, COL)
        _require_mode(kind, b, COL)
        if a.dims != b.dims:
            raise ShapeError(
                f"dot_product requires matching shapes, got {a.dims} vs {b.dims}"
            )
        return TensorShape.col(a.dims[0], b.dims[0])

    if kind == "clone":
        b = _as_int(kind, params, "b")
        if b < 2:
            raise ShapeError(f"clone needs b >= 2, got {b}")
        return first

    if kind == "group":
        b = _as_int(kind, params, "b")
        dim = _as_int(kind, params, "dim")
        if b < 2:
            raise ShapeError(f"group needs b >= 2, got {b}")
        if not 0 <= dim < len(first.dims):
            raise ShapeError(f"group dim {dim} out of range for {first.dims}")
        if first.dims[dim] % b != 0:
            raise ShapeError(
                f"group(b={b}) cannot split dim {dim} of size {first.dims[dim]}"
            )
        dims = list(first.dims)
        dims[dim] //= b
        return TensorShape(first.mode, tuple(dims))

    raise ShapeError(f"operation kind {kind!r} has no shape rule")


class _Builder:
    def __init__(self, grammar: Grammar):
        self.grammar = grammar
        self.nodes: list[GraphNode] = []
        self.edges: list[tuple[int, int]] = []

    def add_node(self, kind: str, params: dict, shape: TensorShape) -> int:
        node = GraphNode(id=len(self.nodes), kind=kind, params=params, out_shape=shape)
        self.nodes.append(node)
        return node.id

    def add_op(self, op: OpSpec, bindings: dict, src: tuple[int, TensorShape],
               extra_inputs: list[TensorShape] | None = None) -> tuple[int, TensorShape]:
        params = op.resolve(bindings)
        inputs = [src[1]] if extra_inputs is None else extra_inputs
        try:
            shape = infer_shape(op.kind, params, inputs)
        except ShapeError as exc:
            raise ShapeError(f"node {len(self.nodes)} ({op.kind}): {exc}") from exc
        nid = self.add_node(op.kind, params, shape)
        self.edges.append((src[0], nid))
        return nid, shape

    def build(self, node: DerivationTree, src: tuple[int, TensorShape]) -> tuple[int, TensorShape]:
        prod = self.grammar.production(node.nonterminal, node.production)
        children = iter(node.children)

        if prod.klass == BRANCHING:
            head, agg = prod.rhs[0], prod.rhs[-1]
            branches = prod.rhs[1:-1]
            head_params = head.resolve(node.params)
            b = head_params.get("b")
            if b != len(branches):
                raise ShapeError(
                    f"{head.kind}(b={b}) feeds {len(branches)} branches"
                )
            head_id, head_shape = self.add_op(head, node.params, src)
            tails: list[tuple[int, TensorShape]] = []
            for sym in branches:
                tails.append(self._element(sym, node.params, children, (head_id, head_shape)))
            agg_params = agg.resolve(node.params)
            try:
                agg_shape = infer_shape(agg.kind, agg_params, [t[1] for t in tails])
            except ShapeError as exc:
                raise ShapeError(f"node {len(self.nodes)} ({agg.kind}): {exc}") from exc
            agg_id = self.add_node(agg.kind, agg_params, agg_shape)
            for tail_id, _ in tails:
                self.edges.append((tail_id, agg_id))
            return agg_id, agg_shape

        current = src
        for sym in prod.rhs:
            current = self._element(sym, node.params, children, current)
        return current

    def _element(self, sym, bindings, children, src) -> tuple[int, TensorShape]:
        if isinstance(sym, OpSpec):
            return self.add_op(sym, bindings, src)
        return self.build(next(children), src)


def compile_tree(grammar: Grammar, tree: DerivationTree, input_shape: TensorShape) -> ArchGraph:
    """Compile a derivation tree into a shape-checked DAG.

    The graph gets synthetic input/output marker nodes so there is always a
    single source and a single sink; all path features count edges on
    input-to-output paths including the marker edges.
    """
    builder = _Builder(grammar)
    input_id = builder.add_node(INPUT_KIND, {}, input_shape)
    tail_id, tail_shape = builder.build(tree, (input_id, input_shape))
    output_id = builder.add_node(OUTPUT_KIND, {}, tail_shape)
    builder.edges.append((tail_id, output_id))
    return ArchGraph(
        nodes=builder.nodes,
        edges=builder.edges,
        input_id=input_id,
        output_id=output_id,
    )


def verify_graph(graph: ArchGraph) -> None:
    """Re-check every node's recorded shape against its inputs' shapes."""
    order = graph.topological_order()
    preds: dict[int, list[int]] = {n.id: [] for n in graph.nodes}
    for a, b in graph.edges:
        preds[b].append(a)
    by_id = {n.id: n for n in graph.nodes}
    for nid in order:
        node = by_id[nid]
        if node.kind in (INPUT_KIND, OUTPUT_KIND):
            continue
        inputs = [by_id[p].out_shape for p in preds[nid]]
        expected = infer_shape(node.kind, node.params, inputs)
        if expected != node.out_shape:
            raise ShapeError(
                f"node {nid} ({node.kind}): recorded shape {node.out_shape} "
                f"!= re-inferred {expected}"
            )
    sources = [n.id for n in graph.nodes if not preds[n.id]]
    sinks = [n.id for n in graph.nodes if not graph.successors(n.id)]
    if sources != [graph.input_id] or sinks != [graph.output_id]:
        raise ShapeError("graph does not have a unique source and sink")
