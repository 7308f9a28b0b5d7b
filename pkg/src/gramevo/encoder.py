"""String encodings of derivation trees and their inverse parser.

The plain encoding is the interchange format: dataset files, run logs and the
external-surrogate wire protocol all carry these strings.  The shape-annotated
variant interleaves ``{'out_feature_shape': [...]}`` after every operation
token, with dimensions taken from the compiled graph.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .compiler import TensorShape, compile_tree
from .errors import ParseError
from .grammar import (
    BRANCHING,
    LEAF_COMPUTATION,
    LEAF_ROUTING,
    ROUTING,
    SEQUENTIAL,
    DerivationTree,
    Grammar,
    OpSpec,
    Production,
)

PLAIN = "plain"
WITH_SHAPES = "with_shapes"

_ANNOTATION_RE = re.compile(r" \{'out_feature_shape': \[[^\]]*\]\}")
_TOKEN_RE = re.compile(r"\s+|(?P<ident>[A-Za-z_][A-Za-z0-9_]*)|(?P<int>-?\d+)|(?P<punct>[\[\](),<>])")


@dataclass(frozen=True)
class ArchString:
    text: str
    variant: str = PLAIN

    def __str__(self) -> str:
        return self.text


def strip_shape_annotations(text: str) -> str:
    return _ANNOTATION_RE.sub("", text)


def _render_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _op_token(op: OpSpec, bindings: dict) -> str:
    resolved = op.resolve(bindings)
    if not resolved:
        return op.kind
    args = ",".join(_render_value(v) for v in resolved.values())
    return f"{op.kind}({args})"


def _render(g: Grammar, node: DerivationTree, shapes) -> str:
    def annotate(token: str) -> str:
        if shapes is None:
            return token
        shape: TensorShape = next(shapes)
        dims = ", ".join(str(d) for d in shape.dims)
        return f"{token} {{'out_feature_shape': [{dims}]}}"

    prod = g.production(node.nonterminal, node.production)
    klass = prod.klass

    if klass == LEAF_COMPUTATION:
        return annotate(f"computation<{_op_token(prod.rhs[0], node.params)}>")
    if klass == LEAF_ROUTING:
        return annotate(_op_token(prod.rhs[0], node.params))

    children = iter(node.children)

    def element(sym) -> str:
        if isinstance(sym, OpSpec):
            if sym.kind in ("linear", "norm", "relu", "softmax", "pos_enc"):
                return annotate(f"computation<{_op_token(sym, node.params)}>")
            return annotate(_op_token(sym, node.params))
        return _render(g, next(children), shapes)

    if klass == SEQUENTIAL:
        inner = ", ".join(element(sym) for sym in prod.rhs)
        return f"sequential[{inner}]"
    if klass == BRANCHING:
        b = prod.rhs[0].resolve(node.params)["b"]
        inner = ", ".join(element(sym) for sym in prod.rhs)
        return f"branching({b})[{inner}]"
    inner = ", ".join(element(sym) for sym in prod.rhs)
    return f"routing[{inner}]"


def encode_plain(g: Grammar, tree: DerivationTree) -> ArchString:
    """Canonical textual form of a derivation tree."""
    return ArchString(text=_render(g, tree, None), variant=PLAIN)


def encode_with_shapes(
    g: Grammar, tree: DerivationTree, input_shape: TensorShape
) -> ArchString:
    """Plain encoding with output shapes interleaved after every op token."""
    graph = compile_tree(g, tree, input_shape)
    shapes = iter(n.out_shape for n in graph.op_nodes())
    text = _render(g, tree, shapes)
    leftovers = sum(1 for _ in shapes)
    if leftovers:
        raise AssertionError(f"{leftovers} graph shapes were not rendered")
    return ArchString(text=text, variant=WITH_SHAPES)


class _TokenStream:
    def __init__(self, text: str):
        self.tokens: list[tuple[str, object, int]] = []
        pos = 0
        while pos < len(text):
            match = _TOKEN_RE.match(text, pos)
            if match is None:
                raise ParseError(f"unexpected character {text[pos]!r}", pos)
            if match.lastgroup == "ident":
                self.tokens.append(("ident", match.group(), pos))
            elif match.lastgroup == "int":
                self.tokens.append(("int", int(match.group()), pos))
            elif match.lastgroup == "punct":
                self.tokens.append(("punct", match.group(), pos))
            pos = match.end()
        self.end_pos = len(text)

    def position(self, index: int) -> int:
        if index < len(self.tokens):
            return self.tokens[index][2]
        return self.end_pos


class _Failure:
    """Remembers the deepest failure for a useful final error message."""

    def __init__(self):
        self.index = -1
        self.message = "no production matched"

    def note(self, index: int, message: str) -> None:
        if index > self.index:
            self.index = index
            self.message = message


class _Parser:
    def __init__(self, grammar: Grammar, stream: _TokenStream):
        self.g = grammar
        self.toks = stream.tokens
        self.stream = stream
        self.failure = _Failure()

    def _peek(self, i: int):
        if i < len(self.toks):
            return self.toks[i]
        return (None, None, self.stream.end_pos)

    def _expect_punct(self, i: int, value: str) -> int | None:
        kind, tok, _ = self._peek(i)
        if kind == "punct" and tok == value:
            return i + 1
        self.failure.note(i, f"expected {value!r}")
        return None

    def parse_nt(self, nt: str, i: int):
        for prod in self.g.rules[nt]:
            result = self.try_production(nt, prod, i)
            if result is not None:
                return result
        kind, tok, _ = self._peek(i)
        self.failure.note(i, f"no production of {nt!r} matches {tok!r}")
        return None

    def try_production(self, nt: str, prod: Production, i: int):
        klass = prod.klass
        bindings: dict[str, object] = {}

        if klass == LEAF_COMPUTATION:
            kind, tok, _ = self._peek(i)
            if kind != "ident" or tok != "computation":
                return None
            j = self._expect_punct(i + 1, "<")
            if j is None:
                return None
            j = self.match_op(prod.rhs[0], prod, bindings, j)
            if j is None:
                return None
            j = self._expect_punct(j, ">")
            if j is None:
                return None
            return self._finish(nt, prod, bindings, (), j)

        if klass == LEAF_ROUTING:
            j = self.match_op(prod.rhs[0], prod, bindings, i)
            if j is None:
                return None
            return self._finish(nt, prod, bindings, (), j)

        keyword = {SEQUENTIAL: "sequential", BRANCHING: "branching", ROUTING: "routing"}[klass]
        kind, tok, _ = self._peek(i)
        if kind != "ident" or tok != keyword:
            return None
        j = i + 1
        declared_b = None
        if klass == BRANCHING:
            j = self._expect_punct(j, "(")
            if j is None:
                return None
            kind, tok, _ = self._peek(j)
            if kind != "int":
                self.failure.note(j, "expected an integer branch count")
                return None
            declared_b = tok
            j = self._expect_punct(j + 1, ")")
            if j is None:
                return None
        j = self._expect_punct(j, "[")
        if j is None:
            return None

        children: list[DerivationTree] = []
        for idx, sym in enumerate(prod.rhs):
            if idx > 0:
                j = self._expect_punct(j, ",")
                if j is None:
                    return None
            if isinstance(sym, OpSpec):
                j = self.match_element_op(sym, prod, bindings, j)
                if j is None:
                    return None
            else:
                result = self.parse_nt(sym, j)
                if result is None:
                    return None
                child, j = result
                children.append(child)
        j = self._expect_punct(j, "]")
        if j is None:
            return None
        if declared_b is not None:
            head = prod.rhs[0].resolve(self._fill_params(prod, bindings))
            if head.get("b") != declared_b:
                self.failure.note(i, f"branch count {declared_b} does not match head op")
                return None
        return self._finish(nt, prod, bindings, tuple(children), j)

    def match_element_op(self, op: OpSpec, prod: Production, bindings: dict, i: int):
        # Computation terminals render wrapped even inside composite productions.
        if op.kind in ("linear", "norm", "relu", "softmax", "pos_enc"):
            kind, tok, _ = self._peek(i)
            if kind != "ident" or tok != "computation":
                self.failure.note(i, f"expected computation<{op.kind}...>")
                return None
            j = self._expect_punct(i + 1, "<")
            if j is None:
                return None
            j = self.match_op(op, prod, bindings, j)
            if j is None:
                return None
            return self._expect_punct(j, ">")
        return self.match_op(op, prod, bindings, i)

    def match_op(self, op: OpSpec, prod: Production, bindings: dict, i: int):
        kind, tok, _ = self._peek(i)
        if kind != "ident":
            self.failure.note(i, f"expected operation name {op.kind!r}")
            return None
        if tok != op.kind:
            self.failure.note(i, f"unknown or unexpected operation {tok!r}")
            return None
        j = i + 1
        atoms: list[object] = []
        kind, tok, _ = self._peek(j)
        if kind == "punct" and tok == "(":
            j += 1
            while True:
                kind, tok, _ = self._peek(j)
                if kind in ("int", "ident"):
                    atoms.append(tok)
                    j += 1
                else:
                    self.failure.note(j, "expected an argument value")
                    return None
                kind, tok, _ = self._peek(j)
                if kind == "punct" and tok == ",":
                    j += 1
                    continue
                if kind == "punct" and tok == ")":
                    j += 1
                    break
                self.failure.note(j, "expected ',' or ')'")
                return None
        if not self._match_args(op, prod, bindings, atoms, i):
            return None
        return j

    def _match_args(self, op: OpSpec, prod: Production, bindings: dict, atoms: list, i: int) -> bool:
        pos = 0
        slots = list(op.params.items())
        for slot_idx, (name, template) in enumerate(slots):
            if isinstance(template, str) and template.startswith("$"):
                ref = template[1:]
                domain = prod.param_domains[ref]
                if any(isinstance(v, tuple) for v in domain):
                    remaining = len(slots) - slot_idx - 1
                    matched = None
                    for v in sorted(domain, key=lambda x: -(len(x) if isinstance(x, tuple) else 1)):
                        length = len(v) if isinstance(v, tuple) else 1
                        chunk = tuple(atoms[pos : pos + length])
                        cand = chunk if isinstance(v, tuple) else (chunk[0] if chunk else None)
                        if len(chunk) == length and cand == v and pos + length + remaining <= len(atoms):
                            matched = (v, length)
                            break
                    if matched is None:
                        self.failure.note(i, f"arguments do not fit domain of {ref!r}")
                        return False
                    value, length = matched
                    pos += length
                else:
                    if pos >= len(atoms):
                        self.failure.note(i, f"missing argument for {ref!r}")
                        return False
                    value = atoms[pos]
                    pos += 1
                    if value not in domain:
                        self.failure.note(
                            i, f"argument {value!r} is outside the domain of {ref!r}"
                        )
                        return False
                if ref in bindings and bindings[ref] != value:
                    self.failure.note(i, f"inconsistent binding for {ref!r}")
                    return False
                bindings[ref] = value
            else:
                expected = template if isinstance(template, tuple) else (template,)
                chunk = tuple(atoms[pos : pos + len(expected)])
                if chunk != expected:
                    self.failure.note(i, f"expected literal argument {template!r}")
                    return False
                pos += len(expected)
        if pos != len(atoms):
            self.failure.note(i, f"too many arguments for {op.kind!r}")
            return False
        return True

    def _fill_params(self, prod: Production, bindings: dict) -> dict:
        # Parameters never referenced by any op cannot be recovered from the
        # text; fill them with the first domain value, deterministically.
        params = dict(bindings)
        for name, domain in prod.param_domains.items():
            params.setdefault(name, domain[0])
        return params

    def _finish(self, nt: str, prod: Production, bindings: dict, children, j: int):
        return DerivationTree(nt, prod.name, self._fill_params(prod, bindings), children), j


def parse_arch(g: Grammar, text: str, start: str | None = None) -> DerivationTree:
    """Parse a plain encoding back into a derivation tree.

    Shape annotations are tolerated and ignored.  Raises ParseError with the
    offending position when the text is not in the encoding language.
    """
    stream = _TokenStream(strip_shape_annotations(text))
    parser = _Parser(g, stream)
    result = parser.parse_nt(start or g.start, 0)
    if result is None:
        raise ParseError(parser.failure.message, stream.position(max(parser.failure.index, 0)))
    tree, index = result
    if index != len(stream.tokens):
        raise ParseError("unexpected trailing input", stream.position(index))
    return tree
