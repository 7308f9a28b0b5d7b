"""Context-free grammar over tensor operations: loading, sampling, subtree mutation.

A grammar maps nonterminal names to parameterized productions.  Sampling a
grammar yields a derivation tree (the genotype of the search); mutation
replaces one uniformly chosen subtree with a fresh sample of its nonterminal.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .errors import (
    GrammarParseError,
    GrammarValidationError,
    SamplingExhaustedError,
    TreeValidationError,
)

COMPUTATION_KINDS = ("linear", "norm", "relu", "softmax", "pos_enc")
ROUTING_KINDS = ("im2col", "col2im", "permute", "identity")
BRANCH_KINDS = ("clone", "group")
AGGREGATION_KINDS = ("add", "concat", "dot_product")
STRUCTURAL_KINDS = ("sequential", "branching", "routing")

OP_KINDS = frozenset(
    STRUCTURAL_KINDS + BRANCH_KINDS + AGGREGATION_KINDS + ROUTING_KINDS + COMPUTATION_KINDS
)

# Rendering / construction classes derived from a production's right-hand side.
LEAF_COMPUTATION = "leaf_computation"
LEAF_ROUTING = "leaf_routing"
SEQUENTIAL = "sequential"
BRANCHING = "branching"
ROUTING = "routing"

DEFAULT_MAX_DEPTH = 12
MUTATION_RETRIES = 10

DEFAULT_GRAMMAR_NAME = "mini_einspace"


@dataclass(frozen=True)
class OpSpec:
    """A terminal operation; param values may be literals or "$name" references."""

    kind: str
    params: dict[str, object] = field(default_factory=dict)

    def resolve(self, bindings: dict[str, object]) -> dict[str, object]:
        """Substitute "$name" references with the tree node's drawn values."""
        out = {}
        for key, value in self.params.items():
            if isinstance(value, str) and value.startswith("$"):
                out[key] = bindings[value[1:]]
            else:
                out[key] = value
        return out


@dataclass(frozen=True)
class Production:
    name: str
    rhs: tuple[OpSpec | str, ...]  # str entries are nonterminal names
    param_domains: dict[str, tuple] = field(default_factory=dict)

    @property
    def nonterminals(self) -> tuple[str, ...]:
        return tuple(s for s in self.rhs if isinstance(s, str))

    @property
    def ops(self) -> tuple[OpSpec, ...]:
        return tuple(s for s in self.rhs if isinstance(s, OpSpec))

    @property
    def klass(self) -> str:
        """Structural class, derived from the shape of the right-hand side."""
        if len(self.rhs) == 1 and isinstance(self.rhs[0], OpSpec):
            op = self.rhs[0]
            if op.kind in COMPUTATION_KINDS:
                return LEAF_COMPUTATION
            return LEAF_ROUTING
        first, last = self.rhs[0], self.rhs[-1]
        if (
            len(self.rhs) >= 3
            and isinstance(first, OpSpec)
            and first.kind in BRANCH_KINDS
            and isinstance(last, OpSpec)
            and last.kind in AGGREGATION_KINDS
        ):
            return BRANCHING
        if all(isinstance(s, str) for s in self.rhs) and len(self.rhs) >= 2:
            return SEQUENTIAL
        return ROUTING


@dataclass(frozen=True)
class DerivationTree:
    """One node of a derivation: a production choice plus drawn parameter values."""

    nonterminal: str
    production: str
    params: dict[str, object] = field(default_factory=dict)
    children: tuple["DerivationTree", ...] = ()

    def iter_nodes(self):
        """Preorder traversal of all nodes."""
        yield self
        for child in self.children:
            yield from child.iter_nodes()

    def iter_nodes_with_depth(self, depth: int = 1):
        yield self, depth
        for child in self.children:
            yield from child.iter_nodes_with_depth(depth + 1)

    def node_count(self) -> int:
        return sum(1 for _ in self.iter_nodes())

    def depth(self) -> int:
        if not self.children:
            return 1
        return 1 + max(c.depth() for c in self.children)


@dataclass(frozen=True)
class Grammar:
    start: str
    rules: dict[str, tuple[Production, ...]]
    min_depths: dict[str, float] = field(default_factory=dict, compare=False)

    def production(self, nonterminal: str, name: str) -> Production:
        for prod in self.rules[nonterminal]:
            if prod.name == name:
                return prod
        raise TreeValidationError(
            f"nonterminal {nonterminal!r} has no production {name!r}"
        )

    def production_min_depth(self, prod: Production) -> float:
        if not prod.nonterminals:
            return 1
        return 1 + max(self.min_depths[nt] for nt in prod.nonterminals)


def _parse_rhs_symbol(raw, where: str):
    if not isinstance(raw, dict) or len(raw) != 1:
        raise GrammarParseError(f"{where}: rhs entries must be {{'op': ...}} or {{'nt': ...}}")
    if "nt" in raw:
        if not isinstance(raw["nt"], str):
            raise GrammarParseError(f"{where}: 'nt' must be a string")
        return raw["nt"]
    if "op" in raw:
        spec = raw["op"]
        if not isinstance(spec, dict) or "kind" not in spec:
            raise GrammarParseError(f"{where}: 'op' must be an object with a 'kind'")
        params = spec.get("params", {})
        if not isinstance(params, dict):
            raise GrammarParseError(f"{where}: op params must be an object")
        clean = {k: tuple(v) if isinstance(v, list) else v for k, v in params.items()}
        return OpSpec(kind=spec["kind"], params=clean)
    raise GrammarParseError(f"{where}: rhs entry must contain 'op' or 'nt'")


def load_grammar(text: str) -> Grammar:
    """Parse and validate a grammar from its JSON file contents."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GrammarParseError(
            f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from exc
    if not isinstance(doc, dict) or "start" not in doc or "rules" not in doc:
        raise GrammarParseError("grammar file must be an object with 'start' and 'rules'")

    rules: dict[str, tuple[Production, ...]] = {}
    for nt, raw_prods in doc["rules"].items():
        prods = []
        for i, raw in enumerate(raw_prods):
            where = f"rules[{nt!r}][{i}]"
            if "name" not in raw or "rhs" not in raw:
                raise GrammarParseError(f"{where}: production needs 'name' and 'rhs'")
            rhs = tuple(_parse_rhs_symbol(s, where) for s in raw["rhs"])
            domains = {}
            for pname, values in raw.get("param_domains", {}).items():
                if not isinstance(values, list):
                    raise GrammarParseError(f"{where}: domain of {pname!r} must be a list")
                domains[pname] = tuple(
                    tuple(v) if isinstance(v, list) else v for v in values
                )
            prods.append(Production(name=raw["name"], rhs=rhs, param_domains=domains))
        rules[nt] = tuple(prods)

    grammar = Grammar(start=doc["start"], rules=rules)
    _validate_grammar(grammar)
    object.__setattr__(grammar, "min_depths", _min_completion_depths(grammar))
    return grammar


def load_grammar_file(path) -> Grammar:
    with open(path, encoding="utf-8") as fh:
        return load_grammar(fh.read())


def default_grammar() -> Grammar:
    """The shipped mini grammar (image-mode start symbol, two nonterminals)."""
    text = (
        resources.files("gramevo")
        .joinpath(f"grammars/{DEFAULT_GRAMMAR_NAME}.json")
        .read_text(encoding="utf-8")
    )
    return load_grammar(text)


def _validate_grammar(g: Grammar) -> None:
    if g.start not in g.rules:
        raise GrammarValidationError(f"start symbol {g.start!r} has no rules")
    for nt, prods in g.rules.items():
        if not prods:
            raise GrammarValidationError(f"nonterminal {nt!r} has no productions")
        names = [p.name for p in prods]
        if len(set(names)) != len(names):
            raise GrammarValidationError(f"duplicate production names under {nt!r}")
        for prod in prods:
            where = f"{nt!r}/{prod.name!r}"
            if not prod.rhs:
                raise GrammarValidationError(f"{where}: empty right-hand side")
            for pname, values in prod.param_domains.items():
                if len(values) == 0:
                    raise GrammarValidationError(
                        f"{where}: parameter {pname!r} has an empty domain"
                    )
            for sym in prod.rhs:
                if isinstance(sym, str):
                    if sym not in g.rules:
                        raise GrammarValidationError(
                            f"{where}: undefined nonterminal {sym!r}"
                        )
                else:
                    if sym.kind not in OP_KINDS:
                        raise GrammarValidationError(
                            f"{where}: unknown operation kind {sym.kind!r}"
                        )
                    for value in sym.params.values():
                        if isinstance(value, str) and value.startswith("$"):
                            ref = value[1:]
                            if ref not in prod.param_domains:
                                raise GrammarValidationError(
                                    f"{where}: op references undeclared parameter {ref!r}"
                                )


def _min_completion_depths(g: Grammar) -> dict[str, float]:
    """Fixpoint of the minimum derivation depth per nonterminal (inf if none)."""
    depths = {nt: math.inf for nt in g.rules}
    changed = True
    while changed:
        changed = False
        for nt, prods in g.rules.items():
            for prod in prods:
                nts = prod.nonterminals
                cand = 1 if not nts else 1 + max(depths[c] for c in nts)
                if cand < depths[nt]:
                    depths[nt] = cand
                    changed = True
    return depths


def sample_tree(
    g: Grammar, max_depth: int, rng: np.random.Generator, start: str | None = None
) -> DerivationTree:
    """Sample a complete derivation uniformly within the depth budget.

    At every step only productions that can still terminate within the
    remaining budget participate in the uniform draw, so sampling never
    rejects; it fails only when no production of a nonterminal can
    terminate at all within the budget.
    """
    if max_depth < 1:
        raise ValueError("max_depth must be >= 1")
    return _sample_nt(g, start or g.start, max_depth, rng)


def _sample_nt(g: Grammar, nt: str, budget: int, rng: np.random.Generator) -> DerivationTree:
    options = [p for p in g.rules[nt] if g.production_min_depth(p) <= budget]
    if not options:
        raise SamplingExhaustedError(
            f"no production of {nt!r} is expandable within depth budget {budget}"
        )
    prod = options[int(rng.integers(len(options)))]
    params = {
        name: domain[int(rng.integers(len(domain)))]
        for name, domain in prod.param_domains.items()
    }
    children = tuple(_sample_nt(g, c, budget - 1, rng) for c in prod.nonterminals)
    return DerivationTree(nt, prod.name, params, children)


def mutate_subtree(
    g: Grammar,
    tree: DerivationTree,
    max_depth: int,
    rng: np.random.Generator,
    retries: int = MUTATION_RETRIES,
) -> DerivationTree:
    """Replace one uniformly chosen node's subtree with a fresh sample.

    The fresh subtree is sampled for the chosen node's nonterminal with the
    depth budget that keeps the whole tree within ``max_depth`` measured from
    the root.  The input tree is never modified.
    """
    nodes = list(tree.iter_nodes_with_depth())
    last_error = None
    for _ in range(retries):
        index = int(rng.integers(len(nodes)))
        _, depth = nodes[index]
        budget = max_depth - depth + 1
        target_nt = nodes[index][0].nonterminal
        try:
            fresh = _sample_nt(g, target_nt, budget, rng)
        except SamplingExhaustedError as exc:
            last_error = exc
            continue
        return _replace_preorder(tree, index, fresh)
    raise SamplingExhaustedError(
        f"mutation failed after {retries} retries: {last_error}"
    )


def _replace_preorder(tree: DerivationTree, index: int, fresh: DerivationTree) -> DerivationTree:
    """Rebuild the tree with the index-th preorder node replaced by `fresh`."""

    def rebuild(node: DerivationTree, counter: list[int]) -> DerivationTree:
        me = counter[0]
        counter[0] += 1
        if me == index:
            # Skip the whole replaced subtree in the preorder numbering.
            counter[0] += node.node_count() - 1
            return fresh
        if counter[0] > index:
            return node
        children = []
        changed = False
        for child in node.children:
            if counter[0] <= index < counter[0] + child.node_count():
                new_child = rebuild(child, counter)
                changed = True
            else:
                counter[0] += child.node_count()
                new_child = child
            children.append(new_child)
        if not changed:
            return node
        return DerivationTree(node.nonterminal, node.production, node.params, tuple(children))

    return rebuild(tree, [0])


def validate_tree(
    g: Grammar, tree: DerivationTree, max_depth: int | None = None
) -> None:
    """Raise TreeValidationError if the tree is inconsistent with the grammar."""
    if max_depth is not None and tree.depth() > max_depth:
        raise TreeValidationError(
            f"tree depth {tree.depth()} exceeds max_depth {max_depth}"
        )

    def check(node: DerivationTree) -> None:
        if node.nonterminal not in g.rules:
            raise TreeValidationError(f"unknown nonterminal {node.nonterminal!r}")
        prod = g.production(node.nonterminal, node.production)
        nts = prod.nonterminals
        if len(node.children) != len(nts):
            raise TreeValidationError(
                f"{node.nonterminal}/{node.production}: expected "
                f"{len(nts)} children, found {len(node.children)}"
            )
        if set(node.params) != set(prod.param_domains):
            raise TreeValidationError(
                f"{node.nonterminal}/{node.production}: parameter names do not "
                f"match declared domains"
            )
        for name, value in node.params.items():
            if value not in prod.param_domains[name]:
                raise TreeValidationError(
                    f"{node.nonterminal}/{node.production}: value {value!r} "
                    f"outside domain of {name!r}"
                )
        for child, nt in zip(node.children, nts):
            if child.nonterminal != nt:
                raise TreeValidationError(
                    f"{node.nonterminal}/{node.production}: child nonterminal "
                    f"{child.nonterminal!r} does not match rhs slot {nt!r}"
                )
            check(child)

    check(tree)
