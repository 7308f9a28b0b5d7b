"""Architecture augmentations for expanding surrogate training sets.

Four rewrites, each applied at a uniformly chosen applicable site:

1. swap_sequential  - reassociate nested two-child sequential compositions,
2. swap_branches    - swap the two branch subtrees of a branching(2) node,
3. insert_identity  - wrap a subtree in sequential(subtree, identity),
4. perturb_dim      - move a linear output dimension to a neighbouring rung
                      of the ladder [16, 32, ..., 2048].

Every augmented sample's accuracy is jittered with Gaussian noise of
standard deviation 0.005 and clamped back into [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NotApplicableError
from .grammar import BRANCHING, SEQUENTIAL, DerivationTree, Grammar, LEAF_ROUTING

SWAP_SEQUENTIAL = "swap_sequential"
SWAP_BRANCHES = "swap_branches"
INSERT_IDENTITY = "insert_identity"
PERTURB_DIM = "perturb_dim"

ALL_KINDS = (SWAP_SEQUENTIAL, SWAP_BRANCHES, INSERT_IDENTITY, PERTURB_DIM)

DIM_LADDER = (16, 32, 64, 128, 256, 512, 1024, 2048)

LABEL_NOISE_STD = 0.005


@dataclass(frozen=True)
class AugmentedSample:
    tree: DerivationTree
    accuracy: float
    source_kind: str | None  # None marks an untouched original


def _node_at(tree: DerivationTree, path: tuple[int, ...]) -> DerivationTree:
    node = tree
    for idx in path:
        node = node.children[idx]
    return node


def _replace_at(tree: DerivationTree, path: tuple[int, ...], new: DerivationTree) -> DerivationTree:
    if not path:
        return new
    head, rest = path[0], path[1:]
    children = list(tree.children)
    children[head] = _replace_at(children[head], rest, new)
    return DerivationTree(tree.nonterminal, tree.production, tree.params, tuple(children))


def _iter_paths(tree: DerivationTree, path: tuple[int, ...] = ()):
    yield path, tree
    for i, child in enumerate(tree.children):
        yield from _iter_paths(child, path + (i,))


def _is_seq2(g: Grammar, node: DerivationTree) -> bool:
    prod = g.production(node.nonterminal, node.production)
    return (
        prod.klass == SEQUENTIAL
        and len(prod.rhs) == 2
        and prod.rhs == (node.nonterminal, node.nonterminal)
    )


def _identity_production(g: Grammar, nonterminal: str):
    for prod in g.rules[nonterminal]:
        if (
            prod.klass == LEAF_ROUTING
            and prod.rhs[0].kind == "identity"
            and not prod.param_domains
        ):
            return prod
    return None


def _seq2_production(g: Grammar, nonterminal: str):
    for prod in g.rules[nonterminal]:
        if prod.klass == SEQUENTIAL and prod.rhs == (nonterminal, nonterminal):
            return prod
    return None


def _swap_sequential_sites(g: Grammar, tree: DerivationTree):
    """Sites are (path, direction): 'left' rotates a right-nested chain and
    'right' rotates a left-nested one; both preserve the terminal sequence."""
    sites = []
    for path, node in _iter_paths(tree):
        if not _is_seq2(g, node):
            continue
        if _is_seq2(g, node.children[1]):
            sites.append((path, "left"))
        if _is_seq2(g, node.children[0]):
            sites.append((path, "right"))
    return sites


def _apply_swap_sequential(g: Grammar, tree: DerivationTree, site) -> DerivationTree:
    path, direction = site
    node = _node_at(tree, path)
    if direction == "left":
        # sequential(a, sequential(b, c)) -> sequential(sequential(a, b), c)
        a = node.children[0]
        inner = node.children[1]
        b, c = inner.children
        new_inner = DerivationTree(inner.nonterminal, inner.production, inner.params, (a, b))
        new_node = DerivationTree(node.nonterminal, node.production, node.params, (new_inner, c))
    else:
        # sequential(sequential(a, b), c) -> sequential(a, sequential(b, c))
        inner = node.children[0]
        c = node.children[1]
        a, b = inner.children
        new_inner = DerivationTree(inner.nonterminal, inner.production, inner.params, (b, c))
        new_node = DerivationTree(node.nonterminal, node.production, node.params, (a, new_inner))
    return _replace_at(tree, path, new_node)


def _swap_branches_sites(g: Grammar, tree: DerivationTree):
    sites = []
    for path, node in _iter_paths(tree):
        prod = g.production(node.nonterminal, node.production)
        if prod.klass == BRANCHING and len(node.children) == 2:
            sites.append(path)
    return sites


def _apply_swap_branches(g: Grammar, tree: DerivationTree, path) -> DerivationTree:
    node = _node_at(tree, path)
    swapped = DerivationTree(
        node.nonterminal,
        node.production,
        node.params,
        (node.children[1], node.children[0]),
    )
    return _replace_at(tree, path, swapped)


def _insert_identity_sites(g: Grammar, tree: DerivationTree):
    sites = []
    for path, node in _iter_paths(tree):
        if _seq2_production(g, node.nonterminal) and _identity_production(g, node.nonterminal):
            sites.append(path)
    return sites


def _apply_insert_identity(g: Grammar, tree: DerivationTree, path) -> DerivationTree:
    node = _node_at(tree, path)
    seq = _seq2_production(g, node.nonterminal)
    ident = _identity_production(g, node.nonterminal)
    identity_node = DerivationTree(node.nonterminal, ident.name, {}, ())
    wrapped = DerivationTree(node.nonterminal, seq.name, {}, (node, identity_node))
    return _replace_at(tree, path, wrapped)


def _perturb_dim_sites(g: Grammar, tree: DerivationTree):
    """Sites are (path, param_name, in-domain neighbouring ladder values)."""
    sites = []
    for path, node in _iter_paths(tree):
        prod = g.production(node.nonterminal, node.production)
        for op in prod.ops:
            if op.kind != "linear":
                continue
            ref = op.params.get("d")
            if not (isinstance(ref, str) and ref.startswith("$")):
                continue
            name = ref[1:]
            value = node.params.get(name)
            if value not in DIM_LADDER:
                continue
            idx = DIM_LADDER.index(value)
            neighbours = []
            if idx > 0:
                neighbours.append(DIM_LADDER[idx - 1])
            if idx < len(DIM_LADDER) - 1:
                neighbours.append(DIM_LADDER[idx + 1])
            neighbours = [v for v in neighbours if v in prod.param_domains[name]]
            if neighbours:
                sites.append((path, name, tuple(neighbours)))
    return sites


def _apply_perturb_dim(tree: DerivationTree, site, rng: np.random.Generator) -> DerivationTree:
    path, name, neighbours = site
    node = _node_at(tree, path)
    new_value = neighbours[int(rng.integers(len(neighbours)))]
    params = dict(node.params)
    params[name] = new_value
    return _replace_at(
        tree, path, DerivationTree(node.nonterminal, node.production, params, node.children)
    )


_SITE_FINDERS = {
    SWAP_SEQUENTIAL: _swap_sequential_sites,
    SWAP_BRANCHES: _swap_branches_sites,
    INSERT_IDENTITY: _insert_identity_sites,
    PERTURB_DIM: _perturb_dim_sites,
}


def applicable_kinds(g: Grammar, tree: DerivationTree) -> tuple[str, ...]:
    return tuple(k for k in ALL_KINDS if _SITE_FINDERS[k](g, tree))


def augment(
    g: Grammar,
    tree: DerivationTree,
    accuracy: float,
    kind: str,
    rng: np.random.Generator,
) -> AugmentedSample:
    """Apply one augmentation of the requested kind at a uniform random site."""
    if kind not in ALL_KINDS:
        raise ValueError(f"unknown augmentation kind {kind!r}")
    sites = _SITE_FINDERS[kind](g, tree)
    if not sites:
        raise NotApplicableError(f"no {kind} site in this tree")
    site = sites[int(rng.integers(len(sites)))]
    if kind == SWAP_SEQUENTIAL:
        new_tree = _apply_swap_sequential(g, tree, site)
    elif kind == SWAP_BRANCHES:
        new_tree = _apply_swap_branches(g, tree, site)
    elif kind == INSERT_IDENTITY:
        new_tree = _apply_insert_identity(g, tree, site)
    else:
        new_tree = _apply_perturb_dim(tree, site, rng)
    noisy = float(np.clip(accuracy + rng.normal(0.0, LABEL_NOISE_STD), 0.0, 1.0))
    return AugmentedSample(tree=new_tree, accuracy=noisy, source_kind=kind)


def expand_dataset(
    g: Grammar,
    samples,
    factor: int,
    rng: np.random.Generator,
) -> list[AugmentedSample]:
    """Emit originals plus up to `factor` augmented variants per sample.

    Variants cycle over the kinds applicable to each tree; samples with no
    applicable kind pass through untouched.
    """
    if factor < 1:
        raise ValueError("factor must be >= 1")
    out: list[AugmentedSample] = []
    for tree, accuracy in samples:
        out.append(AugmentedSample(tree=tree, accuracy=accuracy, source_kind=None))
        kinds = applicable_kinds(g, tree)
        if not kinds:
            continue
        for i in range(factor):
            out.append(augment(g, tree, accuracy, kinds[i % len(kinds)], rng))
    return out
