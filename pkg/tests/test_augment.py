from collections import Counter

import numpy as np
import pytest

from gramevo import (
    DerivationTree,
    augment,
    compile_tree,
    expand_dataset,
    sample_tree,
    validate_tree,
)
from gramevo.augment import (
    ALL_KINDS,
    DIM_LADDER,
    INSERT_IDENTITY,
    PERTURB_DIM,
    SWAP_BRANCHES,
    SWAP_SEQUENTIAL,
    applicable_kinds,
)
from gramevo.errors import NotApplicableError, ShapeError

from conftest import rng


def op_multiset(grammar, tree):
    """Multiset of resolved terminal operations, flattened left to right."""
    ops = []

    def walk(node):
        prod = grammar.production(node.nonterminal, node.production)
        children = iter(node.children)
        for sym in prod.rhs:
            if isinstance(sym, str):
                walk(next(children))
            else:
                ops.append((sym.kind, tuple(sorted(sym.resolve(node.params).items()))))

    walk(tree)
    return ops


def linear_tree(d):
    return DerivationTree(
        "NET_IM",
        "conv_block",
        {"k": 1, "s": 1, "p": 0},
        (DerivationTree("NET_COL", "linear", {"d": d}),),
    )


def seq(a, b, nt="NET_IM"):
    return DerivationTree(nt, "sequential", {}, (a, b))


def test_perturb_dim_left_endpoint_moves_up(grammar):
    # 16 has a single neighbour on the ladder, so the rewrite is forced
    for seed in range(20):
        out = augment(grammar, linear_tree(16), 0.5, PERTURB_DIM, rng(seed))
        assert out.tree.children[0].params["d"] == 32


def test_perturb_dim_moves_to_adjacent_rung(grammar):
    seen = set()
    for seed in range(50):
        out = augment(grammar, linear_tree(128), 0.5, PERTURB_DIM, rng(seed))
        seen.add(out.tree.children[0].params["d"])
    assert seen == {64, 256}


def test_perturb_dim_changes_exactly_one_param(grammar):
    tree = seq(linear_tree(64), linear_tree(512))
    for seed in range(30):
        out = augment(grammar, tree, 0.5, PERTURB_DIM, rng(seed))
        dims = [out.tree.children[0].children[0].params["d"],
                out.tree.children[1].children[0].params["d"]]
        changed = sum(1 for old, new in zip([64, 512], dims) if old != new)
        assert changed == 1
        for old, new in zip([64, 512], dims):
            if old != new:
                assert abs(DIM_LADDER.index(new) - DIM_LADDER.index(old)) == 1


def test_swap_branches_swaps_subtrees(grammar, im_shape):
    a = DerivationTree("NET_IM", "relu")
    b = DerivationTree("NET_IM", "norm")
    tree = DerivationTree("NET_IM", "branching2_add", {}, (a, b))
    out = augment(grammar, tree, 0.5, SWAP_BRANCHES, rng(0))
    assert out.tree.children == (b, a)
    assert Counter(op_multiset(grammar, tree)) == Counter(op_multiset(grammar, out.tree))
    before = compile_tree(grammar, tree, im_shape)
    after = compile_tree(grammar, out.tree, im_shape)
    assert before.op_nodes()[-1].out_shape == after.op_nodes()[-1].out_shape


def test_swap_sequential_reassociates(grammar):
    a, b, c = (DerivationTree("NET_IM", p) for p in ("identity", "norm", "relu"))
    tree = seq(a, seq(b, c))
    out = augment(grammar, tree, 0.5, SWAP_SEQUENTIAL, rng(0))
    assert out.tree == seq(seq(a, b), c)
    # flattened terminal sequence is preserved, not only the multiset
    assert op_multiset(grammar, tree) == op_multiset(grammar, out.tree)
    # and the rewrite is an involution up to site choice
    back = augment(grammar, out.tree, 0.5, SWAP_SEQUENTIAL, rng(1))
    assert op_multiset(grammar, back.tree) == op_multiset(grammar, tree)


def test_insert_identity_adds_exactly_one(grammar):
    tree = seq(DerivationTree("NET_IM", "norm"), DerivationTree("NET_IM", "relu"))
    for seed in range(20):
        out = augment(grammar, tree, 0.5, INSERT_IDENTITY, rng(seed))
        validate_tree(grammar, out.tree)
        before = Counter(op_multiset(grammar, tree))
        after = Counter(op_multiset(grammar, out.tree))
        diff = after - before
        assert sum(diff.values()) == 1
        assert next(iter(diff))[0] == "identity"


def test_not_applicable_raises(grammar):
    tree = DerivationTree("NET_IM", "identity")
    with pytest.raises(NotApplicableError):
        augment(grammar, tree, 0.5, SWAP_BRANCHES, rng(0))
    with pytest.raises(NotApplicableError):
        augment(grammar, tree, 0.5, PERTURB_DIM, rng(0))
    with pytest.raises(NotApplicableError):
        augment(grammar, tree, 0.5, SWAP_SEQUENTIAL, rng(0))


def test_expand_dataset_bounds(grammar):
    samples = [(sample_tree(grammar, 8, rng(s)), 0.5) for s in range(10)]
    out = expand_dataset(grammar, samples, 3, rng(0))
    assert len(out) <= 40
    assert sum(1 for s in out if s.source_kind is None) == 10
    # originals come through untouched
    originals = [s for s in out if s.source_kind is None]
    assert all(o.accuracy == 0.5 for o in originals)


def test_no_branching_means_no_branch_swaps(grammar):
    tree = seq(DerivationTree("NET_IM", "norm"), DerivationTree("NET_IM", "relu"))
    assert SWAP_BRANCHES not in applicable_kinds(grammar, tree)
    out = expand_dataset(grammar, [(tree, 0.4)], 8, rng(0))
    assert all(s.source_kind != SWAP_BRANCHES for s in out)


def test_label_noise_statistics(grammar):
    tree = linear_tree(128)
    deltas = []
    r = rng(0)
    for _ in range(10_000):
        out = augment(grammar, tree, 0.5, PERTURB_DIM, r)
        deltas.append(out.accuracy - 0.5)
    std = float(np.std(deltas, ddof=1))
    assert 0.0045 <= std <= 0.0055
    assert abs(float(np.mean(deltas))) < 0.0005


def test_accuracy_clamped(grammar):
    r = rng(0)
    for _ in range(200):
        out = augment(grammar, linear_tree(128), 0.999, PERTURB_DIM, r)
        assert 0.0 <= out.accuracy <= 1.0
        out = augment(grammar, linear_tree(128), 0.001, PERTURB_DIM, r)
        assert 0.0 <= out.accuracy <= 1.0


def test_forms_preserve_shape_and_ops(grammar, im_shape):
    """Forms 1-2 preserve the op multiset; 1-3 preserve the output shape and
    all non-identity op counts."""
    checked = Counter()
    for seed in range(600):
        tree = sample_tree(grammar, 12, rng(seed))
        try:
            out_shape = compile_tree(grammar, tree, im_shape).op_nodes()[-1].out_shape
        except ShapeError:
            continue
        before = Counter(op_multiset(grammar, tree))
        for kind in (SWAP_SEQUENTIAL, SWAP_BRANCHES, INSERT_IDENTITY):
            if kind not in applicable_kinds(grammar, tree):
                continue
            sample = augment(grammar, tree, 0.5, kind, rng(seed))
            validate_tree(grammar, sample.tree)
            after = Counter(op_multiset(grammar, sample.tree))
            if kind in (SWAP_SEQUENTIAL, SWAP_BRANCHES):
                assert after == before
            else:
                non_identity = lambda c: {k: v for k, v in c.items() if k[0] != "identity"}
                assert non_identity(after) == non_identity(before)
            new_shape = compile_tree(grammar, sample.tree, im_shape).op_nodes()[-1].out_shape
            assert new_shape == out_shape
            checked[kind] += 1
    assert all(checked[k] >= 20 for k in (SWAP_SEQUENTIAL, SWAP_BRANCHES, INSERT_IDENTITY)), checked


def test_form_one_preserves_terminal_sequence(grammar):
    count = 0
    for seed in range(600):
        tree = sample_tree(grammar, 12, rng(seed))
        if SWAP_SEQUENTIAL not in applicable_kinds(grammar, tree):
            continue
        out = augment(grammar, tree, 0.5, SWAP_SEQUENTIAL, rng(seed))
        assert op_multiset(grammar, tree) == op_multiset(grammar, out.tree)
        count += 1
    assert count > 25


def test_all_kinds_enumerated():
    assert set(ALL_KINDS) == {SWAP_SEQUENTIAL, SWAP_BRANCHES, INSERT_IDENTITY, PERTURB_DIM}
