import pytest

from gramevo import (
    DerivationTree,
    TensorShape,
    compile_tree,
    infer_shape,
    sample_tree,
    verify_graph,
)
from gramevo.compiler import COL, IM
from gramevo.errors import ShapeError

from conftest import rng


def conv_block(k=3, s=2, p=1, d=128):
    return DerivationTree(
        "NET_IM",
        "conv_block",
        {"k": k, "s": s, "p": p},
        (DerivationTree("NET_COL", "linear", {"d": d}),),
    )


def branching(left, right):
    return DerivationTree("NET_IM", "branching2_add", {}, (left, right))


def test_identity_graph(grammar, im_shape):
    graph = compile_tree(grammar, DerivationTree("NET_IM", "identity"), im_shape)
    ops = graph.op_nodes()
    assert [n.kind for n in ops] == ["identity"]
    assert ops[0].out_shape == im_shape
    assert len(graph.nodes) == 3  # plus input/output markers
    verify_graph(graph)


def test_conv_block_shapes(grammar, im_shape):
    # hand-computed: H' = (32 + 2*1 - 3) // 2 + 1 = 16, S = 256, D = 3*9 = 27
    graph = compile_tree(grammar, conv_block(), im_shape)
    shapes = [(n.kind, n.out_shape.mode, n.out_shape.dims) for n in graph.op_nodes()]
    assert shapes == [
        ("im2col", COL, (256, 27)),
        ("linear", COL, (256, 128)),
        ("col2im", IM, (128, 16, 16)),
    ]
    verify_graph(graph)


def test_add_requires_equal_shapes(grammar, im_shape):
    tree = branching(DerivationTree("NET_IM", "identity"), conv_block())
    with pytest.raises(ShapeError, match="equal shapes"):
        compile_tree(grammar, tree, im_shape)


def test_branching_graph_structure(grammar, im_shape):
    tree = branching(
        DerivationTree("NET_IM", "relu"), DerivationTree("NET_IM", "norm")
    )
    graph = compile_tree(grammar, tree, im_shape)
    kinds = [n.kind for n in graph.op_nodes()]
    assert kinds == ["clone", "relu", "norm", "add"]
    clone = graph.op_nodes()[0]
    assert len(graph.successors(clone.id)) == 2
    verify_graph(graph)


def test_infer_im2col():
    out = infer_shape("im2col", {"k": 3, "s": 2, "p": 1}, [TensorShape.im(3, 32, 32)])
    assert out == TensorShape.col(256, 27)


def test_infer_identity_preserves():
    shape = TensorShape.im(5, 7, 9)
    assert infer_shape("identity", {}, [shape]) == shape


def test_infer_col2im_square():
    assert infer_shape("col2im", {}, [TensorShape.col(100, 64)]) == TensorShape.im(64, 10, 10)


def test_col2im_rejects_non_square():
    with pytest.raises(ShapeError, match="square"):
        infer_shape("col2im", {}, [TensorShape.col(96, 64)])


def test_im2col_rejects_vanishing_spatial():
    with pytest.raises(ShapeError, match="non-positive"):
        infer_shape("im2col", {"k": 5, "s": 2, "p": 0}, [TensorShape.im(3, 2, 2)])


def test_linear_rejects_im_mode():
    with pytest.raises(ShapeError, match="col mode"):
        infer_shape("linear", {"d": 16}, [TensorShape.im(3, 8, 8)])


def test_group_divisibility():
    assert infer_shape("group", {"b": 2, "dim": 0}, [TensorShape.col(6, 8)]) == TensorShape.col(3, 8)
    with pytest.raises(ShapeError, match="split"):
        infer_shape("group", {"b": 4, "dim": 0}, [TensorShape.col(6, 8)])


def test_concat_sums_along_dim():
    shapes = [TensorShape.col(4, 8), TensorShape.col(4, 3)]
    assert infer_shape("concat", {"b": 2, "dim": 1}, shapes) == TensorShape.col(4, 11)
    with pytest.raises(ShapeError, match="off the concat dim"):
        infer_shape("concat", {"b": 2, "dim": 0}, shapes)


def test_dot_product():
    shapes = [TensorShape.col(4, 8), TensorShape.col(4, 8)]
    assert infer_shape("dot_product", {}, shapes) == TensorShape.col(4, 4)


def test_permute_reorders():
    out = infer_shape("permute", {"order": (2, 0, 1)}, [TensorShape.im(3, 8, 9)])
    assert out.dims == (9, 3, 8)
    with pytest.raises(ShapeError, match="permutation"):
        infer_shape("permute", {"order": (0, 0, 1)}, [TensorShape.im(3, 8, 9)])


def test_im2col_col2im_round_trip():
    # k=1, s=1, p=0 on a square image is invertible
    start = TensorShape.im(7, 16, 16)
    mid = infer_shape("im2col", {"k": 1, "s": 1, "p": 0}, [start])
    assert infer_shape("col2im", {}, [mid]) == start


def test_compile_is_pure_and_deterministic(grammar, im_shape):
    tree = sample_tree(grammar, 8, rng(4))
    g1 = compile_tree(grammar, tree, im_shape)
    g2 = compile_tree(grammar, tree, im_shape)
    assert g1.to_json() == g2.to_json()


def test_random_graphs_reverify(grammar, im_shape):
    compiled = 0
    for seed in range(300):
        tree = sample_tree(grammar, 10, rng(seed))
        try:
            graph = compile_tree(grammar, tree, im_shape)
        except ShapeError:
            continue
        verify_graph(graph)
        order = graph.topological_order()
        assert order[0] == graph.input_id and order[-1] == graph.output_id
        compiled += 1
    assert compiled > 200


def test_shape_error_names_node(grammar, im_shape):
    tree = branching(DerivationTree("NET_IM", "identity"), conv_block())
    with pytest.raises(ShapeError, match=r"node \d+ \(add\)"):
        compile_tree(grammar, tree, im_shape)


def test_graph_json_serializes(grammar, im_shape):
    import json

    graph = compile_tree(grammar, conv_block(), im_shape)
    doc = json.loads(graph.to_json())
    assert {n["kind"] for n in doc["nodes"]} >= {"im2col", "linear", "col2im"}
    assert doc["input_id"] == 0
