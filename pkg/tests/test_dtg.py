import numpy as np
import pytest
from numpy.testing import assert_allclose

from conftest import central_difference, relative_gradient_error
from fracmodal.dtg import (
    GENERATORS,
    ExpansionTree,
    TreeWeights,
    enhance,
    expand_tree,
    gram,
    nod_loss,
)
from fracmodal.engine import ComplexTensor, Tensor, backward, zero_grads
from fracmodal.errors import DegenerateVectorError, DimensionError


def cvec(re, im=None) -> ComplexTensor:
    re = np.atleast_2d(np.asarray(re, dtype=np.float64))
    im = np.zeros_like(re) if im is None else np.atleast_2d(np.asarray(im, dtype=np.float64))
    return ComplexTensor(Tensor(re), Tensor(im))


def random_root(rng, d):
    return cvec(rng.standard_normal((1, d)), rng.standard_normal((1, d)))


# ---------------------------------------------------------------------------
# expand_tree
# ---------------------------------------------------------------------------


def test_depth_one_tree_is_just_the_root():
    rng = np.random.default_rng(0)
    root = random_root(rng, 4)
    tree = expand_tree(root, TreeWeights.create(4, 1, rng), 1)
    assert tree.depth == 1
    assert len(tree.nodes()) == 1
    assert tree.nodes()[0] is root


def test_depth_three_tree_has_seven_nodes():
    rng = np.random.default_rng(1)
    tree = expand_tree(random_root(rng, 4), TreeWeights.create(4, 3, rng), 3)
    assert [len(layer) for layer in tree.layers] == [1, 2, 4]
    assert len(tree.nodes()) == 7


@pytest.mark.parametrize("depth", [1, 2, 3, 4, 5])
def test_node_count_invariant(depth):
    rng = np.random.default_rng(depth)
    tree = expand_tree(random_root(rng, 4), TreeWeights.create(4, depth, rng), depth)
    assert sum(len(layer) for layer in tree.layers) == 2**depth - 1
    assert [len(layer) for layer in tree.layers] == [2**r for r in range(depth)]


def test_identity_weights_copy_the_root():
    rng = np.random.default_rng(2)
    root = random_root(rng, 4)
    weights = TreeWeights.create(4, 2, rng)
    for t in weights.tensors.values():
        t.data[:] = np.eye(4)
    tree = expand_tree(root, weights, 2)
    for child in tree.layers[1]:
        assert_allclose(child.re.data, root.re.data, atol=1e-15)
        assert_allclose(child.im.data, root.im.data, atol=1e-15)


def test_children_are_linear_transforms_of_parent():
    rng = np.random.default_rng(3)
    root = random_root(rng, 4)
    weights = TreeWeights.create(4, 3, rng)
    tree = expand_tree(root, weights, 3)
    parent = tree.layers[1][1].numpy()
    w = weights.tensors["tree.w.r2.m1.left"].data
    assert_allclose(tree.layers[2][2].numpy(), parent @ w, atol=1e-13)


def test_depth_mismatch_rejected():
    rng = np.random.default_rng(4)
    with pytest.raises(DimensionError):
        expand_tree(random_root(rng, 4), TreeWeights.create(4, 3, rng), 2)


@pytest.mark.parametrize("generator", GENERATORS)
def test_alternative_generators_share_node_budget(generator):
    rng = np.random.default_rng(5)
    weights = TreeWeights.create(4, 3, rng, generator=generator)
    tree = expand_tree(random_root(rng, 4), weights, 3)
    assert len(tree.nodes()) == 7


def test_generator_weight_counts():
    rng = np.random.default_rng(6)
    assert len(TreeWeights.create(4, 3, rng, "dtg").tensors) == 6
    assert len(TreeWeights.create(4, 3, rng, "interp").tensors) == 2
    assert len(TreeWeights.create(4, 3, rng, "series").tensors) == 6
    assert len(TreeWeights.create(4, 3, rng, "parallel").tensors) == 6
    with pytest.raises(DimensionError):
        TreeWeights.create(4, 3, rng, "other")


# ---------------------------------------------------------------------------
# gram
# ---------------------------------------------------------------------------


def test_gram_orthogonal_nodes():
    nodes = [cvec(np.eye(4)[i : i + 1]) for i in range(4)]
    assert_allclose(gram(nodes), np.eye(4), atol=1e-12)


def test_gram_identical_nodes():
    node = cvec([[1.0, 2.0, 0.0, -1.0]])
    nodes = [node, cvec(node.re.data.copy()), cvec(node.re.data.copy())]
    assert_allclose(gram(nodes), np.ones((3, 3)), atol=1e-12)


def test_gram_matches_loop_oracle_and_properties():
    rng = np.random.default_rng(7)
    nodes = [random_root(rng, 8) for _ in range(4)]
    a = gram(nodes)
    for i in range(4):
        for j in range(4):
            fi = np.concatenate([nodes[i].re.data.ravel(), nodes[i].im.data.ravel()])
            fj = np.concatenate([nodes[j].re.data.ravel(), nodes[j].im.data.ravel()])
            expected = fi @ fj / (np.linalg.norm(fi) * np.linalg.norm(fj))
            assert abs(a[i, j] - expected) < 1e-12
    assert_allclose(a, a.T, atol=1e-14)
    assert_allclose(np.diag(a), np.ones(4), atol=1e-12)
    assert np.all(np.abs(a) <= 1.0 + 1e-12)


def test_gram_degenerate_node_rejected():
    with pytest.raises(DegenerateVectorError):
        gram([cvec([[1.0, 0.0]]), cvec([[0.0, 0.0]])])


# ---------------------------------------------------------------------------
# nod_loss
# ---------------------------------------------------------------------------


def test_nod_loss_zero_for_orthogonal_layers():
    layers = [
        [cvec(np.eye(4)[0:1])],
        [cvec(np.eye(4)[i : i + 1]) for i in range(2)],
        [cvec(np.eye(4)[i : i + 1]) for i in range(4)],
    ]
    assert float(nod_loss(ExpansionTree(layers)).data) == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("n", [2, 4])
def test_nod_loss_identical_normalized_nodes_layer(n):
    node = np.array([[0.6, 0.8, 0.0, 0.0]])
    layer = [cvec(node.copy()) for _ in range(n)]
    tree = ExpansionTree([[cvec(np.eye(4)[0:1])], layer])
    expected = np.sqrt(n * (n - 1))
    assert abs(float(nod_loss(tree).data) - expected) < 1e-9


def test_nod_loss_single_node_layer_contributes_nothing():
    tree = ExpansionTree([[cvec([[3.0, 4.0]])]])
    assert float(nod_loss(tree).data) == pytest.approx(0.0, abs=1e-15)


def test_nod_loss_matches_brute_force_on_random_tree():
    rng = np.random.default_rng(8)
    weights = TreeWeights.create(6, 3, rng)
    tree = expand_tree(random_root(rng, 6), weights, 3)
    total = 0.0
    for layer in tree.layers:
        if len(layer) < 2:
            continue
        a = gram(layer)
        total += np.sqrt(sum(a[i, j] ** 2 for i in range(len(layer)) for j in range(len(layer)) if i != j))
    assert abs(float(nod_loss(tree).data) - total) < 1e-9


def test_nod_loss_invariant_to_scaling_one_node():
    rng = np.random.default_rng(9)
    nodes = [random_root(rng, 6) for _ in range(4)]
    base = float(nod_loss(ExpansionTree([nodes])).data)
    scaled = [nodes[0], nodes[1], cvec(nodes[2].re.data * 7.3, nodes[2].im.data * 7.3), nodes[3]]
    assert abs(float(nod_loss(ExpansionTree([scaled])).data) - base) < 1e-10


def test_nod_loss_nonnegative_and_zero_iff_orthogonal():
    rng = np.random.default_rng(10)
    for _ in range(5):
        nodes = [random_root(rng, 4) for _ in range(3)]
        val = float(nod_loss(ExpansionTree([nodes])).data)
        assert val >= 0.0
        a = gram(nodes)
        off = np.abs(a - np.eye(3)).max()
        assert (val < 1e-9) == (off < 1e-9)


def test_nod_gradients_match_finite_differences():
    rng = np.random.default_rng(11)
    d = 4
    weights = TreeWeights.create(d, 3, rng)
    root_re = Tensor(rng.standard_normal((1, d)), requires_grad=True)
    root_im = Tensor(rng.standard_normal((1, d)), requires_grad=True)

    def forward():
        tree = expand_tree(ComplexTensor(root_re, root_im), weights, 3)
        return nod_loss(tree)

    backward(forward())
    tensors = dict(weights.named_tensors())
    tensors["root.re"] = root_re
    tensors["root.im"] = root_im
    for name, t in tensors.items():
        fd = central_difference(forward, t)
        grad = t.grad if t.grad is not None else np.zeros_like(t.data)
        assert relative_gradient_error(grad, fd) < 1e-4, name
    zero_grads(tensors.values())


# ---------------------------------------------------------------------------
# enhance
# ---------------------------------------------------------------------------


def test_enhance_zero_tree_is_identity():
    zero = cvec(np.zeros((1, 4)))
    tree = ExpansionTree([[zero], [zero, zero]])
    rng = np.random.default_rng(12)
    v, t = random_root(rng, 4), random_root(rng, 4)
    v2, t2 = enhance(tree, v, t)
    assert_allclose(v2.re.data, v.re.data, atol=1e-15)
    assert_allclose(t2.im.data, t.im.data, atol=1e-15)


def test_enhance_single_node_adds_root():
    rng = np.random.default_rng(13)
    root, v, t = (random_root(rng, 4) for _ in range(3))
    v2, _ = enhance(ExpansionTree([[root]]), v, t)
    assert_allclose(v2.re.data, v.re.data + root.re.data, atol=1e-15)


def test_enhance_mean_matches_direct_summation():
    rng = np.random.default_rng(14)
    tree = expand_tree(random_root(rng, 4), TreeWeights.create(4, 3, rng), 3)
    v, t = random_root(rng, 4), random_root(rng, 4)
    v2, t2 = enhance(tree, v, t)
    mean = sum(node.numpy() for node in tree.nodes()) / 7.0
    assert_allclose(v2.numpy(), v.numpy() + mean, atol=1e-13)
    assert_allclose(t2.numpy(), t.numpy() + mean, atol=1e-13)
