"""Hierarchical expansion of the fused feature and its diversity penalty.

The fused visual+tactile+language feature seeds a binary tree whose children
are plain linear transforms of their parent (one D x D weight per child).
Per layer, the cosine Gram matrix of the nodes is pushed toward the identity
so siblings explore different directions, and the mean over every node is
added back onto the modality features. The tree only exists while training.

Alternative generators with the same node budget (linear interpolation
between two transformed endpoints, a serial chain, independent parallel
branches) are provided for comparison runs; they expose their nodes as a
single layer to the diversity penalty.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import (
    ComplexTensor,
    Tensor,
    cflatten,
    cmatmul_real,
    sqrt,
    tsum,
)
from .errors import DegenerateVectorError, DimensionError

GENERATORS = ("dtg", "interp", "series", "parallel")

# keeps the layer penalty smooth at an exactly-orthogonal layer while
# shifting its value by no more than itself
NORM_EPS = 1e-12


@dataclass
class ExpansionTree:
    """Node layers of one expansion; layers[r] holds 2^r nodes for ``dtg``."""

    layers: list[list[ComplexTensor]]

    @property
    def depth(self) -> int:
        return len(self.layers)

    def nodes(self) -> list[ComplexTensor]:
        return [node for layer in self.layers for node in layer]


class TreeWeights:
    """One D x D real weight per generated child, addressable by name."""

    def __init__(self, tensors: dict[str, Tensor], depth: int, generator: str = "dtg"):
        self.tensors = tensors
        self.depth = depth
        self.generator = generator

    @classmethod
    def create(cls, dim: int, depth: int, rng: np.random.Generator, generator: str = "dtg"):
        """Identity plus small Gaussian noise; the noise breaks the Gram
        degeneracy so the diversity penalty has a nonzero gradient at step 0."""
        if generator not in GENERATORS:
            raise DimensionError(f"unknown generator {generator!r}")
        names = cls._weight_names(depth, generator)
        tensors = {
            name: Tensor(np.eye(dim) + 0.02 * rng.standard_normal((dim, dim)), requires_grad=True)
            for name in names
        }
        return cls(tensors, depth, generator)

    @staticmethod
    def _weight_names(depth: int, generator: str) -> list[str]:
        if depth < 1:
            raise DimensionError("tree depth must be >= 1")
        if generator == "dtg":
            names = []
            for r in range(1, depth):
                for m in range(2 ** (r - 1)):
                    names.append(f"tree.w.r{r}.m{m}.left")
                    names.append(f"tree.w.r{r}.m{m}.right")
            return names
        count = 2**depth - 2  # generated nodes; the root is layer zero
        if generator == "interp":
            return [f"tree.w.end{i}" for i in range(min(count, 2))]
        return [f"tree.w.n{i}" for i in range(count)]

    def named_tensors(self) -> dict[str, Tensor]:
        return dict(self.tensors)


def expand_tree(root: ComplexTensor, weights: TreeWeights, depth: int) -> ExpansionTree:
    """Generate the node set for one root feature.

    ``dtg`` builds the full binary tree (2^depth - 1 nodes, root included);
    the alternative generators emit the same node count as one flat layer
    after the root layer.
    """
    if depth < 1:
        raise DimensionError("tree depth must be >= 1")
    if weights.depth != depth:
        raise DimensionError(f"weights sized for depth {weights.depth}, not {depth}")
    generator = weights.generator
    if generator == "dtg":
        layers = [[root]]
        for r in range(1, depth):
            children = []
            for m, parent in enumerate(layers[-1]):
                for side in ("left", "right"):
                    w = weights.tensors[f"tree.w.r{r}.m{m}.{side}"]
                    children.append(cmatmul_real(parent, w))
            layers.append(children)
        return ExpansionTree(layers)

    count = 2**depth - 1 - 1  # same total node budget, root kept separate
    if count <= 0:
        return ExpansionTree([[root]])
    if generator == "interp":
        a = cmatmul_real(root, weights.tensors["tree.w.end0"])
        b = cmatmul_real(root, weights.tensors["tree.w.end1"])
        nodes = []
        for i in range(count):
            t = i / (count - 1) if count > 1 else 0.5
            nodes.append(
                ComplexTensor(a.re * (1.0 - t) + b.re * t, a.im * (1.0 - t) + b.im * t)
            )
    elif generator == "series":
        nodes = []
        current = root
        for i in range(count):
            current = cmatmul_real(current, weights.tensors[f"tree.w.n{i}"])
            nodes.append(current)
    elif generator == "parallel":
        nodes = [
            cmatmul_real(root, weights.tensors[f"tree.w.n{i}"]) for i in range(count)
        ]
    else:
        raise DimensionError(f"unknown generator {generator!r}")
    return ExpansionTree([[root], nodes])


def _flat_pairs(layer: list[ComplexTensor]) -> list[Tensor]:
    flats = [cflatten(node) for node in layer]
    for i, f in enumerate(flats):
        if float((f * f).data.sum()) <= 1e-24:
            raise DegenerateVectorError(f"tree node {i} has near-zero norm")
    return flats


def gram(layer: list[ComplexTensor]) -> np.ndarray:
    """Cosine similarity matrix of a layer's nodes, flattened to [Re; Im]."""
    flats = [f.data for f in _flat_pairs(layer)]
    n = len(flats)
    out = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            out[i, j] = flats[i] @ flats[j] / (
                np.linalg.norm(flats[i]) * np.linalg.norm(flats[j])
            )
    return out


def nod_loss(tree: ExpansionTree) -> Tensor:
    """Sum over layers of the (smoothed) Frobenius distance from Gram to identity.

    Diagonal entries are exactly one by construction, so only off-diagonal
    cosines enter; a single-node layer therefore contributes nothing.
    """
    total = Tensor(0.0)
    for layer in tree.layers:
        if len(layer) < 2:
            continue
        flats = _flat_pairs(layer)
        # norm floor keeps cosine gradients bounded near zero-norm nodes
        norms = [sqrt(tsum(f * f) + 1e-12) for f in flats]
        acc = Tensor(0.0)
        for i in range(len(flats)):
            for j in range(i + 1, len(flats)):
                c = tsum(flats[i] * flats[j]) / (norms[i] * norms[j])
                acc = acc + c * c
        total = total + sqrt(acc * 2.0 + NORM_EPS * NORM_EPS) - NORM_EPS
    return total


def enhance(
    tree: ExpansionTree, vis_bar: ComplexTensor, tac_bar: ComplexTensor
) -> tuple[ComplexTensor, ComplexTensor]:
    """Add the mean over every tree node (root included) to both features."""
    nodes = tree.nodes()
    inv = 1.0 / len(nodes)
    mean_re = nodes[0].re * inv
    mean_im = nodes[0].im * inv
    for node in nodes[1:]:
        mean_re = mean_re + node.re * inv
        mean_im = mean_im + node.im * inv
    if mean_re.shape != vis_bar.re.shape:
        raise DimensionError("tree nodes and features disagree on width")
    mean = ComplexTensor(mean_re, mean_im)
    return vis_bar + mean, tac_bar + mean
