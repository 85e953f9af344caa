"""Vectorized forward/loss path over whole mini-batches.

Numerically this computes exactly what the per-sample operations in
:mod:`fracmodal.mffa` and :mod:`fracmodal.dtg` define (the test suite checks
the two paths against each other); stacking samples along a leading batch
axis just collapses thousands of tiny graph nodes per step into a few dozen.
Per-sample attention stays block-diagonal: scores never mix samples because
they are formed by broadcast products reduced over the feature axis only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import (
    ComplexTensor,
    Tensor,
    clamp_min,
    concat,
    constant,
    exp,
    log,
    matmul,
    mul,
    relu,
    reshape,
    softmax,
    sqrt,
    tmean,
    tsum,
)
from .errors import DegenerateBatchError, InvariantError
from .mffa import LANG, TAC, VIS, MffaParams

NOD_EPS = 1e-12


@dataclass
class BatchedOutputs:
    """Pooled per-sample features stacked as (B, D) planes."""

    vis_bar: ComplexTensor
    tac_bar: ComplexTensor
    lang_bar: ComplexTensor | None


def _rows(x: np.ndarray) -> Tensor:
    return constant(np.ascontiguousarray(np.atleast_2d(x), dtype=np.float64))


def _project(x: ComplexTensor, w: Tensor) -> ComplexTensor:
    """Apply a D x D map to the last axis of a (..., D) complex block."""
    shape = x.shape
    if len(shape) == 2:
        return ComplexTensor(matmul(x.re, w), matmul(x.im, w))
    flat_shape = (-1, shape[-1])
    re = matmul(reshape(x.re, flat_shape), w)
    im = matmul(reshape(x.im, flat_shape), w)
    return ComplexTensor(reshape(re, shape), reshape(im, shape))


def _ffn(x: Tensor, params: MffaParams) -> Tensor:
    hidden = relu(matmul(x, params.ffn_w1) + params.ffn_b1)
    return matmul(hidden, params.ffn_w2) + params.ffn_b2


def frft_expand(embedding: ComplexTensor, theta: Tensor, planes: ComplexTensor) -> ComplexTensor:
    """(B, D) embeddings -> rectified (B, E, D) fractional feature blocks."""
    b, d = embedding.shape
    e = theta.shape[0]
    th = theta.reshape(1, -1).reshape((1, e, 1))
    scaled = ComplexTensor(
        mul(th, reshape(embedding.re, (b, 1, d))),
        mul(th, reshape(embedding.im, (b, 1, d))),
    )
    flat = ComplexTensor(reshape(scaled.re, (b * e, d)), reshape(scaled.im, (b * e, d)))
    f_re, f_im = planes.re.T, planes.im.T
    out_re = matmul(flat.re, f_re) - matmul(flat.im, f_im)
    out_im = matmul(flat.re, f_im) + matmul(flat.im, f_re)
    return ComplexTensor(
        relu(reshape(out_re, (b, e, d))), relu(reshape(out_im, (b, e, d)))
    )


def peer_matrix(labels: np.ndarray) -> np.ndarray:
    """Row-stochastic same-label averaging matrix for the class-mean token."""
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    return same / same.sum(axis=1, keepdims=True)


def _row_average(block: ComplexTensor) -> ComplexTensor:
    return ComplexTensor(tmean(block.re, axis=1), tmean(block.im, axis=1))


def class_token(block: ComplexTensor, peers: np.ndarray | None) -> ComplexTensor:
    """Per-sample token: row average, then same-label mean while training."""
    avg = _row_average(block)
    if peers is None:
        return avg
    m = constant(peers)
    return ComplexTensor(matmul(m, avg.re), matmul(m, avg.im))


def _check_row_stochastic(weights: Tensor, axis: int) -> None:
    sums = weights.data.sum(axis=axis)
    if np.abs(sums - 1.0).max() > 1e-9:
        raise InvariantError("attention weights do not sum to 1 across keys")


def attend(
    query: ComplexTensor,
    block: ComplexTensor,
    token: ComplexTensor,
    params: MffaParams,
    standard_scale: bool = False,
) -> ComplexTensor:
    """Block-diagonal attention; ``query`` is (B, D) or a (B, E, D) self-query."""
    b, e, d = block.shape
    kv = ComplexTensor(
        block.re + reshape(token.re, (b, 1, d)),
        block.im + reshape(token.im, (b, 1, d)),
    )
    km = _project(kv, params.key_proj)
    vm = _project(kv, params.value_proj)
    qm = _project(query, params.query_proj)
    scale = 1.0 / np.sqrt(d)

    if len(query.shape) == 2:  # one pooled query row per sample
        qr = reshape(qm.re, (b, 1, d))
        qi = reshape(qm.im, (b, 1, d))
        scores = tsum(mul(qr, km.re) + mul(qi, km.im), axis=2)  # (B, E)
        if standard_scale:
            weights = softmax(scores * scale, axis=-1)
        else:
            weights = softmax(scores, axis=-1)
            _check_row_stochastic(weights, axis=-1)
            weights = weights * scale
        w3 = reshape(weights, (b, e, 1))
        pooled = ComplexTensor(
            tsum(mul(w3, vm.re), axis=1), tsum(mul(w3, vm.im), axis=1)
        )
    else:  # the block attends over itself, one score matrix per sample
        qr = reshape(qm.re, (b, e, 1, d))
        qi = reshape(qm.im, (b, e, 1, d))
        kr = reshape(km.re, (b, 1, e, d))
        ki = reshape(km.im, (b, 1, e, d))
        scores = tsum(mul(qr, kr) + mul(qi, ki), axis=3)  # (B, E, E)
        if standard_scale:
            weights = softmax(scores * scale, axis=-1)
        else:
            weights = softmax(scores, axis=-1)
            _check_row_stochastic(weights, axis=-1)
            weights = weights * scale
        w4 = reshape(weights, (b, e, e, 1))
        vr = reshape(vm.re, (b, 1, e, d))
        vi = reshape(vm.im, (b, 1, e, d))
        context = ComplexTensor(tsum(mul(w4, vr), axis=2), tsum(mul(w4, vi), axis=2))
        pooled = _row_average(context)

    return ComplexTensor(_ffn(pooled.re, params), _ffn(pooled.im, params))


def forward_batch(
    vis: np.ndarray,
    tac: np.ndarray,
    lang: np.ndarray | None,
    labels: np.ndarray | None,
    params: MffaParams,
    planes: ComplexTensor,
    training: bool,
    standard_scale: bool = False,
) -> BatchedOutputs:
    """Stacked equivalent of running the adapter sample by sample."""
    vis_t, tac_t = _rows(vis), _rows(tac)
    if training:
        if lang is None or labels is None:
            raise DegenerateBatchError("training forward needs language and labels")
        peers = peer_matrix(labels)
        lang_c = ComplexTensor(_rows(lang), constant(np.zeros_like(np.atleast_2d(lang))))
        f_lang = frft_expand(lang_c, params.expand[LANG], planes)
        lang_bar = attend(
            f_lang, f_lang, class_token(f_lang, peers), params, standard_scale
        )
        bars = {}
        for modality, emb in ((VIS, vis_t), (TAC, tac_t)):
            guided = ComplexTensor(emb + lang_bar.re, lang_bar.im)
            block = frft_expand(guided, params.expand[modality], planes)
            bars[modality] = attend(
                lang_bar, block, class_token(block, peers), params, standard_scale
            )
        return BatchedOutputs(bars[VIS], bars[TAC], lang_bar)

    bars = {}
    for modality, emb in ((VIS, vis_t), (TAC, tac_t)):
        plain = ComplexTensor(emb, constant(np.zeros_like(emb.data)))
        block = frft_expand(plain, params.expand[modality], planes)
        bars[modality] = attend(
            block, block, class_token(block, None), params, standard_scale
        )
    return BatchedOutputs(bars[VIS], bars[TAC], None)


def flatten_features(x: ComplexTensor) -> Tensor:
    """Per-row [Re; Im] concatenation: (B, D) complex -> (B, 2D) real."""
    return concat([x.re, x.im], axis=1)


def mma_loss_batch(outs: BatchedOutputs, weight: float) -> Tensor:
    """Mean over the batch of the per-sample alignment loss."""
    p = softmax(flatten_features(outs.lang_bar), axis=1)
    log_p = log(clamp_min(p, 1e-12))  # underflowed entries contribute exactly 0

    def kl_rows(feat: ComplexTensor) -> Tensor:
        q = softmax(flatten_features(feat), axis=1)
        return tsum(p * (log_p - log(clamp_min(q, 1e-12))), axis=1, keepdims=True)

    rows = kl_rows(outs.vis_bar) + kl_rows(outs.tac_bar)
    return tmean(rows) * weight


def expand_tree_batch(root: ComplexTensor, weights, depth: int) -> list[list[ComplexTensor]]:
    """Per-layer lists of (B, D) node blocks; mirrors dtg.expand_tree."""
    generator = weights.generator
    if generator == "dtg":
        layers = [[root]]
        for r in range(1, depth):
            children = []
            for m, parent in enumerate(layers[-1]):
                for side in ("left", "right"):
                    w = weights.tensors[f"tree.w.r{r}.m{m}.{side}"]
                    children.append(ComplexTensor(matmul(parent.re, w), matmul(parent.im, w)))
            layers.append(children)
        return layers
    count = 2**depth - 2
    if count <= 0:
        return [[root]]
    if generator == "interp":
        a = _project(root, weights.tensors["tree.w.end0"])
        b = _project(root, weights.tensors["tree.w.end1"])
        nodes = []
        for i in range(count):
            t = i / (count - 1) if count > 1 else 0.5
            nodes.append(ComplexTensor(a.re * (1 - t) + b.re * t, a.im * (1 - t) + b.im * t))
    elif generator == "series":
        nodes, current = [], root
        for i in range(count):
            current = _project(current, weights.tensors[f"tree.w.n{i}"])
            nodes.append(current)
    else:  # parallel
        nodes = [_project(root, weights.tensors[f"tree.w.n{i}"]) for i in range(count)]
    return [[root], nodes]


def nod_loss_batch(layers: list[list[ComplexTensor]]) -> Tensor:
    """Mean over the batch of the per-sample layer-orthogonality penalty."""
    total = None
    for layer in layers:
        if len(layer) < 2:
            continue
        flats = [flatten_features(node) for node in layer]
        # the 1e-12 inside the root keeps cosine gradients bounded when a
        # node collapses toward zero norm mid-training
        norms = [sqrt(tsum(f * f, axis=1, keepdims=True) + 1e-12) for f in flats]
        acc = None
        for i in range(len(flats)):
            for j in range(i + 1, len(flats)):
                dot = tsum(flats[i] * flats[j], axis=1, keepdims=True)
                cos = dot / (norms[i] * norms[j])
                term = cos * cos
                acc = term if acc is None else acc + term
        layer_term = sqrt(acc * 2.0 + NOD_EPS * NOD_EPS) - NOD_EPS
        total = layer_term if total is None else total + layer_term
    if total is None:
        return Tensor(0.0)
    return tmean(total)


def tree_mean(layers: list[list[ComplexTensor]]) -> ComplexTensor:
    nodes = [node for layer in layers for node in layer]
    inv = 1.0 / len(nodes)
    re = nodes[0].re * inv
    im = nodes[0].im * inv
    for node in nodes[1:]:
        re = re + node.re * inv
        im = im + node.im * inv
    return ComplexTensor(re, im)


def classify_batch(v_feat: ComplexTensor, t_feat: ComplexTensor, w: Tensor, b: Tensor) -> Tensor:
    """(B, C) logits: averaged shared linear head over both modalities."""
    logits_v = matmul(flatten_features(v_feat), w) + b
    logits_t = matmul(flatten_features(t_feat), w) + b
    return (logits_v + logits_t) * 0.5


def cross_entropy_batch(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over the batch."""
    b, c = logits.shape
    shift = constant(logits.data.max(axis=1, keepdims=True))
    z = logits - shift
    lse = log(tsum(exp(z), axis=1, keepdims=True)) + shift
    onehot = np.zeros((b, c))
    onehot[np.arange(b), np.asarray(labels)] = 1.0
    picked = tsum(logits * constant(onehot), axis=1, keepdims=True)
    return tmean(lse - picked)
