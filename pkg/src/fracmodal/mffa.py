"""Mapping modality embeddings into the shared fractional space.

The adapter projects every embedding through the order-p transform after
per-row trainable scaling and rectification, attends across the projected
rows with a class-mean token added to keys and values, and pulls the pooled
visual/tactile features toward the language feature with a softmax-KL
alignment loss. Language features exist only while training; at inference
each modality attends over itself with zero guidance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import (
    ComplexTensor,
    Tensor,
    cflatten,
    cmatmul,
    cmatmul_hermitian,
    cmatmul_real,
    cmean_rows,
    complex_from_real,
    constant,
    kl_divergence,
    matmul,
    mul,
    relu,
    softmax,
)
from .errors import (
    DegenerateBatchError,
    DimensionError,
    IncompleteSampleError,
    InvariantError,
)

VIS, TAC, LANG = "vis", "tac", "lang"


@dataclass
class FractionalFeature:
    """A complex feature block tagged with the modality it came from."""

    values: ComplexTensor  # (E, D) rows, or (1, D) after attention pooling
    modality: str


@dataclass
class MffaParams:
    """Trainable tensors of the adapter.

    ``expand`` holds one length-E scaling vector per modality; the three
    projections and the two feed-forward layers are all D x D and act on the
    real and imaginary planes identically.
    """

    expand: dict[str, Tensor]
    query_proj: Tensor
    key_proj: Tensor
    value_proj: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    mma_weight: float

    def named_tensors(self) -> dict[str, Tensor]:
        out = {f"mffa.expand.{m}": t for m, t in sorted(self.expand.items())}
        out.update(
            {
                "mffa.query_proj": self.query_proj,
                "mffa.key_proj": self.key_proj,
                "mffa.value_proj": self.value_proj,
                "mffa.ffn_w1": self.ffn_w1,
                "mffa.ffn_b1": self.ffn_b1,
                "mffa.ffn_w2": self.ffn_w2,
                "mffa.ffn_b2": self.ffn_b2,
            }
        )
        return out


@dataclass
class ModalityInputs:
    """One sample's raw embeddings as handed to the adapter."""

    vis: np.ndarray
    tac: np.ndarray
    lang: np.ndarray | None = None
    label: int | None = None


@dataclass
class MffaOutput:
    vis_bar: ComplexTensor
    tac_bar: ComplexTensor
    lang_bar: ComplexTensor | None


def _as_row(x) -> Tensor:
    t = x if isinstance(x, Tensor) else constant(np.asarray(x, dtype=np.float64))
    if t.data.ndim == 1:
        t = t.reshape(1, -1)
    if t.data.ndim != 2 or t.data.shape[0] != 1:
        raise DimensionError(f"expected a 1 x D embedding, got shape {t.data.shape}")
    return t


def frft_process(
    embedding, expand: Tensor, planes: ComplexTensor, modality: str
) -> FractionalFeature:
    """Expand one embedding into E scaled rows, transform and rectify them.

    Row i is ReLU(Re(F_p (theta_i e))) + j ReLU(Im(F_p (theta_i e))); the
    scaling by theta implements the outer product of the expansion vector
    with the embedding.
    """
    if isinstance(embedding, ComplexTensor):
        row = embedding
    else:
        row = complex_from_real(_as_row(embedding))
    d = row.shape[1]
    if planes.shape[0] != d:
        raise DimensionError(f"embedding width {d} != transform size {planes.shape[0]}")
    theta = expand.reshape(-1, 1)  # (E, 1) against (1, D) rows
    scaled = ComplexTensor(mul(theta, row.re), mul(theta, row.im))
    f_t = ComplexTensor(planes.re.T, planes.im.T)
    transformed = cmatmul(scaled, f_t)  # row-wise F_p application
    return FractionalFeature(
        ComplexTensor(relu(transformed.re), relu(transformed.im)), modality
    )


def global_class_token(
    features: list[FractionalFeature],
    labels: list[int] | None,
    target: int,
    training: bool,
) -> ComplexTensor:
    """Class-mean token: average the row-averaged blocks sharing the target label.

    Without labels (inference) the token degenerates to the target sample's
    own row average.
    """
    if not features:
        raise DegenerateBatchError("empty batch")
    if not training or labels is None:
        return cmean_rows(features[target].values)
    peers = [i for i, lab in enumerate(labels) if lab == labels[target]]
    if not peers:
        raise DegenerateBatchError(f"no sample shares label {labels[target]}")
    acc = cmean_rows(features[peers[0]].values)
    for i in peers[1:]:
        acc = acc + cmean_rows(features[i].values)
    inv = 1.0 / len(peers)
    return ComplexTensor(acc.re * inv, acc.im * inv)


def _ffn(x: Tensor, params: MffaParams) -> Tensor:
    hidden = relu(matmul(x, params.ffn_w1) + params.ffn_b1)
    return matmul(hidden, params.ffn_w2) + params.ffn_b2


def fratt(
    query: ComplexTensor,
    features: FractionalFeature,
    token: ComplexTensor,
    params: MffaParams,
    standard_scale: bool = False,
) -> ComplexTensor:
    """Attention over fractional rows with the class token added to keys/values.

    Scores are Hermitian products of the projected query and keys; softmax1
    runs on their real part. By default the 1/sqrt(D) factor divides the
    softmax output (the literal operator order); ``standard_scale`` moves it
    in front of the softmax instead.
    """
    kv = features.values
    if token.shape[1] != kv.shape[1]:
        raise DimensionError("token width does not match feature width")
    kv = ComplexTensor(kv.re + token.re, kv.im + token.im)  # broadcast add per row
    d = kv.shape[1]
    qm = cmatmul_real(query, params.query_proj)
    km = cmatmul_real(kv, params.key_proj)
    vm = cmatmul_real(kv, params.value_proj)
    scores = cmatmul_hermitian(qm, km).re
    scale = 1.0 / np.sqrt(d)
    if standard_scale:
        weights = softmax(scores * scale, axis=-1)
    else:
        weights = softmax(scores, axis=-1)
        rowsums = weights.data.sum(axis=-1)
        if np.abs(rowsums - 1.0).max() > 1e-9:
            raise InvariantError("attention weights do not sum to 1 across keys")
        weights = weights * scale
    context = ComplexTensor(matmul(weights, vm.re), matmul(weights, vm.im))
    pooled = cmean_rows(context)
    return ComplexTensor(_ffn(pooled.re, params), _ffn(pooled.im, params))


def guided_project(
    guidance: ComplexTensor | None,
    embedding: np.ndarray,
    expand: Tensor,
    planes: ComplexTensor,
    modality: str,
) -> FractionalFeature:
    """Project an embedding after adding the pooled language feature to it.

    ``guidance=None`` (inference) reduces to the plain projection.
    """
    base = complex_from_real(_as_row(embedding))
    if guidance is not None:
        if guidance.shape != base.shape:
            raise DimensionError("guidance width does not match embedding width")
        base = base + guidance
    return frft_process(base, expand, planes, modality)


def mma_loss(
    lang_bar: ComplexTensor,
    vis_bar: ComplexTensor,
    tac_bar: ComplexTensor,
    weight: float,
) -> Tensor:
    """Alignment loss: weight * (KL(lang || vis) + KL(lang || tac)).

    Each pooled feature becomes a distribution by flattening its [Re; Im]
    planes and taking a softmax.
    """
    p_lang = softmax(cflatten(lang_bar))
    p_vis = softmax(cflatten(vis_bar))
    p_tac = softmax(cflatten(tac_bar))
    return (kl_divergence(p_lang, p_vis) + kl_divergence(p_lang, p_tac)) * weight


def mffa_forward(
    batch: list[ModalityInputs],
    params: MffaParams,
    planes: ComplexTensor,
    training: bool,
    standard_scale: bool = False,
) -> list[MffaOutput]:
    """Run the adapter over one mini-batch.

    Training requires all three modalities per sample and couples samples
    only through the class-mean tokens; inference sees VIS/TAC alone and
    each sample is processed independently with self-queries.
    """
    if training:
        for i, s in enumerate(batch):
            if s.lang is None or s.label is None:
                raise IncompleteSampleError(f"sample {i} lacks language or label")
        labels = [s.label for s in batch]
        f_lang = [
            frft_process(s.lang, params.expand[LANG], planes, LANG) for s in batch
        ]
        lang_bars = []
        for i in range(len(batch)):
            token = global_class_token(f_lang, labels, i, training=True)
            lang_bars.append(
                fratt(f_lang[i].values, f_lang[i], token, params, standard_scale)
            )
        outputs = []
        per_modality = {}
        for modality, getter in ((VIS, lambda s: s.vis), (TAC, lambda s: s.tac)):
            feats = [
                guided_project(
                    lang_bars[i], getter(s), params.expand[modality], planes, modality
                )
                for i, s in enumerate(batch)
            ]
            bars = []
            for i in range(len(batch)):
                token = global_class_token(feats, labels, i, training=True)
                bars.append(fratt(lang_bars[i], feats[i], token, params, standard_scale))
            per_modality[modality] = bars
        for i in range(len(batch)):
            outputs.append(
                MffaOutput(per_modality[VIS][i], per_modality[TAC][i], lang_bars[i])
            )
        return outputs

    outputs = []
    for s in batch:
        bars = {}
        for modality, emb in ((VIS, s.vis), (TAC, s.tac)):
            feat = guided_project(None, emb, params.expand[modality], planes, modality)
            token = global_class_token([feat], None, 0, training=False)
            bars[modality] = fratt(feat.values, feat, token, params, standard_scale)
        outputs.append(MffaOutput(bars[VIS], bars[TAC], None))
    return outputs
