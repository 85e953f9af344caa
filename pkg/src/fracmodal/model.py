"""Model assembly: adapter + tree expansion + classifier, and the loops.

Training follows the joint objective (alignment + node diversity + cross
entropy) with plain SGD momentum under a linear-warmup/cosine-decay
schedule. Inference runs the adapter without language guidance, never
touches the tree weights or labels, and fuses modalities by averaging the
two logit vectors of one shared linear classifier over [Re; Im] features.

Checkpoints are a little-endian binary: magic ``OVAT``, version u32, a
length-prefixed JSON config block, then named tensors (u32 name length,
name, u32 rank, u32 dims, float64 payload), momentum buffers included.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, fields

import numpy as np

from . import batched, dtg, mffa
from .config import RunConfig, parse_order
from .data import EmbeddingDataset
from .dfrft import DfrftPlan, FractionalOrder, build_plan, fractional_matrix, fractional_planes
from .engine import (
    ComplexTensor,
    Tensor,
    backward,
    cflatten,
    complex_constant,
    complex_from_real,
    constant,
    cross_entropy_logits,
    matmul,
    zero_grads,
)
from .errors import (
    DimensionError,
    FormatError,
    IncompatibilityError,
    IncompleteSampleError,
)
from .metrics import EvalReport, evaluate

VARIANTS = ("full", "mffa", "dtg", "ce_only")

CKPT_MAGIC = b"OVAT"
CKPT_VERSION = 1


@dataclass
class ModelParams:
    mffa: mffa.MffaParams
    tree: dtg.TreeWeights
    classifier_w: Tensor
    classifier_b: Tensor
    order: FractionalOrder

    def named_tensors(self) -> dict[str, Tensor]:
        out = dict(self.mffa.named_tensors())
        out.update(self.tree.named_tensors())
        out["classifier.w"] = self.classifier_w
        out["classifier.b"] = self.classifier_b
        out["order.p"] = self.order.value
        return out


def init_params(config: RunConfig, rng: np.random.Generator) -> ModelParams:
    """Seed-deterministic initialization.

    Projections, feed-forward layers and tree weights start near the
    identity so features are meaningful at step 0 under the fixed 0.05
    learning rate; expansion scalers spread over [0.5, 2] to give the
    attention distinct scale levels to pool over.
    """
    d, e = config.dim, config.expansion

    def near_identity():
        return Tensor(np.eye(d) + 0.02 * rng.standard_normal((d, d)), requires_grad=True)

    scales = np.linspace(0.5, 2.0, e) if e > 1 else np.array([1.0])
    adapter = mffa.MffaParams(
        expand={
            m: Tensor(scales.copy(), requires_grad=True)
            for m in (mffa.LANG, mffa.VIS, mffa.TAC)
        },
        query_proj=near_identity(),
        key_proj=near_identity(),
        value_proj=near_identity(),
        ffn_w1=near_identity(),
        ffn_b1=Tensor(np.zeros(d), requires_grad=True),
        ffn_w2=near_identity(),
        ffn_b2=Tensor(np.zeros(d), requires_grad=True),
        mma_weight=config.mma_weight,
    )
    tree = dtg.TreeWeights.create(d, config.depth, rng, generator=config.generator)
    classifier_w = Tensor(0.05 * rng.standard_normal((2 * d, config.classes)), requires_grad=True)
    classifier_b = Tensor(np.zeros(config.classes), requires_grad=True)
    order = FractionalOrder(*parse_order(config.order))
    return ModelParams(adapter, tree, classifier_w, classifier_b, order)


def classify(v_feat: ComplexTensor, t_feat: ComplexTensor, params: ModelParams) -> Tensor:
    """Average of the shared linear classifier over both [Re; Im] features."""

    def head(feat: ComplexTensor) -> Tensor:
        flat = cflatten(feat).reshape(1, -1)
        if flat.shape[1] != params.classifier_w.shape[0]:
            raise DimensionError(
                f"classifier expects width {params.classifier_w.shape[0]}, got {flat.shape[1]}"
            )
        return matmul(flat, params.classifier_w) + params.classifier_b

    return ((head(v_feat) + head(t_feat)) * 0.5).reshape(-1)


@dataclass
class StepSample:
    """Per-sample tensors a training step accumulates losses over."""

    output: mffa.MffaOutput
    tree: dtg.ExpansionTree | None
    vis_hat: ComplexTensor
    tac_hat: ComplexTensor
    label: int


def joint_loss(
    samples: list[StepSample],
    params: ModelParams,
    config: RunConfig,
    use_mma: bool = True,
    use_nod: bool = True,
) -> tuple[Tensor, dict]:
    """Mean-over-batch alignment + diversity + cross-entropy, with breakdown."""
    if not samples:
        raise DimensionError("empty batch")
    inv = 1.0 / len(samples)
    mma_term = Tensor(0.0)
    nod_term = Tensor(0.0)
    ce_term = Tensor(0.0)
    for s in samples:
        if use_mma:
            mma_term = mma_term + mffa.mma_loss(
                s.output.lang_bar, s.output.vis_bar, s.output.tac_bar, config.mma_weight
            ) * inv
        if use_nod and s.tree is not None:
            nod_term = nod_term + dtg.nod_loss(s.tree) * inv
        logits = classify(s.vis_hat, s.tac_hat, params)
        ce_term = ce_term + cross_entropy_logits(logits, s.label) * inv
    total = mma_term + nod_term + ce_term
    parts = {
        "mma": float(mma_term.data),
        "nod": float(nod_term.data),
        "ce": float(ce_term.data),
    }
    return total, parts


def lr_schedule(step: int, total_steps: int, base_lr: float, warmup_steps: int) -> float:
    """Linear warm-up to ``base_lr`` then cosine decay to zero at the last step."""
    if step < 0:
        raise DimensionError("negative step")
    if step > total_steps:
        return 0.0
    if warmup_steps > 0 and step <= warmup_steps:
        return base_lr * step / warmup_steps
    if total_steps <= warmup_steps:
        return base_lr
    phase = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * phase))


@dataclass
class Optimizer:
    """SGD with momentum; one buffer per named tensor.

    The fractional order steps at ``lr * order_lr_scale``: its gradient sums
    phase derivatives proportional to the eigenindex and is roughly dim/2
    times larger than any weight gradient, which makes the plain step size
    diverge in the order while everything else is still warming up.
    """

    momentum: float
    buffers: dict[str, np.ndarray]
    order_lr_scale: float = 1.0

    @classmethod
    def create(cls, params: ModelParams, momentum: float,
               order_lr_scale: float = 0.0) -> "Optimizer":
        if order_lr_scale <= 0.0:
            order_lr_scale = 1.0 / (16.0 * params.classifier_w.shape[0] / 2)
        return cls(
            momentum,
            {name: np.zeros_like(t.data) for name, t in params.named_tensors().items()},
            order_lr_scale,
        )

    def step(self, params: ModelParams, lr: float) -> None:
        for name, t in params.named_tensors().items():
            if name == "order.p" and not params.order.trainable:
                t.grad = None  # a frozen order discards its gradient
                continue
            grad = t.grad if t.grad is not None else 0.0
            buf = self.buffers[name]
            buf *= self.momentum
            buf += grad
            eff = lr * self.order_lr_scale if name == "order.p" else lr
            t.data -= eff * buf
            t.grad = None


def sgd_step(params: ModelParams, optimizer: Optimizer, lr: float) -> None:
    if set(optimizer.buffers) != set(params.named_tensors()):
        raise DimensionError("optimizer buffers do not match parameter set")
    optimizer.step(params, lr)


def _promote(vec: np.ndarray) -> ComplexTensor:
    return complex_from_real(constant(np.asarray(vec, dtype=np.float64).reshape(1, -1)))


def batch_loss(
    batch_inputs: list[mffa.ModalityInputs],
    params: ModelParams,
    config: RunConfig,
    plan: DfrftPlan,
) -> tuple[Tensor, dict]:
    """Joint loss of one training batch on the vectorized path.

    Equivalent to composing mffa_forward / expand_tree / enhance /
    joint_loss sample by sample (the test suite asserts this); the batched
    form exists because it is roughly twenty times cheaper to evaluate.
    """
    variant = config.variant
    use_mffa = variant in ("full", "mffa")
    use_dtg = variant in ("full", "dtg")
    use_mma = variant in ("full", "mffa")
    use_nod = variant in ("full", "dtg")

    vis = np.stack([s.vis for s in batch_inputs])
    tac = np.stack([s.tac for s in batch_inputs])
    labels = np.array([s.label for s in batch_inputs])
    lang = None
    if any(s.lang is not None for s in batch_inputs):
        if any(s.lang is None for s in batch_inputs):
            raise IncompleteSampleError("batch mixes samples with and without language")
        lang = np.stack([s.lang for s in batch_inputs])

    if use_mffa:
        if lang is None:
            raise IncompleteSampleError("adapter training requires language embeddings")
        planes = fractional_planes(plan, params.order.value)
        outs = batched.forward_batch(
            vis, tac, lang, labels, params.mffa, planes,
            training=True, standard_scale=config.standard_attn_scale,
        )
    else:
        lang_bar = None
        if lang is not None:
            lang_bar = ComplexTensor(constant(lang), constant(np.zeros_like(lang)))
        outs = batched.BatchedOutputs(
            ComplexTensor(constant(vis), constant(np.zeros_like(vis))),
            ComplexTensor(constant(tac), constant(np.zeros_like(tac))),
            lang_bar,
        )

    nod_term = Tensor(0.0)
    vis_hat, tac_hat = outs.vis_bar, outs.tac_bar
    if use_dtg:
        if outs.lang_bar is None:
            raise IncompleteSampleError("tree expansion requires the language feature")
        root = outs.vis_bar + outs.tac_bar + outs.lang_bar
        layers = batched.expand_tree_batch(root, params.tree, config.depth)
        nod_term = batched.nod_loss_batch(layers)
        mean = batched.tree_mean(layers)
        vis_hat = outs.vis_bar + mean
        tac_hat = outs.tac_bar + mean

    logits = batched.classify_batch(vis_hat, tac_hat, params.classifier_w, params.classifier_b)
    ce_term = batched.cross_entropy_batch(logits, labels)
    mma_term = batched.mma_loss_batch(outs, config.mma_weight) if use_mma else Tensor(0.0)
    if not use_nod:
        nod_term = Tensor(0.0)
    total = mma_term + nod_term + ce_term
    parts = {
        "mma": float(mma_term.data),
        "nod": float(nod_term.data),
        "ce": float(ce_term.data),
    }
    return total, parts


def steps_per_epoch(n_pairs: int, batch: int) -> int:
    return (n_pairs + batch - 1) // batch


def train(dataset: EmbeddingDataset, config: RunConfig) -> tuple[ModelParams, list[dict]]:
    """Run the full training loop; (seed, config, data) fix the result bitwise."""
    variant = config.variant
    if dataset.dim != config.dim:
        raise IncompatibilityError(
            f"dataset dimension {dataset.dim} != configured dim {config.dim}"
        )
    if not dataset.pairs:
        raise IncompleteSampleError("training dataset has no paired samples")
    if variant != "ce_only":
        dataset.require_language()

    rng = np.random.default_rng(config.seed)
    params = init_params(config, rng)
    optimizer = Optimizer.create(params, config.momentum, config.order_lr_scale)
    plan = build_plan(config.dim)

    n = len(dataset.pairs)
    spe = steps_per_epoch(n, config.batch)
    total_steps = config.epochs * spe
    warmup = max(1, round(config.warmup_frac * total_steps)) if total_steps else 0

    logs: list[dict] = []
    step = 0
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        epoch_parts = {"loss": 0.0, "mma": 0.0, "nod": 0.0, "ce": 0.0}
        last_lr = 0.0
        for start in range(0, n, config.batch):
            chosen = perm[start : start + config.batch]
            batch_inputs = []
            for idx in chosen:
                pair = dataset.pairs[int(idx)]
                pool = dataset.language.get(pair.category)
                lang = pool[int(rng.integers(len(pool)))] if pool else None
                batch_inputs.append(
                    mffa.ModalityInputs(pair.vis, pair.tac, lang, pair.category)
                )
            loss, parts = batch_loss(batch_inputs, params, config, plan)
            zero_grads(params.named_tensors().values())
            backward(loss)
            last_lr = lr_schedule(step, total_steps, config.lr, warmup)
            sgd_step(params, optimizer, last_lr)
            step += 1
            epoch_parts["loss"] += float(loss.data)
            for key in ("mma", "nod", "ce"):
                epoch_parts[key] += parts[key]
        logs.append(
            {
                "epoch": epoch,
                "lr": last_lr,
                "order": params.order.p,
                **{k: v / spe for k, v in epoch_parts.items()},
            }
        )
    return params, logs


@dataclass
class InferenceResult:
    predictions: np.ndarray
    logits: np.ndarray
    features: np.ndarray  # per sample: [Re;Im] of both pooled modality features
    labels: np.ndarray
    report: EvalReport


def infer_features(
    vis: np.ndarray,
    tac: np.ndarray,
    params: ModelParams,
    config: RunConfig,
    chunk: int = 256,
) -> tuple[np.ndarray, np.ndarray]:
    """Logits and pooled [Re;Im] features for stacked VIS/TAC embeddings.

    The inference path touches only the adapter, classifier and order; tree
    weights and labels are out of reach by construction.
    """
    use_mffa = config.variant in ("full", "mffa")
    plan = build_plan(config.dim)
    planes = complex_constant(fractional_matrix(plan, params.order.p))
    logits_rows, feature_rows = [], []
    for start in range(0, len(vis), chunk):
        v, t = vis[start : start + chunk], tac[start : start + chunk]
        if use_mffa:
            outs = batched.forward_batch(
                v, t, None, None, params.mffa, planes,
                training=False, standard_scale=config.standard_attn_scale,
            )
            v_bar, t_bar = outs.vis_bar, outs.tac_bar
        else:
            v_bar = ComplexTensor(constant(v), constant(np.zeros_like(v)))
            t_bar = ComplexTensor(constant(t), constant(np.zeros_like(t)))
        logits = batched.classify_batch(
            v_bar, t_bar, params.classifier_w, params.classifier_b
        ).data
        feats = np.concatenate(
            [batched.flatten_features(v_bar).data, batched.flatten_features(t_bar).data],
            axis=1,
        )
        logits_rows.append(logits)
        feature_rows.append(feats)
    return np.vstack(logits_rows), np.vstack(feature_rows)


def infer(
    params: ModelParams,
    config: RunConfig,
    dataset: EmbeddingDataset,
    margin_pairs: int = 2000,
    margin_seed: int = 0,
) -> InferenceResult:
    """Predict every pair in the dataset and score against its labels."""
    if dataset.dim != config.dim:
        raise IncompatibilityError(
            f"dataset dimension {dataset.dim} != configured dim {config.dim}"
        )
    vis = np.stack([p.vis for p in dataset.pairs])
    tac = np.stack([p.tac for p in dataset.pairs])
    logits_arr, features = infer_features(vis, tac, params, config)
    predictions = logits_arr.argmax(axis=1)
    labels_arr = np.asarray([p.category for p in dataset.pairs])
    report = evaluate(
        predictions, labels_arr, config.classes,
        features=features, max_pairs=margin_pairs, seed=margin_seed,
    )
    return InferenceResult(predictions, logits_arr, features, labels_arr, report)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    name_bytes = name.encode("utf-8")
    parts = [struct.pack("<I", len(name_bytes)), name_bytes, struct.pack("<I", arr.ndim)]
    parts.extend(struct.pack("<I", s) for s in arr.shape)
    parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(path, params: ModelParams, config: RunConfig,
                    optimizer: Optimizer | None = None) -> None:
    cfg = {f.name: getattr(config, f.name) for f in fields(config)}
    cfg_json = json.dumps(cfg, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<I", len(cfg_json)))
        fh.write(cfg_json)
        named = {name: t.data for name, t in params.named_tensors().items()}
        if optimizer is not None:
            named.update({f"momentum.{n}": b for n, b in optimizer.buffers.items()})
        for name in sorted(named):
            fh.write(_pack_tensor(name, named[name]))


def load_checkpoint(path) -> tuple[ModelParams, RunConfig, Optimizer]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != CKPT_MAGIC:
        raise FormatError("not a checkpoint file", offset=0)
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    (cfg_len,) = struct.unpack_from("<I", blob, 8)
    offset = 12
    if offset + cfg_len > len(blob):
        raise FormatError("truncated config block", offset=offset)
    cfg_dict = json.loads(blob[offset : offset + cfg_len].decode("utf-8"))
    offset += cfg_len
    field_names = {f.name for f in fields(RunConfig)}
    unknown = set(cfg_dict) - field_names
    if unknown:
        raise FormatError(f"unknown config keys in checkpoint: {sorted(unknown)}")
    config = RunConfig(**cfg_dict)

    tensors: dict[str, np.ndarray] = {}
    while offset < len(blob):
        if offset + 4 > len(blob):
            raise FormatError("truncated tensor name length", offset=offset)
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        shape = struct.unpack_from(f"<{rank}I", blob, offset) if rank else ()
        offset += 4 * rank
        size = int(np.prod(shape)) if shape else 1
        end = offset + 8 * size
        if end > len(blob):
            raise FormatError("truncated tensor payload", offset=offset)
        tensors[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=offset).reshape(shape).copy()
        offset = end

    params = init_params(config, np.random.default_rng(config.seed))
    optimizer = Optimizer.create(params, config.momentum, config.order_lr_scale)
    expected = set(params.named_tensors()) | {f"momentum.{n}" for n in optimizer.buffers}
    if set(tensors) != expected:
        missing = expected - set(tensors)
        extra = set(tensors) - expected
        raise FormatError(f"checkpoint tensor set mismatch (missing {sorted(missing)}, extra {sorted(extra)})")
    for name, t in params.named_tensors().items():
        if tensors[name].shape != t.data.shape:
            raise FormatError(f"tensor {name} has shape {tensors[name].shape}, expected {t.data.shape}")
        t.data = tensors[name]
        optimizer.buffers[name] = tensors[f"momentum.{name}"]
    return params, config, optimizer
