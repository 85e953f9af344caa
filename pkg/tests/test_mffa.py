import numpy as np
import pytest
from numpy.testing import assert_allclose

from conftest import central_difference, relative_gradient_error
from fracmodal import mffa
from fracmodal.dfrft import build_plan, fractional_matrix, fractional_planes
from fracmodal.engine import ComplexTensor, Tensor, backward, zero_grads
from fracmodal.errors import DegenerateBatchError, DimensionError, IncompleteSampleError
from fracmodal.mffa import (
    LANG,
    TAC,
    VIS,
    MffaParams,
    ModalityInputs,
    frft_process,
    fratt,
    global_class_token,
    guided_project,
    mffa_forward,
    mma_loss,
)


def identity_params(d: int, e: int, noise: float = 0.0, seed: int = 0) -> MffaParams:
    rng = np.random.default_rng(seed)

    def mat():
        return Tensor(np.eye(d) + noise * rng.standard_normal((d, d)), requires_grad=True)

    return MffaParams(
        expand={m: Tensor(np.ones(e), requires_grad=True) for m in (LANG, VIS, TAC)},
        query_proj=mat(),
        key_proj=mat(),
        value_proj=mat(),
        ffn_w1=mat(),
        ffn_b1=Tensor(np.zeros(d), requires_grad=True),
        ffn_w2=mat(),
        ffn_b2=Tensor(np.zeros(d), requires_grad=True),
        mma_weight=1.0,
    )


def planes_for(d: int, p: float):
    return fractional_planes(build_plan(d), Tensor(p))


def cvec(re, im=None) -> ComplexTensor:
    re = np.atleast_2d(np.asarray(re, dtype=np.float64))
    im = np.zeros_like(re) if im is None else np.atleast_2d(np.asarray(im, dtype=np.float64))
    return ComplexTensor(Tensor(re), Tensor(im))


# ---------------------------------------------------------------------------
# frft_process
# ---------------------------------------------------------------------------


def test_frft_process_order_zero_is_identity_on_nonnegatives():
    e = np.array([0.5, 0.0, 2.0, 1.0])
    out = frft_process(e, Tensor(np.ones(1)), planes_for(4, 0.0), LANG)
    assert out.values.shape == (1, 4)
    assert_allclose(out.values.re.data[0], e, atol=1e-10)
    assert_allclose(out.values.im.data, 0.0, atol=1e-10)


def test_frft_process_zero_expansion_gives_zero_feature():
    rng = np.random.default_rng(0)
    out = frft_process(rng.standard_normal(8), Tensor(np.zeros(3)), planes_for(8, 0.5), VIS)
    assert_allclose(out.values.re.data, 0.0, atol=0)
    assert_allclose(out.values.im.data, 0.0, atol=0)
    assert out.values.shape == (3, 8)


def test_frft_process_rows_match_direct_oracle():
    rng = np.random.default_rng(1)
    e = rng.standard_normal(8)
    theta = Tensor(np.array([1.0, 2.0]))
    plan = build_plan(8)
    out = frft_process(e, theta, planes_for(8, 0.5), VIS)
    f = fractional_matrix(plan, 0.5)
    for i, scale in enumerate((1.0, 2.0)):
        z = f @ (scale * e)
        assert_allclose(out.values.re.data[i], np.maximum(z.real, 0.0), atol=1e-12)
        assert_allclose(out.values.im.data[i], np.maximum(z.imag, 0.0), atol=1e-12)
    # row 2 is the transform of 2e
    double = frft_process(2.0 * e, Tensor(np.ones(1)), planes_for(8, 0.5), VIS)
    assert_allclose(out.values.re.data[1], double.values.re.data[0], atol=1e-12)


def test_frft_process_outputs_nonnegative_planes():
    rng = np.random.default_rng(2)
    for p in (0.0, 0.3, 1.0, 2.5):
        out = frft_process(
            rng.standard_normal(8),
            Tensor(rng.standard_normal(4)),
            planes_for(8, p),
            TAC,
        )
        assert np.all(out.values.re.data >= 0)
        assert np.all(out.values.im.data >= 0)


def test_frft_process_dimension_mismatch():
    with pytest.raises(DimensionError):
        frft_process(np.zeros(6), Tensor(np.ones(2)), planes_for(4, 0.5), VIS)


# ---------------------------------------------------------------------------
# global_class_token
# ---------------------------------------------------------------------------


def _feature(arr) -> mffa.FractionalFeature:
    return mffa.FractionalFeature(cvec(arr), LANG)


def test_global_token_single_sample_is_own_row_average():
    block = np.arange(8.0).reshape(2, 4)
    token = global_class_token([_feature(block)], [3], 0, training=True)
    assert_allclose(token.re.data, block.mean(axis=0, keepdims=True), atol=1e-15)


def test_global_token_two_identical_samples():
    block = np.arange(8.0).reshape(2, 4)
    feats = [_feature(block), _feature(block)]
    token = global_class_token(feats, [1, 1], 0, training=True)
    assert_allclose(token.re.data, block.mean(axis=0, keepdims=True), atol=1e-15)


def test_global_token_mixed_labels_matches_direct_sum():
    rng = np.random.default_rng(3)
    blocks = [rng.standard_normal((2, 4)) for _ in range(3)]
    feats = [_feature(b) for b in blocks]
    token = global_class_token(feats, [0, 1, 0], 0, training=True)
    expected = (blocks[0].mean(axis=0) + blocks[2].mean(axis=0)) / 2.0
    assert_allclose(token.re.data[0], expected, atol=1e-14)


def test_global_token_inference_rule():
    rng = np.random.default_rng(4)
    blocks = [rng.standard_normal((3, 4)) for _ in range(2)]
    feats = [_feature(b) for b in blocks]
    token = global_class_token(feats, None, 1, training=False)
    assert_allclose(token.re.data, blocks[1].mean(axis=0, keepdims=True), atol=1e-15)


def test_global_token_degenerate_batch():
    with pytest.raises(DegenerateBatchError):
        global_class_token([], [0], 0, training=True)


# ---------------------------------------------------------------------------
# fratt
# ---------------------------------------------------------------------------


def test_fratt_single_key_divides_by_sqrt_d():
    d = 4
    feats = mffa.FractionalFeature(cvec([[1.0, 2.0, 3.0, 4.0]]), VIS)
    zero = cvec(np.zeros((1, d)))
    out = fratt(feats.values, feats, zero, identity_params(d, 1))
    assert_allclose(out.re.data, feats.values.re.data / np.sqrt(d), atol=1e-12)
    assert_allclose(out.im.data, 0.0, atol=1e-12)


def test_fratt_duplicate_keys_match_single_key():
    d = 4
    row = np.array([[1.0, 2.0, 3.0, 4.0]])
    single = mffa.FractionalFeature(cvec(row), VIS)
    double = mffa.FractionalFeature(cvec(np.vstack([row, row])), VIS)
    zero = cvec(np.zeros((1, d)))
    params = identity_params(d, 1)
    a = fratt(single.values, single, zero, params)
    b = fratt(cvec(row), double, zero, params)
    assert_allclose(a.re.data, b.re.data, atol=1e-12)
    assert_allclose(a.im.data, b.im.data, atol=1e-12)


def _loop_fratt_oracle(query, feats, token, params, d):
    """Literal per-entry recomputation with python loops."""
    kv = feats + token  # broadcast over rows
    qm = query @ (params.query_proj.data + 0j)
    km = kv @ (params.key_proj.data + 0j)
    vm = kv @ (params.value_proj.data + 0j)
    scores = np.zeros((qm.shape[0], km.shape[0]))
    for i in range(qm.shape[0]):
        for j in range(km.shape[0]):
            scores[i, j] = np.real(np.sum(qm[i] * np.conj(km[j])))
    weights = np.exp(scores - scores.max(axis=1, keepdims=True))
    weights /= weights.sum(axis=1, keepdims=True)
    weights = weights / np.sqrt(d)
    context = weights @ vm
    pooled = context.mean(axis=0, keepdims=True)

    def ffn(x):
        h = np.maximum(x @ params.ffn_w1.data + params.ffn_b1.data, 0.0)
        return h @ params.ffn_w2.data + params.ffn_b2.data

    return ffn(pooled.real) + 1j * ffn(pooled.imag)


def test_fratt_matches_loop_oracle():
    rng = np.random.default_rng(5)
    d, e = 4, 3
    params = identity_params(d, e, noise=0.3, seed=9)
    params.ffn_b1.data[:] = rng.standard_normal(d) * 0.1
    params.ffn_b2.data[:] = rng.standard_normal(d) * 0.1
    feats_np = rng.standard_normal((e, d)) + 1j * rng.standard_normal((e, d))
    query_np = rng.standard_normal((2, d)) + 1j * rng.standard_normal((2, d))
    token_np = rng.standard_normal((1, d)) + 1j * rng.standard_normal((1, d))
    feats = mffa.FractionalFeature(cvec(feats_np.real, feats_np.imag), VIS)
    query = cvec(query_np.real, query_np.imag)
    token = cvec(token_np.real, token_np.imag)
    out = fratt(query, feats, token, params)
    expected = _loop_fratt_oracle(query_np, feats_np, token_np, params, d)
    assert_allclose(out.re.data + 1j * out.im.data, expected, atol=1e-12)


def test_fratt_standard_scale_flag_changes_order():
    rng = np.random.default_rng(6)
    d = 4
    params = identity_params(d, 2, noise=0.2, seed=11)
    feats = mffa.FractionalFeature(
        cvec(rng.standard_normal((2, d)), rng.standard_normal((2, d))), VIS
    )
    token = cvec(np.zeros((1, d)))
    literal = fratt(feats.values, feats, token, params, standard_scale=False)
    standard = fratt(feats.values, feats, token, params, standard_scale=True)
    assert np.abs(literal.re.data - standard.re.data).max() > 1e-6


# ---------------------------------------------------------------------------
# guided_project / mma_loss
# ---------------------------------------------------------------------------


def test_guided_project_zero_guidance_reduces_to_plain_projection():
    rng = np.random.default_rng(7)
    e = rng.standard_normal(8)
    theta = Tensor(rng.standard_normal(3))
    planes = planes_for(8, 0.5)
    a = guided_project(None, e, theta, planes, VIS)
    b = frft_process(e, theta, planes, VIS)
    assert_allclose(a.values.re.data, b.values.re.data, atol=0)
    assert_allclose(a.values.im.data, b.values.im.data, atol=0)
    zero_guided = guided_project(cvec(np.zeros((1, 8))), e, theta, planes, VIS)
    assert_allclose(zero_guided.values.re.data, b.values.re.data, atol=0)


def test_guided_project_cancellation():
    e = np.array([1.0, -2.0, 0.5, 3.0])
    out = guided_project(cvec(-e), e, Tensor(np.ones(2)), planes_for(4, 0.7), TAC)
    assert_allclose(out.values.re.data, 0.0, atol=1e-15)
    assert_allclose(out.values.im.data, 0.0, atol=1e-15)


def test_guided_project_matches_composition_oracle():
    rng = np.random.default_rng(8)
    e = rng.standard_normal(8)
    guide = rng.standard_normal((1, 8)) + 1j * rng.standard_normal((1, 8))
    theta = Tensor(rng.standard_normal(2))
    planes = planes_for(8, 0.5)
    out = guided_project(cvec(guide.real, guide.imag), e, theta, planes, VIS)
    summed = guide + e  # promoted embedding plus guidance
    oracle = frft_process(
        cvec(summed.real, summed.imag), theta, planes, VIS
    )
    assert_allclose(out.values.re.data, oracle.values.re.data, atol=1e-13)
    assert_allclose(out.values.im.data, oracle.values.im.data, atol=1e-13)


def test_mma_loss_zero_for_identical_features():
    rng = np.random.default_rng(9)
    f = cvec(rng.standard_normal((1, 6)), rng.standard_normal((1, 6)))
    g = cvec(f.re.data.copy(), f.im.data.copy())
    h = cvec(f.re.data.copy(), f.im.data.copy())
    assert abs(float(mma_loss(f, g, h, 10.0).data)) < 1e-12


def test_mma_loss_linear_in_weight():
    rng = np.random.default_rng(10)
    l, v, t = (cvec(rng.standard_normal((1, 4)), rng.standard_normal((1, 4))) for _ in range(3))
    one = float(mma_loss(l, v, t, 1.0).data)
    two = float(mma_loss(l, v, t, 2.0).data)
    assert_allclose(two, 2.0 * one, rtol=1e-14)
    assert one >= 0.0


def test_mma_loss_frozen_scalar_oracle():
    # frozen from a 50-digit evaluation of KL(softmax([1,0,0,0]) || softmax([0,1,0,0]))
    l = cvec([[1.0, 0.0]])
    v = cvec([[0.0, 1.0]])
    t = cvec([[1.0, 0.0]])
    assert_allclose(
        float(mma_loss(l, v, t, 1.0).data), 0.3004891818915622547968713, rtol=1e-13
    )


# ---------------------------------------------------------------------------
# mffa_forward
# ---------------------------------------------------------------------------


def _batch(rng, n, d, with_lang=True):
    return [
        ModalityInputs(
            vis=rng.standard_normal(d),
            tac=rng.standard_normal(d),
            lang=rng.standard_normal(d) if with_lang else None,
            label=int(rng.integers(0, 3)) if with_lang else None,
        )
        for _ in range(n)
    ]


def test_forward_deterministic():
    rng = np.random.default_rng(11)
    batch = _batch(rng, 3, 8)
    params = identity_params(8, 2, noise=0.1, seed=13)
    planes = planes_for(8, 0.0)
    a = mffa_forward(batch, params, planes, training=True)
    b = mffa_forward(batch, params, planes, training=True)
    for x, y in zip(a, b):
        assert_allclose(x.vis_bar.re.data, y.vis_bar.re.data, atol=0)
        assert_allclose(x.tac_bar.im.data, y.tac_bar.im.data, atol=0)
        assert np.all(np.isfinite(x.vis_bar.re.data))


def test_forward_requires_language_when_training():
    rng = np.random.default_rng(12)
    batch = _batch(rng, 2, 8, with_lang=False)
    with pytest.raises(IncompleteSampleError):
        mffa_forward(batch, identity_params(8, 2), planes_for(8, 0.5), training=True)


def test_forward_batch_permutation_invariance():
    rng = np.random.default_rng(13)
    batch = _batch(rng, 5, 8)
    for i, s in enumerate(batch):
        s.label = [0, 1, 0, 2, 1][i]
    params = identity_params(8, 2, noise=0.15, seed=17)
    planes = planes_for(8, 0.5)
    base = mffa_forward(batch, params, planes, training=True)
    perm = [3, 0, 4, 1, 2]
    shuffled = mffa_forward([batch[i] for i in perm], params, planes, training=True)
    for new_pos, old_pos in enumerate(perm):
        assert_allclose(
            shuffled[new_pos].vis_bar.re.data, base[old_pos].vis_bar.re.data, atol=1e-12
        )
        assert_allclose(
            shuffled[new_pos].tac_bar.re.data, base[old_pos].tac_bar.re.data, atol=1e-12
        )
        assert_allclose(
            shuffled[new_pos].lang_bar.im.data, base[old_pos].lang_bar.im.data, atol=1e-12
        )


def test_forward_train_with_zero_language_vs_infer():
    """With zero language, zero FFN biases and a one-sample batch the guided
    projection and the token collapse to the inference rule; the remaining
    difference is the query (pooled language vs the feature block itself)."""
    rng = np.random.default_rng(14)
    d, e = 8, 2
    params = identity_params(d, e, noise=0.2, seed=19)
    planes = planes_for(d, 0.5)
    sample = ModalityInputs(
        vis=rng.standard_normal(d), tac=rng.standard_normal(d), lang=np.zeros(d), label=0
    )
    train_out = mffa_forward([sample], params, planes, training=True)[0]
    infer_out = mffa_forward([sample], params, planes, training=False)[0]
    # language path of the zeroed sample pools to exactly zero
    assert_allclose(train_out.lang_bar.re.data, 0.0, atol=1e-15)

    feat = guided_project(None, sample.vis, params.expand[VIS], planes, VIS)
    token = global_class_token([feat], None, 0, training=False)
    with_zero_query = fratt(cvec(np.zeros((1, d))), feat, token, params)
    with_self_query = fratt(feat.values, feat, token, params)
    assert_allclose(train_out.vis_bar.re.data, with_zero_query.re.data, atol=1e-12)
    assert_allclose(infer_out.vis_bar.re.data, with_self_query.re.data, atol=1e-12)


def test_forward_infer_has_no_language_output():
    rng = np.random.default_rng(15)
    batch = _batch(rng, 2, 8, with_lang=False)
    outs = mffa_forward(batch, identity_params(8, 2), planes_for(8, 0.5), training=False)
    assert all(o.lang_bar is None for o in outs)
    assert all(o.vis_bar.shape == (1, 8) for o in outs)


def test_mma_gradients_match_finite_differences():
    rng = np.random.default_rng(16)
    d, e = 8, 2
    params = identity_params(d, e, noise=0.2, seed=23)
    plan = build_plan(d)
    order = Tensor(0.5, requires_grad=True)
    batch = _batch(rng, 3, d)
    for i, s in enumerate(batch):
        s.label = [0, 1, 0][i]

    def forward():
        planes = fractional_planes(plan, order)
        outs = mffa_forward(batch, params, planes, training=True)
        total = None
        for o in outs:
            term = mma_loss(o.lang_bar, o.vis_bar, o.tac_bar, params.mma_weight)
            total = term if total is None else total + term
        return total * (1.0 / len(outs))

    tensors = dict(params.named_tensors())
    tensors["order"] = order
    backward(forward())
    worst = {}
    for name, t in tensors.items():
        fd = central_difference(forward, t)
        grad = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst[name] = relative_gradient_error(grad, fd)
    zero_grads(tensors.values())
    assert max(worst.values()) < 1e-4, worst
