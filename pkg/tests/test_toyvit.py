import math

import numpy as np
import pytest

from dopq.errors import DimensionError, ParameterError
from dopq.quantizers import uq_calibrate, uq_quant
from dopq.reparam import LayerNormAffine, LinearLayer
from dopq.toyvit import (
    ACT_SITES,
    CHANNEL_SITES,
    WEIGHT_SITES,
    BlockPlan,
    QuantPlan,
    ViTConfig,
    block_forward,
    block_inputs,
    gelu,
    init_weights,
    layernorm,
    load_weights,
    mlp_forward,
    model_forward,
    msa_forward,
    normalize,
    save_weights,
    softmax,
)

SMALL = ViTConfig(L=2, N=8, D=16, heads=2, mlp_ratio=2, seed=3, init_std=0.125)


def tokens(count, cfg, seed=0):
    return np.random.default_rng(seed).normal(size=(count, cfg.N, cfg.D))


def uq_plan(weights, x, bits):
    plan = []
    h = x
    for w in weights.blocks:
        cap = {}
        out = block_forward(h, w, None, cap)
        acts = {}
        for site in ACT_SITES:
            gran = "channel-wise" if site in CHANNEL_SITES else "layer-wise"
            acts[site] = uq_calibrate(cap[site], bits, gran)
        wts = {n: uq_calibrate(getattr(w, n).W, bits, "channel-wise") for n in WEIGHT_SITES}
        plan.append(BlockPlan(acts, wts))
        h = out
    return QuantPlan(plan)


# --- primitives -----------------------------------------------------------

def test_layernorm_examples():
    aff = LayerNormAffine(np.ones(2), np.zeros(2))
    np.testing.assert_allclose(layernorm(np.array([[1.0, 3.0]]), aff), [[-1.0, 1.0]], atol=1e-6)
    ident = LayerNormAffine(np.ones(16), np.zeros(16))
    r = np.random.default_rng(0).normal(size=(50, 16))
    r = (r - r.mean(-1, keepdims=True)) / r.std(-1, keepdims=True)
    # fixed point once the epsilon is counted in the variance
    x = r * math.sqrt(1 - 1e-6)
    np.testing.assert_allclose(layernorm(x, ident), x, rtol=0, atol=1e-9)
    np.testing.assert_allclose(layernorm(r, ident), r, rtol=0, atol=1e-5)
    with pytest.raises(DimensionError):
        normalize(np.ones((3, 1)))


def test_normalize_moments():
    x = np.random.default_rng(1).normal(3.0, 7.0, size=(200, 32))
    n = normalize(x)
    assert np.max(np.abs(n.mean(axis=-1))) <= 1e-9
    assert np.max(np.abs(n.var(axis=-1) - 1.0)) <= 1e-6


def test_hand_two_element_layernorm_exact_eps():
    # (x - 2) / sqrt(1 + eps)
    out = normalize(np.array([1.0, 3.0]))
    np.testing.assert_allclose(out, np.array([-1.0, 1.0]) / math.sqrt(1 + 1e-6), rtol=1e-15)


def test_softmax_examples():
    np.testing.assert_allclose(softmax(np.zeros(5)), np.full(5, 0.2), atol=1e-15)
    row = np.zeros(8)
    row[3] = 50.0
    assert softmax(row)[3] >= 1 - 1e-6
    s = np.random.default_rng(2).normal(size=(10, 16)) * 5
    np.testing.assert_allclose(softmax(s + 123.4), softmax(s), atol=1e-12)
    p = softmax(s)
    assert np.max(np.abs(p.sum(axis=-1) - 1)) <= 1e-12
    assert np.all(p > 0) and np.all(p <= 1)


def test_gelu_examples():
    assert gelu(0.0) == 0.0
    assert abs(gelu(10.0) - 10.0) <= 1e-6
    x = np.random.default_rng(3).normal(size=200) * 3
    ref = np.array([v * 0.5 * (1 + math.erf(v / math.sqrt(2))) for v in x])
    assert np.max(np.abs(gelu(x) - ref)) <= 1e-12


# --- forward passes -------------------------------------------------------

def test_single_token_single_head_closed_form():
    cfg = ViTConfig(L=1, N=1, D=8, heads=1, mlp_ratio=2, seed=5, init_std=0.3)
    w = init_weights(cfg).blocks[0]
    x = np.random.default_rng(0).normal(size=(1, 8))
    Wv, bv = w.qkv.W[:, 16:], w.qkv.bias[16:]
    expect = (x @ Wv + bv) @ w.proj.W + w.proj.bias
    np.testing.assert_allclose(msa_forward(x, w), expect, atol=1e-12)


def test_mlp_vs_scalar_loop():
    w = init_weights(SMALL).blocks[0]
    y = np.random.default_rng(4).normal(size=(3, SMALL.D))
    W1, W2 = w.fc1.W, w.fc2.W
    ref = np.zeros_like(y)
    for n in range(y.shape[0]):
        hid = [sum(y[n, i] * W1[i, j] for i in range(W1.shape[0])) + w.fc1.bias[j] for j in range(W1.shape[1])]
        hid = [v * 0.5 * (1 + math.erf(v / math.sqrt(2))) for v in hid]
        for j in range(W2.shape[1]):
            ref[n, j] = sum(hid[i] * W2[i, j] for i in range(W2.shape[0])) + w.fc2.bias[j]
    assert np.max(np.abs(mlp_forward(y, w) - ref)) <= 1e-12


def test_attention_rows_sum_to_one():
    w = init_weights(SMALL).blocks[0]
    cap = {}
    msa_forward(tokens(4, SMALL), w, None, cap)
    assert cap["softmax"].shape == (4, SMALL.heads, SMALL.N, SMALL.N)
    assert np.max(np.abs(cap["softmax"].sum(axis=-1) - 1)) <= 1e-12


def test_residual_identity():
    w = init_weights(SMALL).blocks[0]
    zero = {n: LinearLayer(np.zeros_like(getattr(w, n).W), np.zeros_like(getattr(w, n).bias))
            for n in ("proj", "fc2")}
    w0 = type(w)(w.ln1, w.qkv, zero["proj"], w.ln2, w.fc1, zero["fc2"], heads=w.heads)
    x = tokens(3, SMALL)
    assert np.array_equal(block_forward(x, w0), x)


def test_shape_mismatch():
    w = init_weights(SMALL).blocks[0]
    with pytest.raises(DimensionError):
        msa_forward(np.ones((4, SMALL.D + 1)), w)
    with pytest.raises(DimensionError):
        mlp_forward(np.ones((4, SMALL.D - 1)), w)
    with pytest.raises(DimensionError):
        ViTConfig(D=10, heads=4)


def test_thirty_bit_plan_matches_fp():
    cfg = ViTConfig(init_std=0.125)
    weights = init_weights(cfg)
    x = tokens(256, cfg, seed=9)
    plan = uq_plan(weights, x, 30)
    fp, q = model_forward(x, weights), model_forward(x, weights, plan)
    assert np.mean(fp.argmax(-1) == q.argmax(-1)) == 1.0
    w = weights.blocks[0]
    xl = layernorm(x[:8], w.ln1)
    assert np.max(np.abs(msa_forward(xl, w) - msa_forward(xl, w, plan.blocks[0]))) <= 1e-6


def test_low_bit_plan_changes_output():
    weights = init_weights(SMALL)
    x = tokens(32, SMALL)
    plan = uq_plan(weights, x, 3)
    assert np.max(np.abs(model_forward(x, weights) - model_forward(x, weights, plan))) > 0


def test_determinism_and_seeds():
    a, b = init_weights(SMALL), init_weights(SMALL)
    x = tokens(8, SMALL)
    assert model_forward(x, a).tobytes() == model_forward(x, b).tobytes()
    c = init_weights(ViTConfig(L=2, N=8, D=16, heads=2, mlp_ratio=2, seed=4))
    assert np.max(np.abs(a.blocks[0].qkv.W - c.blocks[0].qkv.W)) > 0


def test_init_statistics():
    w = init_weights(ViTConfig())
    for b in w.blocks:
        for n in WEIGHT_SITES:
            assert abs(getattr(b, n).W.std() - 0.02) <= 0.002
            assert not getattr(b, n).bias.any()
        assert np.all(b.ln1.gamma == 1) and not b.ln1.beta.any()


def test_qk_std_rescales_only_query_and_key():
    plain = init_weights(ViTConfig(init_std=0.125, seed=2))
    sharp = init_weights(ViTConfig(init_std=0.125, qk_std=0.25, seed=2))
    D = plain.cfg.D
    for p, s in zip(plain.blocks, sharp.blocks):
        np.testing.assert_allclose(s.qkv.W[:, : 2 * D], 2.0 * p.qkv.W[:, : 2 * D], rtol=1e-15)
        assert np.array_equal(s.qkv.W[:, 2 * D:], p.qkv.W[:, 2 * D:])
        assert np.array_equal(s.fc1.W, p.fc1.W)
    with pytest.raises(ParameterError):
        ViTConfig(qk_std=0.0)


def test_channel_wise_equals_layer_wise_with_equal_params():
    x = np.random.default_rng(6).normal(size=(40, 16))
    lw = uq_calibrate(x, 4)
    cw = uq_calibrate(x, 4, "channel-wise")
    cw = type(cw)(4, np.full(16, lw.scale), np.full(16, lw.zero_point), axis=-1)
    assert np.array_equal(uq_quant(x, lw), uq_quant(x, cw))


def test_block_inputs_chain():
    weights = init_weights(SMALL)
    x = tokens(4, SMALL)
    hs = block_inputs(x, weights)
    assert len(hs) == SMALL.L + 1
    assert np.array_equal(hs[1], block_forward(x, weights.blocks[0]))
    np.testing.assert_array_equal(weights.head(hs[-1].mean(axis=-2)), model_forward(x, weights))


def test_plan_config_roundtrip():
    weights = init_weights(SMALL)
    plan = uq_plan(weights, tokens(8, SMALL), 4)
    back = QuantPlan.from_config(plan.to_config())
    x = tokens(4, SMALL, seed=1)
    assert model_forward(x, weights, plan).tobytes() == model_forward(x, weights, back).tobytes()


def test_save_load_roundtrip(tmp_path):
    weights = init_weights(SMALL)
    path = save_weights(weights, tmp_path / "w")
    assert path.name == "manifest.json"
    back = load_weights(tmp_path / "w")
    assert back.cfg == weights.cfg
    x = tokens(4, SMALL)
    assert model_forward(x, weights).tobytes() == model_forward(x, back).tobytes()
