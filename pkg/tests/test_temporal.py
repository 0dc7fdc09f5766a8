import json
import math

import numpy as np
import pytest

from coopalign.fusion import BevGrid, GridSpec
from coopalign.temporal import (
    EncoderParams,
    LayerParams,
    TokenSequence,
    encode,
    layer_attention,
    load_checkpoint,
    project_channels,
    save_checkpoint,
    softmax,
    softmax_vjp,
    temporal_encoding,
    tokenize,
    vit_backward,
    vit_forward,
    vit_layer_forward,
)
from conftest import blob_grid

# values computed by hand from the closed form
_ENC_T1_D8 = [
    0.8414709848078965,
    0.9504152802551828,
    0.09983341664682815,
    0.9995000416652778,
    0.009999833334166664,
    0.9999950000041666,
    0.0009999998333333417,
    0.9999999500000004,
]
_ENC_T3_D4 = [
    0.1411200080598672,
    0.955336489125606,
    0.02999550020249566,
    0.999995500003375,
]


def test_temporal_encoding_frozen_values():
    np.testing.assert_allclose(temporal_encoding(1, 8), _ENC_T1_D8, atol=1e-15)
    np.testing.assert_allclose(temporal_encoding(3, 4), _ENC_T3_D4, atol=1e-15)


def test_temporal_encoding_closed_form_sweep():
    for dim in (4, 8, 16):
        for t in range(0, 65, 7):
            enc = temporal_encoding(t, dim)
            for k in range(dim // 2):
                assert abs(enc[2 * k] - math.sin(t / 10000.0 ** (2 * k / dim))) < 1e-12
                assert abs(enc[2 * k + 1] - math.cos(t / 10000.0 ** ((2 * k + 1) / dim))) < 1e-12


def test_temporal_encoding_zero_frame():
    enc = temporal_encoding(0, 10)
    np.testing.assert_array_equal(enc[0::2], 0.0)
    np.testing.assert_array_equal(enc[1::2], 1.0)


def test_temporal_encoding_classic_pairing_shares_exponent():
    enc = temporal_encoding(5, 6, classic_pairing=True)
    for k in range(3):
        assert enc[2 * k + 1] == math.cos(5 / 10000.0 ** (2 * k / 6))


def test_temporal_encoding_validation():
    with pytest.raises(ValueError):
        temporal_encoding(1, 3)
    with pytest.raises(ValueError):
        temporal_encoding(1, 0)
    with pytest.raises(ValueError):
        temporal_encoding(-1, 4)


def test_token_sequence_validation():
    with pytest.raises(ValueError):
        TokenSequence(np.zeros((2, 5, 4)), height=2, width=2)
    with pytest.raises(ValueError):
        TokenSequence(np.zeros((2, 4, 3)), height=2, width=2)
    with pytest.raises(ValueError):
        TokenSequence(np.full((1, 4, 4), np.nan), height=2, width=2)
    z = TokenSequence(np.zeros((3, 4, 6)), height=2, width=2)
    assert z.frames == 3 and z.dim == 6


def test_project_channels_matches_scalar_oracle():
    rng = np.random.default_rng(60)
    spec = GridSpec.centered(4, 3, 1.0)
    grid = BevGrid(spec, rng.standard_normal((2, 3, 4)))
    w = rng.standard_normal((5, 2))
    b = rng.standard_normal(5)
    out = project_channels(grid, w, b)
    assert out.data.shape == (5, 3, 4)
    for d in range(5):
        for i in range(3):
            for j in range(4):
                want = b[d] + sum(w[d, c] * grid.data[c, i, j] for c in range(2))
                assert abs(out.data[d, i, j] - want) < 1e-12
    with pytest.raises(ValueError):
        project_channels(grid, rng.standard_normal((5, 3)), b)


def test_tokenize_adds_frame_encoding():
    rng = np.random.default_rng(61)
    spec = GridSpec.centered(3, 2, 1.0)
    frames = [BevGrid(spec, rng.standard_normal((4, 2, 3))) for _ in range(3)]
    z = tokenize(frames)
    assert z.tokens.shape == (3, 6, 4)
    for t_idx, f in enumerate(frames, start=1):
        flat = f.data.reshape(4, -1).T
        np.testing.assert_array_equal(z.tokens[t_idx - 1], flat + temporal_encoding(t_idx, 4))


def test_tokenize_rejects_mismatched_frames():
    rng = np.random.default_rng(62)
    a = BevGrid(GridSpec.centered(3, 2, 1.0), rng.standard_normal((4, 2, 3)))
    b = BevGrid(GridSpec.centered(3, 2, 1.0), rng.standard_normal((2, 2, 3)))
    with pytest.raises(ValueError):
        tokenize([a, b])
    with pytest.raises(ValueError):
        tokenize([])


def test_softmax_rows_and_vjp():
    rng = np.random.default_rng(63)
    x = rng.standard_normal((5, 7))
    p = softmax(x)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    assert (p > 0).all()
    # large shift must not overflow
    assert np.isfinite(softmax(x + 1e4)).all()

    g = rng.standard_normal((5, 7))
    an = softmax_vjp(p, g)
    h = 1e-6
    for r in range(5):
        for c in range(7):
            xp = x.copy()
            xp[r, c] += h
            xm = x.copy()
            xm[r, c] -= h
            fd = ((softmax(xp)[r] - softmax(xm)[r]) * g[r]).sum() / (2 * h)
            assert abs(fd - an[r, c]) < 1e-6


def _layer_forward_scalar(layer, x, heads):
    """Independent loop-based reimplementation of one layer."""
    s, d = x.shape
    dh = d // heads

    def ln(v, scale, shift):
        out = np.zeros_like(v)
        for i in range(s):
            mu = v[i].mean()
            var = ((v[i] - mu) ** 2).mean()
            out[i] = (v[i] - mu) / math.sqrt(var + 1e-5) * scale + shift
        return out

    u = ln(x, layer.ln1_scale, layer.ln1_shift)
    q = u @ layer.wq.T + layer.bq
    k = u @ layer.wk.T + layer.bk
    v = u @ layer.wv.T + layer.bv
    ctx = np.zeros((s, d))
    for hh in range(heads):
        sl = slice(hh * dh, (hh + 1) * dh)
        for i in range(s):
            scores = np.array([q[i, sl] @ k[j, sl] for j in range(s)]) / math.sqrt(dh)
            e = np.exp(scores - scores.max())
            a = e / e.sum()
            ctx[i, sl] = sum(a[j] * v[j, sl] for j in range(s))
    z1 = ctx @ layer.wo.T + layer.bo + x
    w = ln(z1, layer.ln2_scale, layer.ln2_shift)
    return np.tanh(w @ layer.mlp_w1.T + layer.mlp_b1) @ layer.mlp_w2.T + layer.mlp_b2 + z1


def test_layer_forward_matches_scalar_oracle():
    rng = np.random.default_rng(64)
    layer = LayerParams.seeded(4, 6, rng)
    tokens = rng.standard_normal((2, 3, 4))
    z = TokenSequence(tokens, height=1, width=3)
    got = vit_layer_forward(layer, z, heads=2).tokens
    want = _layer_forward_scalar(layer, tokens.reshape(6, 4), 2).reshape(2, 3, 4)
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_passthrough_stack_is_exact_identity():
    rng = np.random.default_rng(65)
    params = EncoderParams.passthrough(in_channels=3, dim=4, heads=2, num_layers=3, hidden=8)
    tokens = rng.standard_normal((2, 4, 4))
    z = TokenSequence(tokens, height=2, width=2)
    out = vit_forward(params, z)
    np.testing.assert_array_equal(out.tokens, tokens)


def test_passthrough_encode_is_input_plus_frame_code():
    rng = np.random.default_rng(66)
    spec = GridSpec.centered(4, 4, 1.0)
    frames = [BevGrid(spec, rng.standard_normal((3, 4, 4))) for _ in range(2)]
    params = EncoderParams.passthrough(in_channels=3, dim=4, heads=2, num_layers=2, hidden=8)
    out = encode(params, frames)
    assert out.data.shape == (4, 4, 4)
    enc = temporal_encoding(2, 4)
    for c in range(3):
        np.testing.assert_allclose(out.data[c], frames[-1].data[c] + enc[c], atol=1e-12)
    np.testing.assert_allclose(out.data[3], enc[3], atol=1e-12)


def test_attention_rows_sum_to_one():
    rng = np.random.default_rng(67)
    layer = LayerParams.seeded(8, 12, rng)
    z = TokenSequence(rng.standard_normal((2, 6, 8)), height=2, width=3)
    attn = layer_attention(layer, z, heads=4)
    assert attn.shape == (4, 12, 12)
    np.testing.assert_allclose(attn.sum(axis=-1), 1.0, atol=1e-12)


def test_encoder_params_validation():
    with pytest.raises(ValueError):
        EncoderParams.passthrough(in_channels=5, dim=4, heads=2, num_layers=1, hidden=4)
    with pytest.raises(ValueError):
        EncoderParams(np.zeros((6, 2)), np.zeros(6), [], heads=4)


def test_vit_backward_matches_finite_differences():
    rng = np.random.default_rng(68)
    params = EncoderParams.seeded(in_channels=3, dim=4, heads=2, num_layers=2, hidden=6, rng=rng)
    tokens = rng.standard_normal((2, 3, 4))
    z = TokenSequence(tokens, height=1, width=3)
    upstream = rng.standard_normal((2, 3, 4))

    def loss():
        return float((vit_forward(params, z).tokens * upstream).sum())

    layer_grads, input_grad = vit_backward(params, z, upstream)
    assert input_grad.shape == tokens.shape

    h = 1e-5
    probe_rng = np.random.default_rng(69)
    checked = 0
    for li, layer in enumerate(params.layers):
        for name in layer.field_names():
            arr = getattr(layer, name)
            an = getattr(layer_grads[li], name)
            flat = arr.reshape(-1)
            take = min(5, flat.size)
            for idx in probe_rng.choice(flat.size, size=take, replace=False):
                orig = flat[idx]
                flat[idx] = orig + h
                lp = loss()
                flat[idx] = orig - h
                lm = loss()
                flat[idx] = orig
                fd = (lp - lm) / (2 * h)
                got = an.reshape(-1)[idx]
                denom = max(abs(fd), abs(got), 1e-8)
                assert abs(fd - got) / denom < 1e-4, f"layer{li}.{name}[{idx}]"
                checked += 1
    assert checked >= 100

    # input gradient against the same loss
    for idx in probe_rng.choice(tokens.size, size=20, replace=False):
        flat = tokens.reshape(-1)
        orig = flat[idx]
        flat[idx] = orig + h
        lp = float((vit_forward(params, TokenSequence(tokens, 1, 3)).tokens * upstream).sum())
        flat[idx] = orig - h
        lm = float((vit_forward(params, TokenSequence(tokens, 1, 3)).tokens * upstream).sum())
        flat[idx] = orig
        fd = (lp - lm) / (2 * h)
        got = input_grad.reshape(-1)[idx]
        denom = max(abs(fd), abs(got), 1e-8)
        assert abs(fd - got) / denom < 1e-4


def test_vit_backward_rejects_bad_upstream():
    rng = np.random.default_rng(70)
    params = EncoderParams.seeded(in_channels=3, dim=4, heads=2, num_layers=1, hidden=6, rng=rng)
    z = TokenSequence(rng.standard_normal((1, 4, 4)), height=2, width=2)
    with pytest.raises(ValueError):
        vit_backward(params, z, np.zeros((1, 4, 2)))


def test_layer_is_permutation_equivariant():
    rng = np.random.default_rng(71)
    layer = LayerParams.seeded(6, 10, rng)
    x = rng.standard_normal((8, 6))
    perm = rng.permutation(8)
    from coopalign.temporal import _layer_forward_flat

    out, _ = _layer_forward_flat(layer, x, heads=3)
    out_p, _ = _layer_forward_flat(layer, x[perm], heads=3)
    np.testing.assert_allclose(out_p, out[perm], atol=1e-10)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(72)
    params = EncoderParams.seeded(in_channels=3, dim=4, heads=2, num_layers=2, hidden=6, rng=rng)
    save_checkpoint(params, tmp_path)
    assert json.loads((tmp_path / "manifest.json").read_text())["heads"] == 2
    loaded = load_checkpoint(tmp_path)
    assert loaded.heads == 2 and len(loaded.layers) == 2
    np.testing.assert_array_equal(loaded.embed_w, params.embed_w.astype("<f4").astype(float))
    for got, src in zip(loaded.layers, params.layers):
        for name in src.field_names():
            np.testing.assert_array_equal(
                getattr(got, name), getattr(src, name).astype("<f4").astype(float)
            )
    # a second save of the loaded params reproduces the bytes exactly
    other = tmp_path / "again"
    save_checkpoint(loaded, other)
    assert (other / "tensors.bin").read_bytes() == (tmp_path / "tensors.bin").read_bytes()
    assert (other / "manifest.json").read_text() == (tmp_path / "manifest.json").read_text()
