import math

import numpy as np
import pytest

from dcebad import autograd as ag
from dcebad import layers as L
from dcebad.autograd import Tensor
from dcebad.gradcheck import LAYERS, check_layer


def sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def lstm_step_oracle(x, h, c, p):
    """Gate equations evaluated one scalar at a time."""
    z = list(h) + list(x)
    H = len(h)

    def gate(W, b, j):
        return b[j] + sum(W[j][k] * z[k] for k in range(len(z)))

    W = {k: getattr(p, k).values for k in ("W_i", "W_f", "W_c", "W_o")}
    b = {k: getattr(p, k).values for k in ("b_i", "b_f", "b_c", "b_o")}
    h_new, c_new = [], []
    for j in range(H):
        i_t = sig(gate(W["W_i"], b["b_i"], j))
        f_t = sig(gate(W["W_f"], b["b_f"], j))
        g_t = math.tanh(gate(W["W_c"], b["b_c"], j))
        o_t = sig(gate(W["W_o"], b["b_o"], j))
        cj = f_t * c[j] + i_t * g_t
        c_new.append(cj)
        h_new.append(o_t * math.tanh(cj))
    return np.array(h_new), np.array(c_new)


def random_lstm(rng, n_in, H):
    p = L.LstmParams.init(rng, n_in, H)
    for _, t in p.named_tensors():
        t.values = rng.normal(size=t.shape)
    return p


def zero_lstm(n_in, H):
    p = L.LstmParams.init(np.random.default_rng(0), n_in, H)
    for _, t in p.named_tensors():
        t.values = np.zeros(t.shape)
    return p


# ---------------------------------------------------------------- lstm_step


def test_lstm_step_zero_params_zero_state():
    p = zero_lstm(3, 4)
    h, c = L.lstm_step(Tensor(np.ones((1, 3))), Tensor(np.zeros((1, 4))), Tensor(np.zeros((1, 4))), p)
    assert np.array_equal(h.values, np.zeros((1, 4))) and np.array_equal(c.values, np.zeros((1, 4)))


def test_lstm_step_zero_params_halves_cell():
    p = zero_lstm(3, 4)
    c_prev = np.array([[1.0, -2.0, 0.5, 8.0]])
    _, c = L.lstm_step(Tensor(np.ones((1, 3))), Tensor(np.ones((1, 4))), Tensor(c_prev), p)
    assert np.array_equal(c.values, 0.5 * c_prev)


def test_lstm_step_matches_scalar_loop():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        p = random_lstm(rng, 3, 3)
        x, h, c = rng.normal(size=3), rng.normal(size=3), rng.normal(size=3)
        got_h, got_c = L.lstm_step(Tensor(x[None]), Tensor(h[None]), Tensor(c[None]), p)
        want_h, want_c = lstm_step_oracle(x, h, c, p)
        assert np.max(np.abs(got_h.values[0] - want_h)) < 1e-12
        assert np.max(np.abs(got_c.values[0] - want_c)) < 1e-12


def test_lstm_gate_ranges():
    rng = np.random.default_rng(1)
    p = random_lstm(rng, 4, 5)
    z = np.concatenate([rng.normal(size=5), rng.normal(size=4) * 3])
    for W, b, lo, hi in (("W_i", "b_i", 0, 1), ("W_f", "b_f", 0, 1), ("W_o", "b_o", 0, 1)):
        g = ag.sigmoid(ag.add(ag.matmul(Tensor(z[None]), ag.transpose(getattr(p, W))), getattr(p, b))).values
        assert ((g > lo) & (g < hi)).all()
    g = ag.tanh(ag.add(ag.matmul(Tensor(z[None]), ag.transpose(p.W_c)), p.b_c)).values
    assert ((g > -1) & (g < 1)).all()


def test_lstm_step_dimension_error():
    p = zero_lstm(3, 4)
    with pytest.raises(ag.DimensionError):
        L.lstm_step(Tensor(np.ones((1, 2))), Tensor(np.zeros((1, 4))), Tensor(np.zeros((1, 4))), p)


def test_forget_bias_initialised_to_one():
    p = L.LstmParams.init(np.random.default_rng(0), 3, 4)
    assert np.array_equal(p.b_f.values, np.ones(4))
    assert not p.b_i.values.any() and not p.b_c.values.any() and not p.b_o.values.any()


# ---------------------------------------------------------------- bilstm


def test_bilstm_single_step():
    rng = np.random.default_rng(2)
    fwd, bwd = random_lstm(rng, 3, 2), random_lstm(rng, 3, 2)
    x = rng.normal(size=(1, 1, 3))
    H = L.bilstm(Tensor(x), fwd, bwd).values
    zero = Tensor(np.zeros((1, 2)))
    hf, _ = L.lstm_step(Tensor(x[:, 0]), zero, zero, fwd)
    hb, _ = L.lstm_step(Tensor(x[:, 0]), zero, zero, bwd)
    assert np.allclose(H[0, 0], np.concatenate([hf.values[0], hb.values[0]]), rtol=0, atol=1e-15)


def test_bilstm_palindrome_symmetry():
    rng = np.random.default_rng(3)
    p = random_lstm(rng, 3, 4)
    half = rng.normal(size=(3, 3))
    seq = np.concatenate([half, rng.normal(size=(1, 3)), half[::-1]])[None]
    H = L.bilstm(Tensor(seq), p, p).values[0]
    T = seq.shape[1]
    for t in range(T):
        assert np.allclose(H[t, :4], H[T - 1 - t, 4:], rtol=0, atol=1e-14)


def test_bilstm_default_width_512():
    rng = np.random.default_rng(4)
    fwd, bwd = L.LstmParams.init(rng, 4, 256), L.LstmParams.init(rng, 4, 256)
    assert L.bilstm(Tensor(np.ones((1, 2, 4))), fwd, bwd).shape == (1, 2, 512)


def test_bilstm_forward_half_is_plain_lstm():
    rng = np.random.default_rng(5)
    fwd, bwd = random_lstm(rng, 3, 2), random_lstm(rng, 3, 2)
    x = rng.normal(size=(5, 3))
    H = L.bilstm(Tensor(x[None]), fwd, bwd).values[0]
    h, c = np.zeros(2), np.zeros(2)
    for t in range(5):
        h, c = lstm_step_oracle(x[t], h, c, fwd)
        assert np.max(np.abs(H[t, :2] - h)) < 1e-12


def test_bilstm_mask_freezes_state():
    rng = np.random.default_rng(6)
    fwd, bwd = random_lstm(rng, 3, 2), random_lstm(rng, 3, 2)
    x = rng.normal(size=(1, 6, 3))
    mask = np.array([[1, 1, 1, 1, 0, 0]], dtype=bool)
    H_pad, finals = L.bilstm_with_finals(Tensor(x), fwd, bwd, mask)
    H_cut = L.bilstm(Tensor(x[:, :4]), fwd, bwd).values
    assert np.allclose(H_pad.values[:, :4], H_cut, rtol=0, atol=1e-14)
    assert np.allclose(finals.values[0, :2], H_cut[0, 3, :2], rtol=0, atol=1e-14)
    assert np.allclose(finals.values[0, 2:], H_cut[0, 0, 2:], rtol=0, atol=1e-14)


def test_bilstm_empty_sequence():
    p = zero_lstm(3, 2)
    with pytest.raises(ag.DimensionError):
        L.bilstm(Tensor(np.zeros((1, 0, 3))), p, p)


# ---------------------------------------------------------------- attention pooling


def attention_pool_oracle(H, p):
    W, b, v = p.W_g.values, p.b_g.values, p.v.values
    T, d = H.shape
    scores = []
    for t in range(T):
        u = [math.tanh(b[j] + sum(W[j, k] * H[t, k] for k in range(d))) for j in range(len(b))]
        scores.append(sum(v[j] * u[j] for j in range(len(b))))
    top = max(scores)
    e = [math.exp(s - top) for s in scores]
    a = [x / sum(e) for x in e]
    R = [sum(a[t] * H[t, k] for t in range(T)) for k in range(d)]
    return np.array(R), np.array(a)


def random_pool(rng, d):
    p = L.AttnPoolParams.init(rng, d)
    for _, t in p.named_tensors():
        t.values = rng.normal(size=t.shape)
    return p


def test_attention_pool_singleton():
    rng = np.random.default_rng(7)
    H = rng.normal(size=(1, 1, 4))
    R, a = L.attention_pool(Tensor(H), random_pool(rng, 4))
    assert a.values.tolist() == [[1.0]]
    assert np.array_equal(R.values, H[:, 0])


def test_attention_pool_identical_rows():
    rng = np.random.default_rng(8)
    h = rng.normal(size=4)
    R, a = L.attention_pool(Tensor(np.tile(h, (1, 5, 1))), random_pool(rng, 4))
    assert np.allclose(a.values, 0.2, rtol=0, atol=1e-15)
    assert np.allclose(R.values[0], h, rtol=0, atol=1e-14)


def test_attention_pool_matches_scalar_loop():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        H = rng.normal(size=(3, 2))
        p = random_pool(rng, 2)
        R, a = L.attention_pool(Tensor(H[None]), p)
        want_R, want_a = attention_pool_oracle(H, p)
        assert np.max(np.abs(R.values[0] - want_R)) < 1e-12
        assert np.max(np.abs(a.values[0] - want_a)) < 1e-12


def test_attention_pool_is_convex_combination():
    rng = np.random.default_rng(9)
    for _ in range(20):
        H = rng.normal(size=(2, 6, 3)) * 4
        R, a = L.attention_pool(Tensor(H), random_pool(rng, 3))
        assert (a.values >= 0).all() and np.max(np.abs(a.values.sum(1) - 1)) < 1e-6
        assert (R.values <= H.max(axis=1) + 1e-12).all() and (R.values >= H.min(axis=1) - 1e-12).all()


def test_attention_pool_mask_ignores_padding():
    rng = np.random.default_rng(10)
    p = random_pool(rng, 3)
    H = rng.normal(size=(1, 5, 3))
    mask = np.array([[1, 1, 1, 0, 0]], dtype=bool)
    R_masked, a = L.attention_pool(Tensor(H), p, mask)
    R_cut, _ = L.attention_pool(Tensor(H[:, :3]), p)
    assert a.values[0, 3:].tolist() == [0.0, 0.0]
    assert np.allclose(R_masked.values, R_cut.values, rtol=0, atol=1e-14)


# ---------------------------------------------------------------- multi-head attention


def mhsa_oracle(X, p, mask):
    T, D = X.shape
    n, dk = p.heads, p.d_k
    heads = []
    for i in range(n):
        cols = slice(i * dk, (i + 1) * dk)
        Q, K, V = X @ p.w_q.values[:, cols], X @ p.w_k.values[:, cols], X @ p.w_v.values[:, cols]
        out = np.zeros((T, dk))
        for t in range(T):
            s = [float(Q[t] @ K[u]) / math.sqrt(dk) if mask[u] else -math.inf for u in range(T)]
            top = max(s)
            e = [math.exp(x - top) if x > -math.inf else 0.0 for x in s]
            w = [x / sum(e) for x in e]
            out[t] = sum(w[u] * V[u] for u in range(T))
        heads.append(out)
    return np.concatenate(heads, axis=1) @ p.w_o.values


def test_mhsa_default_head_width():
    p = L.MultiHeadParams.init(np.random.default_rng(0), 768, 12)
    assert p.d_k == 64


def test_mhsa_singleton_weight():
    p = L.MultiHeadParams.init(np.random.default_rng(1), 8, 2)
    _, w = L.multi_head_self_attention(Tensor(np.ones((1, 1, 8))), p, np.array([1]), return_weights=True)
    assert np.array_equal(w, np.ones((1, 2, 1, 1)))


def test_mhsa_weight_rows_and_masked_columns():
    rng = np.random.default_rng(2)
    p = L.MultiHeadParams.init(rng, 8, 2)
    mask = np.array([[1, 1, 1, 1, 0, 0], [1, 1, 0, 0, 0, 0]], dtype=bool)
    _, w = L.multi_head_self_attention(Tensor(rng.normal(size=(2, 6, 8))), p, mask, return_weights=True)
    assert np.max(np.abs(w.sum(-1) - 1)) < 1e-6
    for b in range(2):
        assert (w[b][..., ~mask[b]] < 1e-12).all()


def test_mhsa_matches_loop_oracle():
    rng = np.random.default_rng(3)
    for _ in range(10):
        p = L.MultiHeadParams.init(rng, 6, 3)
        X = rng.normal(size=(5, 6))
        mask = np.array([1, 1, 1, 1, 0], dtype=bool)
        got = L.multi_head_self_attention(Tensor(X[None]), p, mask).values[0]
        assert np.max(np.abs(got - mhsa_oracle(X, p, mask))) < 1e-12


def test_mhsa_permutation_equivariant():
    rng = np.random.default_rng(4)
    p = L.MultiHeadParams.init(rng, 8, 2)
    X = rng.normal(size=(1, 7, 8))
    perm = rng.permutation(7)
    out = L.multi_head_self_attention(Tensor(X), p, np.ones(7)).values
    out_p = L.multi_head_self_attention(Tensor(X[:, perm]), p, np.ones(7)).values
    assert np.allclose(out[:, perm], out_p, rtol=0, atol=1e-12)


def test_mhsa_mask_length_error():
    p = L.MultiHeadParams.init(np.random.default_rng(5), 8, 2)
    with pytest.raises(ag.DimensionError):
        L.multi_head_self_attention(Tensor(np.ones((1, 3, 8))), p, np.ones(4))


def test_heads_must_divide_width():
    with pytest.raises(ValueError):
        L.MultiHeadParams.init(np.random.default_rng(0), 10, 3)


# ---------------------------------------------------------------- encoder


def layer_norm_np(x, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(((x - mu) ** 2).mean(-1, keepdims=True) + eps)


def test_encoder_zeroed_sublayers_reduce_to_layernorms():
    rng = np.random.default_rng(6)
    blk = L.EncoderBlockParams.init(rng, 8, 2)
    for t in (blk.attn.w_v, blk.attn.w_o, blk.ff_w1, blk.ff_w2):
        t.values = np.zeros(t.shape)
    X = rng.normal(size=(2, 5, 8))
    got = L.encoder_forward(Tensor(X), [blk]).values
    assert np.allclose(got, layer_norm_np(layer_norm_np(X)), rtol=0, atol=1e-12)


@pytest.mark.parametrize("T,blocks", [(1, 1), (3, 2), (17, 3), (32, 2)])
def test_encoder_shape_contract(T, blocks):
    rng = np.random.default_rng(T)
    params = [L.EncoderBlockParams.init(rng, 8, 2) for _ in range(blocks)]
    assert L.encoder_forward(Tensor(rng.normal(size=(2, T, 8))), params).shape == (2, T, 8)


def test_encoder_needs_a_block():
    with pytest.raises(ValueError):
        L.encoder_forward(Tensor(np.ones((1, 2, 4))), [])


def test_encoder_block_grad_check_small():
    rng = np.random.default_rng(7)
    blk = L.EncoderBlockParams.init(rng, 8, 2)
    X = Tensor.parameter(rng.normal(size=(1, 3, 8)))
    R = Tensor(rng.normal(size=(1, 3, 8)))
    params = [t for _, t in blk.named_tensors()] + [X]
    assert ag.grad_check(lambda: ag.sum_all(ag.mul(L.encoder_block(X, blk), R)), params) < 1e-4


# ---------------------------------------------------------------- convolution / pooling


def conv_oracle(X, W, b):
    """Equal-width convolution with explicit zero padding, four nested loops."""
    L_, C = X.shape
    M, _, O = W.shape
    n = (M - 1) // 2
    out = np.zeros((L_, O))
    for pos in range(L_):
        for o in range(O):
            s = b[o]
            for k in range(M):
                src = pos + k - n
                if 0 <= src < L_:
                    for c in range(C):
                        s += W[k, c, o] * X[src, c]
            out[pos, o] = s
    return out


def test_conv_padding_rule_keeps_length():
    M = 3
    assert (M - 1) // 2 == 1
    p = L.ConvParams.init(np.random.default_rng(0), M, 2, 5)
    for length in (1, 2, 7):
        assert L.equal_width_conv(Tensor(np.ones((1, length, 2))), p).shape == (1, length, 5)


def test_conv_delta_kernel_is_identity():
    W = np.zeros((3, 4, 4))
    W[1] = np.eye(4)
    p = L.ConvParams(Tensor(W), Tensor(np.zeros(4)))
    X = np.random.default_rng(1).normal(size=(2, 6, 4))
    assert np.array_equal(L.equal_width_conv(Tensor(X), p).values, X)


def test_conv_matches_loop_oracle():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        X, W, b = rng.normal(size=(5, 2)), rng.normal(size=(3, 2, 3)), rng.normal(size=3)
        got = L.equal_width_conv(Tensor(X[None]), L.ConvParams(Tensor(W), Tensor(b))).values[0]
        assert np.max(np.abs(got - conv_oracle(X, W, b))) < 1e-12


def pool_oracle(X):
    L_ = X.shape[0]
    out = []
    for j in range((L_ + 1) // 2):
        window = [X[i] for i in range(2 * j, min(2 * j + 3, L_))]
        out.append(np.max(window, axis=0))
    return np.array(out)


def test_pool_halves_32():
    assert L.halving_pool(Tensor(np.zeros((1, 32, 3)))).shape == (1, 16, 3)


def test_pool_single_position():
    X = np.array([[[2.5, -1.0]]])
    assert np.array_equal(L.halving_pool(Tensor(X)).values, X)


def test_pool_matches_loop_oracle():
    rng = np.random.default_rng(11)
    for _ in range(100):
        length = int(rng.integers(1, 34))
        X = rng.normal(size=(length, 3))
        got = L.halving_pool(Tensor(X[None])).values[0]
        assert np.array_equal(got, pool_oracle(X))


# ---------------------------------------------------------------- DPCNN


def test_dpcnn_pyramid_at_32():
    p = L.ConvStackParams.init(np.random.default_rng(0), 4, 6, 32)
    out, trace = L.dpcnn_forward(Tensor(np.ones((1, 32, 4))), p, return_trace=True)
    assert trace.lengths == [32, 16, 8, 4, 2]
    assert len(p.blocks) == 4
    assert out.shape == (1, 6)


def test_dpcnn_zero_blocks_are_identity():
    rng = np.random.default_rng(1)
    p = L.ConvStackParams.init(rng, 3, 4, 16)
    for blk in p.blocks:
        for t in (blk.conv1.W, blk.conv1.b, blk.conv2.W, blk.conv2.b):
            t.values = np.zeros(t.shape)
    p.region.b.values = rng.normal(size=4)
    X = rng.normal(size=(13, 3))
    z = conv_oracle(X, p.region.W.values, p.region.b.values)
    while z.shape[0] > 2:
        z = pool_oracle(z)
    got = L.dpcnn_forward(Tensor(X[None]), p).values[0]
    assert np.allclose(got, z.max(axis=0), rtol=0, atol=1e-12)


def test_dpcnn_output_width_independent_of_length():
    p = L.ConvStackParams.init(np.random.default_rng(2), 4, 250, 32)
    for T in (1, 2, 3, 9, 32):
        assert L.dpcnn_forward(Tensor(np.ones((1, T, 4))), p).shape == (1, 250)


def test_dpcnn_refuses_longer_than_allocated():
    p = L.ConvStackParams.init(np.random.default_rng(3), 2, 3, 8)
    with pytest.raises(ag.DimensionError):
        L.dpcnn_forward(Tensor(np.ones((1, 20, 2))), p)


def test_dpcnn_cost_is_geometric():
    p = L.ConvStackParams.init(np.random.default_rng(4), 4, 5, 64)
    for T in range(1, 65):
        _, trace = L.dpcnn_forward(Tensor(np.ones((1, T, 4))), p, return_trace=True)
        level0 = 2 * T * 3 * 5 * 5  # one block's two convs at full length
        assert sum(trace.conv_macs[1:]) <= 2 * level0
        depth, n = 0, T
        while n > 2:
            n, depth = -(-n // 2), depth + 1
        assert len(trace.lengths) - 1 == depth


# ---------------------------------------------------------------- gradient checks per layer


@pytest.mark.parametrize("layer", LAYERS)
def test_layer_grad_checks_small_shapes(layer):
    worst = max(r.error for seed in range(3) for d, T in ((4, 3), (6, 5)) for r in check_layer(layer, seed, d, T))
    assert worst < 1e-4
