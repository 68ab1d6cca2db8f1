"""Layer mathematics: LSTM/BiLSTM, attention pooling, multi-head self-attention
with a Transformer encoder block, and the DPCNN convolution stack.

All layers take batched input with the sequence on axis 1, i.e. ``(B, T, d)``.
Parameters are plain dataclasses of :class:`~dcebad.autograd.Tensor` leaves;
nothing here holds mutable state between calls.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import autograd as ag
from .autograd import DimensionError, Tensor


def xavier(rng: np.random.Generator, shape, fan_in: int, fan_out: int, name: str) -> Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor.parameter(rng.uniform(-bound, bound, size=shape), name=name)


def zeros(shape, name: str) -> Tensor:
    return Tensor.parameter(np.zeros(shape), name=name)


def _tensors(obj, prefix: str):
    """Yield ``(name, tensor)`` pairs of a params dataclass, recursing into lists."""
    for f in fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if isinstance(value, Tensor):
            yield key, value
        elif isinstance(value, list):
            for i, item in enumerate(value):
                yield from _tensors(item, f"{key}.{i}.")
        elif value is not None and hasattr(value, "__dataclass_fields__"):
            yield from _tensors(value, key + ".")


class Params:
    def named_tensors(self, prefix: str = ""):
        return list(_tensors(self, prefix))


# ---------------------------------------------------------------- LSTM


@dataclass
class LstmParams(Params):
    """Gate weights act on the concatenation ``[h_{t-1}, x_t]``."""

    W_i: Tensor
    W_f: Tensor
    W_c: Tensor
    W_o: Tensor
    b_i: Tensor
    b_f: Tensor
    b_c: Tensor
    b_o: Tensor

    @property
    def hidden(self) -> int:
        return self.W_i.shape[0]

    @property
    def input_size(self) -> int:
        return self.W_i.shape[1] - self.W_i.shape[0]

    @classmethod
    def init(cls, rng: np.random.Generator, input_size: int, hidden: int) -> "LstmParams":
        shape = (hidden, hidden + input_size)
        ws = {k: xavier(rng, shape, hidden + input_size, hidden, k) for k in ("W_i", "W_f", "W_c", "W_o")}
        bs = {k: zeros(hidden, k) for k in ("b_i", "b_c", "b_o")}
        bs["b_f"] = Tensor.parameter(np.ones(hidden), name="b_f")
        return cls(**ws, **bs)


def lstm_step(x_t: Tensor, h_prev: Tensor, c_prev: Tensor, p: LstmParams) -> tuple[Tensor, Tensor]:
    """One LSTM cell update on a batch of rows ``x_t (B, input)``."""
    if x_t.shape[-1] != p.input_size or h_prev.shape[-1] != p.hidden or c_prev.shape != h_prev.shape:
        raise DimensionError(
            f"lstm_step: x {x_t.shape}, h {h_prev.shape}, c {c_prev.shape} "
            f"vs params (hidden={p.hidden}, input={p.input_size})"
        )
    z = ag.concat_last(h_prev, x_t)
    i = ag.sigmoid(ag.add(ag.matmul(z, ag.transpose(p.W_i)), p.b_i))
    f = ag.sigmoid(ag.add(ag.matmul(z, ag.transpose(p.W_f)), p.b_f))
    c_tilde = ag.tanh(ag.add(ag.matmul(z, ag.transpose(p.W_c)), p.b_c))
    o = ag.sigmoid(ag.add(ag.matmul(z, ag.transpose(p.W_o)), p.b_o))
    c_t = ag.add(ag.mul(f, c_prev), ag.mul(i, c_tilde))
    h_t = ag.mul(o, ag.tanh(c_t))
    return h_t, c_t


def lstm_sequence(
    X: Tensor, p: LstmParams, mask: np.ndarray | None = None, reverse: bool = False
) -> tuple[Tensor, Tensor]:
    """Run an LSTM over ``X (B, T, input)`` from zero state.

    Returns per-position hidden states ``(B, T, hidden)`` aligned with the
    input positions, and the final hidden state ``(B, hidden)``. Where
    ``mask`` is 0 the state is carried through unchanged, so right padding
    never leaks into either direction.

    Same arithmetic as :func:`lstm_step`, with the four gate matrices fused
    and the input projection hoisted out of the time loop.
    """
    B, T, _ = X.shape
    if T < 1:
        raise DimensionError("lstm over an empty sequence")
    if X.shape[-1] != p.input_size:
        raise DimensionError(f"lstm: input width {X.shape[-1]} != {p.input_size}")
    H = p.hidden
    W = ag.transpose(ag.concat((p.W_i, p.W_f, p.W_c, p.W_o), axis=0))  # (H+in, 4H)
    W_h, W_x = W[:H], W[H:]
    b = ag.concat((p.b_i, p.b_f, p.b_c, p.b_o))
    proj = ag.reshape(
        ag.add(ag.matmul(ag.reshape(X, (B * T, -1)), W_x), b), (B, T, 4 * H)
    )
    h = Tensor(np.zeros((B, H)))
    c = Tensor(np.zeros((B, H)))
    outs: list[Tensor | None] = [None] * T
    order = range(T - 1, -1, -1) if reverse else range(T)
    for t in order:
        gates = ag.add(ag.matmul(h, W_h), proj[:, t])
        ifo = ag.sigmoid(gates[:, : 2 * H])
        i, f = ifo[:, :H], ifo[:, H:]
        o = ag.sigmoid(gates[:, 3 * H :])
        c_tilde = ag.tanh(gates[:, 2 * H : 3 * H])
        c_new = ag.add(ag.mul(f, c), ag.mul(i, c_tilde))
        h_new = ag.mul(o, ag.tanh(c_new))
        if mask is not None and not mask[:, t].all():
            m = mask[:, t].astype(float)
            h_new = ag.add(ag.mask_rows(h_new, m), ag.mask_rows(h, 1.0 - m))
            c_new = ag.add(ag.mask_rows(c_new, m), ag.mask_rows(c, 1.0 - m))
        h, c = h_new, c_new
        outs[t] = h
    return ag.stack(outs, axis=1), h


def bilstm(
    X: Tensor, fwd: LstmParams, bwd: LstmParams, mask: np.ndarray | None = None
) -> Tensor:
    """Forward and backward LSTM outputs spliced per position: ``(B, T, 2*hidden)``."""
    if fwd.hidden != bwd.hidden:
        raise DimensionError("bilstm: directions disagree on hidden size")
    hf, _ = lstm_sequence(X, fwd, mask)
    hb, _ = lstm_sequence(X, bwd, mask, reverse=True)
    return ag.concat_last(hf, hb)


def bilstm_with_finals(
    X: Tensor, fwd: LstmParams, bwd: LstmParams, mask: np.ndarray | None = None
) -> tuple[Tensor, Tensor]:
    hf, last_f = lstm_sequence(X, fwd, mask)
    hb, last_b = lstm_sequence(X, bwd, mask, reverse=True)
    return ag.concat_last(hf, hb), ag.concat_last(last_f, last_b)


# ---------------------------------------------------------------- attention pooling


@dataclass
class AttnPoolParams(Params):
    W_g: Tensor
    b_g: Tensor
    v: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, hidden: int, att: int | None = None) -> "AttnPoolParams":
        att = att or hidden
        return cls(
            W_g=xavier(rng, (att, hidden), hidden, att, "W_g"),
            b_g=zeros(att, "b_g"),
            v=xavier(rng, (att,), att, 1, "v"),
        )


def attention_pool(
    H: Tensor, p: AttnPoolParams, mask: np.ndarray | None = None
) -> tuple[Tensor, Tensor]:
    """Collapse ``H (B, T, d)`` into one vector per row.

    u_t = tanh(W_g H_t + b_g), s_t = v . u_t, a = softmax(s), R = sum_t a_t H_t.
    Returns ``(R (B, d), a (B, T))``.
    """
    B, T, d = H.shape
    if p.W_g.shape[1] != d:
        raise DimensionError(f"attention_pool: W_g {p.W_g.shape} vs width {d}")
    u = ag.tanh(ag.add(ag.matmul(H, ag.transpose(p.W_g)), p.b_g))
    s = ag.reshape(ag.matmul(u, ag.reshape(p.v, (-1, 1))), (B, T))
    a = ag.softmax_rows(s, mask)
    R = ag.reshape(ag.matmul(ag.reshape(a, (B, 1, T)), H), (B, d))
    return R, a


# ---------------------------------------------------------------- self-attention / encoder


@dataclass
class MultiHeadParams(Params):
    """Projections for all heads side by side: head ``i`` owns columns
    ``i*d_k:(i+1)*d_k`` of ``w_q``/``w_k``/``w_v``."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    heads: int = 1

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_k(self) -> int:
        return self.d_model // self.heads

    @classmethod
    def init(cls, rng: np.random.Generator, d_model: int, heads: int) -> "MultiHeadParams":
        if d_model % heads:
            raise ValueError(f"{heads} heads do not divide d_model={d_model}")
        d_k = d_model // heads
        mk = lambda n: xavier(rng, (d_model, d_model), d_model, d_k, n)  # noqa: E731
        return cls(mk("w_q"), mk("w_k"), mk("w_v"),
                   xavier(rng, (d_model, d_model), d_model, d_model, "w_o"), heads)


def _pad_mask(pad_mask, B: int, T: int) -> np.ndarray:
    if pad_mask is None:
        return np.ones((B, T), dtype=bool)
    m = np.asarray(pad_mask, dtype=bool)
    if m.ndim == 1:
        m = np.broadcast_to(m, (B, m.shape[0]))
    if m.shape[-1] != T:
        raise DimensionError(f"pad mask length {m.shape[-1]} != sequence length {T}")
    return m


def multi_head_self_attention(
    X: Tensor, p: MultiHeadParams, pad_mask=None, return_weights: bool = False
):
    """Scaled dot-product attention per head, heads concatenated then projected.

    Keys at padded positions get zero weight. With ``return_weights`` the
    attention matrix ``(B, heads, T, T)`` is returned as a numpy array too.
    """
    B, T, D = X.shape
    if D != p.d_model:
        raise DimensionError(f"attention: width {D} != d_model {p.d_model}")
    n, dk = p.heads, p.d_k
    mask = _pad_mask(pad_mask, B, T)
    flat = ag.reshape(X, (B * T, D))

    def split(w):
        y = ag.reshape(ag.matmul(flat, w), (B, T, n, dk))
        return ag.reshape(ag.transpose(y, (0, 2, 1, 3)), (B * n, T, dk))

    q, k, v = split(p.w_q), split(p.w_k), split(p.w_v)
    scores = ag.scale(ag.matmul(q, ag.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dk))
    key_mask = np.repeat(mask, n, axis=0)[:, None, :]
    weights = ag.softmax_rows(scores, key_mask)
    ctx = ag.matmul(weights, v)  # (B*n, T, dk)
    ctx = ag.reshape(ag.transpose(ag.reshape(ctx, (B, n, T, dk)), (0, 2, 1, 3)), (B * T, D))
    out = ag.reshape(ag.matmul(ctx, p.w_o), (B, T, D))
    if return_weights:
        return out, weights.values.reshape(B, n, T, T)
    return out


@dataclass
class EncoderBlockParams(Params):
    attn: MultiHeadParams
    ff_w1: Tensor
    ff_b1: Tensor
    ff_w2: Tensor
    ff_b2: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor

    @classmethod
    def init(cls, rng, d_model: int, heads: int, d_ff: int | None = None) -> "EncoderBlockParams":
        d_ff = d_ff or 4 * d_model
        return cls(
            attn=MultiHeadParams.init(rng, d_model, heads),
            ff_w1=xavier(rng, (d_model, d_ff), d_model, d_ff, "ff_w1"),
            ff_b1=zeros(d_ff, "ff_b1"),
            ff_w2=xavier(rng, (d_ff, d_model), d_ff, d_model, "ff_w2"),
            ff_b2=zeros(d_model, "ff_b2"),
            ln1_g=Tensor.parameter(np.ones(d_model), "ln1_g"),
            ln1_b=zeros(d_model, "ln1_b"),
            ln2_g=Tensor.parameter(np.ones(d_model), "ln2_g"),
            ln2_b=zeros(d_model, "ln2_b"),
        )


def encoder_block(X: Tensor, p: EncoderBlockParams, pad_mask=None) -> Tensor:
    B, T, D = X.shape
    X = ag.layer_norm(ag.add(X, multi_head_self_attention(X, p.attn, pad_mask)), p.ln1_g, p.ln1_b)
    hidden = ag.relu(ag.add(ag.matmul(ag.reshape(X, (B * T, D)), p.ff_w1), p.ff_b1))
    ff = ag.reshape(ag.add(ag.matmul(hidden, p.ff_w2), p.ff_b2), (B, T, D))
    return ag.layer_norm(ag.add(X, ff), p.ln2_g, p.ln2_b)


def encoder_forward(X: Tensor, blocks: list[EncoderBlockParams], pad_mask=None) -> Tensor:
    if not blocks:
        raise ValueError("encoder needs at least one block")
    for blk in blocks:
        X = encoder_block(X, blk, pad_mask)
    return X


# ---------------------------------------------------------------- convolutions


@dataclass
class ConvParams(Params):
    """Filter bank ``W (width, C_in, C_out)`` and bias ``(C_out,)``."""

    W: Tensor
    b: Tensor

    @classmethod
    def init(cls, rng, width: int, c_in: int, c_out: int) -> "ConvParams":
        return cls(xavier(rng, (width, c_in, c_out), width * c_in, width * c_out, "W"), zeros(c_out, "b"))


def conv1d(X: Tensor, p: ConvParams, pad_left: int, pad_right: int) -> Tensor:
    """Stride-1 convolution over the sequence axis via shifted-window concat."""
    B, L, C = X.shape
    M, c_in, c_out = p.W.shape
    if c_in != C:
        raise DimensionError(f"conv1d: input channels {C} != filter channels {c_in}")
    Xp = ag.pad_seq(X, pad_left, pad_right) if pad_left or pad_right else X
    out_len = L + pad_left + pad_right - M + 1
    if out_len < 1:
        raise DimensionError(f"conv1d: sequence of {L} too short for width {M}")
    cols = ag.concat([Xp[:, k : k + out_len] for k in range(M)], axis=-1)  # (B, out_len, M*C)
    W = ag.reshape(p.W, (M * c_in, c_out))
    y = ag.add(ag.matmul(ag.reshape(cols, (B * out_len, M * c_in)), W), p.b)
    return ag.reshape(y, (B, out_len, c_out))


def equal_width_conv(F: Tensor, p: ConvParams) -> Tensor:
    """Zero-pad (M-1)/2 on each side so the output keeps length L."""
    M = p.W.shape[0]
    if M % 2 != 1:
        raise DimensionError(f"equal-width convolution needs an odd width, got {M}")
    n = (M - 1) // 2
    return conv1d(F, p, n, n)


def halving_pool(F: Tensor) -> Tensor:
    return ag.max_pool_halving(F)


def halved(length: int) -> int:
    return (length + 1) // 2


def pyramid_lengths(T: int) -> list[int]:
    """Sequence lengths seen by the DPCNN: T, then ceil(L/2) while L > 2."""
    lengths = [T]
    while lengths[-1] > 2:
        lengths.append(halved(lengths[-1]))
    return lengths


@dataclass
class ResidualBlockParams(Params):
    conv1: ConvParams
    conv2: ConvParams


@dataclass
class ConvStackParams(Params):
    region: ConvParams
    blocks: list[ResidualBlockParams]

    @property
    def num_filters(self) -> int:
        return self.region.W.shape[2]

    @classmethod
    def init(cls, rng, c_in: int, num_filters: int, max_len: int, width: int = 3) -> "ConvStackParams":
        region = ConvParams.init(rng, width, c_in, num_filters)
        depth = len(pyramid_lengths(max_len)) - 1
        blocks = [
            ResidualBlockParams(
                ConvParams.init(rng, width, num_filters, num_filters),
                ConvParams.init(rng, width, num_filters, num_filters),
            )
            for _ in range(depth)
        ]
        return cls(region, blocks)


@dataclass
class PyramidTrace:
    lengths: list[int]
    # multiply-adds of every convolution, level by level (level 0 = region embedding)
    conv_macs: list[int]


def dpcnn_forward(X: Tensor, p: ConvStackParams, return_trace: bool = False):
    """Region embedding, then {halve, two pre-activated convs, shortcut} until
    the length is at most 2, then a global max over positions -> ``(B, F)``."""
    B, T, C = X.shape
    if T < 1:
        raise DimensionError("dpcnn over an empty sequence")
    depth = len(pyramid_lengths(T)) - 1
    if depth > len(p.blocks):
        raise DimensionError(f"dpcnn: length {T} needs {depth} blocks, params have {len(p.blocks)}")
    M, _, nf = p.region.W.shape
    z = equal_width_conv(X, p.region)
    lengths, macs = [T], [T * M * C * nf]
    for blk in p.blocks[:depth]:
        z = halving_pool(z)
        L = z.shape[1]
        y = equal_width_conv(ag.relu(z), blk.conv1)
        y = equal_width_conv(ag.relu(y), blk.conv2)
        z = ag.add(z, y)
        lengths.append(L)
        macs.append(2 * L * M * nf * nf)
    out = ag.max_reduce(z, axis=1)
    if return_trace:
        return out, PyramidTrace(lengths, macs)
    return out


# ---------------------------------------------------------------- classic TextCNN baseline


@dataclass
class TextCnnParams(Params):
    banks: list[ConvParams]

    @classmethod
    def init(cls, rng, c_in: int, widths=(2, 3, 4), filters: int = 100) -> "TextCnnParams":
        return cls([ConvParams.init(rng, w, c_in, filters) for w in widths])

    @property
    def out_dim(self) -> int:
        return sum(b.W.shape[2] for b in self.banks)


def text_cnn(X: Tensor, p: TextCnnParams) -> Tensor:
    """Valid convolutions of several widths, relu, global max over time."""
    L = X.shape[1]
    feats = []
    for bank in p.banks:
        M = bank.W.shape[0]
        y = ag.relu(conv1d(X, bank, 0, max(0, M - L)))
        feats.append(ag.max_reduce(y, axis=1))
    return ag.concat(feats, axis=-1)


# ---------------------------------------------------------------- classifier


@dataclass
class AffineParams(Params):
    W: Tensor
    b: Tensor

    @classmethod
    def init(cls, rng, d_in: int, d_out: int) -> "AffineParams":
        return cls(xavier(rng, (d_in, d_out), d_in, d_out, "W"), zeros(d_out, "b"))


def affine(x: Tensor, p: AffineParams) -> Tensor:
    return ag.add(ag.matmul(x, p.W), p.b)
