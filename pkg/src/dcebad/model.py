"""The dual-channel classifier and its ablation variants behind one interface."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import autograd as ag
from . import layers as L
from .autograd import Tensor
from .data import Batch

# variant -> (uses encoder, sentence-vector parts)
VARIANTS: dict[str, tuple[bool, tuple[str, ...]]] = {
    "lstm": (False, ("lstm",)),
    "cnn": (False, ("cnn",)),
    "dpcnn": (False, ("dpcnn",)),
    "bilstm": (False, ("bilstm",)),
    "bilstm_at": (False, ("bilstm_at",)),
    "bilstm_at_dpcnn": (False, ("bilstm_at", "dpcnn")),
    "enc_bilstm_at": (True, ("bilstm_at",)),
    "enc_dpcnn": (True, ("dpcnn",)),
    "dc_ebad": (True, ("bilstm_at", "dpcnn")),
}

# Display names in the order of the comparison table.
VARIANT_TITLES = {
    "lstm": "LSTM",
    "cnn": "CNN",
    "dpcnn": "DPCNN",
    "bilstm": "BiLSTM",
    "bilstm_at": "BiLSTM-AT",
    "bilstm_at_dpcnn": "BiLSTM-AT-DPCNN",
    "enc_bilstm_at": "ENC-BiLSTM-AT",
    "enc_dpcnn": "ENC-DPCNN",
    "dc_ebad": "DC-EBAD",
}


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    variant: str = "dc_ebad"
    vocab_size: int = 4
    d_model: int = 768
    r_hidden: int = 256
    num_layers: int = 2
    num_filters: int = 250
    kernel_size: int = 3
    encoder_blocks: int | None = 2
    encoder_heads: int | None = 12
    d_ff: int | None = None
    cnn_widths: tuple[int, ...] = (2, 3, 4)
    cnn_filters: int = 100
    num_classes: int = 10
    text_size: int = 32
    dropout: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.cnn_widths = tuple(self.cnn_widths)

    @property
    def uses_encoder(self) -> bool:
        return VARIANTS[self.variant][0]

    @property
    def parts(self) -> tuple[str, ...]:
        return VARIANTS[self.variant][1]

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if self.text_size < 3:
            raise ConfigError("text_size must leave room for [CLS], [SEP] and one token (>= 3)")
        if self.vocab_size < 4:
            raise ConfigError("vocab_size must cover the 4 reserved tokens")
        for name in ("d_model", "r_hidden", "num_layers", "num_filters", "num_classes", "cnn_filters"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be a positive odd number")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        has_enc = self.encoder_blocks is not None or self.encoder_heads is not None
        if self.uses_encoder:
            if not self.encoder_blocks or not self.encoder_heads:
                raise ConfigError(f"variant {self.variant!r} needs encoder_blocks and encoder_heads")
            if self.d_model % self.encoder_heads:
                raise ConfigError(f"{self.encoder_heads} heads do not divide d_model={self.d_model}")
        elif has_enc:
            raise ConfigError(f"variant {self.variant!r} has no encoder; unset encoder_blocks/encoder_heads")

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["cnn_widths"] = list(self.cnn_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def for_variant(self, variant: str, encoder_blocks: int = 2, encoder_heads: int = 12) -> "ModelConfig":
        """Same dimensions, different variant. Encoder fields are dropped when the
        variant has no encoder and filled from the arguments when missing."""
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
        cfg = dataclasses.replace(self, variant=variant)
        if not VARIANTS[variant][0]:
            cfg.encoder_blocks = cfg.encoder_heads = None
        else:
            cfg.encoder_blocks = cfg.encoder_blocks or encoder_blocks
            cfg.encoder_heads = cfg.encoder_heads or encoder_heads
        return cfg


@dataclass
class Model:
    config: ModelConfig
    token_embed: Tensor
    segment_embed: Tensor | None = None
    position_embed: Tensor | None = None
    encoder: list[L.EncoderBlockParams] | None = None
    lstm: list[L.LstmParams] | None = None
    bilstm: list[tuple[L.LstmParams, L.LstmParams]] | None = None
    attn_pool: L.AttnPoolParams | None = None
    dpcnn: L.ConvStackParams | None = None
    cnn: L.TextCnnParams | None = None
    classifier: L.AffineParams = field(default=None)  # type: ignore[assignment]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("embed.token", self.token_embed)]
        if self.segment_embed is not None:
            out += [("embed.segment", self.segment_embed), ("embed.position", self.position_embed)]
        for i, blk in enumerate(self.encoder or []):
            out += blk.named_tensors(f"encoder.{i}.")
        for i, p in enumerate(self.lstm or []):
            out += p.named_tensors(f"lstm.{i}.")
        for i, (f, b) in enumerate(self.bilstm or []):
            out += f.named_tensors(f"bilstm.{i}.fwd.") + b.named_tensors(f"bilstm.{i}.bwd.")
        if self.attn_pool is not None:
            out += self.attn_pool.named_tensors("attn_pool.")
        if self.dpcnn is not None:
            out += self.dpcnn.named_tensors("dpcnn.")
        if self.cnn is not None:
            out += self.cnn.named_tensors("cnn.")
        out += self.classifier.named_tensors("classifier.")
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.values.copy() for name, t in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        named = dict(self.named_parameters())
        if set(named) != set(state):
            missing, extra = set(named) - set(state), set(state) - set(named)
            raise KeyError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, t in named.items():
            if state[name].shape != t.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {t.shape}")
            t.values = np.array(state[name], dtype=np.float64)

    @property
    def sentence_width(self) -> int:
        return self.classifier.W.shape[0]


def sentence_width(config: ModelConfig) -> int:
    width = {
        "lstm": config.r_hidden,
        "cnn": config.cnn_filters * len(config.cnn_widths),
        "dpcnn": config.num_filters,
        "bilstm": 2 * config.r_hidden,
        "bilstm_at": 2 * config.r_hidden,
    }
    return sum(width[p] for p in config.parts)


def build(config: ModelConfig) -> Model:
    """Allocate the parameters ``config.variant`` needs, deterministically from ``config.seed``."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    d = config.d_model

    def normal(shape, name):
        return Tensor.parameter(rng.normal(0.0, 0.02, size=shape), name=name)

    model = Model(config, token_embed=normal((config.vocab_size, d), "token"))
    if config.uses_encoder:
        model.segment_embed = normal((1, d), "segment")
        model.position_embed = normal((config.text_size, d), "position")
        model.encoder = [
            L.EncoderBlockParams.init(rng, d, config.encoder_heads, config.d_ff)
            for _ in range(config.encoder_blocks)
        ]
    parts = config.parts
    H = config.r_hidden
    if "lstm" in parts:
        model.lstm = [L.LstmParams.init(rng, d if i == 0 else H, H) for i in range(config.num_layers)]
    if "bilstm" in parts or "bilstm_at" in parts:
        model.bilstm = [
            (
                L.LstmParams.init(rng, d if i == 0 else 2 * H, H),
                L.LstmParams.init(rng, d if i == 0 else 2 * H, H),
            )
            for i in range(config.num_layers)
        ]
    if "bilstm_at" in parts:
        model.attn_pool = L.AttnPoolParams.init(rng, 2 * H)
    if "dpcnn" in parts:
        model.dpcnn = L.ConvStackParams.init(rng, d, config.num_filters, config.text_size, config.kernel_size)
    if "cnn" in parts:
        model.cnn = L.TextCnnParams.init(rng, d, config.cnn_widths, config.cnn_filters)
    model.classifier = L.AffineParams.init(rng, sentence_width(config), config.num_classes)
    return model


def input_embedding(model: Model, ids: np.ndarray) -> Tensor:
    """Token + segment + position embeddings, summed. Segment id is always 0."""
    ids = np.asarray(ids, dtype=np.int64)
    B, T = ids.shape
    if T > model.position_embed.shape[0]:
        raise ag.DimensionError(f"sequence length {T} exceeds position table {model.position_embed.shape[0]}")
    positions = np.broadcast_to(np.arange(T), (B, T))
    segments = np.zeros((B, T), dtype=np.int64)
    return ag.add(
        ag.add(ag.gather_rows(model.token_embed, ids), ag.gather_rows(model.segment_embed, segments)),
        ag.gather_rows(model.position_embed, positions),
    )


def sentence_vector(model: Model, ids: np.ndarray, mask: np.ndarray) -> Tensor:
    """Everything up to (not including) dropout and the classifier."""
    cfg = model.config
    ids = np.asarray(ids, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if ids.ndim != 2 or ids.shape != mask.shape:
        raise ag.DimensionError(f"batch ids {ids.shape} / mask {mask.shape} must be matching (B, T)")
    if ids.shape[1] > cfg.text_size:
        raise ag.DimensionError(f"batch length {ids.shape[1]} > text_size {cfg.text_size}")
    if cfg.uses_encoder:
        X = L.encoder_forward(input_embedding(model, ids), model.encoder, mask)
    else:
        X = ag.gather_rows(model.token_embed, ids)
    feats = []
    for part in cfg.parts:
        if part == "lstm":
            h = X
            for p in model.lstm:
                h, last = L.lstm_sequence(h, p, mask)
            feats.append(last)
        elif part in ("bilstm", "bilstm_at"):
            h = X
            for f, b in model.bilstm:
                h, last = L.bilstm_with_finals(h, f, b, mask)
            feats.append(last if part == "bilstm" else L.attention_pool(h, model.attn_pool, mask)[0])
        elif part == "dpcnn":
            feats.append(L.dpcnn_forward(ag.mask_rows(X, mask), model.dpcnn))
        elif part == "cnn":
            feats.append(L.text_cnn(ag.mask_rows(X, mask), model.cnn))
    return feats[0] if len(feats) == 1 else ag.concat(feats, axis=-1)


def forward(
    model: Model, batch: Batch, training: bool = False, rng: np.random.Generator | None = None
) -> Tensor:
    """Logits ``(B, num_classes)``; softmax is left to the loss / :func:`predict`."""
    z = sentence_vector(model, batch.ids, batch.mask)
    z = ag.dropout(z, model.config.dropout, rng, training)
    return L.affine(z, model.classifier)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict(model: Model, ids: np.ndarray, mask: np.ndarray | None = None) -> tuple[int, np.ndarray]:
    """Label (ties go to the lowest index) and class probabilities for one encoded row."""
    ids = np.asarray(ids, dtype=np.int64).reshape(1, -1)
    mask = ids != 0 if mask is None else np.asarray(mask, dtype=bool).reshape(1, -1)
    with ag.no_grad():
        logits = forward(model, Batch(ids, mask, np.zeros(1, dtype=np.int64))).values[0]
    probs = softmax(logits)
    return int(np.argmax(logits)), probs

