"""Central-difference checks of every layer and of whole models."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autograd as ag
from . import layers as L
from .autograd import Tensor
from .data import Dataset
from .model import ModelConfig, build, forward
from .training import cross_entropy

TOLERANCE = 1e-4

LAYERS = (
    "lstm_step",
    "bilstm",
    "attention_pool",
    "multi_head_self_attention",
    "encoder_block",
    "equal_width_conv",
    "halving_pool",
    "dpcnn_forward",
    "classifier",
    "cross_entropy",
)


@dataclass
class CheckResult:
    layer: str
    tensor: str
    error: float

    @property
    def passed(self) -> bool:
        return self.error < TOLERANCE


def _projected(out: Tensor, rng: np.random.Generator) -> Tensor:
    return ag.sum_all(ag.mul(out, Tensor(rng.normal(size=out.shape))))


def _param(rng, *shape, name: str) -> Tensor:
    return Tensor.parameter(rng.normal(size=shape), name=name)


def _ragged_mask(B: int, T: int) -> np.ndarray:
    mask = np.ones((B, T), dtype=bool)
    if B > 1 and T > 2:
        mask[-1, T - T // 3 :] = False
    return mask


def _layer_case(layer: str, rng: np.random.Generator, d: int, T: int):
    """Return ``(f, named tensors)`` for one layer on random inputs."""
    B, H = 2, max(2, d // 2)
    mask = _ragged_mask(B, T)
    if layer == "lstm_step":
        p = L.LstmParams.init(rng, d, H)
        x, h, c = _param(rng, B, d, name="x"), _param(rng, B, H, name="h"), _param(rng, B, H, name="c")
        return (lambda: _projected(L.lstm_step(x, h, c, p)[0], np.random.default_rng(1))
                + _projected(L.lstm_step(x, h, c, p)[1], np.random.default_rng(2))), \
            p.named_tensors() + [("x_t", x), ("h_prev", h), ("c_prev", c)]
    if layer == "bilstm":
        fwd, bwd = L.LstmParams.init(rng, d, H), L.LstmParams.init(rng, d, H)
        X = _param(rng, B, T, d, name="X")
        return (lambda: _projected(L.bilstm(X, fwd, bwd, mask), np.random.default_rng(1))), \
            fwd.named_tensors("fwd.") + bwd.named_tensors("bwd.") + [("X", X)]
    if layer == "attention_pool":
        p = L.AttnPoolParams.init(rng, d)
        X = _param(rng, B, T, d, name="H")
        return (lambda: _projected(L.attention_pool(X, p, mask)[0], np.random.default_rng(1))), \
            p.named_tensors() + [("H", X)]
    if layer == "multi_head_self_attention":
        p = L.MultiHeadParams.init(rng, d, 2)
        X = _param(rng, B, T, d, name="X")
        return (lambda: _projected(L.multi_head_self_attention(X, p, mask), np.random.default_rng(1))), \
            p.named_tensors() + [("X", X)]
    if layer == "encoder_block":
        p = L.EncoderBlockParams.init(rng, d, 2)
        for _, t in p.named_tensors():
            if t.name and t.name.startswith(("ff_b", "ln")):
                t.values += rng.normal(scale=0.1, size=t.shape)
        X = _param(rng, B, T, d, name="X")
        return (lambda: _projected(L.encoder_block(X, p, mask), np.random.default_rng(1))), \
            p.named_tensors() + [("X", X)]
    if layer == "equal_width_conv":
        p = L.ConvParams.init(rng, 3, d, d)
        p.b.values += rng.normal(size=d)
        X = _param(rng, B, T, d, name="X")
        return (lambda: _projected(L.equal_width_conv(X, p), np.random.default_rng(1))), \
            p.named_tensors() + [("X", X)]
    if layer == "halving_pool":
        X = _param(rng, B, T, d, name="X")
        return (lambda: _projected(L.halving_pool(X), np.random.default_rng(1))), [("X", X)]
    if layer == "dpcnn_forward":
        p = L.ConvStackParams.init(rng, d, d, T)
        for _, t in p.named_tensors():
            if t.name == "b":
                t.values += rng.normal(scale=0.1, size=t.shape)
        X = _param(rng, B, T, d, name="X")
        return (lambda: _projected(L.dpcnn_forward(X, p), np.random.default_rng(1))), \
            p.named_tensors() + [("X", X)]
    if layer == "classifier":
        p = L.AffineParams.init(rng, d, 4)
        x = _param(rng, B, d, name="x")
        return (lambda: _projected(L.affine(x, p), np.random.default_rng(1))), p.named_tensors() + [("x", x)]
    if layer == "cross_entropy":
        logits = _param(rng, B, 4, name="logits")
        labels = rng.integers(0, 4, size=B)
        return (lambda: cross_entropy(logits, labels)), [("logits", logits)]
    raise ValueError(f"unknown layer {layer!r}")


def check_layer(layer: str, seed: int = 0, d_model: int = 8, text_size: int = 8, eps: float = 1e-5) -> list[CheckResult]:
    f, named = _layer_case(layer, np.random.default_rng(seed), d_model, text_size)
    errors = ag.grad_errors(f, [t for _, t in named], eps)
    return [CheckResult(layer, name, err) for (name, _), err in zip(named, errors)]


def desk_config(variant: str, d_model: int = 8, text_size: int = 8, seed: int = 0) -> ModelConfig:
    cfg = ModelConfig(
        variant=variant,
        vocab_size=12,
        d_model=d_model,
        r_hidden=max(2, d_model // 2),
        num_layers=2,
        num_filters=d_model,
        encoder_blocks=1,
        encoder_heads=2,
        cnn_filters=3,
        num_classes=4,
        text_size=text_size,
        dropout=0.5,
        seed=seed,
    )
    return cfg.for_variant(variant)


def desk_batch(config: ModelConfig, seed: int = 0, B: int = 2) -> Dataset:
    rng = np.random.default_rng(seed)
    T = config.text_size
    ids = rng.integers(4, config.vocab_size, size=(B, T))
    ids[:, 0] = 2
    ids[:, -1] = 3
    if B > 1 and T > 4:
        ids[-1, T - 2] = 3
        ids[-1, T - 1] = 0
    return Dataset(ids, ids != 0, rng.integers(0, config.num_classes, size=B))


def check_model(variant: str, seed: int = 0, d_model: int = 8, text_size: int = 8, eps: float = 1e-5) -> list[CheckResult]:
    """End-to-end check of the loss with dropout disabled, one result per parameter tensor."""
    cfg = desk_config(variant, d_model, text_size, seed)
    model = build(cfg)
    rng = np.random.default_rng(seed + 1)
    for name, t in model.named_parameters():
        if name.endswith(("b", "b_i", "b_c", "b_o", "b_g", "ff_b1", "ff_b2", "ln1_b", "ln2_b")):
            t.values += rng.normal(scale=0.1, size=t.shape)
    batch = desk_batch(cfg, seed)

    def f() -> Tensor:
        return cross_entropy(forward(model, batch, training=False), batch.labels)

    named = model.named_parameters()
    errors = ag.grad_errors(f, [t for _, t in named], eps)
    return [CheckResult(variant, name, err) for (name, _), err in zip(named, errors)]


def run_suite(
    variant: str = "dc_ebad",
    d_model: int = 8,
    text_size: int = 8,
    seeds: int = 1,
    first_seed: int = 0,
    layers=LAYERS,
    end_to_end: bool = True,
    progress: Callable[[CheckResult], None] | None = None,
) -> list[CheckResult]:
    results = []
    for layer in layers:
        worst: CheckResult | None = None
        per_tensor: dict[str, CheckResult] = {}
        for s in range(first_seed, first_seed + seeds):
            for r in check_layer(layer, s, d_model, text_size):
                if r.tensor not in per_tensor or r.error > per_tensor[r.tensor].error:
                    per_tensor[r.tensor] = r
        worst = max(per_tensor.values(), key=lambda r: r.error)
        results.append(worst)
        if progress:
            progress(worst)
    if end_to_end:
        for r in check_model(variant, first_seed, d_model, text_size):
            results.append(r)
            if progress:
                progress(r)
    return results
