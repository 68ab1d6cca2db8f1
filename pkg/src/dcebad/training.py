"""Loss, Adam, evaluation and the early-stopping training loop."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import Dataset, batch_iter
from .metrics import ConfusionMatrix
from .model import Model, build, forward

logger = logging.getLogger(__name__)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    B, K = logits.shape
    if labels.shape != (B,):
        raise ag.DimensionError(f"cross_entropy: {B} logit rows but labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"cross_entropy: label outside [0, {K})")
    picked = ag.pick(ag.log_softmax(logits), labels)
    return ag.scale(ag.sum_all(picked), -1.0 / B)


def adam_step(params, grads, state, t: int, lr: float, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """In-place Adam update of the arrays in ``params``.

    ``state`` is a dict holding lists ``m`` and ``v`` of first/second moment
    arrays, created on first use.
    """
    if t < 1:
        raise ValueError("adam step counter starts at 1")
    if "m" not in state:
        state["m"] = [np.zeros_like(p) for p in params]
        state["v"] = [np.zeros_like(p) for p in params]
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if p.shape != g.shape or m.shape != p.shape:
            raise ag.DimensionError(f"adam: param {p.shape} vs grad {g.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class Adam:
    def __init__(self, params: list[Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.state: dict = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        grads = [np.zeros_like(p.values) if p.grad is None else p.grad for p in self.params]
        adam_step([p.values for p in self.params], grads, self.state, self.t,
                  self.lr, self.beta1, self.beta2, self.eps)


@dataclass
class TrainConfig:
    batch_size: int = 128
    learning_rate: float = 5e-5
    epochs: int = 3
    stop_go: int = 1000
    eval_every: int = 100
    max_batches: int | None = None
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self) -> None:
        if self.batch_size < 1 or self.eval_every < 1 or self.stop_go < 1:
            raise ValueError("batch_size, eval_every and stop_go must be positive")
        if self.epochs < 0 or self.learning_rate < 0:
            raise ValueError("epochs and learning_rate must be non-negative")
        if self.stop_go < self.eval_every:
            raise ValueError("stop_go must be at least eval_every")


@dataclass
class EvalPoint:
    batch: int
    train_loss: float
    val_loss: float
    val_accuracy: float


@dataclass
class TrainHistory:
    points: list[EvalPoint] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    best_accuracy: float | None = None
    best_batch: int | None = None
    batches_run: int = 0
    stop_reason: str = "epochs_done"

    def to_dict(self) -> dict:
        return asdict(self)


def _predict_batch(model: Model, batch: Dataset) -> tuple[np.ndarray, float]:
    with ag.no_grad():
        logits = forward(model, batch, training=False)
        loss = cross_entropy(logits, batch.labels).item()
    return logits.values.argmax(axis=1), loss * len(batch)


def evaluate_with_loss(
    model: Model, data: Dataset, batch_size: int = 256, workers: int = 1
) -> tuple[ConfusionMatrix, float]:
    """Confusion matrix and mean loss with dropout off.

    ``workers > 1`` shards batches across threads; results merge by addition
    so the outcome does not depend on scheduling.
    """
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    batches = list(batch_iter(data, batch_size))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(lambda b: _predict_batch(model, b), batches))
    else:
        results = [_predict_batch(model, b) for b in batches]
    cm = ConfusionMatrix.zeros(model.config.num_classes)
    total = 0.0
    for b, (pred, loss) in zip(batches, results):
        cm.update(b.labels, pred)
        total += loss
    return cm, total / len(data)


def evaluate(model: Model, data: Dataset, batch_size: int = 256, workers: int = 1) -> ConfusionMatrix:
    return evaluate_with_loss(model, data, batch_size, workers)[0]


def snapshot(model: Model) -> Model:
    copy = build(model.config)
    copy.load_state_dict(model.state_dict())
    return copy


def train(model: Model, train_data: Dataset, val_data: Dataset, config: TrainConfig) -> tuple[Model, TrainHistory]:
    """Adam over shuffled mini-batches, validating every ``eval_every`` batches.

    Batches are counted from 0 across epochs. Validation happens after the
    update of every batch whose index is a multiple of ``eval_every``; only a
    strictly higher accuracy counts as improvement. Training halts once the
    current batch index exceeds the best one by more than ``stop_go``.
    The batches after the last scheduled validation are validated once at the
    end. Returns a copy of the best model seen, never simply the last one.
    """
    config.validate()
    if len(train_data) == 0 or len(val_data) == 0:
        raise ValueError("train and validation splits must be non-empty")
    history = TrainHistory()
    best = snapshot(model)
    opt = Adam(model.parameters(), config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    rng = np.random.default_rng([config.seed, 0x0D])
    since_eval: list[float] = []

    def validate(step: int) -> None:
        nonlocal best, since_eval
        cm, val_loss = evaluate_with_loss(model, val_data)
        acc = float(np.trace(cm.counts)) / cm.total
        history.points.append(EvalPoint(step, float(np.mean(since_eval)), val_loss, acc))
        since_eval = []
        if history.best_accuracy is None or acc > history.best_accuracy:
            history.best_accuracy, history.best_batch = acc, step
            best = snapshot(model)
        logger.info("batch %d  train %.4f  val %.4f  acc %.4f",
                    step, history.points[-1].train_loss, val_loss, acc)

    step = 0
    for epoch in range(config.epochs):
        for batch in batch_iter(train_data, config.batch_size, shuffle=True, seed=config.seed, epoch=epoch):
            opt.zero_grad()
            with ag.Tape() as tape:
                loss = cross_entropy(forward(model, batch, training=True, rng=rng), batch.labels)
                tape.backward(loss)
            value = loss.item()
            if not math.isfinite(value):
                raise ag.NonFiniteError("cross_entropy", "forward")
            opt.step()
            history.losses.append(value)
            since_eval.append(value)
            if step % config.eval_every == 0:
                validate(step)
            history.batches_run = step + 1
            if step - history.best_batch > config.stop_go:
                history.stop_reason = "early_stop"
                return best, history
            step += 1
            if config.max_batches is not None and step >= config.max_batches:
                history.stop_reason = "max_batches"
                break
        else:
            continue
        break
    # the tail after the last scheduled validation still gets a look
    if since_eval:
        validate(step - 1)
    return best, history
