"""Optimizers, dropout, mini-batch training with the Adam -> SGD switch, evaluation, ablation."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .datasets import Corpus
from .embeddings import EmbeddingTable
from .model import (ModelConfig, ModelParams, batch_graphs, forward_batch, init_params, loss)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    lambda_l2: float = 1e-4
    dropout_rate: float = 0.7
    adam_lr: float = 1e-3
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    sgd_lr: float = 1e-4
    switch_patience: int = 5
    switch_epoch: Optional[int] = None  # fixed switch point; overrides patience when set
    max_epochs: int = 50
    seed: int = 0
    final_model: bool = False  # train on train+dev, select by train loss

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.adam_lr <= 0 or self.sgd_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")
        if self.switch_patience < 1:
            raise ValueError("switch_patience must be >= 1")

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **changes})


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    phase: str = "Adam"


def _check_pair(p: np.ndarray, g: np.ndarray):
    if p.shape != g.shape:
        raise ad.ShapeError(f"parameter {p.shape} and gradient {g.shape} differ")


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: OptimizerState,
              lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, in place. Accumulators are keyed by position."""
    if state.phase != "Adam":
        raise ValueError("adam_step called outside the Adam phase")
    b1, b2 = betas
    state.step += 1
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for k, (p, g) in enumerate(zip(params, grads)):
        _check_pair(p, g)
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float) -> None:
    for p, g in zip(params, grads):
        _check_pair(p, g)
        p -= lr * g


def apply_dropout(X: np.ndarray, rate: float, rng: Optional[np.random.Generator] = None,
                  training: bool = True) -> np.ndarray:
    """Inverted dropout: zero each entry with probability ``rate``, scale survivors by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    if not training or rate == 0.0:
        return X
    keep = rng.random(X.shape) >= rate
    return np.where(keep, X / (1.0 - rate), 0.0)


# -- evaluation -----------------------------------------------------------------

def _check_dims(params: ModelParams, embeddings: EmbeddingTable):
    if embeddings.dim != params.config.embed_dim:
        raise ValueError(f"embedding dim {embeddings.dim} does not match model embed_dim "
                         f"{params.config.embed_dim}")


def _features(examples, embeddings):
    return [e.features(embeddings) for e in examples]


def predict_proba(params: ModelParams, examples, embeddings: EmbeddingTable, batch_size: int = 64,
                  features=None) -> np.ndarray:
    """Class probabilities [len(examples) x C] in evaluation mode."""
    _check_dims(params, embeddings)
    examples = list(examples)
    feats = features if features is not None else _features(examples, embeddings)
    out = []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start:start + batch_size]
        batch = batch_graphs([e.graph for e in chunk], params.config.self_loop)
        X = np.concatenate(feats[start:start + batch_size], axis=0)
        out.append(forward_batch(params, batch, X).values)
    if not out:
        return np.zeros((0, params.config.classes))
    return np.concatenate(out, axis=0)


def evaluate(params: ModelParams, dataset, embeddings: EmbeddingTable, features=None) -> float:
    """Accuracy; argmax ties go to the lowest class index."""
    examples = list(dataset)
    if not examples:
        raise ValueError("cannot evaluate on an empty dataset")
    probs = predict_proba(params, examples, embeddings, features=features)
    pred = np.argmax(probs, axis=1)
    labels = np.array([e.label for e in examples])
    return float(np.mean(pred == labels))


# -- training -------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    phase: str
    train_loss: float
    train_accuracy: float
    dev_accuracy: Optional[float]
    wall_time: float


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def append(self, rec: EpochRecord):
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ValueError("epochs must be strictly increasing")
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def to_jsonl(self, timing: bool = True) -> str:
        rows = [asdict(r) for r in self.records] if timing else self.deterministic_view()
        return "".join(json.dumps(row) + "\n" for row in rows)

    def write(self, path, timing: bool = True):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_jsonl(timing))

    def table(self) -> str:
        lines = [f"{'epoch':>5} {'phase':>5} {'loss':>10} {'train':>7} {'dev':>7} {'time':>7}"]
        for r in self.records:
            dev = f"{r.dev_accuracy:7.4f}" if r.dev_accuracy is not None else f"{'-':>7}"
            lines.append(f"{r.epoch:>5} {r.phase:>5} {r.train_loss:10.5f} {r.train_accuracy:7.4f} {dev} "
                         f"{r.wall_time:7.2f}")
        return "\n".join(lines)

    def deterministic_view(self) -> list:
        return [{k: v for k, v in asdict(r).items() if k != "wall_time"} for r in self.records]


def batch_loss(params: ModelParams, examples, feats, lam: float, rng, dropout: float,
               training: bool = True) -> ad.Tensor:
    batch = batch_graphs([e.graph for e in examples], params.config.self_loop)
    X = np.concatenate(feats, axis=0)
    X = apply_dropout(X, dropout, rng, training)
    probs = forward_batch(params, batch, X)
    return loss(probs, [e.label for e in examples], params, lam)


def train(model_config: ModelConfig, train_set: Corpus, dev_set: Optional[Corpus],
          embeddings: EmbeddingTable, config: TrainConfig = TrainConfig(),
          init: Optional[ModelParams] = None, verbose: bool = False, step_hook=None):
    """Train and return ``(best_params, log)``.

    Batches are shuffled each epoch; the batch loss is the mean per-example
    cross-entropy plus the L2 term once. Adam runs until the monitored
    metric stalls for ``switch_patience`` epochs (or until ``switch_epoch``),
    then plain SGD. The monitored metric is dev accuracy, or training loss
    in final-model mode (where ``dev_set`` is merged into training).

    ``step_hook(epoch, params)``, if given, runs after each backward pass
    and before the update, while gradients are populated.
    """
    examples = list(train_set)
    if config.final_model and dev_set is not None:
        examples += list(dev_set)
        dev_set = None
    if not examples:
        raise ValueError("empty training set")
    if embeddings.dim != model_config.embed_dim:
        raise ValueError(f"embedding dim {embeddings.dim} does not match model embed_dim "
                         f"{model_config.embed_dim}")
    use_dev = dev_set is not None and len(dev_set) > 0 and not config.final_model

    params = init if init is not None else init_params(model_config, config.seed)
    log = TrainLog()
    if config.max_epochs == 0:
        return params, log

    rng = np.random.default_rng(config.seed)
    feats = _features(examples, embeddings)
    dev_examples = list(dev_set) if use_dev else []
    dev_feats = _features(dev_examples, embeddings)
    tensors = params.active_tensors()
    state = OptimizerState()
    best_score, best_params, stall = None, params.copy(), 0
    t0 = time.perf_counter()

    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(examples))
        total, count = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            params.zero_grad()
            with ad.Tape() as tape:
                value = batch_loss(params, [examples[i] for i in idx], [feats[i] for i in idx],
                                   config.lambda_l2, rng, config.dropout_rate)
            if not np.isfinite(value.item()):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            ad.backward(tape, value)
            if step_hook is not None:
                step_hook(epoch, params)
            values = [t.values for t in tensors]
            grads = [t.grad for t in tensors]
            if state.phase == "Adam":
                adam_step(values, grads, state, config.adam_lr, config.adam_betas, config.adam_eps)
            else:
                sgd_step(values, grads, config.sgd_lr)
            total += value.item() * len(idx)
            count += len(idx)

        phase = state.phase
        train_acc = evaluate(params, examples, embeddings, features=feats)
        dev_acc = evaluate(params, dev_examples, embeddings, features=dev_feats) if use_dev else None
        mean_loss = total / count
        log.append(EpochRecord(epoch, phase, mean_loss, train_acc, dev_acc, time.perf_counter() - t0))
        if verbose:
            logger.info("epoch %d %s loss=%.5f train=%.4f dev=%s", epoch, phase, mean_loss, train_acc, dev_acc)

        score = dev_acc if use_dev else -mean_loss
        if best_score is None or score > best_score:
            best_score, best_params, stall = score, params.copy(), 0
        else:
            stall += 1
        if state.phase == "Adam":
            if config.switch_epoch is not None:
                switch = epoch >= config.switch_epoch
            else:
                switch = stall >= config.switch_patience
            if switch:
                state.phase = "SGD"
    return best_params, log


# -- ablation ---------------------------------------------------------------------

@dataclass
class AblationRow:
    variant: str
    layers: int
    dev_accuracy: Optional[float]
    test_accuracy: Optional[float]
    params: int


def ablate(model_config: ModelConfig, train_set: Corpus, dev_set: Optional[Corpus], test_set: Optional[Corpus],
           embeddings: EmbeddingTable, config: TrainConfig = TrainConfig()):
    """Train the GAT and TDGAT variants under identical settings; returns (rows, models)."""
    from .model import param_count

    rows, models = [], {}
    for variant in ("GAT", "TDGAT"):
        cfg = model_config.replace(variant=variant)
        params, log = train(cfg, train_set, dev_set, embeddings, config)
        dev_acc = evaluate(params, dev_set, embeddings) if dev_set is not None and len(dev_set) else None
        test_acc = evaluate(params, test_set, embeddings) if test_set is not None and len(test_set) else None
        rows.append(AblationRow(variant, cfg.layers, dev_acc, test_acc, param_count(cfg)))
        models[variant] = (params, log)
    return rows, models


def _fmt(x):
    return f"{100 * x:.1f}" if x is not None else "-"


def format_ablation(rows, name: str = "") -> str:
    title = name or "dataset"
    lines = [f"{'Model':<10} {'layers':>6} {title + ' dev':>14} {title + ' test':>14} {'params':>10}"]
    for r in rows:
        label = "TD-GAT" if r.variant == "TDGAT" else "GAT"
        lines.append(f"{label:<10} {r.layers:>6} {_fmt(r.dev_accuracy):>14} {_fmt(r.test_accuracy):>14} "
                     f"{r.params:>10}")
    return "\n".join(lines)
