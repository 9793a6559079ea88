"""Few-shot optimization of the projector, adapter, and residual scales.

AdamW with decoupled weight decay and a cosine-to-zero schedule; the loop is
single-threaded and fully seeded, so identical configs produce byte-identical
checkpoints.  Text features are precomputed per record before the epoch loop
-- encoders are frozen, so prompts never change during a run.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .concept_cache import DEFAULT_TEMPLATE, build_cache
from .encoders import TextEncoder
from .errors import ContractError, NumericError, TrainingError
from .feature_store import Bank, ConceptLexicon, sample_few_shot
from .model import (
    Checkpoint,
    ClassifierConfig,
    init_fusion,
    init_projector,
)
from .numcore import Tensor
from .pipeline import Pipeline


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 256
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    k_concepts: int = 10
    cosine_schedule: bool = True
    template: str = DEFAULT_TEMPLATE
    temperature: float = 0.01
    shots: int | None = None          # None: use the manifest's shot count
    heads: int = 4
    train_projector: bool = True
    train_adapter: bool = True
    train_scales: bool = True         # alpha/beta; freeze for the strict reading

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractError("epochs and batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ContractError("learning_rate must be > 0")
        if self.k_concepts < 0:
            raise ContractError("k_concepts must be >= 0")


@dataclass
class OptimizerState:
    """Per-parameter AdamW moment accumulators plus the step counter."""

    first: dict[str, np.ndarray]
    second: dict[str, np.ndarray]
    step_count: int = 0


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter dict."""

    def __init__(self, parameters: dict[str, Tensor], betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.parameters = dict(parameters)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = OptimizerState(
            first={k: np.zeros_like(p.data) for k, p in self.parameters.items()},
            second={k: np.zeros_like(p.data) for k, p in self.parameters.items()},
        )

    def step(self, lr_t: float) -> None:
        self.state.step_count += 1
        t = self.state.step_count
        for name, p in self.parameters.items():
            grad = p.grad
            if grad is None:
                continue
            m = self.state.first[name] = \
                self.beta1 * self.state.first[name] + (1.0 - self.beta1) * grad
            v = self.state.second[name] = \
                self.beta2 * self.state.second[name] + (1.0 - self.beta2) * grad * grad
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            update = lr_t * (m_hat / (np.sqrt(v_hat) + self.eps)
                             + self.weight_decay * p.data)
            new_data = np.asarray(p.data - update)  # 0-d results decay to scalars
            new_data.flags.writeable = False
            p.data = new_data

    def clear_grads(self) -> None:
        for p in self.parameters.values():
            p.clear_grad()


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """lr0 * (1 + cos(pi * step/total)) / 2; reaches zero at the final step."""
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


# -- loss ---------------------------------------------------------------------


def loss_from_probabilities(probabilities: np.ndarray, labels) -> float:
    """Mean negative log-likelihood from explicit probability rows."""
    probs = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or labels.shape != (probs.shape[0],):
        raise ContractError(f"bad loss shapes: {probs.shape} vs {labels.shape}")
    if np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-6):
        raise ContractError("probability rows must sum to 1")
    if np.any(labels < 0) or np.any(labels >= probs.shape[1]):
        raise ContractError("label index out of range")
    picked = probs[np.arange(len(labels)), labels]
    return float(np.mean(-np.log(picked)))


def loss_from_logits(logits_rows: list[Tensor], labels) -> Tensor:
    """Mean cross-entropy straight from logits via log-sum-exp (stable)."""
    if len(logits_rows) == 0:
        raise ContractError("empty batch")
    if len(labels) != len(logits_rows):
        raise ContractError("labels do not match batch size")
    terms = []
    for logits, label in zip(logits_rows, labels):
        d = logits.shape[0]
        if not 0 <= label < d:
            raise ContractError(f"label {label} out of range for {d} classes")
        onehot = np.zeros(d)
        onehot[label] = 1.0
        terms.append(nc.sub(nc.logsumexp(logits), nc.tsum(nc.mul(logits, Tensor(onehot)))))
    total = terms[0]
    for term in terms[1:]:
        total = nc.add(total, term)
    return nc.mul(total, 1.0 / len(terms))


# -- training loop --------------------------------------------------------------


@dataclass
class StepMetrics:
    loss: float
    accuracy: float
    lr: float


@dataclass
class FitResult:
    checkpoint: Checkpoint
    pipeline: Pipeline
    log_lines: list[str]
    train_class_ids: list[int]
    wall_seconds: float
    cache_size: int = 0


def train_step(batch, labels, pipeline: Pipeline, optimizer: AdamW,
               lr_t: float) -> StepMetrics:
    """One forward/backward/update over a record batch."""
    if len(batch) == 0:
        raise ContractError("empty batch")
    try:
        logits_rows = [pipeline.logits(rec) for rec in batch]
        loss = loss_from_logits(logits_rows, labels)
        optimizer.clear_grads()
        loss.backward()
        optimizer.step(lr_t)
    except NumericError as exc:
        raise TrainingError(f"non-finite value during training step: {exc}") from exc
    hits = sum(int(np.argmax(row.data) == y) for row, y in zip(logits_rows, labels))
    return StepMetrics(loss=loss.item(), accuracy=hits / len(batch), lr=lr_t)


def trainable_parameters(pipeline: Pipeline, config: TrainConfig) -> dict[str, Tensor]:
    chosen: dict[str, Tensor] = {}
    if config.train_projector:
        chosen.update(pipeline.params.named_blocks())
    if config.train_adapter:
        chosen["fusion.adapter"] = pipeline.fusion.adapter
    if config.train_scales:
        if config.train_projector:
            chosen["fusion.alpha"] = pipeline.fusion.alpha
        if config.train_adapter:
            chosen["fusion.beta"] = pipeline.fusion.beta
    return chosen


def fit(bank: Bank, lexicon: ConceptLexicon, config: TrainConfig,
        encoder: TextEncoder, class_ids: list[int] | None = None) -> FitResult:
    """Build the concept cache, then optimize the head on few-shot data."""
    started = time.perf_counter()
    manifest = bank.manifest
    all_ids = class_ids if class_ids is not None else list(range(len(manifest.class_names)))
    all_ids = sorted(all_ids)
    class_names = [manifest.class_names[i] for i in all_ids]
    label_of = {cid: pos for pos, cid in enumerate(all_ids)}

    shots = config.shots if config.shots is not None else manifest.shots_per_class
    candidates = bank.select("train", all_ids)
    train_records = sample_few_shot(candidates, shots, len(all_ids), config.seed)

    cache = build_cache(lexicon, train_records) if config.k_concepts > 0 else None

    params = init_projector(manifest.channel_dims, manifest.text_dim,
                            heads=config.heads, seed=config.seed)
    fusion = init_fusion(len(all_ids), manifest.text_dim)
    classifier = ClassifierConfig(temperature=config.temperature)
    pipe = Pipeline(encoder, cache, params, fusion, classifier, class_names,
                    template=config.template, k_concepts=config.k_concepts)

    for rec in train_records:  # prompts are frozen; warm the memo up front
        pipe.text_features(rec)

    optimizer = AdamW(trainable_parameters(pipe, config), betas=config.betas,
                      eps=config.eps, weight_decay=config.weight_decay)

    order_rng = np.random.default_rng([config.seed, 0xC0FFEE])
    steps_per_epoch = math.ceil(len(train_records) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    log_lines: list[str] = []
    global_step = 0
    for epoch in range(config.epochs):
        order = order_rng.permutation(len(train_records))
        epoch_loss, epoch_hits, seen = 0.0, 0.0, 0
        for start in range(0, len(train_records), config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = [train_records[i] for i in idx]
            labels = [label_of[rec.class_id] for rec in batch]
            lr_t = cosine_lr(global_step, total_steps, config.learning_rate) \
                if config.cosine_schedule else config.learning_rate
            metrics = train_step(batch, labels, pipe, optimizer, lr_t)
            epoch_loss += metrics.loss * len(batch)
            epoch_hits += metrics.accuracy * len(batch)
            seen += len(batch)
            global_step += 1
        log_lines.append(
            f"epoch={epoch + 1} step={global_step} lr={lr_t:.6e} "
            f"loss={epoch_loss / seen:.6f} train_acc={epoch_hits / seen:.4f}")

    checkpoint = Checkpoint(params=params, fusion=fusion, config=classifier,
                            template=config.template, k_concepts=config.k_concepts,
                            class_names=class_names)
    return FitResult(checkpoint=checkpoint, pipeline=pipe, log_lines=log_lines,
                     train_class_ids=all_ids,
                     wall_seconds=time.perf_counter() - started,
                     cache_size=0 if cache is None else len(cache.values))
