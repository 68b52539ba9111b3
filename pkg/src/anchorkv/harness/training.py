"""Mini-batch training loop over token corpora."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ..anchor import plant_anchors
from ..model import AdamState, ModelConfig, ModelWeights, init_model, loss_and_grads, train_step
from ..numerics import Rng

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    steps: int = 300
    batch_size: int = 8
    lr: float = 3e-3
    warmup: int = 20
    min_lr_ratio: float = 0.1
    answer_only: bool = False
    seed: int = 0


@dataclass
class TrainResult:
    weights: ModelWeights
    losses: list[float] = field(default_factory=list)


def lr_at(step: int, tc: TrainConfig) -> float:
    """Linear warm-up, then cosine decay to ``min_lr_ratio * lr``."""
    if step < tc.warmup:
        return tc.lr * (step + 1) / tc.warmup
    frac = (step - tc.warmup) / max(1, tc.steps - tc.warmup)
    return tc.lr * (tc.min_lr_ratio + (1 - tc.min_lr_ratio) * 0.5 * (1 + math.cos(math.pi * frac)))


def prepare(cfg: ModelConfig, corpus) -> list[list[int]]:
    """Plant anchors when the model has anchor-attention layers."""
    if not cfg.uses_anchors:
        return [list(s) for s in corpus]
    return [list(plant_anchors(s, cfg.linebreak_token_id, cfg.anchor_token_id).tokens) for s in corpus]


def _answer_weights(seq) -> np.ndarray:
    w = np.zeros(len(seq) - 1)
    w[-1] = 1.0
    return w


def train(cfg: ModelConfig, corpus, tc: TrainConfig, weights: ModelWeights | None = None) -> TrainResult:
    """Train on ``corpus`` (raw sequences; anchors are planted here).

    Batches are drawn from length-sorted buckets so padding stays small.
    ``answer_only`` puts the whole loss on each sequence's final token.
    """
    rng = Rng(tc.seed)
    weights = weights if weights is not None else init_model(cfg, rng.child(0))
    data = prepare(cfg, corpus)
    order = np.argsort([len(s) for s in data], kind="stable")
    buckets = [order[i : i + tc.batch_size] for i in range(0, len(order), tc.batch_size)]
    state = AdamState.zeros(weights)
    result = TrainResult(weights)
    draw = rng.child(1)
    for step in range(tc.steps):
        idx = buckets[int(draw.integers(len(buckets)))]
        batch = [data[i] for i in idx]
        lw = [_answer_weights(s) for s in batch] if tc.answer_only else None
        loss, grads = loss_and_grads(weights, batch, loss_weights=lw)
        weights, state = train_step(weights, grads, state, lr_at(step, tc))
        result.losses.append(loss)
        if step % 50 == 0 or step == tc.steps - 1:
            log.info("step %d loss %.4f", step, loss)
    result.weights = weights
    return result



# (lengths, negated_fraction, probe_fraction, steps) per stage: one-line
# lists first, then negated queries and multi-line lists
MEMBERSHIP_STAGES = (
    ((4, 8), 0.0, 0.5, 600),
    ((8, 16, 32), 0.25, 0.3, 400),
    ((16, 32, 64, 128), 0.5, 0.25, 900),
)


def train_membership(
    cfg: ModelConfig,
    *,
    weights: ModelWeights | None = None,
    stages=MEMBERSHIP_STAGES,
    lr: float = 1e-3,
    batch_size: int = 8,
    seed: int = 0,
) -> TrainResult:
    """Train list-membership answering with a list-length curriculum.

    With full prompts only, an anchor-attention model needs two attention
    hops (needle to its line's anchor, anchor to the answer slot) that both
    start near zero, and training sits at chance. Line probes in the corpus
    make the first hop a direct target. Short lists keep the needle signal
    undiluted while the circuit forms.
    """
    from .corpus import make_corpus

    rng = Rng(seed)
    losses: list[float] = []
    for i, (lengths, negated, probes, steps) in enumerate(stages):
        corpus = make_corpus(rng.child(i), steps * batch_size * 140, "membership", lengths=lengths,
                             negated_fraction=negated, probe_fraction=probes)
        tc = TrainConfig(steps=steps, batch_size=batch_size, lr=lr, answer_only=True, seed=seed + i)
        res = train(cfg, corpus, tc, weights)
        weights = res.weights
        losses += res.losses
    return TrainResult(weights, losses)
