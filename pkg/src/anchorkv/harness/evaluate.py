"""Perplexity and next-token accuracy under a cache policy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..anchor import plant_anchors
from ..cache import BudgetReport, KVCachePolicy, budget_of, simulate_policy
from ..decoding import Decoder, layer_mean_retention, policy_masks
from ..errors import InputError
from ..model import ModelWeights, forward


def policy_logits(weights: ModelWeights, tokens, policy: KVCachePolicy) -> tuple[list[int], np.ndarray, list[float]]:
    """Logits for every position of ``tokens`` as seen under ``policy``.

    Anchor-planting policies plant anchors first; the fed sequence is
    returned alongside the ``(len, vocab)`` logits and the per-step retained
    count averaged over layers. Static policies use one
    masked forward pass, attention-driven ones stream through a decoder.
    """
    cfg = weights.cfg
    fed = [int(t) for t in tokens]
    if policy.plants_anchors:
        fed = list(plant_anchors(fed, cfg.linebreak_token_id, cfg.anchor_token_id).tokens)
    if policy.needs_feedback:
        dec = Decoder(weights, policy)
        logits = np.stack([dec.feed(t).logits for t in fed])
        return fed, logits, dec.retained_per_step
    taa, dense, key_pos = policy_masks(cfg, policy.fresh(), fed)
    counts = simulate_policy(policy, [t == cfg.anchor_token_id for t in fed])
    logits = forward(weights, fed, taa, dense_mask=dense, key_positions=key_pos).logits
    return fed, logits, layer_mean_retention(cfg, policy, counts)


@dataclass(frozen=True)
class EvalReport:
    perplexity: float
    accuracy: float
    n_targets: int
    budget: BudgetReport


def evaluate(weights: ModelWeights, policy: KVCachePolicy, corpus) -> EvalReport:
    """Perplexity and greedy accuracy from the same logits, over non-anchor
    targets; the budget is the worst sequence's peak share."""
    if not corpus:
        raise InputError("empty corpus")
    cfg = weights.cfg
    nll_sum = 0.0
    hits = 0
    count = 0
    worst = None
    for seq in corpus:
        fed, logits, trace = policy_logits(weights, seq, policy)
        tgt = np.asarray(fed[1:], dtype=np.int64)
        keep = tgt != cfg.anchor_token_id
        z = logits[:-1][keep]
        tgt = tgt[keep]
        z = z - z.max(axis=-1, keepdims=True)
        nll = np.log(np.exp(z).sum(-1)) - z[np.arange(len(tgt)), tgt]
        zz = z.copy()
        zz[:, cfg.anchor_token_id] = -np.inf
        nll_sum += float(nll.sum())
        hits += int((zz.argmax(-1) == tgt).sum())
        count += len(tgt)
        n_code = sum(1 for t in fed if t != cfg.anchor_token_id)
        rep = budget_of(trace, n_code, n_layers=cfg.n_layers, d_model=cfg.d_model, bytes_per_float=8, label=policy.describe())
        if worst is None or rep.budget_percent > worst.budget_percent:
            worst = rep
    if count == 0:
        raise InputError("corpus has no prediction targets")
    return EvalReport(float(np.exp(nll_sum / count)), hits / count, count, worst)


def perplexity(weights: ModelWeights, policy: KVCachePolicy, corpus) -> float:
    """``exp`` of the mean next-token cross-entropy over non-anchor targets."""
    return evaluate(weights, policy, corpus).perplexity


def next_token_accuracy(weights: ModelWeights, policy: KVCachePolicy, corpus) -> float:
    """Share of non-anchor targets equal to the greedy argmax."""
    return evaluate(weights, policy, corpus).accuracy
