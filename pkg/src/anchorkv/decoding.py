"""Incremental KV-cached inference governed by a cache policy.

Evicted entries are physically dropped from the per-layer buffers, so
per-step cost tracks the retained set. Layers a policy does not govern
(dense layers of an anchor model under :class:`AnchorPolicy`) keep every
position.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .anchor import attend, causal_bias, laa_attend, mhpe_head_positions, plant_anchors
from .cache import BudgetReport, DensePolicy, KVCachePolicy, budget_of
from .errors import InputError, LengthError, NumericError
from .model import LN_EPS, ModelWeights, forward, sequence_inputs
from .numerics import NEG_INF, layer_norm
from .rotary import apply_rope


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * x * (1.0 + 0.044715 * x * x)))


class LayerCache:
    """Rotated keys, values, and absolute positions of retained entries."""

    def __init__(self, n_heads: int, d_k: int, capacity: int):
        self.k = np.empty((n_heads, capacity, d_k))
        self.v = np.empty((n_heads, capacity, d_k))
        self.pos = np.empty(capacity, dtype=np.int64)
        self.n = 0

    def append(self, k, v, pos: int) -> None:
        self.k[:, self.n] = k
        self.v[:, self.n] = v
        self.pos[self.n] = pos
        self.n += 1

    def load(self, k, v, pos) -> None:
        m = len(pos)
        self.k[:, :m] = k
        self.v[:, :m] = v
        self.pos[:m] = pos
        self.n = m

    def retain(self, positions: np.ndarray) -> None:
        if len(positions) == self.n:
            return
        keep = np.isin(self.pos[: self.n], positions, assume_unique=True)
        m = int(keep.sum())
        self.k[:, :m] = self.k[:, : self.n][:, keep]
        self.v[:, :m] = self.v[:, : self.n][:, keep]
        self.pos[:m] = self.pos[: self.n][keep]
        self.n = m

    def view(self):
        return self.k[:, : self.n], self.v[:, : self.n], self.pos[: self.n]


@dataclass
class StepOutput:
    logits: np.ndarray
    attention: list[np.ndarray]


def policy_masks(cfg, policy: KVCachePolicy, tokens):
    """Full-sequence masks reproducing a static policy's step-by-step visibility.

    Returns ``(taa_bias, dense_bias, key_positions)`` for :func:`forward`.
    Layers the policy governs see exactly its retained set in every row;
    other layers keep their usual mask.
    """
    n = len(tokens)
    flags = np.asarray([t == cfg.anchor_token_id for t in tokens], dtype=bool)
    bias = np.where(policy.visibility(flags), 0.0, NEG_INF)
    _, key_pos = sequence_inputs(cfg, tokens)
    governed = [policy.applies_to_layer(cfg, l) for l in range(cfg.n_layers)]
    taa = [governed[l] for l in sorted(cfg.taa_layers)]
    dense = [governed[l] for l in range(cfg.n_layers) if l not in cfg.taa_layers]
    if (taa and not all(taa)) or (dense and any(dense) and not all(dense)):
        raise InputError("policy governs an unsupported subset of layers")
    taa_bias = bias if all(taa) else causal_bias(n)
    dense_bias = bias if dense and all(dense) else None
    return taa_bias, dense_bias, key_pos


def layer_mean_retention(cfg, policy: KVCachePolicy, counts) -> list[float]:
    """Per-step retained entries averaged over layers; ungoverned layers keep all."""
    gov = np.array([policy.applies_to_layer(cfg, l) for l in range(cfg.n_layers)])
    counts = np.asarray(counts, dtype=np.float64)
    full = np.arange(1, len(counts) + 1, dtype=np.float64)
    return list((gov.sum() * counts + (~gov).sum() * full) / cfg.n_layers)


class Decoder:
    """Feeds tokens one at a time through the model under a cache policy."""

    def __init__(self, weights: ModelWeights, policy: KVCachePolicy | None = None, capacity: int | None = None):
        self.weights = weights
        self.cfg = weights.cfg
        self.policy = (policy or DensePolicy()).fresh()
        cap = capacity or self.cfg.max_seq
        self.caches = [LayerCache(self.cfg.n_heads, self.cfg.d_k, cap) for _ in range(self.cfg.n_layers)]
        self.governed = [self.policy.applies_to_layer(self.cfg, l) for l in range(self.cfg.n_layers)]
        self.length = 0
        self.last_anchor = -1
        self.tokens: list[int] = []
        self.retained_per_step: list[float] = []
        self._pending_feedback = None

    @property
    def n_code_tokens(self) -> int:
        return sum(1 for t in self.tokens if t != self.cfg.anchor_token_id)

    def _key_positions(self, t: int, is_anchor: bool):
        if is_anchor and self.cfg.mhpe:
            return mhpe_head_positions(self.last_anchor, t, self.cfg.n_heads)
        return None

    def _admit(self, t: int, is_anchor: bool) -> np.ndarray:
        if self._pending_feedback is not None:
            self.policy.feedback(*self._pending_feedback)
            self._pending_feedback = None
        return self.policy.admit(t, is_anchor)

    def _record_retention(self) -> None:
        self.retained_per_step.append(float(np.mean([c.n for c in self.caches])))

    def feed(self, token: int) -> StepOutput:
        cfg = self.cfg
        w = self.weights
        t = self.length
        if t >= len(self.caches[0].pos):
            raise LengthError(f"sequence reached capacity {len(self.caches[0].pos)}")
        is_anchor = token == cfg.anchor_token_id
        retained = self._admit(t, is_anchor)
        head_pos = self._key_positions(t, is_anchor)
        x = w["embed"][token]
        dk = cfg.d_k
        attn_rows = []
        feedback = np.zeros(0)
        for l in range(cfg.n_layers):
            cache = self.caches[l]
            h = layer_norm(x, w.layer(l, "ln1"), LN_EPS)
            q = apply_rope((h @ w.layer(l, "wq")).reshape(cfg.n_heads, dk), t, cfg.rope_base)
            k = (h @ w.layer(l, "wk")).reshape(cfg.n_heads, dk)
            if head_pos is not None and l in cfg.taa_layers:
                k = apply_rope(k, np.asarray(head_pos), cfg.rope_base)
            else:
                k = apply_rope(k, t, cfg.rope_base)
            v = (h @ w.layer(l, "wv")).reshape(cfg.n_heads, dk)
            cache.append(k, v, t)
            if self.governed[l]:
                cache.retain(retained)
            K, V, P = cache.view()
            bias = np.zeros((1, len(P)))
            if l in cfg.laa_consumers:
                Ka, Va = self._anchor_kv(P)
                out, a = laa_attend(q[:, None, :], K, V, Ka, Va, bias, dk)
            else:
                out, a = attend(q[:, None, :], K, V, bias, dk)
            a = a[:, 0, :]
            attn_rows.append(a)
            if self.policy.needs_feedback and self.governed[l]:
                # anchor-layer half of an LAA row refers to the same positions
                f = a[:, : len(P)] + (a[:, len(P):] if a.shape[1] > len(P) else 0.0)
                feedback = f.sum(axis=0) if feedback.size == 0 else feedback + f.sum(axis=0)
                fb_pos = P.copy()
            x = x + out[:, 0, :].reshape(-1) @ w.layer(l, "wo")
            h2 = layer_norm(x, w.layer(l, "ln2"), LN_EPS)
            x = x + _gelu(h2 @ w.layer(l, "w_in")) @ w.layer(l, "w_out")
            if not np.all(np.isfinite(x)):
                raise NumericError(f"non-finite activation in layer {l}", layer=l)
        logits = layer_norm(x, w["ln_f"], LN_EPS) @ w["embed"].T
        if self.policy.needs_feedback:
            self._pending_feedback = (fb_pos, feedback)
        if is_anchor:
            self.last_anchor = t
        self.tokens.append(int(token))
        self.length += 1
        self._record_retention()
        return StepOutput(logits, attn_rows)

    def _anchor_kv(self, positions: np.ndarray):
        src = self.caches[self.cfg.laa_anchor_layer]
        K, V, P = src.view()
        if len(P) == len(positions) and np.array_equal(P, positions):
            return K, V
        idx = np.searchsorted(P, positions)
        return K[:, idx], V[:, idx]

    def prefill(self, tokens) -> np.ndarray:
        """Process a prompt and return the last position's logits.

        Static policies run one masked full-sequence pass (each governed
        row sees exactly the policy's retained set at that step) and then
        trim the caches; attention-driven policies stream token by token.
        """
        tokens = [int(t) for t in tokens]
        if not tokens:
            raise InputError("empty prompt")
        if self.length:
            raise InputError("prefill must be the first call")
        if self.policy.needs_feedback or len(tokens) == 1:
            out = None
            for tok in tokens:
                out = self.feed(tok)
            return out.logits
        cfg = self.cfg
        n = len(tokens)
        if n > len(self.caches[0].pos):
            raise LengthError(f"prompt of {n} tokens exceeds capacity {len(self.caches[0].pos)}")
        flags = np.array([t == cfg.anchor_token_id for t in tokens])
        taa_bias, dense_bias, key_pos = policy_masks(cfg, self.policy, tokens)
        trace = forward(self.weights, tokens, taa_bias, dense_mask=dense_bias, key_positions=key_pos, capture_kv=True)
        # replay the policy so its state and retention trace match a streamed prompt
        counts = []
        for t in range(n):
            retained = self.policy.admit(t, bool(flags[t]))
            counts.append(len(retained))
        self.retained_per_step.extend(layer_mean_retention(cfg, self.policy, counts))
        for l, (k, v) in enumerate(trace.kv):
            self.caches[l].load(k, v, np.arange(n))
            if self.governed[l]:
                self.caches[l].retain(retained)
        anchors = np.flatnonzero(flags)
        self.last_anchor = int(anchors[-1]) if len(anchors) else -1
        self.tokens = list(tokens)
        self.length = n
        return trace.logits[-1]

    def decode(self, logits: np.ndarray, max_new: int, feed_last: bool = False) -> list[int]:
        """Greedy continuation from ``logits`` (the last fed position's).

        Anchors are never chosen; anchor-planting policies feed one after
        every generated linebreak. ``feed_last`` also runs the final token
        through the model so every generated token costs one step.
        """
        cfg = self.cfg
        new: list[int] = []
        while len(new) < max_new:
            tok = _greedy(logits, cfg.anchor_token_id)
            new.append(tok)
            if len(new) == max_new and not feed_last:
                break
            logits = self.feed(tok).logits
            if self.policy.plants_anchors and tok == cfg.linebreak_token_id:
                logits = self.feed(cfg.anchor_token_id).logits
        return new

    def budget(self, label: str = "") -> BudgetReport:
        return budget_of(
            self.retained_per_step,
            max(1, self.n_code_tokens),
            n_layers=self.cfg.n_layers,
            d_model=self.cfg.d_model,
            bytes_per_float=8,
            label=label or self.policy.describe(),
        )


def _greedy(logits: np.ndarray, anchor_id: int) -> int:
    z = logits.copy()
    z[anchor_id] = -np.inf
    return int(np.argmax(z))


@dataclass
class Generation:
    tokens: list[int]
    new_tokens: list[int]
    decoder: Decoder


def generate_with_decoder(weights: ModelWeights, prompt, max_new: int, policy: KVCachePolicy | None = None) -> Generation:
    cfg = weights.cfg
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise InputError("prompt must be non-empty")
    if len(prompt) > cfg.max_seq:
        raise LengthError(f"prompt of {len(prompt)} tokens exceeds max_seq={cfg.max_seq}")
    policy = policy or DensePolicy()
    dec = Decoder(weights, policy)
    fed = plant_anchors(prompt, cfg.linebreak_token_id, cfg.anchor_token_id).tokens if policy.plants_anchors else prompt
    if len(fed) > cfg.max_seq:
        raise LengthError(f"anchored prompt of {len(fed)} tokens exceeds max_seq={cfg.max_seq}")
    if max_new <= 0:
        return Generation(list(prompt), [], dec)
    new = dec.decode(dec.prefill(fed), max_new)
    return Generation(prompt + new, new, dec)


def generate(weights: ModelWeights, prompt, max_new: int, policy: KVCachePolicy | None = None) -> list[int]:
    """Greedy decoding (ties to the lowest id) under ``policy``.

    Anchor policies plant the anchor token after every linebreak in the
    prompt and after each generated linebreak; anchors never appear in the
    returned sequence.
    """
    return generate_with_decoder(weights, prompt, max_new, policy).tokens
