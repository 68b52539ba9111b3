"""Anchor-token KV-cache compression for small decoder-only transformers."""

from __future__ import annotations

from .anchor import (
    AnchoredSequence,
    AttentionMask,
    build_anchor_mask,
    laa_attend,
    mhpe_head_positions,
    plant_anchors,
)
from .cache import (
    AnchorPolicy,
    BudgetReport,
    DensePolicy,
    HeavyHitterPolicy,
    StreamingPolicy,
    WindowPolicy,
    budget_of,
    parse_policy,
    policy_visible,
)
from .decoding import Decoder, generate
from .errors import AnchorKVError, InputError, NumericError, ProtocolError
from .model import ModelConfig, ModelWeights, forward, init_model, loss_and_grads, train_step
from .rotary import apply_rope
from .vocab import DEFAULT_VOCAB, CharVocab

__version__ = "0.1.0"
