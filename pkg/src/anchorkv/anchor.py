"""Anchor planting, the anchor attention mask, per-head anchor positions, and
cross-layer anchor attention.

Indexing is 0-based throughout: in ``x1 .. xp \\n <ANC> ...`` the anchor
sits at index ``p + 1`` (1-based ``p + 2``).
"""

from __future__ import annotations

import functools
import io
from dataclasses import dataclass

import numpy as np

from .errors import ContaminationError, InputError, ShapeError
from .numerics import NEG_INF
from .rotary import apply_rope


@dataclass(frozen=True)
class AnchoredSequence:
    """Token ids with anchors planted after every linebreak.

    ``spans[k] = (start, anchor)`` is the half-open span compressed by the
    k-th anchor: positions ``start + 1 .. anchor - 1``, where ``start`` is
    the previous anchor or -1.
    """

    tokens: tuple[int, ...]
    anchor_indices: tuple[int, ...]
    spans: tuple[tuple[int, int], ...]
    anchor_id: int
    linebreak_id: int

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def from_tokens(cls, tokens, anchor_id: int, linebreak_id: int) -> "AnchoredSequence":
        """Wrap a sequence that already carries anchors, validating placement."""
        tokens = tuple(int(t) for t in tokens)
        anchors = tuple(i for i, t in enumerate(tokens) if t == anchor_id)
        for a in anchors:
            if a == 0 or tokens[a - 1] != linebreak_id:
                raise InputError(f"anchor at {a} does not follow a linebreak")
        spans = tuple(zip((-1,) + anchors[:-1], anchors))
        return cls(tokens, anchors, spans, anchor_id, linebreak_id)

    def is_anchor(self) -> np.ndarray:
        flags = np.zeros(len(self.tokens), dtype=bool)
        flags[list(self.anchor_indices)] = True
        return flags

    def strip(self) -> list[int]:
        return [t for t in self.tokens if t != self.anchor_id]


def plant_anchors(tokens, linebreak_id: int, anchor_id: int) -> AnchoredSequence:
    out: list[int] = []
    for t in tokens:
        t = int(t)
        if t == anchor_id:
            raise ContaminationError("input already contains the anchor token")
        out.append(t)
        if t == linebreak_id:
            out.append(anchor_id)
    return AnchoredSequence.from_tokens(out, anchor_id, linebreak_id)


@dataclass(frozen=True)
class AttentionMask:
    n: int
    anchors: tuple[int, ...]
    bias: np.ndarray
    literal: bool = False

    @property
    def visible(self) -> np.ndarray:
        return self.bias == 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("n,anchors\n")
        buf.write(f"{self.n},{';'.join(map(str, self.anchors))}\n")
        for row in self.visible.astype(int):
            buf.write(",".join(map(str, row)) + "\n")
        return buf.getvalue()


def _check_anchors(n: int, anchors) -> tuple[int, ...]:
    anchors = tuple(int(a) for a in anchors)
    if any(b <= a for a, b in zip(anchors, anchors[1:])):
        raise InputError(f"anchor indices must be strictly increasing: {anchors}")
    if anchors and (anchors[0] < 0 or anchors[-1] >= n):
        raise InputError(f"anchor indices out of range for n={n}: {anchors}")
    return anchors


@functools.lru_cache(maxsize=128)
def _causal_template(n: int) -> np.ndarray:
    bias = np.triu(np.full((n, n), NEG_INF), k=1)
    bias.flags.writeable = False
    return bias


def causal_bias(n: int) -> np.ndarray:
    """Fresh ``(n, n)`` additive causal bias (0 on and below the diagonal).

    Small sizes are copied from a cached template; mask building for short
    sequences is dominated by this allocation.
    """
    if n > 128:
        return np.triu(np.full((n, n), NEG_INF), k=1)
    return _causal_template(n).copy()


def build_anchor_mask(n: int, anchors, literal: bool = False) -> AttentionMask:
    """Causal mask plus, for each completed anchor pair ``(a, b)``, masking of
    the positions strictly between them in every row after ``b``.

    ``literal=True`` also masks the earlier anchor ``a`` (the slice
    ``[a, b)``), leaving only the most recent completed anchor visible.
    """
    anchors = _check_anchors(n, anchors)
    bias = causal_bias(n)
    lo = 0 if literal else 1
    for a, b in zip(anchors, anchors[1:]):
        bias[b + 1 :, a + lo : b] = NEG_INF
    return AttentionMask(n, anchors, bias, literal)


def naive_anchor_mask(n: int, anchors, literal: bool = False) -> AttentionMask:
    """Line-by-line transcription of the row/pair loop with early break."""
    anchors = _check_anchors(n, anchors)
    m = np.zeros((n, n))
    pairs = len(anchors) - 1
    for i in range(n):
        row = m[i]
        row[i + 1 : n] = NEG_INF
        for j in range(pairs):
            if anchors[j + 1] < i:
                start = anchors[j] if literal else anchors[j] + 1
                end = anchors[j + 1]
                row[start:end] = NEG_INF
            else:
                break
    return AttentionMask(n, anchors, m, literal)


def mhpe_head_positions(span_start: int, anchor_pos: int, n_heads: int) -> list[int]:
    """Rotary position each head uses for the anchor at ``anchor_pos``.

    Short spans are covered cyclically; long spans are sampled at evenly
    spaced (round-half-up) offsets. An empty span keeps the anchor's own
    position in every head.
    """
    if n_heads < 1:
        raise InputError("n_heads must be >= 1")
    m = anchor_pos - span_start - 1
    first = span_start + 1
    if m <= 0:
        return [anchor_pos] * n_heads
    if m <= n_heads:
        return [first + h % m for h in range(n_heads)]
    step = (m - 1) / (n_heads - 1) if n_heads > 1 else 0.0
    return [first + int(np.floor(h * step + 0.5)) for h in range(n_heads)]


def assign_mhpe_positions(seq: AnchoredSequence, n_heads: int) -> np.ndarray:
    """Per-position, per-head rotary indices, shape ``(len(seq), n_heads)``."""
    if n_heads < 1:
        raise InputError("n_heads must be >= 1")
    pos = np.repeat(np.arange(len(seq))[:, None], n_heads, axis=1)
    for start, a in seq.spans:
        pos[a] = mhpe_head_positions(start, a, n_heads)
    return pos


def mhpe_rotate_keys(k_heads, positions, base: float = 10000.0) -> np.ndarray:
    """Rotate head ``h`` of a ``(n_heads, d_k)`` key by ``positions[h]``."""
    k_heads = np.asarray(k_heads, dtype=np.float64)
    positions = np.asarray(positions)
    if k_heads.ndim != 2 or positions.shape != (k_heads.shape[0],):
        raise ShapeError(f"{k_heads.shape[0] if k_heads.ndim else 0} key heads vs positions {positions.shape}")
    return apply_rope(k_heads, positions, base)


def attend(q, k, v, mask, d_k: int) -> tuple[np.ndarray, np.ndarray]:
    """Scaled dot-product attention with an additive mask; returns (out, weights)."""
    s = q @ np.swapaxes(k, -1, -2) / np.sqrt(d_k) + mask
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    w = e / e.sum(axis=-1, keepdims=True)
    return w @ v, w


def laa_attend(q, k, v, k_anchor, v_anchor, mask, d_k: int) -> tuple[np.ndarray, np.ndarray]:
    """Attention over the current layer's keys concatenated with the anchor
    layer's keys; both halves share the current row mask and one softmax.

    Returns ``(out, weights)`` with weights spanning ``2 * n_keys`` columns
    (or ``n_keys`` when the anchor KV is empty).
    """
    if k_anchor is None or np.shape(k_anchor)[-2] == 0:
        return attend(q, k, v, mask, d_k)
    k_anchor = np.asarray(k_anchor)
    v_anchor = np.asarray(v_anchor)
    if k_anchor.shape != np.shape(k) or v_anchor.shape != np.shape(v):
        raise ShapeError(f"anchor KV shapes {k_anchor.shape}/{v_anchor.shape} do not match {np.shape(k)}")
    kk = np.concatenate([k, k_anchor], axis=-2)
    vv = np.concatenate([v, v_anchor], axis=-2)
    mask = np.asarray(mask)
    mm = np.concatenate([mask, mask], axis=-1)
    return attend(q, kk, vv, mm, d_k)
