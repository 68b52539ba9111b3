"""KV-cache retention policies and cache-size accounting.

A policy is driven one position at a time: :meth:`KVCachePolicy.admit`
receives the new position and returns the sorted positions whose KV
states stay cached (and visible) at that step. Evicted positions never
come back, so each retained set is a subset of the previous one plus the
new position.
"""

from __future__ import annotations

import copy
import io
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import InputError, ProtocolError

GIB = 1 << 30


class KVCachePolicy:
    kind = "base"
    plants_anchors = False
    needs_feedback = False

    def reset(self) -> None:
        pass

    def admit(self, t: int, is_anchor: bool = False) -> np.ndarray:
        raise NotImplementedError

    def feedback(self, positions, weights) -> None:
        """Attention mass the latest query placed on ``positions``."""

    def applies_to_layer(self, cfg, layer: int) -> bool:
        return True

    def fresh(self) -> "KVCachePolicy":
        p = copy.deepcopy(self)
        p.reset()
        return p

    def visibility(self, is_anchor) -> np.ndarray:
        """Boolean ``(n, n)`` matrix whose row ``t`` is the retained set at step ``t``."""
        if self.needs_feedback:
            raise ProtocolError(f"{self.kind} retention depends on attention and has no static mask")
        flags = np.asarray(is_anchor, dtype=bool)
        n = len(flags)
        vis = np.zeros((n, n), dtype=bool)
        p = self.fresh()
        for t in range(n):
            vis[t, p.admit(t, bool(flags[t]))] = True
        return vis

    def __repr__(self) -> str:
        return self.describe()

    def describe(self) -> str:
        return self.kind


class DensePolicy(KVCachePolicy):
    kind = "dense"

    def admit(self, t, is_anchor=False):
        return np.arange(t + 1)


class WindowPolicy(KVCachePolicy):
    """Most recent ``window`` positions only."""

    kind = "window"

    def __init__(self, window: int):
        if window < 1:
            raise InputError("window must be >= 1")
        self.window = int(window)

    def admit(self, t, is_anchor=False):
        return np.arange(max(0, t - self.window + 1), t + 1)

    def describe(self):
        return f"window:{self.window}"


class StreamingPolicy(KVCachePolicy):
    """First ``sinks`` positions plus the most recent ``window``."""

    kind = "streaming"

    def __init__(self, sinks: int, window: int):
        if sinks < 0 or window < 1:
            raise InputError("streaming needs sinks >= 0 and window >= 1")
        self.sinks = int(sinks)
        self.window = int(window)

    def admit(self, t, is_anchor=False):
        head = np.arange(min(self.sinks, t + 1))
        tail = np.arange(max(self.sinks, t - self.window + 1), t + 1)
        return np.concatenate([head, tail])

    def describe(self):
        return f"streaming:{self.sinks},{self.window}"


class HeavyHitterPolicy(KVCachePolicy):
    """Desk-scale heavy-hitter eviction.

    The budget at step ``t`` is ``ceil(fraction * (t + 1))`` positions: the
    most recent ``ceil(budget / 2)`` plus the older positions with the
    largest accumulated attention (summed over heads and layers), ties going
    to the earlier position. Each step after the first requires feedback
    from the previous step.
    """

    kind = "h2o"
    needs_feedback = True

    def __init__(self, fraction: float):
        if not 0.0 < fraction <= 1.0:
            raise InputError("heavy-hitter fraction must be in (0, 1]")
        self.fraction = float(fraction)
        self.reset()

    def reset(self):
        self._retained = np.zeros(0, dtype=np.int64)
        self._scores: dict[int, float] = {}
        self._last_step = -1
        self._fed = True

    def budget(self, t: int) -> int:
        return max(1, math.ceil(self.fraction * (t + 1)))

    def feedback(self, positions, weights):
        for p, w in zip(np.asarray(positions).tolist(), np.asarray(weights, dtype=float).tolist()):
            self._scores[p] = self._scores.get(p, 0.0) + w
        self._fed = True

    def admit(self, t, is_anchor=False):
        if t != self._last_step + 1:
            raise ProtocolError(f"expected step {self._last_step + 1}, got {t}")
        if not self._fed:
            raise ProtocolError("heavy-hitter policy needs attention feedback from the previous step")
        self._last_step = t
        self._fed = False
        kept = np.append(self._retained, t)
        b = self.budget(t)
        if len(kept) > b:
            recent_n = math.ceil(b / 2)
            recent = kept[kept > t - recent_n]
            older = kept[kept <= t - recent_n]
            n_heavy = b - len(recent)
            order = sorted(older.tolist(), key=lambda p: (-self._scores.get(p, 0.0), p))
            heavy = np.array(sorted(order[:n_heavy]), dtype=np.int64)
            kept = np.concatenate([heavy, recent])
        self._retained = kept
        return kept

    def describe(self):
        return f"h2o:{self.fraction:g}"


class AnchorPolicy(KVCachePolicy):
    """Sinks, every anchor seen so far, and the positions of the current line.

    When the anchor closing a line is admitted the whole line stays visible
    (so the anchor can aggregate it); from the next step on only the anchor
    represents that line. Applies to the model's anchor-attention layers.
    """

    kind = "anchor"
    plants_anchors = True

    def __init__(self, sinks: int = 4):
        if sinks < 0:
            raise InputError("sinks must be >= 0")
        self.sinks = int(sinks)
        self.reset()

    def reset(self):
        self._anchors: list[int] = []
        self._segment_start = 0

    def admit(self, t, is_anchor=False):
        start = self._segment_start
        if is_anchor:
            self._anchors.append(t)
            self._segment_start = t + 1
        head = np.arange(min(self.sinks, t + 1))
        line = np.arange(start, t + 1)
        return np.union1d(np.union1d(head, np.asarray(self._anchors, dtype=np.int64)), line)

    def applies_to_layer(self, cfg, layer):
        return layer in cfg.taa_layers

    def describe(self):
        return f"anchor:{self.sinks}"


def policy_visible(policy: KVCachePolicy, step: int, attention_feedback=None, *, is_anchor: bool = False):
    """Advance ``policy`` to ``step`` and return the retained positions.

    ``attention_feedback`` is ``(positions, weights)`` from the previous
    step's attention; heavy-hitter policies require it after step 0.
    """
    if step < 0:
        raise InputError("step must be >= 0")
    if attention_feedback is not None:
        policy.feedback(*attention_feedback)
    return policy.admit(step, is_anchor)


def parse_policy(text: str) -> KVCachePolicy:
    """Parse ``dense | window:w | streaming:s,w | h2o:f | anchor[:sinks]``."""
    name, _, arg = text.strip().partition(":")
    try:
        if name == "dense" and not arg:
            return DensePolicy()
        if name == "window":
            return WindowPolicy(int(arg))
        if name == "streaming":
            s, w = arg.split(",")
            return StreamingPolicy(int(s), int(w))
        if name == "h2o":
            return HeavyHitterPolicy(float(arg))
        if name == "anchor":
            return AnchorPolicy(int(arg)) if arg else AnchorPolicy()
    except ValueError as exc:
        raise InputError(f"bad policy spec {text!r}: {exc}") from None
    raise InputError(f"unknown policy {text!r}")


def simulate_policy(policy: KVCachePolicy, is_anchor) -> list[int]:
    """Retained counts per step for a token stream (static policies only)."""
    p = policy.fresh()
    return [len(p.admit(t, bool(a))) for t, a in enumerate(is_anchor)]


@dataclass(frozen=True)
class BudgetReport:
    total_tokens: int
    retained_per_step: tuple[float, ...]
    peak_retained: float
    budget_percent: float
    bytes: float
    bytes_per_token: float
    n_layers: int = 1
    d_model: int = 1
    bytes_per_float: int = 2
    batch: int = 1
    label: str = ""

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("step,retained,budget_percent\n")
        for i, r in enumerate(self.retained_per_step):
            buf.write(f"{i},{r:g},{100.0 * r / self.total_tokens:.6f}\n")
        return buf.getvalue()

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("retained_per_step")
        d["steps"] = len(self.retained_per_step)
        return d

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2)


def budget_of(
    trace,
    total: int,
    *,
    n_layers: int = 1,
    d_model: int = 1,
    bytes_per_float: int = 2,
    batch: int = 1,
    label: str = "",
) -> BudgetReport:
    """Peak retained KV positions as a share of ``total`` tokens, plus bytes."""
    trace = tuple(float(x) for x in trace)
    if not trace:
        raise InputError("empty retention trace")
    if total <= 0:
        raise InputError("total tokens must be positive")
    peak = max(trace)
    if peak == int(peak):
        peak = int(peak)
    nbytes = estimate_cache_bytes(n_layers, 1, d_model, bytes_per_float, batch) * peak
    return BudgetReport(
        total_tokens=int(total),
        retained_per_step=trace,
        peak_retained=peak,
        budget_percent=100.0 * peak / total,
        bytes=nbytes,
        bytes_per_token=nbytes / total,
        n_layers=n_layers,
        d_model=d_model,
        bytes_per_float=bytes_per_float,
        batch=batch,
        label=label,
    )


def estimate_cache_bytes(n_layers: int, seq: int, d_model: int, bytes_per_float: int, batch: int) -> int:
    """Keys and values for every layer, position, and batch row."""
    for name, v in (("n_layers", n_layers), ("seq", seq), ("d_model", d_model),
                    ("bytes_per_float", bytes_per_float), ("batch", batch)):
        if v <= 0:
            raise InputError(f"{name} must be positive")
    return 2 * n_layers * seq * d_model * bytes_per_float * batch


def ratio_gb_per_token(cache_gb: float, generated_length: float) -> float:
    if generated_length <= 0:
        raise InputError("generated length must be positive")
    return cache_gb / generated_length
