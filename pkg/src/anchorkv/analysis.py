"""Attention sparsity statistics, top-token classification, heatmap export,
and the eigen-sign report of each head's value-output circuit."""

from __future__ import annotations

import io
import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError
from .model import ModelWeights, forward, sequence_inputs
from .numerics import symmetric_eigenvalues
from .vocab import DEFAULT_VOCAB, CharVocab

PAIRWISE_GINI_MAX_N = 512
ZERO_EIGEN_RTOL = 1e-8


def _check_weights(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64).ravel()
    if w.size == 0 or np.any(w < 0) or not np.any(w > 0):
        raise InputError("gini needs non-negative weights with a positive entry")
    return w


def gini_pairwise(w) -> float:
    """``sum_ij |w_i - w_j| / (2 n^2 mean(w))`` by the explicit double sum."""
    w = _check_weights(w)
    n = w.size
    return float(np.abs(w[:, None] - w[None, :]).sum() / (2.0 * n * w.sum()))


def gini_sorted(w) -> float:
    """Same value via ``sum_i (2i - n - 1) w_(i) / (n sum w)`` over ascending order."""
    w = np.sort(_check_weights(w))
    n = w.size
    i = np.arange(1, n + 1)
    return float(((2 * i - n - 1) * w).sum() / (n * w.sum()))


def gini(w) -> float:
    w = _check_weights(w)
    return gini_pairwise(w) if w.size <= PAIRWISE_GINI_MAX_N else gini_sorted(w)


def top2_sum(w) -> float:
    w = np.asarray(w, dtype=np.float64).ravel()
    if w.size < 2:
        raise InputError("top-2 sum needs at least two entries")
    return float(np.partition(w, -2)[-2:].sum())


@dataclass
class AttentionRecord:
    """Captured attention of one sequence.

    ``attention[l]`` is ``(n_heads, T, T)``: on layers that also attend to
    the anchor layer's keys, the two weights a query puts on the same
    position are summed, so rows always sum to 1. ``visible[l]`` is the
    ``(T, T)`` boolean visibility the layer used.
    """

    tokens: list[int]
    attention: list[np.ndarray]
    visible: list[np.ndarray]

    @property
    def n_layers(self) -> int:
        return len(self.attention)


def capture_attention(weights: ModelWeights, tokens, mask=None) -> AttentionRecord:
    """Run ``forward`` with capture and fold the anchor-layer half of each row."""
    cfg = weights.cfg
    tokens = [int(t) for t in tokens]
    n = len(tokens)
    if mask is None:
        mask, _ = sequence_inputs(cfg, tokens)
    trace = forward(weights, tokens, mask, capture=True)
    taa_vis = np.asarray(mask) > -1e8
    causal = np.tril(np.ones((n, n), dtype=bool))
    att, vis = [], []
    for l, a in enumerate(trace.attention):
        if a.shape[-1] == 2 * n:
            a = a[..., :n] + a[..., n:]
        att.append(a)
        vis.append(taa_vis if l in cfg.taa_layers else causal)
    return AttentionRecord(tokens, att, vis)


@dataclass
class SparsityReport:
    gini: list[float]
    top2: list[float]
    rows: list[int]
    aggregation: str = "mean over rows with >= 2 visible keys, heads, and sequences"

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("layer,gini,top2\n")
        for l, (g, t) in enumerate(zip(self.gini, self.top2)):
            buf.write(f"{l},{g:.9f},{t:.9f}\n")
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(
            {"layers": [{"layer": l, "gini": g, "top2": t, "rows": r}
                        for l, (g, t, r) in enumerate(zip(self.gini, self.top2, self.rows))],
             "aggregation": self.aggregation},
            indent=2,
        )


def _row_stats(rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gini and top-2 for each row of a ``(k, n)`` block of visible weights."""
    s = np.sort(rows, axis=-1)
    n = s.shape[-1]
    i = np.arange(1, n + 1)
    g = ((2 * i - n - 1) * s).sum(-1) / (n * s.sum(-1))
    return g, s[:, -1] + s[:, -2]


def sparsity_report(records) -> SparsityReport:
    """Per-layer mean Gini and top-2 sum over the visible entries of each row."""
    records = list(records)
    if not records:
        raise InputError("no attention records")
    n_layers = records[0].n_layers
    g_sum = np.zeros(n_layers)
    t_sum = np.zeros(n_layers)
    counts = np.zeros(n_layers, dtype=np.int64)
    for rec in records:
        for l in range(n_layers):
            a, vis = rec.attention[l], rec.visible[l]
            for i in range(a.shape[1]):
                cols = np.flatnonzero(vis[i])
                if len(cols) < 2:
                    continue
                g, t = _row_stats(a[:, i, cols])
                g_sum[l] += g.sum()
                t_sum[l] += t.sum()
                counts[l] += len(g)
    safe = np.maximum(counts, 1)
    return SparsityReport(list(g_sum / safe), list(t_sum / safe), counts.tolist())


def default_classes(vocab: CharVocab = DEFAULT_VOCAB) -> dict[int, str]:
    return {i: ("linebreak" if i == vocab.linebreak_id else "other") for i in range(len(vocab))}


@dataclass
class MaxDistribution:
    counts: dict[str, int]
    ratios: dict[str, float] = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("class,count,ratio\n")
        for k in sorted(self.counts):
            buf.write(f"{k},{self.counts[k]},{self.ratios[k]:.9f}\n")
        return buf.getvalue()


def attention_max_distribution(records, classes: dict[int, str] | None = None, exclude_sinks: int = 4) -> MaxDistribution:
    """Classify the token receiving each row's largest weight.

    Columns before ``exclude_sinks`` are ignored, rows with no remaining
    column are skipped, and ties go to the earliest position.
    """
    classes = classes if classes is not None else default_classes()
    counts: Counter[str] = Counter({c: 0 for c in set(classes.values())})
    for rec in records:
        toks = np.asarray(rec.tokens)
        for a in rec.attention:
            for i in range(exclude_sinks, a.shape[1]):
                j = exclude_sinks + np.argmax(a[:, i, exclude_sinks:], axis=-1)
                for tok in toks[j]:
                    if int(tok) not in classes:
                        raise InputError(f"token id {int(tok)} has no class")
                    counts[classes[int(tok)]] += 1
    total = sum(counts.values())
    ratios = {k: (v / total if total else 0.0) for k, v in counts.items()}
    return MaxDistribution(dict(counts), ratios)


@dataclass
class WovReport:
    eigenvalues: dict[tuple[int, int], np.ndarray]
    traces: dict[tuple[int, int], float]
    negative_fraction: np.ndarray
    method: str = "symmetric part (M + M^T) / 2 of W_V^h W_O^h"

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("layer,head,neg_fraction\n")
        for (l, h) in sorted(self.eigenvalues):
            buf.write(f"{l},{h},{self.negative_fraction[l, h]:.9f}\n")
        return buf.getvalue()

    def eigen_csv(self) -> str:
        buf = io.StringIO()
        buf.write("layer,head,index,eigenvalue\n")
        for (l, h), ev in sorted(self.eigenvalues.items()):
            for k, v in enumerate(ev):
                buf.write(f"{l},{h},{k},{v:.17g}\n")
        return buf.getvalue()


def head_ov(weights: ModelWeights, layer: int, head: int) -> np.ndarray:
    """``W_V^h W_O^h`` (``d_model x d_model``) in the row-vector convention."""
    dk = weights.cfg.d_k
    sl = slice(head * dk, (head + 1) * dk)
    return weights.layer(layer, "wv")[:, sl] @ weights.layer(layer, "wo")[sl, :]


def negative_fraction(eigenvalues) -> float:
    ev = np.asarray(eigenvalues, dtype=np.float64)
    scale = np.abs(ev).max() if ev.size else 0.0
    nz = ev[np.abs(ev) > ZERO_EIGEN_RTOL * scale] if scale > 0 else ev[:0]
    return float(np.mean(nz < 0)) if nz.size else 0.0


def wov_eigen_report(weights: ModelWeights) -> WovReport:
    cfg = weights.cfg
    eig, tr = {}, {}
    frac = np.zeros((cfg.n_layers, cfg.n_heads))
    for l in range(cfg.n_layers):
        for h in range(cfg.n_heads):
            m = head_ov(weights, l, h)
            s = 0.5 * (m + m.T)
            ev = np.asarray(symmetric_eigenvalues(s))
            eig[(l, h)] = ev
            tr[(l, h)] = float(np.trace(s))
            frac[l, h] = negative_fraction(ev)
    return WovReport(eig, tr, frac)


def export_heatmap(record: AttentionRecord, layer: int, head: int | str = "mean", vocab: CharVocab = DEFAULT_VOCAB) -> str:
    """Attention grid as CSV with token labels; masked and future cells are empty."""
    if not 0 <= layer < record.n_layers:
        raise InputError(f"layer {layer} out of range")
    a = record.attention[layer]
    if head == "mean":
        grid = a.mean(axis=0)
    elif isinstance(head, (int, np.integer)) and 0 <= head < a.shape[0]:
        grid = a[head]
    else:
        raise InputError(f"head {head!r} out of range")
    vis = record.visible[layer]
    labels = [vocab.label(t) for t in record.tokens]

    def cell(s: str) -> str:
        return '"' + s.replace('"', '""') + '"' if any(c in s for c in ',"') else s

    buf = io.StringIO()
    buf.write("query," + ",".join(cell(x) for x in labels) + "\n")
    for i, lab in enumerate(labels):
        vals = [f"{grid[i, j]:.9g}" if vis[i, j] else "" for j in range(len(labels))]
        buf.write(cell(lab) + "," + ",".join(vals) + "\n")
    return buf.getvalue()
