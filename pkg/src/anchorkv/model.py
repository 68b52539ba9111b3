"""Toy decoder-only transformer with pluggable attention masks.

Layers follow the pre-norm residual recipe::

    r_hat = r + attn(LN(r))
    r_next = r_hat + mlp(LN(r_hat))

Row-vector convention: ``q = x @ W_Q`` and the head outputs are merged and
projected by ``W_O``. The output head is tied to the token embedding.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .anchor import (
    AnchoredSequence,
    AttentionMask,
    assign_mhpe_positions,
    attend,
    build_anchor_mask,
    causal_bias,
)
from .errors import ConfigError, InputError, NumericError, ShapeError
from .numerics import Rng
from .rotary import apply_rope, rope_tables
from .vocab import DEFAULT_VOCAB

INIT_STD = 0.02
LN_EPS = 1e-5
FFN_MULT = 4


@dataclass
class ModelConfig:
    vocab_size: int = len(DEFAULT_VOCAB)
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 4
    max_seq: int = 512
    rope_base: float = 10000.0
    anchor_token_id: int = DEFAULT_VOCAB.anchor_id
    linebreak_token_id: int = DEFAULT_VOCAB.linebreak_id
    laa_anchor_layer: int | None = None
    taa_layers: frozenset[int] = field(default_factory=frozenset)
    mhpe: bool = False
    seed: int = 0

    def __post_init__(self):
        self.taa_layers = frozenset(int(x) for x in self.taa_layers)
        self.validate()

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    @property
    def d_ff(self) -> int:
        return FFN_MULT * self.d_model

    def validate(self) -> None:
        if min(self.vocab_size, self.d_model, self.n_heads, self.n_layers, self.max_seq) < 1:
            raise ConfigError("sizes must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.d_k % 2:
            raise ConfigError(f"head dimension {self.d_k} must be even for rotary embeddings")
        for tok in (self.anchor_token_id, self.linebreak_token_id):
            if not 0 <= tok < self.vocab_size:
                raise ConfigError(f"token id {tok} outside vocabulary of size {self.vocab_size}")
        if self.anchor_token_id == self.linebreak_token_id:
            raise ConfigError("anchor and linebreak tokens must differ")
        if any(not 0 <= l < self.n_layers for l in self.taa_layers):
            raise ConfigError(f"taa_layers {sorted(self.taa_layers)} out of range")
        if self.laa_anchor_layer is not None:
            if not 0 <= self.laa_anchor_layer < self.n_layers:
                raise ConfigError(f"laa_anchor_layer {self.laa_anchor_layer} out of range")
            if not self.laa_consumers:
                raise ConfigError("laa_anchor_layer has no deeper anchor-attention layer to feed")

    @property
    def laa_consumers(self) -> frozenset[int]:
        if self.laa_anchor_layer is None:
            return frozenset()
        return frozenset(l for l in self.taa_layers if l > self.laa_anchor_layer)

    @property
    def uses_anchors(self) -> bool:
        return bool(self.taa_layers)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["taa_layers"] = sorted(self.taa_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)


def param_names(cfg: ModelConfig) -> list[str]:
    names = ["embed"]
    for l in range(cfg.n_layers):
        names += [f"layer{l}.{p}" for p in ("ln1", "wq", "wk", "wv", "wo", "ln2", "w_in", "w_out")]
    names.append("ln_f")
    return names


def param_shape(cfg: ModelConfig, name: str) -> tuple[int, ...]:
    d = cfg.d_model
    leaf = name.rsplit(".", 1)[-1]
    return {
        "embed": (cfg.vocab_size, d),
        "ln1": (d,),
        "ln2": (d,),
        "ln_f": (d,),
        "wq": (d, d),
        "wk": (d, d),
        "wv": (d, d),
        "wo": (d, d),
        "w_in": (d, cfg.d_ff),
        "w_out": (cfg.d_ff, d),
    }[leaf]


@dataclass
class ModelWeights:
    cfg: ModelConfig
    params: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def layer(self, l: int, name: str) -> np.ndarray:
        return self.params[f"layer{l}.{name}"]

    def copy(self) -> "ModelWeights":
        return ModelWeights(self.cfg, {k: v.copy() for k, v in self.params.items()})

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def validate(self) -> None:
        extra = set(self.params) - set(param_names(self.cfg))
        if extra:
            raise ShapeError(f"unexpected parameters {sorted(extra)}")
        for name in param_names(self.cfg):
            if name not in self.params:
                raise ShapeError(f"missing parameter {name}")
            arr = self.params[name]
            if arr.shape != param_shape(self.cfg, name):
                raise ShapeError(f"{name} has shape {arr.shape}, expected {param_shape(self.cfg, name)}")
            if not np.all(np.isfinite(arr)):
                raise NumericError(f"parameter {name} is not finite")


def init_model(cfg: ModelConfig, rng: Rng | None = None) -> ModelWeights:
    """Normal(0, 0.02) init; residual-output projections scaled by 1/sqrt(2L)."""
    cfg.validate()
    rng = rng if rng is not None else Rng(cfg.seed)
    resid = 1.0 / np.sqrt(2 * cfg.n_layers)
    params = {}
    for name in param_names(cfg):
        shape = param_shape(cfg, name)
        leaf = name.rsplit(".", 1)[-1]
        if leaf.startswith("ln"):
            params[name] = np.ones(shape)
        else:
            std = INIT_STD * (resid if leaf in ("wo", "w_out") else 1.0)
            params[name] = rng.normal(shape, std)
    return ModelWeights(cfg, params)


@dataclass
class ForwardTrace:
    """Outputs of a full forward pass.

    ``attention[l]`` has shape ``(B, H, T, T)`` (``2T`` columns on layers
    consuming the anchor layer's KV) when captured. ``kv[l]`` holds the
    rotated keys and values, each ``(B, H, T, d_k)``.
    """

    logits: np.ndarray
    residual_mid: list[np.ndarray]
    residual_out: list[np.ndarray]
    attention: list[np.ndarray] | None = None
    kv: list[tuple[np.ndarray, np.ndarray]] | None = None


def sequence_inputs(cfg: ModelConfig, tokens) -> tuple[np.ndarray, np.ndarray]:
    """Anchor-layer mask bias and per-head key positions derived from the
    anchors already present in ``tokens``."""
    seq = AnchoredSequence.from_tokens(tokens, cfg.anchor_token_id, cfg.linebreak_token_id)
    n = len(seq)
    if cfg.uses_anchors and seq.anchor_indices:
        bias = build_anchor_mask(n, seq.anchor_indices).bias
    else:
        bias = causal_bias(n)
    if cfg.mhpe:
        key_pos = assign_mhpe_positions(seq, cfg.n_heads)
    else:
        key_pos = np.repeat(np.arange(n)[:, None], cfg.n_heads, axis=1)
    return bias, key_pos


def _as_bias(mask, n: int) -> np.ndarray:
    if mask is None:
        return causal_bias(n)
    if isinstance(mask, AttentionMask):
        mask = mask.bias
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape[-2:] != (n, n):
        raise ShapeError(f"mask shape {mask.shape} does not match sequence length {n}")
    return mask


def _split_heads(x: ag.Tensor, cfg: ModelConfig) -> ag.Tensor:
    b, t, _ = x.shape
    return ag.transpose(ag.reshape(x, (b, t, cfg.n_heads, cfg.d_k)), (0, 2, 1, 3))


def _merge_heads(x: ag.Tensor, cfg: ModelConfig) -> ag.Tensor:
    b, _, t, _ = x.shape
    return ag.reshape(ag.transpose(x, (0, 2, 1, 3)), (b, t, cfg.d_model))


def _attention_nograd(q, k, v, bias, d_k, block: int = 512):
    """Query-blocked attention to bound memory on long prefills."""
    t = q.shape[-2]
    if t <= block:
        return attend(q, k, v, bias, d_k)
    outs, ws = [], []
    for s in range(0, t, block):
        o, w = attend(q[..., s : s + block, :], k, v, bias[..., s : s + block, :], d_k)
        outs.append(o)
        ws.append(w)
    return np.concatenate(outs, axis=-2), np.concatenate(ws, axis=-2)


def _graph(
    weights: ModelWeights,
    tokens: np.ndarray,
    taa_bias: np.ndarray,
    dense_bias: np.ndarray,
    positions: np.ndarray,
    key_positions: np.ndarray,
    *,
    requires_grad: bool,
    capture: bool = False,
    capture_kv: bool = False,
):
    cfg = weights.cfg
    P = {k: ag.Tensor(v, requires_grad) for k, v in weights.params.items()}
    b, t = tokens.shape
    dk = cfg.d_k
    inv_sqrt = 1.0 / np.sqrt(dk)
    cos_q, sin_q = rope_tables(positions[:, None, :], dk, cfg.rope_base)
    cos_m, sin_m = rope_tables(np.transpose(key_positions, (0, 2, 1)), dk, cfg.rope_base)
    taa_bias = taa_bias[:, None]
    dense_bias = dense_bias[:, None]
    laa_bias = np.concatenate([taa_bias, taa_bias], axis=-1) if cfg.laa_consumers else None

    x = ag.embedding(P["embed"], tokens)
    mids, outs, attn, kvs = [], [], [], []
    anchor_kv = None
    for l in range(cfg.n_layers):
        taa = l in cfg.taa_layers
        h = ag.layer_norm(x, P[f"layer{l}.ln1"], LN_EPS)
        q = _split_heads(ag.matmul(h, P[f"layer{l}.wq"]), cfg)
        k = _split_heads(ag.matmul(h, P[f"layer{l}.wk"]), cfg)
        v = _split_heads(ag.matmul(h, P[f"layer{l}.wv"]), cfg)
        q = ag.rope(q, cos_q, sin_q)
        if taa and cfg.mhpe:
            k = ag.rope(k, cos_m, sin_m)
        else:
            k = ag.rope(k, cos_q, sin_q)
        bias = taa_bias if taa else dense_bias
        kk, vv = k, v
        if l in cfg.laa_consumers:
            kk = ag.concat([k, anchor_kv[0]], axis=2)
            vv = ag.concat([v, anchor_kv[1]], axis=2)
            bias = laa_bias
        if requires_grad:
            scores = ag.scale(ag.matmul_t(q, kk), inv_sqrt)
            a = ag.masked_softmax(scores, bias)
            o = ag.matmul(a, vv)
            a_data = a.data
        else:
            o_data, a_data = _attention_nograd(q.data, kk.data, vv.data, bias, dk)
            o = ag.Tensor(o_data)
        if capture:
            attn.append(a_data)
        if capture_kv:
            kvs.append((k.data, v.data))
        if l == cfg.laa_anchor_layer:
            anchor_kv = (k, v)
        x = ag.add(x, ag.matmul(_merge_heads(o, cfg), P[f"layer{l}.wo"]))
        mids.append(x.data)
        h2 = ag.layer_norm(x, P[f"layer{l}.ln2"], LN_EPS)
        f = ag.matmul(ag.gelu(ag.matmul(h2, P[f"layer{l}.w_in"])), P[f"layer{l}.w_out"])
        x = ag.add(x, f)
        if not np.all(np.isfinite(x.data)):
            raise NumericError(f"non-finite activation in layer {l}", layer=l)
        outs.append(x.data)
    xf = ag.layer_norm(x, P["ln_f"], LN_EPS)
    logits = ag.matmul_t(xf, P["embed"])
    return logits, P, ForwardTrace(
        logits.data, mids, outs, attn if capture else None, kvs if capture_kv else None
    )


def forward(
    weights: ModelWeights,
    tokens,
    mask=None,
    *,
    dense_mask=None,
    positions=None,
    key_positions=None,
    capture: bool = False,
    capture_kv: bool = False,
) -> ForwardTrace:
    """Full-sequence forward pass without gradients.

    ``tokens`` is one sequence (1-D) or a batch (2-D). ``mask`` is the
    additive bias for anchor-attention layers; when omitted it is derived
    from the anchors in ``tokens``. ``dense_mask`` (default causal) applies
    to the remaining layers. ``positions`` are the rotary indices of each
    token (default ``arange``); ``key_positions`` (``(T, n_heads)``)
    override the per-head key indices on anchor-attention layers with MHPE.
    A single sequence yields unbatched arrays in the trace.
    """
    cfg = weights.cfg
    arr = np.asarray(tokens, dtype=np.int64)
    single = arr.ndim == 1
    if single:
        arr = arr[None]
    b, t = arr.shape
    if t == 0:
        raise InputError("empty token sequence")
    if t > cfg.max_seq:
        raise ShapeError(f"sequence length {t} exceeds max_seq={cfg.max_seq}")
    if arr.min() < 0 or arr.max() >= cfg.vocab_size:
        raise InputError("token id outside vocabulary")
    derived = [sequence_inputs(cfg, row) for row in arr] if mask is None or key_positions is None else None
    taa = np.stack([d[0] for d in derived]) if mask is None else np.broadcast_to(_as_bias(mask, t), (b, t, t))
    dense = np.broadcast_to(_as_bias(dense_mask, t), (b, t, t))
    pos = np.broadcast_to(np.arange(t) if positions is None else np.asarray(positions), (b, t))
    if key_positions is None:
        kpos = np.stack([d[1] for d in derived])
        if positions is not None:
            kpos = np.where(kpos == np.arange(t)[:, None], pos[..., None], kpos)
    else:
        kpos = np.broadcast_to(np.asarray(key_positions), (b, t, cfg.n_heads))
    _, _, trace = _graph(weights, arr, taa, dense, pos, kpos, requires_grad=False, capture=capture, capture_kv=capture_kv)
    if single:
        trace.logits = trace.logits[0]
        trace.residual_mid = [r[0] for r in trace.residual_mid]
        trace.residual_out = [r[0] for r in trace.residual_out]
        if trace.attention is not None:
            trace.attention = [a[0] for a in trace.attention]
        if trace.kv is not None:
            trace.kv = [(k[0], v[0]) for k, v in trace.kv]
    return trace


def target_weights(cfg: ModelConfig, tokens) -> np.ndarray:
    """Weight 1 for every next-token target except anchors (length ``T - 1``)."""
    tokens = np.asarray(tokens)
    return (tokens[1:] != cfg.anchor_token_id).astype(np.float64)


def _pad_batch(cfg: ModelConfig, batch, masks, loss_weights):
    lens = [len(s) for s in batch]
    t = max(lens)
    b = len(batch)
    toks = np.zeros((b, t), dtype=np.int64)
    taa = np.empty((b, t, t))
    kpos = np.empty((b, t, cfg.n_heads), dtype=np.int64)
    tw = np.zeros((b, t - 1))
    for i, seq in enumerate(batch):
        n = len(seq)
        toks[i, :n] = seq
        bias, kp = sequence_inputs(cfg, seq)
        if masks is not None and masks[i] is not None:
            bias = _as_bias(masks[i], n)
        taa[i] = causal_bias(t)
        taa[i, :n, :n] = bias
        kpos[i] = np.arange(t)[:, None]
        kpos[i, :n] = kp
        w = target_weights(cfg, seq)
        if loss_weights is not None and loss_weights[i] is not None:
            w = w * np.asarray(loss_weights[i], dtype=np.float64)
        tw[i, : n - 1] = w
    return toks, taa, kpos, tw


def loss_and_grads(weights: ModelWeights, batch, masks=None, loss_weights=None):
    """Mean next-token cross-entropy over non-anchor targets and its gradients.

    ``batch`` is a list of token sequences (anchors already planted for
    anchor-attention models). ``masks`` optionally overrides the derived
    anchor mask per sequence; ``loss_weights`` optionally rescales each
    sequence's ``T - 1`` targets. Returns ``(loss, grads)`` where ``grads``
    maps parameter names to arrays.
    """
    if not batch:
        raise InputError("empty batch")
    cfg = weights.cfg
    batch = [list(map(int, s)) for s in batch]
    toks, taa, kpos, tw = _pad_batch(cfg, batch, masks, loss_weights)
    if tw.sum() <= 0:
        raise InputError("no prediction targets in batch")
    b, t = toks.shape
    if t > cfg.max_seq:
        raise ShapeError(f"sequence length {t} exceeds max_seq={cfg.max_seq}")
    pos = np.broadcast_to(np.arange(t), (b, t))
    dense = np.broadcast_to(causal_bias(t), (b, t, t))
    logits, P, _ = _graph(weights, toks, taa, dense, pos, kpos, requires_grad=True)
    targets = np.concatenate([toks[:, 1:], np.zeros((b, 1), dtype=np.int64)], axis=1)
    tw_full = np.concatenate([tw, np.zeros((b, 1))], axis=1)
    loss = ag.cross_entropy(logits, targets, tw_full)
    loss.backward()
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in P.items()}
    return float(loss.data), grads


def loss_only(weights: ModelWeights, batch, masks=None, loss_weights=None) -> float:
    cfg = weights.cfg
    batch = [list(map(int, s)) for s in batch]
    toks, taa, kpos, tw = _pad_batch(cfg, batch, masks, loss_weights)
    if tw.sum() <= 0:
        raise InputError("no prediction targets in batch")
    b, t = toks.shape
    pos = np.broadcast_to(np.arange(t), (b, t))
    dense = np.broadcast_to(causal_bias(t), (b, t, t))
    logits, _, _ = _graph(weights, toks, taa, dense, pos, kpos, requires_grad=False)
    flat = logits.data[:, :-1].reshape(-1, cfg.vocab_size)
    z = flat - flat.max(axis=-1, keepdims=True)
    nll = np.log(np.exp(z).sum(-1)) - z[np.arange(len(z)), toks[:, 1:].reshape(-1)]
    w = tw.reshape(-1)
    return float((nll * w).sum() / w.sum())


@dataclass
class AdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.1

    @classmethod
    def zeros(cls, weights: ModelWeights, **kw) -> "AdamState":
        return cls(
            0,
            {k: np.zeros_like(v) for k, v in weights.params.items()},
            {k: np.zeros_like(v) for k, v in weights.params.items()},
            **kw,
        )


def train_step(weights: ModelWeights, grads: dict, opt_state: AdamState, lr: float):
    """One AdamW update; decoupled weight decay applies to 2-D parameters only."""
    b1, b2 = opt_state.betas
    step = opt_state.step + 1
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    new_params, new_m, new_v = {}, {}, {}
    for name, p in weights.params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        m = b1 * opt_state.m[name] + (1.0 - b1) * g
        v = b2 * opt_state.v[name] + (1.0 - b2) * g * g
        upd = (m / c1) / (np.sqrt(v / c2) + opt_state.eps)
        if p.ndim == 2 and opt_state.weight_decay:
            upd = upd + opt_state.weight_decay * p
        new_params[name] = p - lr * upd
        new_m[name] = m
        new_v[name] = v
    state = AdamState(step, new_m, new_v, opt_state.betas, opt_state.eps, opt_state.weight_decay)
    return ModelWeights(weights.cfg, new_params), state


def rope_key(cfg: ModelConfig, k: np.ndarray, t: int, head_positions) -> np.ndarray:
    """Rotate a ``(n_heads, d_k)`` key at ``t`` or at per-head positions."""
    if head_positions is None:
        return apply_rope(k, t, cfg.rope_base)
    return apply_rope(k, np.asarray(head_positions), cfg.rope_base)
