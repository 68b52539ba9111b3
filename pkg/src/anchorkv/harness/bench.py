"""Wall-clock prefill and decode timing under a cache policy."""

from __future__ import annotations

import dataclasses
import io
import statistics
import time
from dataclasses import dataclass

from ..anchor import plant_anchors
from ..cache import BudgetReport, KVCachePolicy
from ..decoding import Decoder
from ..errors import InputError
from ..model import ModelWeights
from ..numerics import Rng
from ..vocab import DEFAULT_VOCAB
from .corpus import program_text


@dataclass(frozen=True)
class RuntimeReport:
    label: str
    prompt_len: int
    gen_len: int
    prefill_seconds: float
    decode_seconds: float
    throughput: float
    repeats: int
    budget: BudgetReport

    CSV_HEADER = "policy,prompt_len,gen_len,prefill_s,decode_s,tokens_per_s,peak_retained,budget_percent"

    def csv_row(self) -> str:
        return (f"{self.label},{self.prompt_len},{self.gen_len},{self.prefill_seconds:.6f},"
                f"{self.decode_seconds:.6f},{self.throughput:.3f},{self.budget.peak_retained:g},"
                f"{self.budget.budget_percent:.3f}")


def with_max_seq(weights: ModelWeights, max_seq: int) -> ModelWeights:
    """Same parameters under a longer context limit (positions are rotary only)."""
    cfg = dataclasses.replace(weights.cfg, max_seq=int(max_seq))
    return ModelWeights(cfg, weights.params)


def bench_prompt(prompt_len: int, seed: int = 0) -> list[int]:
    """A toy-program prompt of exactly ``prompt_len`` tokens."""
    text = program_text(Rng(seed), prompt_len + 64)
    while len(text) < prompt_len:
        text += program_text(Rng(seed + len(text)), prompt_len)[4:]
    return DEFAULT_VOCAB.encode(text[:prompt_len])


def bench_runtime(
    weights: ModelWeights,
    policy: KVCachePolicy,
    prompt_len: int,
    gen_len: int,
    repeats: int = 5,
    *,
    prompt=None,
    warmup: int = 1,
    seed: int = 0,
) -> RuntimeReport:
    """Median prefill and decode wall time over ``repeats`` runs.

    The context limit is raised as needed so the prompt, the generated
    tokens, and any planted anchors fit. Warm-up runs are not timed.
    """
    if gen_len < 1:
        raise InputError("gen_len must be >= 1")
    if repeats < 1:
        raise InputError("repeats must be >= 1")
    cfg = weights.cfg
    prompt = list(prompt) if prompt is not None else bench_prompt(prompt_len, seed)
    fed = prompt
    if policy.plants_anchors:
        fed = list(plant_anchors(prompt, cfg.linebreak_token_id, cfg.anchor_token_id).tokens)
    # every generated token could be a linebreak followed by an anchor
    capacity = len(fed) + 2 * gen_len + 1
    w = with_max_seq(weights, max(cfg.max_seq, capacity))
    pre, dec_t = [], []
    budget = None
    for r in range(warmup + repeats):
        d = Decoder(w, policy, capacity=capacity)
        t0 = time.perf_counter()
        logits = d.prefill(fed)
        t1 = time.perf_counter()
        d.decode(logits, gen_len, feed_last=True)
        t2 = time.perf_counter()
        if r >= warmup:
            pre.append(t1 - t0)
            dec_t.append(t2 - t1)
            budget = d.budget()
    decode_s = statistics.median(dec_t)
    return RuntimeReport(
        label=policy.describe(),
        prompt_len=len(prompt),
        gen_len=gen_len,
        prefill_seconds=statistics.median(pre),
        decode_seconds=decode_s,
        throughput=gen_len / decode_s,
        repeats=repeats,
        budget=budget,
    )


def runtime_csv(reports) -> str:
    buf = io.StringIO()
    buf.write(RuntimeReport.CSV_HEADER + "\n")
    for r in reports:
        buf.write(r.csv_row() + "\n")
    return buf.getvalue()
