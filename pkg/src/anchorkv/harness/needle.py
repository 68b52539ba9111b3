"""List-membership retrieval ("needle in a haystack") at toy scale.

Prompt layout, one character per token::

    ###
    # needle in l? T/F
    l=[
    <items, ITEMS_PER_LINE per line>
    ]
    assert needle in l==

The needle is the character ``@``; distractors are digits and lowercase
letters. The negated variant asks ``not in``. The gold answer token is
``T`` or ``F``.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..cache import DensePolicy, KVCachePolicy
from ..decoding import Decoder
from ..errors import InputError
from ..numerics import Rng
from ..vocab import DEFAULT_VOCAB, CharVocab
from .corpus import HEADER

NEEDLE = "@"
DISTRACTORS = "0123456789abcdefghijklmnopqrstuvwxyz"
ITEMS_PER_LINE = 16
INSTRUCTION = "# needle in l? T/F\n"


@dataclass(frozen=True)
class NeedleTask:
    n: int
    depth: float
    present: bool
    negated: bool
    needle_index: int
    items: tuple[str, ...]
    prompt: list[int]
    needle_position: int
    gold: bool
    answer_id: int

    @property
    def distance(self) -> int:
        """Tokens between the needle slot and the last prompt position."""
        return len(self.prompt) - 1 - self.needle_position


def needle_index(n: int, depth: float) -> int:
    """``round(depth * (n - 1))`` with halves rounded up."""
    return int(math.floor(depth * (n - 1) + 0.5))


def render_prompt(items, negated: bool) -> str:
    lines = ["".join(items[i : i + ITEMS_PER_LINE]) for i in range(0, len(items), ITEMS_PER_LINE)]
    query = "assert needle not in l==" if negated else "assert needle in l=="
    return HEADER + INSTRUCTION + "l=[\n" + "\n".join(lines) + "\n]\n" + query


def _item_offset(n: int, index: int) -> int:
    """Character offset of list item ``index`` in the rendered prompt."""
    return len(HEADER) + len(INSTRUCTION) + len("l=[\n") + index + index // ITEMS_PER_LINE


def make_needle(
    rng: Rng,
    n: int,
    depth: float,
    present: bool,
    negated: bool = False,
    *,
    haystack=None,
    vocab: CharVocab = DEFAULT_VOCAB,
) -> NeedleTask:
    """A task over ``n`` random distractors, with the needle at
    ``needle_index(n, depth)`` when ``present``.

    Passing ``haystack`` reuses a fixed distractor list, which lets paired
    present/absent tasks differ in exactly one item.
    """
    if n < 2:
        raise InputError("list length must be >= 2")
    if not 0.0 <= depth <= 1.0:
        raise InputError("depth must lie in [0, 1]")
    if haystack is None:
        haystack = [DISTRACTORS[i] for i in rng.integers(len(DISTRACTORS), size=n)]
    items = list(haystack)
    if len(items) != n or NEEDLE in items:
        raise InputError("haystack must hold n distractors without the needle")
    idx = needle_index(n, depth)
    if present:
        items[idx] = NEEDLE
    gold = present != negated
    prompt = vocab.encode(render_prompt(items, negated))
    return NeedleTask(
        n=n,
        depth=float(depth),
        present=present,
        negated=negated,
        needle_index=idx,
        items=tuple(items),
        prompt=prompt,
        needle_position=_item_offset(n, idx),
        gold=gold,
        answer_id=vocab.id("T" if gold else "F"),
    )


def balanced_tasks(rng: Rng, n: int, depth: float, trials: int, vocab: CharVocab = DEFAULT_VOCAB) -> list[NeedleTask]:
    """``trials`` tasks in groups of four sharing one haystack: needle present
    or absent, crossed with the plain and negated query."""
    if trials < 1:
        raise InputError("trials must be >= 1")
    tasks: list[NeedleTask] = []
    while len(tasks) < trials:
        hay = [DISTRACTORS[i] for i in rng.integers(len(DISTRACTORS), size=n)]
        for negated in (False, True):
            for present in (True, False):
                if len(tasks) < trials:
                    tasks.append(make_needle(rng, n, depth, present, negated, haystack=hay, vocab=vocab))
    return tasks


Answerer = Callable[[NeedleTask], int]


def oracle_answerer(task: NeedleTask) -> int:
    return task.answer_id


def coin_flip_answerer(rng: Rng, vocab: CharVocab = DEFAULT_VOCAB) -> Answerer:
    ids = (vocab.id("T"), vocab.id("F"))
    return lambda task: ids[int(rng.integers(2))]


def model_answerer(weights, policy: KVCachePolicy | None = None, max_steps: int = 4, vocab: CharVocab = DEFAULT_VOCAB) -> Answerer:
    """First greedily generated non-whitespace token under ``policy``."""
    from ..anchor import plant_anchors

    cfg = weights.cfg
    policy = policy or DensePolicy()
    skip = vocab.whitespace_ids

    def answer(task: NeedleTask) -> int:
        dec = Decoder(weights, policy)
        fed = task.prompt
        if policy.plants_anchors:
            fed = list(plant_anchors(fed, cfg.linebreak_token_id, cfg.anchor_token_id).tokens)
        logits = dec.prefill(fed)
        tok = -1
        for step in range(max_steps):
            z = logits.copy()
            z[cfg.anchor_token_id] = -np.inf
            tok = int(np.argmax(z))
            if tok not in skip or step == max_steps - 1:
                break
            logits = dec.feed(tok).logits
            if policy.plants_anchors and tok == cfg.linebreak_token_id:
                logits = dec.feed(cfg.anchor_token_id).logits
        return tok

    return answer


@dataclass
class NeedleGrid:
    lengths: tuple[int, ...]
    depths: tuple[float, ...]
    accuracy: np.ndarray
    trials: int
    distance: np.ndarray
    label: str = ""

    def cell(self, n: int, depth: float) -> float:
        return float(self.accuracy[self.lengths.index(n), self.depths.index(depth)])

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("policy,length,depth,trials,needle_distance,accuracy\n")
        for i, n in enumerate(self.lengths):
            for j, d in enumerate(self.depths):
                buf.write(f"{self.label},{n},{d:g},{self.trials},{int(self.distance[i, j])},{self.accuracy[i, j]:.6f}\n")
        return buf.getvalue()


def eval_needle_grid(
    weights,
    policy: KVCachePolicy | None,
    lengths=(16, 32, 64, 128),
    depths=(0.0, 0.25, 0.5, 0.75, 1.0),
    trials: int = 32,
    *,
    seed: int = 0,
    answerer: Answerer | None = None,
    vocab: CharVocab = DEFAULT_VOCAB,
) -> NeedleGrid:
    """Accuracy per (length, depth) cell over ``trials`` balanced tasks.

    Each cell draws its tasks from its own seeded stream, so grids for
    different policies are evaluated on identical prompts.
    """
    lengths = tuple(int(n) for n in lengths)
    depths = tuple(float(d) for d in depths)
    if answerer is None:
        answerer = model_answerer(weights, policy, vocab=vocab)
    acc = np.zeros((len(lengths), len(depths)))
    dist = np.zeros_like(acc, dtype=np.int64)
    base = Rng(seed)
    for i, n in enumerate(lengths):
        for j, d in enumerate(depths):
            tasks = balanced_tasks(base.child(i * 1000 + j), n, d, trials, vocab)
            acc[i, j] = np.mean([answerer(t) == t.answer_id for t in tasks])
            dist[i, j] = tasks[0].distance
    label = policy.describe() if policy is not None else "custom"
    return NeedleGrid(lengths, depths, acc, trials, dist, label)
