"""Synthetic training corpora.

Every sequence opens with a fixed header line (``###`` plus linebreak)
whose length equals the default sink count, so the first line is both the
never-masked leading segment and the set of sink positions.
"""

from __future__ import annotations

import numpy as np

from ..errors import InputError
from ..numerics import Rng
from ..vocab import DEFAULT_VOCAB, CharVocab

HEADER = "###\n"
VARS = "abcdefghjkmnpqrstuvwxyz"
DIGITS = "0123456789"


def _program_line(rng: Rng, defined: list[str]) -> str:
    """One statement; later statements mostly reuse earlier variables."""

    def var():
        return defined[int(rng.integers(len(defined)))]

    def digit():
        return DIGITS[int(rng.integers(10))]

    fresh = [v for v in VARS if v not in defined]
    kind = int(rng.integers(6)) if len(defined) >= 2 else 0
    if kind == 0 or (kind == 1 and not fresh):
        target = fresh[int(rng.integers(len(fresh)))] if fresh else var()
        line = f"{target}={digit()}"
    elif kind == 1:
        target = fresh[int(rng.integers(len(fresh)))]
        line = f"{target}={var()}+{digit()}"
    elif kind == 2:
        line = f"{var()}={var()}*{var()}"
    elif kind == 3:
        line = f"print({var()})"
    elif kind == 4:
        a = var()
        line = f"if {a}>{var()}:\n  {a}={a}-{digit()}"
    else:
        a = var()
        line = f"for i in range({digit()}):\n  {a}={a}+i"
    if kind in (0, 1) and target not in defined:
        defined.append(target)
    return line + "\n"


def program_text(rng: Rng, approx_chars: int) -> str:
    """Line-structured toy program of roughly ``approx_chars`` characters."""
    defined: list[str] = []
    parts = [HEADER]
    n = len(HEADER)
    while n < approx_chars:
        line = _program_line(rng, defined)
        if n + len(line) > approx_chars and n > len(HEADER):
            break
        parts.append(line)
        n += len(line)
        if len(defined) > 8 and rng.uniform() < 0.1:
            defined.pop(int(rng.integers(len(defined))))
    return "".join(parts)


def make_corpus(
    rng: Rng,
    size_tokens: int,
    style: str = "lines",
    *,
    seq_len: int = 256,
    lengths=(16, 32, 64, 128),
    negated_fraction: float = 0.25,
    probe_fraction: float = 0.0,
    vocab: CharVocab = DEFAULT_VOCAB,
) -> list[list[int]]:
    """Sequences totalling at least ``size_tokens`` tokens (anchors not planted).

    ``lines`` yields toy programs of about ``seq_len`` characters;
    ``membership`` yields needle prompts followed by their answer token.
    Gold answers alternate, so labels are balanced exactly for any
    ``negated_fraction``. Keeping negated queries a minority lets needle
    presence correlate with the answer; at exactly one half the answer is
    an XOR with no first-order signal and training stalls at chance.

    A ``probe_fraction`` of membership items are line probes: the prompt
    stops after the list line that holds the needle slot and the answer
    says whether that line contains the needle. Under anchor attention the
    answer to a probe is read at the line's own anchor, so the anchor
    learns to summarize its line in one hop; full prompts then only have
    to read that summary back.
    """
    if size_tokens < 1:
        raise InputError("corpus size must be >= 1")
    out: list[list[int]] = []
    total = 0
    if style == "lines":
        while total < size_tokens:
            seq = vocab.encode(program_text(rng, seq_len))
            out.append(seq)
            total += len(seq)
    elif style == "membership":
        from .needle import make_needle

        i = 0
        while total < size_tokens:
            n = int(lengths[int(rng.integers(len(lengths)))])
            negated = bool(rng.uniform() < negated_fraction)
            gold = bool(i % 2)
            task = make_needle(rng, n, float(rng.uniform()), present=gold != negated, negated=negated, vocab=vocab)
            if rng.uniform() < probe_fraction:
                seq = line_probe(task, vocab)
            else:
                seq = task.prompt + [task.answer_id]
            out.append(seq)
            total += len(seq)
            i += 1
    else:
        raise InputError(f"unknown corpus style {style!r}")
    return out


def line_probe(task, vocab: CharVocab = DEFAULT_VOCAB) -> list[int]:
    """Prompt prefix ending with the list line holding the needle slot,
    followed by ``T`` or ``F`` for whether the needle is on that line."""
    from .needle import INSTRUCTION, ITEMS_PER_LINE

    k = task.needle_index // ITEMS_PER_LINE
    line = "".join(task.items[k * ITEMS_PER_LINE : (k + 1) * ITEMS_PER_LINE])
    text = HEADER + INSTRUCTION + "l=[\n" + line + "\n"
    return vocab.encode(text) + [vocab.id("T" if task.present else "F")]


def linebreak_fraction(corpus, vocab: CharVocab = DEFAULT_VOCAB) -> float:
    flat = np.concatenate([np.asarray(s) for s in corpus])
    return float(np.mean(flat == vocab.linebreak_id))
