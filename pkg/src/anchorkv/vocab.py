"""Fixed character vocabulary: linebreak, printable ASCII, and the anchor token."""

from __future__ import annotations

import string

from .errors import InputError

ANCHOR_SYMBOL = "⟨ANC⟩"


class CharVocab:
    """Maps characters to ids. The anchor token is the last id and has no character."""

    def __init__(self, chars: str | None = None):
        if chars is None:
            chars = "\n" + "".join(chr(c) for c in range(32, 127))
        if len(set(chars)) != len(chars):
            raise InputError("vocabulary characters must be unique")
        self.chars = chars
        self._index = {c: i for i, c in enumerate(chars)}
        self.anchor_id = len(chars)
        self.linebreak_id = self._index["\n"]

    def __len__(self) -> int:
        return len(self.chars) + 1

    def id(self, ch: str) -> int:
        try:
            return self._index[ch]
        except KeyError:
            raise InputError(f"character {ch!r} is not in the vocabulary") from None

    def encode(self, text: str) -> list[int]:
        return [self.id(c) for c in text]

    def decode(self, ids, show_anchors: bool = False) -> str:
        out = []
        for i in ids:
            if i == self.anchor_id:
                if show_anchors:
                    out.append(ANCHOR_SYMBOL)
            else:
                out.append(self.chars[i])
        return "".join(out)

    def label(self, i: int) -> str:
        if i == self.anchor_id:
            return ANCHOR_SYMBOL
        ch = self.chars[i]
        return "\\n" if ch == "\n" else ch

    @property
    def whitespace_ids(self) -> frozenset[int]:
        return frozenset(self._index[c] for c in string.whitespace if c in self._index)


DEFAULT_VOCAB = CharVocab()
