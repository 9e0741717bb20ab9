"""Character-level vocabulary: four specials plus printable ASCII."""
from __future__ import annotations

from pathlib import Path

import numpy as np

SPECIALS = ("<pad>", "<bos>", "<sep>", "<eos>")
PRINTABLE = "".join(chr(c) for c in range(32, 127))


class VocabError(ValueError):
    pass


class CharVocab:
    """Maps characters to ids. Ids 0..3 are PAD, BOS, SEP, EOS."""

    PAD, BOS, SEP, EOS = 0, 1, 2, 3

    def __init__(self, symbols: str = PRINTABLE):
        if len(set(symbols)) != len(symbols):
            raise VocabError("duplicate symbols in vocabulary")
        self.symbols = symbols
        self._ids = {c: i + len(SPECIALS) for i, c in enumerate(symbols)}

    def __len__(self) -> int:
        return len(SPECIALS) + len(self.symbols)

    def encode(self, text: str) -> list[int]:
        try:
            return [self._ids[c] for c in text]
        except KeyError as exc:
            raise VocabError(f"character {exc.args[0]!r} not in vocabulary") from None

    def decode(self, ids) -> str:
        """Characters up to the first EOS; other specials are dropped."""
        out = []
        for i in np.asarray(ids).reshape(-1).tolist():
            if i == self.EOS:
                break
            if i >= len(SPECIALS):
                out.append(self.symbols[i - len(SPECIALS)])
        return "".join(out)

    def sequence(self, prompt: str, answer: str) -> tuple[list[int], int]:
        """BOS prompt SEP answer EOS, plus the index where answer targets start."""
        ids = [self.BOS, *self.encode(prompt), self.SEP]
        start = len(ids)
        ids += [*self.encode(answer), self.EOS]
        return ids, start

    def save(self, path: str | Path) -> None:
        # one symbol per line; newline characters are not representable
        Path(path).write_text("\n".join(self.symbols) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "CharVocab":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise VocabError(f"cannot read vocabulary {path}: {exc}") from exc
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if any(len(s) != 1 for s in lines):
            raise VocabError(f"{path}: every line must hold exactly one character")
        return cls("".join(lines))
