"""Shared token vocabulary with fixed special ids."""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, List

from .errors import DataError

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")

WORD_END = "</w>"


class Vocabulary:
    """Bijective token<->id map shared by source and target sides.

    Ids 0..3 are reserved for PAD/BOS/EOS/UNK; regular tokens can never
    collide with them because subword symbols are built from corpus
    characters plus the word-end marker.
    """

    def __init__(self, tokens: Iterable[str]):
        self.id_to_token: List[str] = list(SPECIAL_TOKENS)
        self.token_to_id = {tok: i for i, tok in enumerate(self.id_to_token)}
        for tok in tokens:
            if tok in self.token_to_id:
                raise DataError(f"duplicate or reserved token {tok!r}")
            self.token_to_id[tok] = len(self.id_to_token)
            self.id_to_token.append(tok)

    def __len__(self) -> int:
        return len(self.id_to_token)

    @classmethod
    def from_corpus(cls, token_lines: Iterable[List[str]]) -> "Vocabulary":
        seen = set()
        for line in token_lines:
            seen.update(line)
        return cls(sorted(seen))

    def encode(self, tokens: Iterable[str]) -> List[int]:
        return [self.token_to_id.get(tok, UNK_ID) for tok in tokens]

    def decode(self, ids: Iterable[int], skip_special: bool = True) -> List[str]:
        out = []
        for i in ids:
            if skip_special and i < len(SPECIAL_TOKENS):
                continue
            if not 0 <= i < len(self.id_to_token):
                raise DataError(f"token id {i} outside vocabulary of {len(self)}")
            out.append(self.id_to_token[i])
        return out

    def save(self, path) -> None:
        body = "\n".join(self.id_to_token[len(SPECIAL_TOKENS):])
        Path(path).write_text(body + "\n" if body else "", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        text = Path(path).read_text(encoding="utf-8")
        tokens = [line for line in text.splitlines() if line]
        return cls(tokens)


def detokenize(tokens: Iterable[str]) -> str:
    """Join subword tokens back into whitespace-separated words."""
    words, current = [], []
    for tok in tokens:
        if tok.endswith(WORD_END):
            current.append(tok[: -len(WORD_END)])
            words.append("".join(current))
            current = []
        else:
            current.append(tok)
    if current:
        words.append("".join(current))
    return " ".join(words)
