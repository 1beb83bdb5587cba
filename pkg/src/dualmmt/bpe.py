"""Byte-pair encoding learned jointly over source and target corpora.

Words are segmented into characters with the end-of-word marker attached
to the final symbol. Learning greedily merges the most frequent adjacent
pair (lexicographic tie-break); application replays merges lowest rank
first, leftmost occurrence first, until no merge applies.
"""

from __future__ import annotations

from collections import Counter
from pathlib import Path
from typing import Dict, Iterable, List, Tuple

from .errors import ContractError, DataError
from .vocabulary import WORD_END

Pair = Tuple[str, str]


def base_segment(word: str) -> Tuple[str, ...]:
    """Characters, with the word-end marker fused onto the last one."""
    if not word:
        return ()
    chars = list(word)
    chars[-1] += WORD_END
    return tuple(chars)


def _merge_symbols(symbols: Tuple[str, ...], pair: Pair) -> Tuple[str, ...]:
    """Merge non-overlapping occurrences of `pair`, leftmost first."""
    merged: List[str] = []
    i = 0
    while i < len(symbols):
        if (i + 1 < len(symbols) and symbols[i] == pair[0]
                and symbols[i + 1] == pair[1]):
            merged.append(pair[0] + pair[1])
            i += 2
        else:
            merged.append(symbols[i])
            i += 1
    return tuple(merged)


class BPEModel:
    def __init__(self, merges: List[Pair]):
        self.merges = list(merges)
        self.ranks: Dict[Pair, int] = {pair: i for i, pair in enumerate(self.merges)}

    @classmethod
    def learn(cls, lines: Iterable[str], num_merges: int) -> "BPEModel":
        """Greedy most-frequent-pair merging over a joint corpus."""
        if num_merges < 0:
            raise ContractError(f"merge count must be >= 0, got {num_merges}")
        word_freq: Counter = Counter()
        for line in lines:
            word_freq.update(line.split())
        if not word_freq:
            raise DataError("cannot learn BPE from an empty corpus")

        words = {word: base_segment(word) for word in word_freq}
        merges: List[Pair] = []
        for _ in range(num_merges):
            pair_freq: Counter = Counter()
            for word, symbols in words.items():
                freq = word_freq[word]
                for left, right in zip(symbols, symbols[1:]):
                    pair_freq[(left, right)] += freq
            if not pair_freq:
                break
            best = min(pair_freq.items(), key=lambda kv: (-kv[1], kv[0]))[0]
            merges.append(best)
            words = {w: _merge_symbols(s, best) for w, s in words.items()}
        return cls(merges)

    def segment_word(self, word: str) -> List[str]:
        """Apply learned merges to one word until fixpoint."""
        symbols = base_segment(word)
        while len(symbols) > 1:
            ranked = [(self.ranks[p], p) for p in set(zip(symbols, symbols[1:]))
                      if p in self.ranks]
            if not ranked:
                break
            _, pair = min(ranked)
            symbols = _merge_symbols(symbols, pair)
        return list(symbols)

    def segment_line(self, line: str) -> List[str]:
        tokens: List[str] = []
        for word in line.split():
            tokens.extend(self.segment_word(word))
        return tokens

    def save(self, path) -> None:
        lines = [f"{a} {b}" for a, b in self.merges]
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""),
                              encoding="utf-8")

    @classmethod
    def load(cls, path) -> "BPEModel":
        merges = []
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split(" ")
            if len(parts) != 2:
                raise DataError(f"merge file line {lineno}: expected two symbols")
            merges.append((parts[0], parts[1]))
        return cls(merges)
