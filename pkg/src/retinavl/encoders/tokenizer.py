"""Byte-pair tokenizer with a file-backed vocabulary.

The vocabulary ships as a JSON file holding the token list and the ordered
merge table. Production runs load the vocabulary inherited from whatever
checkpoint initialized the encoders; tests build tiny fixture vocabularies
with :func:`build_vocab`. Word-level BPE: text is lowercased and split
into alphanumeric runs and single punctuation marks, each word ends in a
``</w>`` marker, then merges apply in ranked order.
"""

from __future__ import annotations

import json
import os
import re
from collections import Counter

START = "<|start|>"
END = "<|end|>"
PAD = "<|pad|>"
UNK = "<|unk|>"
SPECIALS = (START, END, PAD, UNK)

_WORD = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")
_EOW = "</w>"


def _word_pieces(word: str) -> tuple[str, ...]:
    return tuple(word[:-1]) + (word[-1] + _EOW,)


class Tokenizer:
    def __init__(self, tokens: list[str], merges: list[tuple[str, str]]):
        for sp in SPECIALS:
            if sp not in tokens:
                raise ValueError(f"vocabulary missing special token {sp}")
        self._id = {tok: i for i, tok in enumerate(tokens)}
        self._tok = list(tokens)
        self._rank = {tuple(m): r for r, m in enumerate(merges)}
        self._merges = [tuple(m) for m in merges]
        self.start_id = self._id[START]
        self.end_id = self._id[END]
        self.pad_id = self._id[PAD]
        self.unk_id = self._id[UNK]

    def __len__(self) -> int:
        return len(self._tok)

    def _bpe(self, word: str) -> list[str]:
        pieces = list(_word_pieces(word))
        while len(pieces) > 1:
            pairs = [(pieces[i], pieces[i + 1]) for i in range(len(pieces) - 1)]
            ranked = [(self._rank[p], i) for i, p in enumerate(pairs) if p in self._rank]
            if not ranked:
                break
            _, i = min(ranked)
            pieces[i : i + 2] = [pieces[i] + pieces[i + 1]]
        return pieces

    def tokenize(self, text: str, max_tokens: int) -> list[int]:
        """Encode text as [start, ...pieces, end], truncated to max_tokens.

        Truncation keeps the prefix and re-appends the end marker so the
        sequence always terminates properly.
        """
        if max_tokens < 2:
            raise ValueError("max_tokens must leave room for start/end markers")
        ids = [self.start_id]
        for word in _WORD.findall(text.lower()):
            for piece in self._bpe(word):
                ids.append(self._id.get(piece, self.unk_id))
        ids.append(self.end_id)
        if len(ids) > max_tokens:
            ids = ids[: max_tokens - 1] + [self.end_id]
        return ids

    def detokenize(self, ids: list[int]) -> str:
        words: list[str] = []
        current = ""
        for i in ids:
            tok = self._tok[i]
            if tok in SPECIALS:
                continue
            if tok.endswith(_EOW):
                words.append(current + tok[: -len(_EOW)])
                current = ""
            else:
                current += tok
        if current:
            words.append(current)
        # rejoin: spaces between words, punctuation attached to the left
        out = ""
        for w in words:
            if not out:
                out = w
            elif re.fullmatch(r"[a-z0-9]+", w):
                out += " " + w
            else:
                out += w
        return out

    def save(self, path: str | os.PathLike) -> None:
        payload = {
            "tokens": self._tok,
            "merges": [list(m) for m in self._merges],
            "specials": list(SPECIALS),
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, ensure_ascii=False)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Tokenizer":
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
        return cls(payload["tokens"], [tuple(m) for m in payload["merges"]])


def build_vocab(corpus: list[str], n_merges: int = 100) -> Tokenizer:
    """Learn a small BPE vocabulary from a text corpus (fixture helper)."""
    word_freq: Counter = Counter()
    for text in corpus:
        word_freq.update(_WORD.findall(text.lower()))

    words = {w: list(_word_pieces(w)) for w in word_freq}
    merges: list[tuple[str, str]] = []
    for _ in range(n_merges):
        pair_freq: Counter = Counter()
        for w, pieces in words.items():
            f = word_freq[w]
            for i in range(len(pieces) - 1):
                pair_freq[(pieces[i], pieces[i + 1])] += f
        if not pair_freq:
            break
        # deterministic: break frequency ties lexicographically
        best = max(sorted(pair_freq), key=lambda p: pair_freq[p])
        if pair_freq[best] < 2:
            break
        merges.append(best)
        merged = best[0] + best[1]
        for w, pieces in words.items():
            i = 0
            while i < len(pieces) - 1:
                if (pieces[i], pieces[i + 1]) == best:
                    pieces[i : i + 2] = [merged]
                else:
                    i += 1

    tokens = set(SPECIALS)
    for w in word_freq:
        tokens.update(_word_pieces(w))
    for a, b in merges:
        tokens.add(a + b)
    ordered = list(SPECIALS) + sorted(tokens - set(SPECIALS))
    return Tokenizer(ordered, merges)
