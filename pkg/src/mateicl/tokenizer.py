"""Tokenizers: greedy longest-match over a word table, and byte-level BPE.

The simple tokenizer is the default for bundled vocabularies; BPE exists
so user-converted GPT-2-family checkpoints can be driven with their own
vocab.bpe / merges files.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .errors import FormatError


@dataclass
class TokenSequence:
    ids: list[int]
    text: str | None = None

    def __len__(self) -> int:
        return len(self.ids)


class SimpleVocab:
    """Word table with byte fallback.

    File format: UTF-8, one token per line, id = line index.  Ids
    [n_entries, n_entries + 256) are reserved for fallback bytes, so any
    text tokenizes and detokenize(tokenize(t)) == t.
    """

    def __init__(self, entries: list[str]):
        self.entries = list(entries)
        self._ids = {tok: i for i, tok in enumerate(self.entries)}
        self._max_len = max((len(t) for t in self.entries), default=0)
        self.byte_base = len(self.entries)
        self.size = len(self.entries) + 256

    @classmethod
    def load(cls, path) -> "SimpleVocab":
        with open(path, encoding="utf-8") as fh:
            entries = [line.rstrip("\n") for line in fh]
        while entries and entries[-1] == "":
            entries.pop()
        return cls(entries)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.entries:
                fh.write(tok + "\n")

    def id_of(self, token: str) -> int:
        return self._ids[token]

    def tokenize(self, text: str) -> TokenSequence:
        ids: list[int] = []
        i = 0
        n = len(text)
        while i < n:
            match_id = -1
            match_len = 0
            limit = min(self._max_len, n - i)
            for length in range(limit, 0, -1):
                tid = self._ids.get(text[i : i + length])
                if tid is not None:
                    match_id, match_len = tid, length
                    break
            if match_id >= 0:
                ids.append(match_id)
                i += match_len
            else:
                for byte in text[i].encode("utf-8"):
                    ids.append(self.byte_base + byte)
                i += 1
        return TokenSequence(ids, text)

    def detokenize(self, ids: list[int]) -> str:
        parts: list[str] = []
        pending = bytearray()
        for tid in ids:
            if tid >= self.byte_base:
                pending.append(tid - self.byte_base)
                continue
            if pending:
                parts.append(pending.decode("utf-8"))
                pending = bytearray()
            parts.append(self.entries[tid])
        if pending:
            parts.append(pending.decode("utf-8"))
        return "".join(parts)


def _bytes_to_unicode() -> dict[int, str]:
    # GPT-2's reversible byte <-> printable-unicode table
    bs = list(range(ord("!"), ord("~") + 1)) + list(range(ord("\xa1"), ord("\xac") + 1)) + list(
        range(ord("\xae"), ord("\xff") + 1)
    )
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return dict(zip(bs, (chr(c) for c in cs)))


# GPT-2 pre-tokenization split, with \p{L}/\p{N} approximated for stdlib re
_SPLIT = re.compile(
    r"""'s|'t|'re|'ve|'m|'ll|'d| ?[^\W\d_]+| ?\d+| ?[^\s\w]+|\s+(?!\S)|\s+""",
    re.UNICODE,
)


class BpeVocab:
    """Byte-level BPE over an explicit vocab map and ranked merge list.

    Vocab file: one ``token<TAB>id`` per line.  Merges file: a header line
    followed by one space-separated pair per line, rank = line order.
    """

    def __init__(self, vocab: dict[str, int], merges: list[tuple[str, str]]):
        self.vocab = dict(vocab)
        self.decoder = {i: t for t, i in self.vocab.items()}
        self.ranks = {pair: r for r, pair in enumerate(merges)}
        self.byte_encoder = _bytes_to_unicode()
        self.byte_decoder = {c: b for b, c in self.byte_encoder.items()}
        self.size = max(self.vocab.values()) + 1 if self.vocab else 0
        self._cache: dict[str, list[str]] = {}

    @classmethod
    def load(cls, vocab_path, merges_path) -> "BpeVocab":
        vocab: dict[str, int] = {}
        with open(vocab_path, encoding="utf-8") as fh:
            for ln, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                if "\t" not in line:
                    raise FormatError(f"{vocab_path}:{ln}: expected token<TAB>id")
                tok, _, ids = line.partition("\t")
                try:
                    vocab[tok] = int(ids)
                except ValueError as exc:
                    raise FormatError(f"{vocab_path}:{ln}: bad id {ids!r}") from exc
        merges: list[tuple[str, str]] = []
        with open(merges_path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        for ln, line in enumerate(lines[1:], 2):  # first line is the header
            if not line.strip():
                continue
            parts = line.split(" ")
            if len(parts) != 2:
                raise FormatError(f"{merges_path}:{ln}: expected two space-separated symbols")
            merges.append((parts[0], parts[1]))
        return cls(vocab, merges)

    def _bpe(self, piece: str) -> list[str]:
        cached = self._cache.get(piece)
        if cached is not None:
            return cached
        word = list(piece)
        while len(word) > 1:
            pairs = {(word[i], word[i + 1]) for i in range(len(word) - 1)}
            best = min(pairs, key=lambda p: self.ranks.get(p, float("inf")))
            if best not in self.ranks:
                break
            merged: list[str] = []
            i = 0
            while i < len(word):
                if i < len(word) - 1 and (word[i], word[i + 1]) == best:
                    merged.append(word[i] + word[i + 1])
                    i += 2
                else:
                    merged.append(word[i])
                    i += 1
            word = merged
        self._cache[piece] = word
        return word

    def tokenize(self, text: str) -> TokenSequence:
        ids: list[int] = []
        for piece in _SPLIT.findall(text):
            mapped = "".join(self.byte_encoder[b] for b in piece.encode("utf-8"))
            for sym in self._bpe(mapped):
                tid = self.vocab.get(sym)
                if tid is None:
                    raise FormatError(f"merged symbol {sym!r} is not in the vocabulary")
                ids.append(tid)
        return TokenSequence(ids, text)

    def detokenize(self, ids: list[int]) -> str:
        text = "".join(self.decoder[i] for i in ids)
        data = bytes(self.byte_decoder[c] for c in text)
        return data.decode("utf-8", errors="replace")
