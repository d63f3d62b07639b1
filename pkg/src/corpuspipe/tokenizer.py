"""Byte-level BPE tokenizer: training, encode/decode, persistence, comparison.

The base alphabet is the 256 raw bytes, so every UTF-8 string encodes and
decodes losslessly (newlines, Arabic and Tamil script, anything). Id layout:
0-3 are the special tokens (pad, bos, eos, unk), 4-259 the single bytes in
byte order, and 260+i the result of merge i.
"""

from __future__ import annotations

import base64
import heapq
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .corpus_io import Document

logger = logging.getLogger(__name__)

SPECIALS = {"pad": 0, "bos": 1, "eos": 2, "unk": 3}
NUM_SPECIALS = 4
BYTE_OFFSET = 4
BASE_VOCAB = 260  # 4 specials + 256 bytes

MODEL_VERSION = 1

# Words keep their leading whitespace; a trailing whitespace run becomes its
# own pre-token, so concatenating pre-tokens reproduces the text exactly.
_PRETOKEN_RE = re.compile(r"\s*\S+|\s+")


class EmptyCorpus(ValueError):
    """Training or comparison requested on an empty corpus."""


class UnknownId(ValueError):
    """Token id outside the model vocabulary."""


class SchemaError(ValueError):
    """Model file does not match the expected schema or invariants."""


def pretokenize(text: str) -> list[str]:
    return _PRETOKEN_RE.findall(text)


@dataclass
class TokenizerModel:
    """Ordered vocab + merge list; encode/decode are total on UTF-8 text."""

    vocab: list[bytes]
    merges: list[tuple[int, int]]
    specials: dict[str, int] = field(default_factory=lambda: dict(SPECIALS))
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def byte_level(cls) -> "TokenizerModel":
        """Merge-free base model: 4 specials + 256 byte tokens."""
        vocab = [b"<pad>", b"<bos>", b"<eos>", b"<unk>"]
        vocab += [bytes([v]) for v in range(256)]
        return cls(vocab=vocab, merges=[])

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @property
    def eos_id(self) -> int:
        return self.specials["eos"]

    def _ranks(self) -> dict[tuple[int, int], int]:
        ranks = self._cache.get("ranks")
        if ranks is None:
            ranks = {pair: i for i, pair in enumerate(self.merges)}
            self._cache["ranks"] = ranks
        return ranks

    def _merged_id(self, rank: int) -> int:
        return BASE_VOCAB + rank

    def _encode_word(self, word: str) -> tuple[int, ...]:
        cached = self._cache.setdefault("words", {}).get(word)
        if cached is not None:
            return cached
        ranks = self._ranks()
        ids = [BYTE_OFFSET + b for b in word.encode("utf-8")]
        while len(ids) > 1:
            best_rank = None
            for i in range(len(ids) - 1):
                r = ranks.get((ids[i], ids[i + 1]))
                if r is not None and (best_rank is None or r < best_rank):
                    best_rank = r
            if best_rank is None:
                break
            left, right = self.merges[best_rank]
            new_id = self._merged_id(best_rank)
            out: list[int] = []
            i = 0
            while i < len(ids):
                if i + 1 < len(ids) and ids[i] == left and ids[i + 1] == right:
                    out.append(new_id)
                    i += 2
                else:
                    out.append(ids[i])
                    i += 1
            ids = out
        result = tuple(ids)
        self._cache["words"][word] = result
        return result

    def encode(self, text: str) -> list[int]:
        """Tokenize text: merges apply lowest rank first, leftmost first."""
        ids: list[int] = []
        for word in pretokenize(text):
            ids.extend(self._encode_word(word))
        return ids

    def decode(self, ids: Sequence[int]) -> str:
        """Concatenate token bytes (specials skipped) and decode as UTF-8."""
        parts = []
        for i in ids:
            if not 0 <= i < len(self.vocab):
                raise UnknownId(f"token id {i} outside vocab of {len(self.vocab)}")
            if i < NUM_SPECIALS:
                continue
            parts.append(self.vocab[i])
        return b"".join(parts).decode("utf-8")


@dataclass
class CompressionReport:
    tokens_a: int
    tokens_b: int
    reduction: float  # 1 - tokens_a / tokens_b


def _word_counts(corpus: Iterable[Document]) -> dict[str, int]:
    counts: dict[str, int] = {}
    for doc in corpus:
        for word in pretokenize(doc.text):
            counts[word] = counts.get(word, 0) + 1
    return counts


def train_bpe(corpus: Iterable[Document], vocab_size: int) -> TokenizerModel:
    """Train a byte-level BPE model by greedy pair merging.

    Repeatedly merges the most frequent adjacent token pair (ties broken by
    lexicographically smallest (left bytes, right bytes)). Stops once the
    vocabulary reaches vocab_size or no pair occurs at least twice. Pair
    occurrences are counted per adjacent position; merges apply left to
    right without overlap.
    """
    if vocab_size < BASE_VOCAB + 1:
        raise ValueError(f"vocab_size must be >= {BASE_VOCAB + 1}, got {vocab_size}")
    counts = _word_counts(corpus)
    if not counts:
        raise EmptyCorpus("no text to train on")

    model = TokenizerModel.byte_level()
    vocab = model.vocab
    words: list[tuple[list[int], int]] = [
        ([BYTE_OFFSET + b for b in word.encode("utf-8")], cnt)
        for word, cnt in sorted(counts.items())
    ]

    pair_counts: dict[tuple[int, int], int] = {}
    pair_words: dict[tuple[int, int], set[int]] = {}
    for wi, (ids, cnt) in enumerate(words):
        for pair in zip(ids, ids[1:]):
            pair_counts[pair] = pair_counts.get(pair, 0) + cnt
            pair_words.setdefault(pair, set()).add(wi)

    # Heap keyed by (-count, left bytes, right bytes, left id, right id);
    # stale entries are skipped when their recorded count no longer matches.
    def heap_entry(pair: tuple[int, int], cnt: int):
        return (-cnt, vocab[pair[0]], vocab[pair[1]], pair[0], pair[1])

    heap = [heap_entry(p, c) for p, c in pair_counts.items() if c >= 2]
    heapq.heapify(heap)

    budget = vocab_size - BASE_VOCAB
    merges: list[tuple[int, int]] = []
    while len(merges) < budget and heap:
        neg_count, _, _, left, right = heapq.heappop(heap)
        pair = (left, right)
        current = pair_counts.get(pair, 0)
        if current < 2:
            continue
        if -neg_count != current:
            heapq.heappush(heap, heap_entry(pair, current))
            continue

        new_id = len(vocab)
        vocab.append(vocab[left] + vocab[right])
        merges.append(pair)

        touched: dict[tuple[int, int], int] = {}
        for wi in sorted(pair_words.get(pair, ())):
            ids, cnt = words[wi]
            if pair not in zip(ids, ids[1:]):
                continue
            old_pairs = list(zip(ids, ids[1:]))
            out: list[int] = []
            i = 0
            while i < len(ids):
                if i + 1 < len(ids) and ids[i] == left and ids[i + 1] == right:
                    out.append(new_id)
                    i += 2
                else:
                    out.append(ids[i])
                    i += 1
            words[wi] = (out, cnt)
            for p in old_pairs:
                touched[p] = touched.get(p, 0) - cnt
            for p in zip(out, out[1:]):
                touched[p] = touched.get(p, 0) + cnt
                pair_words.setdefault(p, set()).add(wi)
        for p, delta in touched.items():
            if delta == 0:
                continue
            pair_counts[p] = pair_counts.get(p, 0) + delta
            if pair_counts[p] >= 2:
                heapq.heappush(heap, heap_entry(p, pair_counts[p]))

    if len(merges) < budget:
        logger.info(
            "training stopped early at %d tokens (no pair occurs twice)",
            len(vocab),
        )
    return TokenizerModel(vocab=vocab, merges=merges)


def compare_tokenizers(
    a: TokenizerModel, b: TokenizerModel, corpus: Iterable[Document]
) -> CompressionReport:
    """Total token counts of two models over one corpus, and the reduction."""
    docs = list(corpus)
    if not docs:
        raise EmptyCorpus("no text to compare on")
    tokens_a = sum(len(a.encode(doc.text)) for doc in docs)
    tokens_b = sum(len(b.encode(doc.text)) for doc in docs)
    return CompressionReport(
        tokens_a=tokens_a, tokens_b=tokens_b, reduction=1.0 - tokens_a / tokens_b
    )


def save_model(model: TokenizerModel, path: str | Path) -> None:
    """Persist a model as JSON (vocab as base64 byte-strings)."""
    payload = {
        "version": MODEL_VERSION,
        "vocab": [base64.b64encode(tok).decode("ascii") for tok in model.vocab],
        "merges": [list(pair) for pair in model.merges],
        "specials": model.specials,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def load_model(path: str | Path) -> TokenizerModel:
    """Load and validate a model file; raises SchemaError on any mismatch."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"not valid JSON: {exc.msg}") from None
    for key in ("version", "vocab", "merges", "specials"):
        if key not in payload:
            raise SchemaError(f"missing field {key!r}")
    if payload["version"] != MODEL_VERSION:
        raise SchemaError(f"unsupported model version {payload['version']!r}")
    try:
        vocab = [base64.b64decode(tok, validate=True) for tok in payload["vocab"]]
        merges = [(int(l), int(r)) for l, r in payload["merges"]]
    except Exception as exc:
        raise SchemaError(f"malformed vocab or merges: {exc}") from None
    if payload["specials"] != SPECIALS:
        raise SchemaError(f"unexpected specials table {payload['specials']!r}")
    if len(vocab) != BASE_VOCAB + len(merges):
        raise SchemaError(
            f"vocab size {len(vocab)} != {BASE_VOCAB} + {len(merges)} merges"
        )
    for v in range(256):
        if vocab[BYTE_OFFSET + v] != bytes([v]):
            raise SchemaError(f"base byte token {v} corrupted")
    for i, (left, right) in enumerate(merges):
        result = BASE_VOCAB + i
        if not (0 <= left < result and 0 <= right < result):
            raise SchemaError(f"merge {i} references id outside prior vocab")
        if vocab[result] != vocab[left] + vocab[right]:
            raise SchemaError(f"merge {i} result token does not match its parts")
    return TokenizerModel(vocab=vocab, merges=merges)
