"""Near-duplicate removal with MinHash signatures and LSH banding.

Documents are shingled into word n-grams, hashed with sha1, and summarized
by a MinHash signature whose matching-slot fraction estimates Jaccard
similarity. Banding turns signatures into candidate pairs; candidates whose
estimated similarity clears the threshold are clustered with union-find and
each cluster keeps its minimum-id member.
"""

from __future__ import annotations

import hashlib
import logging
import unicodedata
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from .corpus_io import Document
from .rng import SplitMix64

logger = logging.getLogger(__name__)

MERSENNE_61 = (1 << 61) - 1


class EmptyDocument(ValueError):
    """Signature requested for an empty shingle set."""


class LengthMismatch(ValueError):
    """Signatures with different permutation counts cannot be compared."""


@dataclass
class DedupConfig:
    num_perm: int = 256
    threshold: float = 0.95
    hash_bits: int = 64
    seed: int = 42
    shingle_n: int = 5

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must be in (0,1), got {self.threshold}")
        if self.num_perm < 16:
            raise ValueError(f"num_perm must be >= 16, got {self.num_perm}")
        if self.hash_bits not in (32, 64):
            raise ValueError(f"hash_bits must be 32 or 64, got {self.hash_bits}")
        if self.shingle_n < 1:
            raise ValueError(f"shingle_n must be >= 1, got {self.shingle_n}")


class MinHashSignature:
    """Per-permutation minima over a document's shingle hashes."""

    __slots__ = ("slots",)

    def __init__(self, slots: np.ndarray):
        self.slots = slots

    @property
    def num_perm(self) -> int:
        return len(self.slots)

    def __eq__(self, other) -> bool:
        if not isinstance(other, MinHashSignature):
            return NotImplemented
        return self.slots.shape == other.slots.shape and bool(
            np.all(self.slots == other.slots)
        )

    def __repr__(self) -> str:
        return f"MinHashSignature(num_perm={self.num_perm})"


def shingle(text: str, n: int) -> set[int]:
    """Hash a text's word n-grams to a set of 64-bit shingle hashes.

    The text is NFC-normalized, lowercased and split on Unicode whitespace;
    each n-token window is joined with single spaces and hashed (sha1, low
    64 bits). Texts shorter than n tokens yield one shingle for the whole
    normalized text; empty or whitespace-only text yields the empty set.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    tokens = unicodedata.normalize("NFC", text).lower().split()
    if not tokens:
        return set()
    if len(tokens) < n:
        windows = [" ".join(tokens)]
    else:
        windows = [" ".join(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]
    return {
        int.from_bytes(hashlib.sha1(w.encode("utf-8")).digest()[-8:], "big")
        for w in windows
    }


@lru_cache(maxsize=8)
def _perm_params(seed: int, num_perm: int) -> tuple[np.ndarray, np.ndarray]:
    # a in [1, p-1], b in [0, p-1], drawn from a splitmix64 stream.
    gen = SplitMix64(seed)
    a = np.empty(num_perm, dtype=np.uint64)
    b = np.empty(num_perm, dtype=np.uint64)
    for i in range(num_perm):
        a[i] = 1 + gen.next_below(MERSENNE_61 - 1)
        b[i] = gen.next_below(MERSENNE_61)
    return a, b


def _mod_mersenne61(x: np.ndarray) -> np.ndarray:
    # x < 2^63; one fold plus one conditional subtract lands in [0, p).
    x = (x & MERSENNE_61) + (x >> 61)
    return np.where(x >= MERSENNE_61, x - MERSENNE_61, x)


def _modmul61(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """(x * y) mod (2^61 - 1) for uint64 arrays with x, y < 2^61.

    Splits both operands 31/30 bits so every intermediate product fits in
    64 bits; 2^61 == 1 (mod p) folds the high parts back down.
    """
    x1, x0 = x >> 31, x & 0x7FFFFFFF
    y1, y0 = y >> 31, y & 0x7FFFFFFF
    # x*y = x1*y1*2^62 + (x1*y0 + x0*y1)*2^31 + x0*y0
    t1 = x1 * y1 << 1  # 2^62 == 2 (mod p); < 2^61
    t1 = np.where(t1 >= MERSENNE_61, t1 - MERSENNE_61, t1)
    m = _mod_mersenne61(x1 * y0 + x0 * y1)
    # m*2^31 = (m >> 30)*2^61 + (m & (2^30-1))*2^31 == (m >> 30) + low<<31 (mod p)
    t2 = _mod_mersenne61((m >> 30) + ((m & 0x3FFFFFFF) << 31))
    t3 = _mod_mersenne61(x0 * y0)
    return _mod_mersenne61(t1 + t2 + t3)


def minhash_signature(shingles: Iterable[int], cfg: DedupConfig) -> MinHashSignature:
    """Signature slot i = min over shingles s of ((a_i*s + b_i) mod p) mod 2^hash_bits."""
    values = np.fromiter(shingles, dtype=np.uint64)
    if values.size == 0:
        raise EmptyDocument("cannot sign an empty shingle set")
    s = _mod_mersenne61((values & MERSENNE_61) + (values >> 61))
    a, b = _perm_params(cfg.seed, cfg.num_perm)
    h = _modmul61(a[:, None], s[None, :]) + b[:, None]
    h = np.where(h >= MERSENNE_61, h - MERSENNE_61, h)
    if cfg.hash_bits == 32:
        h = h & 0xFFFFFFFF
    return MinHashSignature(h.min(axis=1))


def estimate_jaccard(a: MinHashSignature, b: MinHashSignature) -> float:
    """Fraction of equal slots: an unbiased Jaccard estimator."""
    if a.num_perm != b.num_perm:
        raise LengthMismatch(f"{a.num_perm} != {b.num_perm}")
    return float(np.count_nonzero(a.slots == b.slots)) / a.num_perm


def _band_error(threshold: float, b: int, r: int, step: float = 0.01) -> float:
    # 0.5 * integral of the S-curve below the threshold (false positives)
    # + 0.5 * integral of its complement above (false negatives); trapezoid.
    def curve(s: float) -> float:
        return 1.0 - (1.0 - s**r) ** b

    def trapz(f, lo: float, hi: float) -> float:
        xs = [lo]
        i = 1
        while True:
            x = round(i * step, 12)
            if x >= hi:
                break
            if x > lo:
                xs.append(x)
            i += 1
        xs.append(hi)
        return sum(
            0.5 * (f(xs[j]) + f(xs[j + 1])) * (xs[j + 1] - xs[j])
            for j in range(len(xs) - 1)
        )

    fp = trapz(curve, 0.0, threshold)
    fn = trapz(lambda s: 1.0 - curve(s), threshold, 1.0)
    return 0.5 * fp + 0.5 * fn


@lru_cache(maxsize=64)
def optimal_bands(threshold: float, num_perm: int) -> tuple[int, int]:
    """Best (bands, rows-per-band) with bands*rows <= num_perm.

    Exhaustive search minimizing the weighted false-positive/false-negative
    area of the banding S-curve 1-(1-s^r)^b around the threshold; ties go to
    larger b*r, then larger b.
    """
    if num_perm < 1:
        raise ValueError("num_perm must be >= 1")
    best_key = None
    best = (1, 1)
    for b in range(1, num_perm + 1):
        for r in range(1, num_perm // b + 1):
            key = (_band_error(threshold, b, r), -(b * r), -b)
            if best_key is None or key < best_key:
                best_key = key
                best = (b, r)
    return best


class UnionFind:
    """Disjoint sets with path compression; roots are the minimum member."""

    def __init__(self):
        self.parent: dict[int, int] = {}

    def find(self, x: int) -> int:
        if x not in self.parent:
            self.parent[x] = x
            return x
        if self.parent[x] != x:
            self.parent[x] = self.find(self.parent[x])
        return self.parent[x]

    def union(self, x: int, y: int) -> None:
        px, py = self.find(x), self.find(y)
        self.parent[px] = self.parent[py] = min(px, py)


@dataclass
class DedupReport:
    """Audit record: who was kept, who was dropped, and why."""

    clusters: list[tuple[int, list[int]]]
    docs_in: int
    docs_kept: int
    pairs_candidates: int
    empty_doc_ids: list[int]

    def to_json_dict(self, cfg: DedupConfig | None = None) -> dict:
        out: dict = {
            "docs_in": self.docs_in,
            "docs_kept": self.docs_kept,
            "pairs_candidates": self.pairs_candidates,
            "clusters": [
                {"kept": kept, "removed": removed} for kept, removed in self.clusters
            ],
            "empty_docs": self.empty_doc_ids,
        }
        if cfg is not None:
            bands, rows = optimal_bands(cfg.threshold, cfg.num_perm)
            out["config"] = {
                "num_perm": cfg.num_perm,
                "threshold": cfg.threshold,
                "hash_bits": cfg.hash_bits,
                "seed": cfg.seed,
                "shingle_n": cfg.shingle_n,
                "shingling": "nfc-lowercase-whitespace word n-grams, sha1 low 64 bits",
                "bands": bands,
                "rows_per_band": rows,
            }
        return out


def _signature_worker(args: tuple[str, int, DedupConfig]) -> np.ndarray | None:
    text, n, cfg = args
    hashes = shingle(text, n)
    if not hashes:
        return None
    return minhash_signature(hashes, cfg).slots


def _compute_signatures(
    docs: Sequence[Document], cfg: DedupConfig, workers: int
) -> list[np.ndarray | None]:
    jobs = [(doc.text, cfg.shingle_n, cfg) for doc in docs]
    if workers <= 1 or len(docs) < 2:
        return [_signature_worker(job) for job in jobs]
    chunk = max(1, len(jobs) // (workers * 4))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_signature_worker, jobs, chunksize=chunk))


def dedup_corpus(
    docs: Sequence[Document], cfg: DedupConfig, workers: int = 1
) -> tuple[list[Document], DedupReport]:
    """Remove near-duplicates, keeping each cluster's minimum-id document.

    Signatures are banded into per-band hash tables; pairs sharing any
    bucket become candidates and are confirmed when their signature-estimated
    Jaccard reaches the threshold. Documents with empty shingle sets skip
    dedup entirely and are always kept. Output is identical for any worker
    count; kept documents preserve input order.
    """
    docs = list(docs)
    ids = [doc.id for doc in docs]
    if len(set(ids)) != len(ids):
        raise ValueError("document ids must be unique")

    slots = _compute_signatures(docs, cfg, workers)
    empty_ids = [doc.id for doc, s in zip(docs, slots) if s is None]
    signed = [(doc.id, s) for doc, s in zip(docs, slots) if s is not None]

    bands, rows = optimal_bands(cfg.threshold, cfg.num_perm)
    candidates: set[tuple[int, int]] = set()
    for band in range(bands):
        lo = band * rows
        buckets: dict[tuple, list[int]] = {}
        for doc_id, sig in signed:
            key = tuple(sig[lo : lo + rows].tolist())
            buckets.setdefault(key, []).append(doc_id)
        for members in buckets.values():
            for i in range(len(members)):
                for j in range(i + 1, len(members)):
                    x, y = members[i], members[j]
                    candidates.add((x, y) if x < y else (y, x))

    by_id = {doc_id: sig for doc_id, sig in signed}
    uf = UnionFind()
    for x, y in sorted(candidates):
        matches = int(np.count_nonzero(by_id[x] == by_id[y]))
        if matches / cfg.num_perm >= cfg.threshold:
            uf.union(x, y)

    groups: dict[int, list[int]] = {}
    for doc_id, _ in signed:
        if doc_id in uf.parent:
            groups.setdefault(uf.find(doc_id), []).append(doc_id)
    clusters = [
        (root, sorted(m for m in members if m != root))
        for root, members in sorted(groups.items())
        if len(members) > 1
    ]
    removed = {m for _, members in clusters for m in members}
    kept = [doc for doc in docs if doc.id not in removed]

    report = DedupReport(
        clusters=clusters,
        docs_in=len(docs),
        docs_kept=len(kept),
        pairs_candidates=len(candidates),
        empty_doc_ids=empty_ids,
    )
    logger.info(
        "dedup: %d in, %d kept, %d clusters, %d candidate pairs",
        report.docs_in, report.docs_kept, len(clusters), report.pairs_candidates,
    )
    return kept, report
