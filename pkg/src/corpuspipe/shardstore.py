"""Fixed-context token shards: packing, binary shard files, manifests, reading.

Shard layout (everything little-endian):

    magic   4 bytes  "MLSD" (4D 4C 53 44)
    version u32      1
    context u32      tokens per sample
    width   u32      bytes per token (2)
    samples u64      row count
    payload          samples * context u16 token ids

The manifest is JSON over a set of shards: per-shard sample counts, payload
byte sizes, and sha1 payload digests, ordered by path. Readers verify each
shard's digest on first access and then trust it.
"""

from __future__ import annotations

import bisect
import hashlib
import json
import logging
import struct
import threading
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import corpus_io
from .rng import SplitMix64
from .tokenizer import TokenizerModel

logger = logging.getLogger(__name__)

MAGIC = b"MLSD"
FORMAT_VERSION = 1
MANIFEST_VERSION = 1
TOKEN_WIDTH = 2

_HEADER = struct.Struct("<4sIIIQ")


class TokenOverflow(ValueError):
    """Token id does not fit the shard's token width."""


class MixedGeometry(ValueError):
    """Shards with different context lengths or token widths cannot merge."""


class DuplicatePath(ValueError):
    """Two shard entries share a path."""


class IntegrityError(RuntimeError):
    """Shard payload digest does not match the manifest."""

    def __init__(self, shard: str, expected: str, actual: str):
        super().__init__(f"{shard}: digest {actual} != manifest {expected}")
        self.shard = shard
        self.expected = expected
        self.actual = actual


class IndexOutOfRange(IndexError):
    """Global sample index beyond the dataset."""


class ManifestError(ValueError):
    """Manifest file does not match the expected schema."""


class SplitConversionError(RuntimeError):
    """A split failed to convert; the split index is attached, the original
    error is the cause."""

    def __init__(self, split_index: int, cause: Exception):
        super().__init__(f"split {split_index}: {cause}")
        self.split_index = split_index


@dataclass
class PackedSamples:
    context_length: int
    samples: np.ndarray  # (num_samples, context_length) int64
    dropped_tail: int

    @property
    def num_samples(self) -> int:
        return int(self.samples.shape[0])


@dataclass(frozen=True)
class ShardMeta:
    path: str  # file name, relative to the manifest directory
    num_samples: int
    payload_bytes: int
    digest_hex: str
    context_length: int
    token_width: int = TOKEN_WIDTH

    def __post_init__(self):
        expected = self.num_samples * self.context_length * self.token_width
        if self.payload_bytes != expected:
            raise ValueError(
                f"{self.path}: payload_bytes {self.payload_bytes} != "
                f"{self.num_samples} samples * {self.context_length} * {self.token_width}"
            )


@dataclass
class ShardManifest:
    version: int
    context_length: int
    token_width: int
    shards: list[ShardMeta]
    total_samples: int


def pack_tokens(
    docs: Iterable[Sequence[int]], context_length: int, eos_id: int
) -> PackedSamples:
    """Concatenate docs (each followed by one EOS) and slice into fixed rows.

    The final partial row is dropped; its token count is reported as
    dropped_tail. Conservation: num_samples * context_length + dropped_tail
    == sum of doc lengths + number of docs.
    """
    if context_length < 2:
        raise ValueError("context_length must be >= 2")
    stream: list[int] = []
    for doc in docs:
        stream.extend(doc)
        stream.append(eos_id)
    num_samples = len(stream) // context_length
    used = num_samples * context_length
    samples = np.asarray(stream[:used], dtype=np.int64).reshape(
        num_samples, context_length
    )
    return PackedSamples(
        context_length=context_length,
        samples=samples,
        dropped_tail=len(stream) - used,
    )


def write_shard(samples: PackedSamples, path: str | Path) -> ShardMeta:
    """Write one shard file and return its meta (sha1 over the payload)."""
    arr = samples.samples
    if arr.size and (arr.min() < 0 or arr.max() >= 1 << (8 * TOKEN_WIDTH)):
        bad = int(arr.min()) if arr.min() < 0 else int(arr.max())
        raise TokenOverflow(f"token id {bad} does not fit {TOKEN_WIDTH} bytes")
    path = Path(path)
    payload = arr.astype("<u2").tobytes()
    header = _HEADER.pack(
        MAGIC, FORMAT_VERSION, samples.context_length, TOKEN_WIDTH, samples.num_samples
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)
    return ShardMeta(
        path=path.name,
        num_samples=samples.num_samples,
        payload_bytes=len(payload),
        digest_hex=hashlib.sha1(payload).hexdigest(),
        context_length=samples.context_length,
    )


def _read_header(path: Path) -> tuple[int, int, int]:
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise ManifestError(f"{path}: truncated shard header")
    magic, version, context, width, num_samples = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise ManifestError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ManifestError(f"{path}: unsupported shard version {version}")
    return context, width, num_samples


def read_shard_meta(path: str | Path) -> ShardMeta:
    """Recompute a shard's meta (geometry and digest) from the file on disk."""
    path = Path(path)
    context, width, num_samples = _read_header(path)
    with open(path, "rb") as fh:
        fh.seek(_HEADER.size)
        payload = fh.read()
    expected = num_samples * context * width
    if len(payload) != expected:
        raise ManifestError(
            f"{path}: payload is {len(payload)} bytes, header implies {expected}"
        )
    return ShardMeta(
        path=path.name,
        num_samples=num_samples,
        payload_bytes=len(payload),
        digest_hex=hashlib.sha1(payload).hexdigest(),
        context_length=context,
        token_width=width,
    )


def _convert_one(args: tuple[str, TokenizerModel, int, str]) -> tuple[ShardMeta, int]:
    split_path, model, context_length, out_dir = args
    token_docs = [model.encode(doc.text) for doc in corpus_io.read_jsonl(split_path)]
    packed = pack_tokens(token_docs, context_length, model.eos_id)
    shard_name = Path(split_path).stem + ".mlsd"
    meta = write_shard(packed, Path(out_dir) / shard_name)
    return meta, packed.dropped_tail


def convert_splits(
    split_paths: Sequence[str | Path],
    tokenizer: TokenizerModel,
    context_length: int,
    out_dir: str | Path,
    workers: int = 1,
) -> tuple[list[ShardMeta], list[int]]:
    """Tokenize and pack each split independently into one shard per split.

    Returns (metas, dropped_tails) in split order. Each split's tail is
    dropped on its own, so the result does not depend on worker count.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(str(p), tokenizer, context_length, str(out_dir)) for p in split_paths]
    results = []
    if workers <= 1 or len(jobs) < 2:
        for i, job in enumerate(jobs):
            try:
                results.append(_convert_one(job))
            except Exception as exc:
                raise SplitConversionError(i, exc) from exc
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_convert_one, job) for job in jobs]
            for i, fut in enumerate(futures):
                try:
                    results.append(fut.result())
                except Exception as exc:
                    raise SplitConversionError(i, exc) from exc
    metas = [meta for meta, _ in results]
    tails = [tail for _, tail in results]
    return metas, tails


def merge_manifests(metas: Sequence[ShardMeta], out_path: str | Path) -> ShardManifest:
    """Consolidate shard metas into one manifest JSON, ordered by path."""
    if not metas:
        raise ValueError("no shard metas to merge")
    context_length = metas[0].context_length
    token_width = metas[0].token_width
    seen: set[str] = set()
    for meta in metas:
        if meta.path in seen:
            raise DuplicatePath(meta.path)
        seen.add(meta.path)
        if (meta.context_length, meta.token_width) != (context_length, token_width):
            raise MixedGeometry(
                f"{meta.path}: context {meta.context_length} width {meta.token_width} "
                f"vs {context_length}/{token_width}"
            )
    shards = sorted(metas, key=lambda m: m.path)
    manifest = ShardManifest(
        version=MANIFEST_VERSION,
        context_length=context_length,
        token_width=token_width,
        shards=list(shards),
        total_samples=sum(m.num_samples for m in shards),
    )
    payload = {
        "version": manifest.version,
        "context_length": manifest.context_length,
        "token_width": manifest.token_width,
        "shards": [
            {
                "path": m.path,
                "num_samples": m.num_samples,
                "payload_bytes": m.payload_bytes,
                "digest_hex": m.digest_hex,
            }
            for m in manifest.shards
        ],
        "total_samples": manifest.total_samples,
    }
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
    return manifest


def load_manifest(path: str | Path) -> ShardManifest:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"not valid JSON: {exc.msg}") from None
    for key in ("version", "context_length", "token_width", "shards", "total_samples"):
        if key not in payload:
            raise ManifestError(f"missing field {key!r}")
    if payload["version"] != MANIFEST_VERSION:
        raise ManifestError(f"unsupported manifest version {payload['version']!r}")
    try:
        shards = [
            ShardMeta(
                path=entry["path"],
                num_samples=entry["num_samples"],
                payload_bytes=entry["payload_bytes"],
                digest_hex=entry["digest_hex"],
                context_length=payload["context_length"],
                token_width=payload["token_width"],
            )
            for entry in payload["shards"]
        ]
    except (KeyError, ValueError) as exc:
        raise ManifestError(f"malformed shard entry: {exc}") from None
    manifest = ShardManifest(
        version=payload["version"],
        context_length=payload["context_length"],
        token_width=payload["token_width"],
        shards=shards,
        total_samples=payload["total_samples"],
    )
    if manifest.total_samples != sum(m.num_samples for m in shards):
        raise ManifestError("total_samples does not match the shard list")
    return manifest


class DatasetReader:
    """Random access over the shards of one manifest, with lazy verification.

    Each shard's payload digest is recomputed and checked against the
    manifest on first access (exactly once, even under concurrent reads);
    later reads skip verification.
    """

    def __init__(self, manifest_path: str | Path):
        manifest_path = Path(manifest_path)
        self.manifest = load_manifest(manifest_path)
        self.root = manifest_path.parent
        self._starts: list[int] = []
        cursor = 0
        for meta in self.manifest.shards:
            self._starts.append(cursor)
            cursor += meta.num_samples
        self._verified: set[int] = set()
        self._lock = threading.Lock()

    @property
    def num_samples(self) -> int:
        return self.manifest.total_samples

    @property
    def context_length(self) -> int:
        return self.manifest.context_length

    def _locate(self, index: int) -> tuple[int, int]:
        shard_idx = bisect.bisect_right(self._starts, index) - 1
        return shard_idx, index - self._starts[shard_idx]

    def _verify(self, shard_idx: int) -> None:
        meta = self.manifest.shards[shard_idx]
        path = self.root / meta.path
        with open(path, "rb") as fh:
            fh.seek(_HEADER.size)
            payload = fh.read(meta.payload_bytes)
        actual = hashlib.sha1(payload).hexdigest()
        if actual != meta.digest_hex:
            raise IntegrityError(meta.path, meta.digest_hex, actual)

    def read_sample(self, index: int) -> np.ndarray:
        """Return row `index` of the path-ordered dataset as int64 ids."""
        if not 0 <= index < self.num_samples:
            raise IndexOutOfRange(
                f"sample {index} out of range [0, {self.num_samples})"
            )
        shard_idx, local = self._locate(index)
        if shard_idx not in self._verified:
            with self._lock:
                if shard_idx not in self._verified:
                    self._verify(shard_idx)
                    self._verified.add(shard_idx)
        meta = self.manifest.shards[shard_idx]
        row_bytes = self.context_length * self.manifest.token_width
        with open(self.root / meta.path, "rb") as fh:
            fh.seek(_HEADER.size + local * row_bytes)
            raw = fh.read(row_bytes)
        return np.frombuffer(raw, dtype="<u2").astype(np.int64)


def open_dataset(manifest_path: str | Path) -> DatasetReader:
    return DatasetReader(manifest_path)


def read_sample(reader: DatasetReader, index: int) -> np.ndarray:
    return reader.read_sample(index)


def shuffled_order(total_samples: int, seed: int) -> list[int]:
    """Deterministic permutation of [0, total_samples): splitmix64 Fisher-Yates."""
    if total_samples < 0:
        raise ValueError("total_samples must be >= 0")
    order = list(range(total_samples))
    gen = SplitMix64(seed)
    for i in range(total_samples - 1, 0, -1):
        j = gen.next_below(i + 1)
        order[i], order[j] = order[j], order[i]
    return order
