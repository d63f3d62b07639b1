"""JSONL document corpora: reading, validation, writing, contiguous splitting.

One JSON object per line, UTF-8. Required field "text" (string); optional
"id" (non-negative integer) and "source" (string). Unknown fields are kept
and written back untouched.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

logger = logging.getLogger(__name__)

_KNOWN_FIELDS = ("id", "text", "source")


class MalformedLine(ValueError):
    """A line that is not a valid corpus record (0-based line number attached)."""

    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


@dataclass
class Document:
    """One corpus record; the unit of dedup and tokenization."""

    id: int
    text: str
    source: str | None = None
    extra: dict = field(default_factory=dict)


@dataclass
class SourceManifest:
    """Per-source token distribution: (source label, token count) entries."""

    entries: list[tuple[str, float]]
    total: float

    @classmethod
    def from_entries(cls, entries: Iterable[tuple[str, float]]) -> "SourceManifest":
        entries = list(entries)
        return cls(entries=entries, total=sum(count for _, count in entries))

    def validate(self) -> None:
        expected = sum(count for _, count in self.entries)
        if abs(self.total - expected) > 1e-9 * max(1.0, abs(expected)):
            raise ValueError(
                f"total {self.total} does not match sum of entries {expected}"
            )


def _parse_line(line_no: int, raw: bytes) -> Document:
    try:
        text_line = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedLine(line_no, f"not valid UTF-8: {exc}") from None
    try:
        obj = json.loads(text_line)
    except json.JSONDecodeError as exc:
        raise MalformedLine(line_no, f"invalid JSON: {exc.msg}") from None
    if not isinstance(obj, dict):
        raise MalformedLine(line_no, "line is not a JSON object")
    text = obj.get("text")
    if not isinstance(text, str):
        raise MalformedLine(line_no, 'missing or non-string "text" field')
    try:
        # json accepts lone surrogates (e.g. "\ud800"); those are not UTF-8.
        text.encode("utf-8")
    except UnicodeEncodeError:
        raise MalformedLine(line_no, '"text" is not encodable as UTF-8') from None
    doc_id = obj.get("id", line_no)
    if isinstance(doc_id, bool) or not isinstance(doc_id, int) or doc_id < 0:
        raise MalformedLine(line_no, f'"id" must be a non-negative integer, got {doc_id!r}')
    source = obj.get("source")
    if source is not None and not isinstance(source, str):
        raise MalformedLine(line_no, f'"source" must be a string, got {source!r}')
    extra = {k: v for k, v in obj.items() if k not in _KNOWN_FIELDS}
    return Document(id=doc_id, text=text, source=source, extra=extra)


def read_jsonl(path: str | Path, skip_bad: bool = False) -> Iterator[Document]:
    """Yield Documents from a JSONL file, in file order.

    Blank lines are skipped. Auto-assigned ids are the 0-based physical line
    index; an explicit "id" field wins. Malformed lines raise MalformedLine
    unless skip_bad is set, in which case each one is logged and counted.
    """
    seen_ids: set[int] = set()
    skipped = 0
    with open(path, "rb") as fh:
        for line_no, raw in enumerate(fh):
            if not raw.strip():
                continue
            try:
                doc = _parse_line(line_no, raw)
                if doc.id in seen_ids:
                    raise MalformedLine(line_no, f"duplicate id {doc.id}")
            except MalformedLine as exc:
                if not skip_bad:
                    raise
                skipped += 1
                logger.warning("skipping malformed %s: %s", path, exc)
                continue
            seen_ids.add(doc.id)
            yield doc
    if skipped:
        logger.warning("skipped %d malformed line(s) in %s", skipped, path)


def write_jsonl(docs: Iterable[Document], path: str | Path) -> int:
    """Write Documents as JSONL, preserving unknown fields. Returns the count."""
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for doc in docs:
            obj: dict = {"id": doc.id, "text": doc.text}
            if doc.source is not None:
                obj["source"] = doc.source
            obj.update(doc.extra)
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")
            count += 1
    return count


def split_jsonl(path: str | Path, k: int, out_dir: str | Path | None = None) -> list[Path]:
    """Split a JSONL file into k contiguous blocks named <stem>.split-<i>.jsonl.

    Raw lines are copied verbatim (a missing final newline is added), so
    concatenating the splits in index order reproduces the input
    byte-for-byte modulo trailing-newline normalization. The first (N mod k)
    splits get ceil(N/k) lines, the rest floor(N/k). If k > N the trailing
    splits are empty files.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    path = Path(path)
    out_dir = Path(out_dir) if out_dir is not None else path.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(path, "rb") as fh:
        lines = fh.readlines()
    if lines and not lines[-1].endswith(b"\n"):
        lines[-1] += b"\n"
    n = len(lines)
    base, remainder = divmod(n, k)
    out_paths: list[Path] = []
    cursor = 0
    for i in range(k):
        size = base + (1 if i < remainder else 0)
        out_path = out_dir / f"{path.stem}.split-{i}.jsonl"
        with open(out_path, "wb") as out:
            out.writelines(lines[cursor : cursor + size])
        cursor += size
        out_paths.append(out_path)
    return out_paths
