"""Corpus token statistics: per-source distribution tables from shard manifests.

Counts come from what training would actually consume (samples * context
length), not raw text. Dropped packing tails are reported separately and
never counted as tokens.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .corpus_io import SourceManifest
from .shardstore import ShardManifest


class EmptyInput(ValueError):
    """Statistics requested over zero manifests."""


@dataclass
class DistributionRow:
    source: str
    tokens: int
    fraction: float


@dataclass
class TokenStats:
    rows: list[DistributionRow]
    total_tokens: int
    dropped: dict[str, int] = field(default_factory=dict)

    @property
    def total_dropped(self) -> int:
        return sum(self.dropped.values())

    def to_source_manifest(self) -> SourceManifest:
        return SourceManifest.from_entries(
            (row.source, float(row.tokens)) for row in self.rows
        )


def token_stats(
    manifests: list[tuple[str, ShardManifest]],
    dropped: dict[str, int] | None = None,
) -> TokenStats:
    """Per-source token distribution over one or more shard manifests.

    Rows are sorted by descending token count (source label breaks ties) so
    the table is stable across runs.
    """
    if not manifests:
        raise EmptyInput("at least one manifest is required")
    counts = {
        source: manifest.total_samples * manifest.context_length
        for source, manifest in manifests
    }
    total = sum(counts.values())
    rows = [
        DistributionRow(
            source=source,
            tokens=tokens,
            fraction=tokens / total if total else 0.0,
        )
        for source, tokens in counts.items()
    ]
    rows.sort(key=lambda row: (-row.tokens, row.source))
    return TokenStats(rows=rows, total_tokens=total, dropped=dict(dropped or {}))


def render_table(stats: TokenStats) -> str:
    """Aligned text table with a total line and a dropped-tails footnote."""
    headers = ("source", "tokens", "fraction")
    body = [
        (row.source, f"{row.tokens:,}", f"{row.fraction:.4f}") for row in stats.rows
    ]
    body.append(("total", f"{stats.total_tokens:,}", "1.0000"))
    widths = [
        max(len(headers[i]), *(len(r[i]) for r in body)) for i in range(len(headers))
    ]
    lines = [
        "  ".join(h.ljust(widths[i]) for i, h in enumerate(headers)),
        "  ".join("-" * w for w in widths),
    ]
    for r in body:
        lines.append("  ".join(r[i].ljust(widths[i]) for i in range(len(headers))))
    lines.append(f"dropped tails (not counted): {stats.total_dropped:,}")
    return "\n".join(lines)


def stats_to_json(stats: TokenStats) -> dict:
    return {
        "rows": [
            {"source": r.source, "tokens": r.tokens, "fraction": r.fraction}
            for r in stats.rows
        ],
        "total_tokens": stats.total_tokens,
        "dropped": stats.dropped,
        "total_dropped": stats.total_dropped,
    }
