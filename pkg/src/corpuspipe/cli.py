"""Single entry point: every pipeline stage as a subcommand.

Stages hand off through files (JSONL in, shards and manifests out), so the
whole raw-JSONL-to-shards path is a sequence of commands. Exit codes: 0 on
success, 1 on usage errors, 2 on data errors. Diagnostics go to stderr;
data goes to declared files or stdout.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from pathlib import Path

from . import (
    MANIFEST_VERSION,
    SHARD_FORMAT_VERSION,
    TOKENIZER_MODEL_VERSION,
    __version__,
    corpus_io,
    dedup,
    run_controller,
    shardstore,
    stats_report,
    tokenizer,
)

logger = logging.getLogger(__name__)

VERSION_LINE = (
    f"corpuspipe {__version__} "
    f"(shard format v{SHARD_FORMAT_VERSION}, "
    f"tokenizer model v{TOKENIZER_MODEL_VERSION}, "
    f"manifest v{MANIFEST_VERSION})"
)

# Default parameters for every stage, overridable by --config and flags
# (flags win on conflict). The trainer block is recorded for provenance only;
# no subcommand reads it.
DEFAULT_CONFIG: dict = {
    "dedup": {"num_perm": 256, "threshold": 0.95, "hash_bits": 64, "seed": 42,
              "shingle_n": 5, "workers": 1},
    "tokenizer": {"vocab_size": 32000},
    "shards": {"context_length": 4096, "splits": 1, "workers": 1},
    "schedule": {"peak": 1e-4, "warmup_steps": 2000, "total_steps": None},
    "controller": {"window": 50, "k": 4.0, "stable_steps": 200,
                   "checkpoint_interval": None},
    "trainer": {"batch_size": 24, "adamw_decay": 0.1},
}


class UsageError(Exception):
    """Bad invocation or config; maps to exit code 1."""


class PipelineConfig:
    """Per-stage parameter blocks, loadable from a single JSON file."""

    def __init__(self, stages: dict):
        self.stages = stages

    @classmethod
    def defaults(cls) -> "PipelineConfig":
        return cls(copy.deepcopy(DEFAULT_CONFIG))

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                overrides = json.load(fh)
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc.msg}") from None
        cfg = cls.defaults()
        if not isinstance(overrides, dict):
            raise UsageError(f"config {path} must be a JSON object keyed by stage")
        for stage, block in overrides.items():
            if stage not in cfg.stages:
                raise UsageError(f"config {path}: unknown stage {stage!r}")
            if not isinstance(block, dict):
                raise UsageError(f"config {path}: stage {stage!r} must be an object")
            for key, value in block.items():
                if key not in cfg.stages[stage]:
                    raise UsageError(
                        f"config {path}: unknown key {stage}.{key}"
                    )
                cfg.stages[stage][key] = value
        return cfg

    def get(self, stage: str, key: str):
        return self.stages[stage][key]

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.stages, fh, indent=2)
            fh.write("\n")


def _load_config(args) -> PipelineConfig:
    if getattr(args, "config", None):
        return PipelineConfig.load(args.config)
    return PipelineConfig.defaults()


def _pick(flag_value, config: PipelineConfig, stage: str, key: str):
    # Explicit flag wins over the config block.
    return flag_value if flag_value is not None else config.get(stage, key)


def _json_map(value: str, flag: str) -> dict:
    """Parse a flag that is either inline JSON or a path to a JSON file."""
    if value.lstrip().startswith("{"):
        try:
            out = json.loads(value)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{flag}: invalid JSON: {exc.msg}") from None
    else:
        try:
            with open(value, "r", encoding="utf-8") as fh:
                out = json.load(fh)
        except OSError as exc:
            raise UsageError(f"{flag}: cannot read {value}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"{flag}: {value} is not valid JSON: {exc.msg}") from None
    if not isinstance(out, dict):
        raise UsageError(f"{flag} must be a JSON object")
    return out


def _open_out(path: str | None):
    if path is None or path == "-":
        return sys.stdout
    return open(path, "w", encoding="utf-8", newline="")


def _emit_csv(path: str | None, header: list[str], rows) -> None:
    out = _open_out(path)
    try:
        out.write(",".join(header) + "\n")
        for row in rows:
            out.write(",".join(str(cell) for cell in row) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()


def cmd_split(args) -> int:
    paths = corpus_io.split_jsonl(args.input, args.parts, args.outdir)
    for p in paths:
        print(p)
    return 0


def cmd_dedup(args) -> int:
    config = _load_config(args)
    cfg = dedup.DedupConfig(
        num_perm=_pick(args.num_perm, config, "dedup", "num_perm"),
        threshold=_pick(args.threshold, config, "dedup", "threshold"),
        hash_bits=config.get("dedup", "hash_bits"),
        seed=_pick(args.seed, config, "dedup", "seed"),
        shingle_n=_pick(args.shingle_n, config, "dedup", "shingle_n"),
    )
    workers = _pick(args.workers, config, "dedup", "workers")
    docs = list(corpus_io.read_jsonl(args.input, skip_bad=args.skip_bad))
    kept, report = dedup.dedup_corpus(docs, cfg, workers=workers)
    corpus_io.write_jsonl(kept, args.output)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            json.dump(report.to_json_dict(cfg), fh, indent=2)
            fh.write("\n")
    logger.info("kept %d of %d documents", report.docs_kept, report.docs_in)
    return 0


def cmd_train_tokenizer(args) -> int:
    config = _load_config(args)
    vocab_size = _pick(args.vocab_size, config, "tokenizer", "vocab_size")
    docs = corpus_io.read_jsonl(args.input, skip_bad=args.skip_bad)
    model = tokenizer.train_bpe(docs, vocab_size)
    tokenizer.save_model(model, args.output)
    logger.info(
        "trained tokenizer: %d tokens (%d merges), requested %d",
        model.vocab_size, len(model.merges), vocab_size,
    )
    return 0


def cmd_compare(args) -> int:
    model_a = tokenizer.load_model(args.tokenizer_a)
    model_b = tokenizer.load_model(args.tokenizer_b)
    docs = corpus_io.read_jsonl(args.corpus, skip_bad=args.skip_bad)
    report = tokenizer.compare_tokenizers(model_a, model_b, docs)
    payload = {
        "tokens_a": report.tokens_a,
        "tokens_b": report.tokens_b,
        "reduction": report.reduction,
    }
    out = _open_out(args.json)
    try:
        json.dump(payload, out, indent=2)
        out.write("\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def cmd_tokenize_shard(args) -> int:
    config = _load_config(args)
    context_length = _pick(args.context_length, config, "shards", "context_length")
    splits = _pick(args.splits, config, "shards", "splits")
    workers = _pick(args.workers, config, "shards", "workers")
    model = tokenizer.load_model(args.tokenizer)
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    split_paths = corpus_io.split_jsonl(args.input, splits, outdir)
    metas, tails = shardstore.convert_splits(
        split_paths, model, context_length, outdir, workers=workers
    )
    conversion = {
        "context_length": context_length,
        "token_width": shardstore.TOKEN_WIDTH,
        "splits": [
            {
                "split": split.name,
                "shard": meta.path,
                "num_samples": meta.num_samples,
                "dropped_tail": tail,
            }
            for split, meta, tail in zip(split_paths, metas, tails)
        ],
        "total_samples": sum(m.num_samples for m in metas),
        "total_dropped": sum(tails),
    }
    with open(outdir / "conversion.json", "w", encoding="utf-8") as fh:
        json.dump(conversion, fh, indent=2)
        fh.write("\n")
    logger.info(
        "wrote %d shard(s), %d samples, %d tail tokens dropped",
        len(metas), conversion["total_samples"], conversion["total_dropped"],
    )
    return 0


def cmd_merge(args) -> int:
    shard_paths = sorted(Path(args.indir).glob("*.mlsd"))
    if not shard_paths:
        raise UsageError(f"no .mlsd shards found in {args.indir}")
    metas = [shardstore.read_shard_meta(p) for p in shard_paths]
    manifest = shardstore.merge_manifests(metas, args.manifest)
    logger.info(
        "manifest %s: %d shard(s), %d samples",
        args.manifest, len(manifest.shards), manifest.total_samples,
    )
    return 0


def cmd_stats(args) -> int:
    if args.per_source:
        mapping = _json_map(args.per_source, "--per-source")
        manifests = [
            (source, shardstore.load_manifest(path))
            for source, path in sorted(mapping.items())
        ]
    else:
        if not args.manifest:
            raise UsageError("either --manifest or --per-source is required")
        manifests = [("all", shardstore.load_manifest(args.manifest))]
    dropped = None
    if args.dropped:
        raw = _json_map(args.dropped, "--dropped")
        dropped = {source: int(count) for source, count in raw.items()}
    stats = stats_report.token_stats(manifests, dropped)
    print(stats_report.render_table(stats))
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(stats_report.stats_to_json(stats), fh, indent=2)
            fh.write("\n")
    if args.plot:
        from . import plotting

        plotting.plot_token_distribution(stats, args.plot)
    return 0


def _schedule_from(args, config: PipelineConfig) -> run_controller.LrSchedule:
    total = _pick(args.total, config, "schedule", "total_steps")
    if total is None:
        raise UsageError("--total is required (no default total_steps)")
    return run_controller.LrSchedule(
        total_steps=total,
        peak=_pick(args.peak, config, "schedule", "peak"),
        warmup_steps=_pick(args.warmup, config, "schedule", "warmup_steps"),
    )


def cmd_schedule(args) -> int:
    config = _load_config(args)
    schedule = _schedule_from(args, config)
    rows = (
        (step, repr(run_controller.lr_at(step, schedule)))
        for step in range(schedule.total_steps + 1)
    )
    _emit_csv(args.out, ["step", "lr"], rows)
    if args.plot:
        from . import plotting

        plotting.plot_schedule(schedule, args.plot)
    return 0


def _read_losses(path: str) -> list[float]:
    losses: list[float] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh):
            cell = line.strip().split(",")[0]
            if not cell:
                continue
            try:
                losses.append(float(cell))
            except ValueError:
                if line_no == 0:  # tolerate a header row
                    continue
                raise corpus_io.MalformedLine(line_no, f"not a number: {cell!r}")
    return losses


def cmd_simulate_run(args) -> int:
    config = _load_config(args)
    schedule = _schedule_from(args, config)
    interval = _pick(args.checkpoint_interval, config, "controller", "checkpoint_interval")
    if interval is None:
        raise UsageError("--checkpoint-interval is required")
    controller_cfg = run_controller.ControllerConfig(
        window=_pick(args.window, config, "controller", "window"),
        k=_pick(args.k, config, "controller", "k"),
        stable_steps=_pick(args.stable, config, "controller", "stable_steps"),
    )
    losses = _read_losses(args.losses)
    trace = run_controller.simulate_run(schedule, losses, interval, controller_cfg)
    rows = ((row.step, repr(row.lr), row.action.kind) for row in trace)
    _emit_csv(args.out, ["step", "lr", "action"], rows)
    if args.plot:
        from . import plotting

        plotting.plot_run_trace(trace, args.plot)
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        self.exit(1, f"\n{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="corpuspipe", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=VERSION_LINE)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name: str, func, help_text: str, config_flag: bool = True):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.set_defaults(func=func)
        if config_flag:
            p.add_argument("--config", help="JSON config file keyed by stage name")
        return p

    p = add("split", cmd_split, "split a JSONL file into contiguous blocks",
            config_flag=False)
    p.add_argument("--input", required=True)
    p.add_argument("--parts", type=int, required=True, help="number of splits")
    p.add_argument("--outdir", default=None, help="default: alongside the input")

    p = add("dedup", cmd_dedup, "remove near-duplicate documents")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--report", help="cluster report JSON path")
    p.add_argument("--num-perm", type=int, default=None)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--shingle-n", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--skip-bad", action="store_true",
                   help="skip malformed lines with a warning instead of aborting")

    p = add("train-tokenizer", cmd_train_tokenizer, "train a byte-level BPE model")
    p.add_argument("--input", required=True)
    p.add_argument("--vocab-size", type=int, default=None)
    p.add_argument("--output", required=True, help="model JSON path")
    p.add_argument("--skip-bad", action="store_true")

    p = add("compare", cmd_compare, "token counts of two tokenizers on one corpus",
            config_flag=False)
    p.add_argument("--tokenizer-a", required=True)
    p.add_argument("--tokenizer-b", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--json", default=None, help="output path (default: stdout)")
    p.add_argument("--skip-bad", action="store_true")

    p = add("tokenize-shard", cmd_tokenize_shard,
            "split, tokenize, and pack a corpus into binary shards")
    p.add_argument("--input", required=True)
    p.add_argument("--tokenizer", required=True, help="model JSON path")
    p.add_argument("--context-length", type=int, default=None)
    p.add_argument("--splits", type=int, default=None)
    p.add_argument("--outdir", required=True)
    p.add_argument("--workers", type=int, default=None)

    p = add("merge", cmd_merge, "merge shard metas into a single manifest",
            config_flag=False)
    p.add_argument("--indir", required=True)
    p.add_argument("--manifest", required=True, help="output manifest path")

    p = add("stats", cmd_stats, "token distribution table from manifests",
            config_flag=False)
    p.add_argument("--manifest", default=None)
    p.add_argument("--per-source", default=None,
                   help="JSON map of source label to manifest path (inline or file)")
    p.add_argument("--dropped", default=None,
                   help="JSON map of source label to dropped tail count")
    p.add_argument("--json", default=None, help="also write stats as JSON")
    p.add_argument("--plot", default=None, help="render a distribution figure (png)")

    p = add("schedule", cmd_schedule, "emit the warmup/decay LR schedule as CSV")
    p.add_argument("--peak", type=float, default=None)
    p.add_argument("--warmup", type=int, default=None)
    p.add_argument("--total", type=int, default=None)
    p.add_argument("--emit", choices=["csv"], default="csv")
    p.add_argument("--out", default=None, help="output path (default: stdout)")
    p.add_argument("--plot", default=None, help="render the schedule figure (png)")

    p = add("simulate-run", cmd_simulate_run,
            "replay a loss stream through the spike/rollback controller")
    p.add_argument("--losses", required=True, help="CSV of losses, one per line")
    p.add_argument("--checkpoint-interval", type=int, default=None)
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--k", type=float, default=None)
    p.add_argument("--stable", type=int, default=None)
    p.add_argument("--peak", type=float, default=None)
    p.add_argument("--warmup", type=int, default=None)
    p.add_argument("--total", type=int, default=None)
    p.add_argument("--emit", choices=["csv"], default="csv")
    p.add_argument("--out", default=None, help="output path (default: stdout)")
    p.add_argument("--plot", default=None, help="render the trace figure (png)")

    return parser


_DATA_ERRORS = (
    corpus_io.MalformedLine,
    dedup.EmptyDocument,
    dedup.LengthMismatch,
    tokenizer.EmptyCorpus,
    tokenizer.SchemaError,
    tokenizer.UnknownId,
    shardstore.TokenOverflow,
    shardstore.MixedGeometry,
    shardstore.DuplicatePath,
    shardstore.IntegrityError,
    shardstore.IndexOutOfRange,
    shardstore.ManifestError,
    shardstore.SplitConversionError,
    stats_report.EmptyInput,
    run_controller.OutOfRange,
    run_controller.InvalidDistribution,
    run_controller.NonMonotonicStep,
    run_controller.NoCheckpointAvailable,
    OSError,
    ValueError,
)


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        force=True,
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"corpuspipe: {exc}", file=sys.stderr)
        return 1
    except _DATA_ERRORS as exc:
        print(f"corpuspipe: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
