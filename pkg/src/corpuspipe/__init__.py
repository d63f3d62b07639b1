"""corpuspipe: desk-scale pretraining-corpus pipeline.

Stages: JSONL ingest/split, MinHash near-duplicate removal, byte-level BPE
tokenizer training, fixed-context packing into hash-verified binary shards,
corpus statistics, and a deterministic training-run controller.
"""

__version__ = "0.1.0"

SHARD_FORMAT_VERSION = 1
TOKENIZER_MODEL_VERSION = 1
MANIFEST_VERSION = 1
