"""Shared fixtures-in-code for the test suite."""

import json
import random

from corpuspipe.corpus_io import Document


def write_jsonl_texts(path, texts, **extra_fields):
    with open(path, "w", encoding="utf-8") as fh:
        for text in texts:
            fh.write(json.dumps({"text": text, **extra_fields}) + "\n")
    return path


def make_docs(texts):
    return [Document(id=i, text=t) for i, t in enumerate(texts)]


def near_pair_texts(prefix: str, n_words: int = 103) -> tuple[str, str]:
    """Two texts whose 5-gram shingle sets have exact Jaccard (S-1)/(S+1).

    Changing only the last word of an n_words-word text alters exactly one
    shingle; with 103 words (102 windows minus... 99 shingles) the Jaccard
    is 98/100 = 0.98.
    """
    words = [f"{prefix}w{j}" for j in range(n_words)]
    a = " ".join(words)
    b = " ".join(words[:-1] + [f"{prefix}alt"])
    return a, b


def random_token_docs(rng: random.Random, n_docs: int, max_len: int) -> list[list[int]]:
    return [
        [rng.randrange(0, 60000) for _ in range(rng.randrange(0, max_len))]
        for _ in range(n_docs)
    ]
