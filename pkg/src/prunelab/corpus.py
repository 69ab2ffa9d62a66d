"""Byte-level corpus ingestion, splits, and batch sampling.

Any text (or binary) file becomes a token stream with bytes as tokens
0..255, split 90/5/5 into contiguous train/val/test segments.  A small
synthetic corpus generator is included so tests and CI need no external
data: it emits pseudo-prose from a seeded Markov chain over an invented
vocabulary, which a small byte model can learn well enough that pruning
damage and retraining recovery are clearly visible.

Run ``python -m prunelab.corpus --out corpus.txt`` to write one.
"""

from __future__ import annotations

import argparse
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

__all__ = ["CorpusSplits", "ingest_corpus", "sample_batch", "generate_corpus"]

MIN_CORPUS_BYTES = 65536


@dataclass
class CorpusSplits:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


def ingest_corpus(path, min_bytes: int = MIN_CORPUS_BYTES) -> CorpusSplits:
    """Read a file as uint8 tokens and split 90/5/5 by contiguous segments."""
    data = np.frombuffer(Path(path).read_bytes(), dtype=np.uint8)
    if data.size < min_bytes:
        raise DataError(f"corpus {path} has {data.size} bytes; minimum is {min_bytes}")
    n = data.size
    n_train = int(n * 0.90)
    n_val = int(n * 0.05)
    return CorpusSplits(
        train=data[:n_train].copy(),
        val=data[n_train : n_train + n_val].copy(),
        test=data[n_train + n_val :].copy(),
    )


def sample_batch(split: np.ndarray, batch_size: int, length: int, rng: np.random.Generator) -> np.ndarray:
    """Random windows of ``length`` tokens from a split (with replacement)."""
    if split.size < length:
        raise DataError(f"split of {split.size} tokens cannot yield windows of {length}")
    starts = rng.integers(0, split.size - length + 1, size=batch_size)
    idx = starts[:, None] + np.arange(length)[None, :]
    return split[idx]


def generate_corpus(size: int = 1 << 20, seed: int = 0) -> bytes:
    """Synthetic pseudo-prose with learnable byte-level structure."""
    rng = np.random.default_rng(seed)
    letters = "abcdefghijklmnopqrstuvwxyz"
    n_words = 420
    words = []
    for _ in range(n_words):
        ln = int(rng.integers(2, 10))
        words.append("".join(letters[i] for i in rng.integers(0, 26, size=ln)))
    # Sparse first-order transitions: each word gets a few likely successors,
    # with occasional jumps so the chain never becomes fully predictable.
    succ = rng.integers(0, n_words, size=(n_words, 6))
    weights = np.array([0.32, 0.22, 0.16, 0.12, 0.10, 0.08])

    out = bytearray()
    word = int(rng.integers(0, n_words))
    sentence_len = 0
    while len(out) < size:
        out += words[word].encode()
        sentence_len += 1
        if sentence_len >= rng.integers(4, 13):
            out += b"." if rng.random() < 0.8 else b"?"
            out += b" "
            sentence_len = 0
            if rng.random() < 0.15:
                out += b"\n"
            word = int(rng.integers(0, n_words))
        elif rng.random() < 0.12:
            out += b", " if rng.random() < 0.5 else b" "
            word = int(rng.integers(0, n_words))
        else:
            out += b" "
            word = int(succ[word][rng.choice(6, p=weights)])
    return bytes(out[:size])


def main(argv=None):
    ap = argparse.ArgumentParser(description="Write a synthetic byte corpus.")
    ap.add_argument("--out", required=True)
    ap.add_argument("--size", type=int, default=1 << 20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    Path(args.out).write_bytes(generate_corpus(args.size, args.seed))
    print(f"wrote {args.size} bytes to {args.out}")


if __name__ == "__main__":
    main()
