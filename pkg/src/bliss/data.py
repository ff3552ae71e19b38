"""Tokenized datasets, round shards, samplers and the synthetic corpus."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

CLEAN, CORRUPTED = 0, 1


class DataError(ValueError):
    pass


def rng_for(*key: int) -> np.random.Generator:
    """Independent, reproducible generator for an integer key path."""
    return np.random.default_rng(np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in key]))


@dataclass(frozen=True, eq=False)
class TokenDataset:
    """Fixed-length token rows with optional provenance labels.

    Labels exist for evaluation only.  Batches handed to models are built by
    :func:`batch_iter` / :meth:`batch` and never carry them.
    """

    vocab_size: int
    seq_len: int
    tokens: np.ndarray  # (num_seqs, seq_len) uint32
    labels: np.ndarray | None = None  # (num_seqs,) uint8, 0=clean 1=corrupted

    def __post_init__(self):
        t = self.tokens
        if t.ndim != 2 or t.shape[1] != self.seq_len:
            raise DataError(f"token array must be (n, {self.seq_len}), got {t.shape}")
        if t.size and int(t.max()) >= self.vocab_size:
            raise DataError(f"token id {int(t.max())} out of range for vocab {self.vocab_size}")
        if self.labels is not None and self.labels.shape != (t.shape[0],):
            raise DataError("labels must have one entry per row")

    def __len__(self) -> int:
        return self.tokens.shape[0]

    def subset(self, indices: Sequence[int]) -> "TokenDataset":
        idx = np.asarray(indices, dtype=np.int64)
        labels = None if self.labels is None else self.labels[idx]
        return TokenDataset(self.vocab_size, self.seq_len, self.tokens[idx], labels)

    def batch(self, indices: Sequence[int]) -> "SampleBatch":
        idx = np.asarray(indices, dtype=np.int64)
        return SampleBatch(idx, self.tokens[idx])

    def all(self) -> "SampleBatch":
        return self.batch(np.arange(len(self)))

    def unlabeled(self) -> "TokenDataset":
        return TokenDataset(self.vocab_size, self.seq_len, self.tokens)

    def equal(self, other: "TokenDataset") -> bool:
        if (self.vocab_size, self.seq_len) != (other.vocab_size, other.seq_len):
            return False
        if not np.array_equal(self.tokens, other.tokens):
            return False
        if (self.labels is None) != (other.labels is None):
            return False
        return self.labels is None or np.array_equal(self.labels, other.labels)


@dataclass(frozen=True, eq=False)
class SampleBatch:
    indices: np.ndarray
    tokens: np.ndarray

    def __post_init__(self):
        if len(self.indices) < 1:
            raise DataError("empty batch")
        if len(self.indices) != self.tokens.shape[0]:
            raise DataError("indices and token rows differ in length")

    @property
    def size(self) -> int:
        return len(self.indices)


# -- file format ------------------------------------------------------------
_MAGIC = b"BLTD"
_VERSION = 1


def save_dataset(path: str | Path, ds: TokenDataset) -> None:
    header = _MAGIC + struct.pack(
        "<IIIQB", _VERSION, ds.vocab_size, ds.seq_len, len(ds), ds.labels is not None
    )
    body = np.ascontiguousarray(ds.tokens, dtype="<u4").tobytes()
    tail = b"" if ds.labels is None else np.asarray(ds.labels, dtype=np.uint8).tobytes()
    Path(path).write_bytes(header + body + tail)


def load_dataset(path: str | Path) -> TokenDataset:
    buf = Path(path).read_bytes()
    if buf[:4] != _MAGIC:
        raise DataError(f"{path}: not a BLTD dataset")
    version, vocab, seq_len, n, has_labels = struct.unpack_from("<IIIQB", buf, 4)
    if version != _VERSION:
        raise DataError(f"{path}: unsupported BLTD version {version}")
    pos = 4 + struct.calcsize("<IIIQB")
    tokens = np.frombuffer(buf, dtype="<u4", count=n * seq_len, offset=pos)
    tokens = tokens.reshape(n, seq_len).astype(np.uint32)
    pos += 4 * n * seq_len
    labels = None
    if has_labels:
        labels = np.frombuffer(buf, dtype=np.uint8, count=n, offset=pos).copy()
        pos += n
    if pos != len(buf):
        raise DataError(f"{path}: {len(buf) - pos} trailing bytes")
    return TokenDataset(vocab, seq_len, tokens, labels)


# -- synthetic corpus -------------------------------------------------------
@dataclass(frozen=True)
class CorpusSpec:
    """Synthetic corpus recipe.

    ``seed`` fixes the Markov transition table; ``stream`` picks an independent
    row stream from the same chain, so validation and held-out sets share the
    clean distribution of the training corpus.
    """

    num_seqs: int
    vocab_size: int = 256
    seq_len: int = 64
    noise_fraction: float = 0.0
    seed: int = 0
    stream: int = 0


class MarkovChain:
    """Order-2 chain: next token depends on the previous token and a hash group of the one before.

    Each (group, previous) context has ``fanout`` candidate successors with
    Dirichlet-drawn probabilities.
    """

    def __init__(self, vocab_size: int, seed: int, groups: int = 4, fanout: int = 8):
        rng = rng_for(seed, 0x7AB1E)
        self.vocab_size, self.groups = vocab_size, groups
        self.successors = rng.integers(0, vocab_size, size=(groups, vocab_size, fanout))
        probs = rng.dirichlet(np.full(fanout, 0.5), size=(groups, vocab_size))
        self.cdf = np.cumsum(probs, axis=-1)
        self.cdf[..., -1] = 1.0

    def sample(self, n: int, seq_len: int, rng: np.random.Generator) -> np.ndarray:
        out = np.empty((n, seq_len), dtype=np.uint32)
        out[:, : min(2, seq_len)] = rng.integers(0, self.vocab_size, size=(n, min(2, seq_len)))
        for pos in range(2, seq_len):
            g = out[:, pos - 2] % self.groups
            b = out[:, pos - 1]
            u = rng.random(n)
            cdf = self.cdf[g, b]
            choice = (u[:, None] >= cdf).sum(axis=1)
            out[:, pos] = self.successors[g, b, np.minimum(choice, cdf.shape[1] - 1)]
        return out

    def entropy_rate(self) -> float:
        """Mean per-token entropy (nats) of the transition rows, uniform over contexts."""
        p = np.diff(self.cdf, prepend=0.0, axis=-1)
        # merge duplicate successors within a row
        ent = []
        for g in range(self.groups):
            for b in range(self.vocab_size):
                acc: dict[int, float] = {}
                for s, q in zip(self.successors[g, b], p[g, b]):
                    acc[int(s)] = acc.get(int(s), 0.0) + q
                qs = np.array([q for q in acc.values() if q > 0])
                ent.append(float(-(qs * np.log(qs)).sum()))
        return float(np.mean(ent))


def make_synthetic_corpus(spec: CorpusSpec) -> TokenDataset:
    if not 0.0 <= spec.noise_fraction <= 1.0:
        raise DataError(f"noise_fraction must lie in [0, 1], got {spec.noise_fraction}")
    chain = MarkovChain(spec.vocab_size, spec.seed)
    rng = rng_for(spec.seed, spec.stream, 0xC0)
    n_bad = int(math.floor(spec.noise_fraction * spec.num_seqs + 0.5))
    n_good = spec.num_seqs - n_bad
    clean = chain.sample(n_good, spec.seq_len, rng)
    noise = rng.integers(0, spec.vocab_size, size=(n_bad, spec.seq_len)).astype(np.uint32)
    tokens = np.concatenate([clean, noise])
    labels = np.concatenate(
        [np.full(n_good, CLEAN, np.uint8), np.full(n_bad, CORRUPTED, np.uint8)]
    )
    perm = rng.permutation(spec.num_seqs)
    return TokenDataset(spec.vocab_size, spec.seq_len, tokens[perm], labels[perm])


# -- shards and sampling ----------------------------------------------------
@dataclass(frozen=True)
class ShardSet:
    num_rounds: int
    ranges: tuple[tuple[int, int], ...]

    def __post_init__(self):
        pos = 0
        for lo, hi in self.ranges:
            if lo != pos or hi < lo:
                raise DataError(f"shards must be contiguous and disjoint: {self.ranges}")
            pos = hi
        sizes = [hi - lo for lo, hi in self.ranges]
        if len(self.ranges) != self.num_rounds or max(sizes) - min(sizes) > 1:
            raise DataError(f"invalid shard layout {self.ranges}")

    @property
    def total(self) -> int:
        return self.ranges[-1][1]

    def indices(self, r: int) -> np.ndarray:
        lo, hi = self.ranges[r]
        return np.arange(lo, hi)

    def shard(self, dataset: TokenDataset, r: int) -> TokenDataset:
        if len(dataset) != self.total:
            raise DataError("shard set does not cover this dataset")
        return dataset.subset(self.indices(r))


def partition_shards(dataset: TokenDataset | int, num_rounds: int) -> ShardSet:
    n = dataset if isinstance(dataset, int) else len(dataset)
    if not 1 <= num_rounds <= n:
        raise DataError(f"number of rounds must lie in [1, {n}], got {num_rounds}")
    base, extra = divmod(n, num_rounds)
    ranges, lo = [], 0
    for r in range(num_rounds):
        hi = lo + base + (1 if r < extra else 0)
        ranges.append((lo, hi))
        lo = hi
    return ShardSet(num_rounds, tuple(ranges))


def subset_size(n: int, fraction: float) -> int:
    return max(1, int(math.floor(fraction * n + 0.5)))


def sample_bilevel_subset(shard: TokenDataset, fraction: float, seed: int) -> TokenDataset:
    """Uniform sample without replacement of ``max(1, round(fraction * n))`` rows."""
    if not 0.0 < fraction <= 1.0:
        raise DataError(f"fraction must lie in (0, 1], got {fraction}")
    if len(shard) == 0:
        raise DataError("cannot sample from an empty shard")
    if fraction == 1.0:
        return shard
    k = subset_size(len(shard), fraction)
    idx = np.sort(rng_for(seed, 0x5B).choice(len(shard), size=k, replace=False))
    return shard.subset(idx)


def batch_iter(dataset: TokenDataset, batch_size: int, seed: int) -> Iterator[SampleBatch]:
    """Endless stream of batches over seeded shuffled epochs.

    The epochs are concatenated, so a batch may straddle an epoch boundary.
    """
    n = len(dataset)
    if not 1 <= batch_size <= n:
        raise DataError(f"batch size must lie in [1, {n}], got {batch_size}")
    rng = rng_for(seed, 0xBA7C)
    buf = np.empty(0, dtype=np.int64)
    while True:
        while len(buf) < batch_size:
            buf = np.concatenate([buf, rng.permutation(n)])
        idx, buf = buf[:batch_size], buf[batch_size:]
        yield dataset.batch(idx)
