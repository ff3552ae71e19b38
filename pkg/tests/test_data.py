import itertools
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bliss.data import (
    CLEAN,
    CORRUPTED,
    CorpusSpec,
    DataError,
    MarkovChain,
    ShardSet,
    TokenDataset,
    batch_iter,
    load_dataset,
    make_synthetic_corpus,
    partition_shards,
    sample_bilevel_subset,
    save_dataset,
)


def corpus(n=200, noise=0.5, seed=0, **kw):
    return make_synthetic_corpus(CorpusSpec(n, vocab_size=32, seq_len=12, noise_fraction=noise, seed=seed, **kw))


def test_noise_free_corpus_is_all_clean():
    assert (corpus(noise=0.0).labels == CLEAN).all()


def test_exact_corrupted_count():
    ds = make_synthetic_corpus(CorpusSpec(10000, noise_fraction=0.5, seed=3))
    assert int((ds.labels == CORRUPTED).sum()) == 5000
    assert ds.tokens.shape == (10000, 64) and int(ds.tokens.max()) < 256


def test_corpus_deterministic_and_seed_sensitive():
    assert corpus(seed=5).equal(corpus(seed=5))
    assert not corpus(seed=5).equal(corpus(seed=6))
    assert not corpus(seed=5, stream=1).equal(corpus(seed=5))


def test_corrupted_rows_are_shuffled_in():
    labels = corpus(n=1000).labels
    assert 0.3 < labels[:500].mean() < 0.7


def test_clean_rows_are_predictable():
    chain = MarkovChain(256, 0)
    assert chain.entropy_rate() < 0.5 * np.log(256)


def test_invalid_noise_fraction():
    with pytest.raises(DataError):
        corpus(noise=1.5)


def test_dataset_rejects_bad_tokens():
    with pytest.raises(DataError):
        TokenDataset(4, 2, np.array([[0, 4]], dtype=np.uint32))
    with pytest.raises(DataError):
        TokenDataset(4, 3, np.array([[0, 1]], dtype=np.uint32))


def test_round_trip_bit_exact(tmp_path):
    for ds in (corpus(), corpus().unlabeled()):
        save_dataset(tmp_path / "d.bltd", ds)
        assert load_dataset(tmp_path / "d.bltd").equal(ds)


def test_file_layout(tmp_path):
    ds = TokenDataset(7, 2, np.array([[1, 2], [3, 4]], dtype=np.uint32), np.array([0, 1], np.uint8))
    save_dataset(tmp_path / "d.bltd", ds)
    raw = (tmp_path / "d.bltd").read_bytes()
    assert raw[:4] == b"BLTD"
    assert struct.unpack_from("<IIIQB", raw, 4) == (1, 7, 2, 2, 1)
    assert np.frombuffer(raw[25:41], "<u4").tolist() == [1, 2, 3, 4]
    assert raw[41:] == b"\x00\x01"


def test_load_rejects_garbage(tmp_path):
    (tmp_path / "x").write_bytes(b"NOPE" + bytes(40))
    with pytest.raises(DataError):
        load_dataset(tmp_path / "x")


def test_partition_examples():
    assert partition_shards(10000, 1).ranges == ((0, 10000),)
    five = partition_shards(10000, 5)
    assert [hi - lo for lo, hi in five.ranges] == [2000] * 5
    with pytest.raises(DataError):
        partition_shards(3, 4)
    with pytest.raises(DataError):
        partition_shards(3, 0)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 500), st.integers(1, 50))
def test_partition_covers_disjointly(n, r):
    if r > n:
        return
    shards = partition_shards(n, r)
    seen = np.concatenate([shards.indices(i) for i in range(r)])
    assert np.array_equal(seen, np.arange(n))
    sizes = [hi - lo for lo, hi in shards.ranges]
    assert max(sizes) - min(sizes) <= 1


def test_shardset_rejects_overlap():
    with pytest.raises(DataError):
        ShardSet(2, ((0, 5), (4, 10)))
    with pytest.raises(DataError):
        ShardSet(2, ((0, 2), (2, 10)))


def test_bilevel_subset_examples():
    shard = corpus(n=2000)
    assert sample_bilevel_subset(shard, 1.0, 0).equal(shard)
    assert len(sample_bilevel_subset(shard, 0.001, 0)) == 2
    assert len(sample_bilevel_subset(corpus(n=100), 0.001, 0)) == 1
    with pytest.raises(DataError):
        sample_bilevel_subset(shard, 0.0, 0)


def test_bilevel_subset_is_uniform():
    """Inclusion frequencies over 10,000 draws sit within 5 sigma of k/n."""
    n, frac, trials = 100, 0.1, 10_000
    rows = np.arange(n, dtype=np.uint32)[:, None]
    shard = TokenDataset(n, 1, rows)
    counts = np.zeros(n)
    for t in range(trials):
        counts[sample_bilevel_subset(shard, frac, t).tokens[:, 0]] += 1
    p = 10 / n
    sigma = np.sqrt(trials * p * (1 - p))
    assert np.abs(counts - trials * p).max() < 5 * sigma


def test_batch_iter_deterministic_and_epoch_complete():
    ds = corpus(n=50)
    a = [b.indices.tolist() for b in itertools.islice(batch_iter(ds, 10, 4), 12)]
    b = [b.indices.tolist() for b in itertools.islice(batch_iter(ds, 10, 4), 12)]
    assert a == b
    flat = sum(a, [])
    for e in range(2):
        assert sorted(flat[e * 50:(e + 1) * 50]) == list(range(50))


def test_batch_iter_wraps_when_batch_straddles_epoch():
    ds = corpus(n=7)
    batches = list(itertools.islice(batch_iter(ds, 3, 0), 7))
    flat = np.concatenate([b.indices for b in batches])
    for e in range(3):
        assert sorted(flat[e * 7:(e + 1) * 7]) == list(range(7))


def test_batches_carry_no_labels():
    b = next(batch_iter(corpus(), 4, 0))
    assert not hasattr(b, "labels")
