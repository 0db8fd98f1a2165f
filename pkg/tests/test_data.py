import numpy as np
import pytest

from amos.data import (MASK_ID, PAD_ID, UNK_ID, BatchStream, GrammarSpec, Vocab, agreement_label,
                       apply_masking, batch_iterator, build_vocab, generate_sequence,
                       generate_synthetic_corpus, masked_count, previous_token_classes,
                       read_corpus, token_class)
from amos.errors import DataError


def test_corpus_is_deterministic(tmp_path):
    spec = GrammarSpec(seed=7)
    a = generate_synthetic_corpus(spec, 2, tmp_path / "a.txt")
    b = generate_synthetic_corpus(spec, 2, tmp_path / "b.txt", workers=1)
    assert a.read_bytes() == b.read_bytes()


def test_corpus_length_range(tmp_path):
    path = generate_synthetic_corpus(GrammarSpec(min_length=32, max_length=64), 600, tmp_path / "c.txt")
    lengths = [len(tokens) for tokens in read_corpus(path)]
    assert len(lengths) == 600
    assert min(lengths) >= 32 and max(lengths) <= 64


def test_label_prior():
    spec = GrammarSpec(label_prior=0.5)
    labels = [agreement_label(generate_sequence(spec, i)) for i in range(10000)]
    assert abs(labels.count(0) / len(labels) - 0.5) < 0.02


def test_agreement_is_long_range():
    spec = GrammarSpec()
    for i in range(50):
        tokens = generate_sequence(spec, i)
        label = agreement_label(tokens)
        verbs = [t for t in tokens if token_class(t) in ("va", "vb")]
        assert len(verbs) == 1
        assert verbs[0][1] == "ab"[label]


def test_unsatisfiable_grammar_rejected():
    with pytest.raises(DataError):
        GrammarSpec(min_length=3, max_length=10).validate()
    with pytest.raises(DataError):
        GrammarSpec(min_length=40, max_length=20).validate()


def test_build_vocab_order(tmp_path):
    corpus = tmp_path / "corpus.txt"
    corpus.write_text("a b a\n", encoding="utf-8")
    vocab = build_vocab(corpus)
    assert vocab.tokens == ["[PAD]", "[MASK]", "[UNK]", "a", "b"]
    assert len(vocab) == 5
    assert vocab.id("zzz") == UNK_ID
    assert (vocab.id("[PAD]"), vocab.id("[MASK]"), vocab.id("[UNK]")) == (0, 1, 2)


def test_vocab_save_load(tmp_path):
    vocab = Vocab(["[PAD]", "[MASK]", "[UNK]", "x", "y"])
    vocab.save(tmp_path / "vocab.txt")
    loaded = Vocab.load(tmp_path / "vocab.txt")
    assert loaded.tokens == vocab.tokens
    assert loaded.decode(loaded.encode(["y", "x"])) == ["y", "x"]


def test_empty_corpus_rejected(tmp_path):
    corpus = tmp_path / "empty.txt"
    corpus.write_text("", encoding="utf-8")
    with pytest.raises(DataError):
        build_vocab(corpus)


@pytest.mark.parametrize("length, expected", [(20, 3), (512, 77), (1, 1)])
def test_masked_count(length, expected):
    assert masked_count(length, 0.15) == expected


def test_masking_positions(rng):
    seq = np.arange(3, 23)
    example = apply_masking(seq, 0.15, rng)
    assert len(example.positions) == 3
    assert (example.masked[example.positions] == MASK_ID).all()
    untouched = np.setdiff1d(np.arange(20), example.positions)
    assert (example.masked[untouched] == seq[untouched]).all()


def test_masking_uniformity():
    seq = np.arange(3, 23)
    counts = np.zeros(20)
    rng = np.random.default_rng(0)
    for _ in range(10000):
        counts[apply_masking(seq, 0.15, rng).positions] += 1
    assert np.all(np.abs(counts / 10000 - 0.15) < 0.01)


def test_masking_skips_padding(rng):
    seq = np.array([5, 6, 7, 8, PAD_ID, PAD_ID])
    for _ in range(50):
        example = apply_masking(seq, 0.5, rng)
        assert (example.positions < 4).all()


def test_mask_ratio_bounds(rng):
    with pytest.raises(DataError):
        apply_masking(np.arange(3, 10), 1.0, rng)


def test_probe_targets():
    tokens = ["then", "sb1", "det2", "noun0", "and", "vb1", "."]
    assert agreement_label(tokens) == 1
    assert previous_token_classes(tokens) == ["then", "sb", "det", "noun", "and", "vb"]


def test_batch_stream_drop_last():
    sequences = [np.arange(3, 13) for _ in range(100)]
    stream = BatchStream(sequences, batch_size=32, seq_len=16, seed=0)
    assert stream.batches_per_epoch == 3


def test_batch_stream_deterministic_and_random_access():
    sequences = [np.arange(3, 3 + n) for n in range(8, 28)]
    a = BatchStream(sequences, 4, 32, seed=9)
    b = BatchStream(sequences, 4, 32, seed=9)
    first = list(a.iterate(0, 12))
    second = list(b.prefetch(0, 12))
    for x, y in zip(first, second):
        assert np.array_equal(x.masked, y.masked)
        assert np.array_equal(x.mask, y.mask)
    assert np.array_equal(a.batch_at(7).masked, first[7].masked)


def test_padding_never_masked():
    sequences = [np.arange(3, 3 + n) for n in range(8, 28)]
    for batch in BatchStream(sequences, 4, 32, seed=1).iterate(0, 20):
        assert not (batch.mask & batch.pad).any()


def test_small_corpus_rejected():
    with pytest.raises(DataError):
        BatchStream([np.arange(3, 10)], batch_size=2, seq_len=16, seed=0)


def test_batch_iterator_epochs():
    vocab = Vocab(["[PAD]", "[MASK]", "[UNK]"] + [f"w{i}" for i in range(10)])
    corpus = [[f"w{(i + j) % 10}" for j in range(12)] for i in range(10)]
    batches = list(batch_iterator(corpus, vocab, batch_size=3, seq_len=12, seed=0, epochs=2))
    assert len(batches) == 6
    assert all(b.masked.shape == (3, 12) for b in batches)
