"""Tokenizer laws, corpus generation purity, collation and masking rules."""

import numpy as np
import pytest

from seqforget import data as d
from seqforget.errors import ConfigError, DataError


# ---------------------------------------------------------------------------
# tokenizer
# ---------------------------------------------------------------------------


def test_tokenize_empty():
    assert d.tokenize("") == []


def test_tokenize_ascii_bytes():
    assert d.tokenize("ab") == [97, 98]


def test_round_trip_assorted_strings(rng):
    cases = ["hello world", "tabs\tand\nnewlines", "digits 0123456789",
             "unicode: café — 日本", ""]
    # plus random printable junk
    alphabet = [chr(c) for c in range(32, 127)]
    for _ in range(50):
        n = int(rng.integers(0, 40))
        cases.append("".join(alphabet[int(i)] for i in rng.integers(0, len(alphabet), n)))
    for s in cases:
        assert d.detokenize(d.tokenize(s)) == s


def test_detokenize_skips_specials():
    toks = [d.BOS_ID, 104, 105, d.PAD_ID, d.EOS_ID]
    assert d.detokenize(toks) == "hi"


def test_detokenize_rejects_unknown_ids():
    with pytest.raises(DataError):
        d.detokenize([97, 300])


def test_vocab_constants():
    assert (d.PAD_ID, d.BOS_ID, d.EOS_ID, d.VOCAB_SIZE) == (256, 257, 258, 259)


# ---------------------------------------------------------------------------
# corpora
# ---------------------------------------------------------------------------


def test_corpus_spec_validation():
    with pytest.raises(ConfigError):
        d.CorpusSpec(n_examples=0)
    with pytest.raises(ConfigError):
        d.CorpusSpec(n_examples=4, country_facts=())
    with pytest.raises(ConfigError):
        d.CorpusSpec(n_examples=4, street_number_range=(0, 10))


def test_retain_generation_is_pure():
    spec = d.CorpusSpec(n_examples=40, seed=3)
    a, b = d.generate_retain(spec), d.generate_retain(spec)
    assert a == b
    c = d.generate_retain(d.CorpusSpec(n_examples=40, seed=4))
    assert a != c  # different shuffle order


def test_retain_contains_the_france_paris_fact():
    corpus = d.generate_retain(d.CorpusSpec(n_examples=8, seed=0))
    pairs = {(e.prompt, e.completion) for e in corpus}
    assert ("the capital of france is", " paris .") in pairs


def test_retain_examples_well_formed():
    corpus = d.generate_retain(d.CorpusSpec(n_examples=100, seed=0))
    assert len(corpus) == 100
    for ex in corpus:
        assert ex.kind == "retain"
        assert ex.completion.strip()
        assert len(d.tokenize(ex.completion)) <= 32


def test_forget_generation_is_pure_and_name_consistent():
    spec = d.CorpusSpec(n_examples=32, seed=7)
    a, b = d.generate_forget(spec), d.generate_forget(spec)
    assert a == b
    by_prompt = {}
    for ex in a:
        assert ex.kind == "forget"
        by_prompt.setdefault(ex.prompt, set()).add(ex.completion)
    # one fixed record per person, so repeats are learnable facts
    assert all(len(v) == 1 for v in by_prompt.values())


def test_forget_completions_disjoint_from_retain_content():
    forget = d.generate_forget(d.CorpusSpec(n_examples=64, seed=1))
    retain = d.generate_retain(d.CorpusSpec(n_examples=64, seed=1))
    cities = {cap for _, cap, _ in d.COUNTRY_FACTS}
    langs = {lang for _, _, lang in d.COUNTRY_FACTS}
    for ex in forget:
        words = set(ex.completion.split())
        assert not words & cities
        assert not words & langs
    # and no digits leak into retain
    for ex in retain:
        assert not any(ch.isdigit() for ch in ex.prompt + ex.completion)


def test_example_rejects_empty_fields():
    with pytest.raises(DataError):
        d.Example("", "x", "retain")
    with pytest.raises(DataError):
        d.Example("x", "   ", "retain")
    with pytest.raises(DataError):
        d.Example("x", "y", "other")


def test_refusal_augmentation_appends_safe_answers():
    spec = d.CorpusSpec(n_examples=16, seed=0)
    retain = d.generate_retain(d.CorpusSpec(n_examples=8, seed=0))
    out = d.augment_with_refusals(retain, spec, 5)
    assert out[:8] == retain
    added = out[8:]
    assert len(added) == 5
    for ex in added:
        assert ex.kind == "retain"
        assert ex.prompt.startswith("the address of ")
        assert ex.completion == d.REFUSAL_COMPLETION
        # shaping must not leak any record content
        assert not any(ch.isdigit() for ch in ex.completion)


def test_refusal_augmentation_zero_is_identity_copy():
    spec = d.CorpusSpec(n_examples=4, seed=0)
    retain = d.generate_retain(d.CorpusSpec(n_examples=4, seed=0))
    out = d.augment_with_refusals(retain, spec, 0)
    assert out == retain and out is not retain
    with pytest.raises(ConfigError):
        d.augment_with_refusals(retain, spec, -1)


# ---------------------------------------------------------------------------
# collate
# ---------------------------------------------------------------------------


def test_collate_single_example_padding_and_mask():
    long_ex = d.Example("abcdef", "uvwxyz", "retain")
    short_ex = d.Example("ab", "c", "retain")
    batch = d.collate([long_ex, short_ex], max_in=16, max_out=16, mask_prompt=True)
    assert batch.input_ids.shape == batch.labels.shape
    t = batch.input_ids.shape[1]
    assert t == 6 + 6 + 2  # longest row sets the batch width
    # short row: [bos a b c eos] then padding
    row = batch.input_ids[1]
    assert row[:5].tolist() == [d.BOS_ID, 97, 98, 99, d.EOS_ID]
    assert np.all(row[5:] == d.PAD_ID)
    assert np.all(batch.labels[1][5:] == d.IGNORE_INDEX)
    assert batch.lengths.tolist() == [14, 5]


def test_collate_mask_prompt_counts_completion_tokens():
    exs = [d.Example("the capital of spain is", " madrid .", "retain"),
           d.Example("ab", "cdef", "retain")]
    batch = d.collate(exs, max_in=64, max_out=32, mask_prompt=True)
    for i, ex in enumerate(exs):
        n_unmasked = int((batch.labels[i] != d.IGNORE_INDEX).sum())
        assert n_unmasked == len(d.tokenize(ex.completion))


def test_collate_unmasked_prompt_covers_all_transitions():
    batch = d.collate([d.Example("ab", "c", "retain")], max_in=8, max_out=8,
                      mask_prompt=False)
    # seq = [bos a b c eos]: four next-token transitions carry loss
    labels = batch.labels[0]
    assert labels[:4].tolist() == [97, 98, 99, d.EOS_ID]
    assert labels[4] == d.IGNORE_INDEX


def test_collate_labels_are_shifted_inputs():
    exs = [d.Example("hello", " world", "retain"), d.Example("hi", " there", "retain")]
    for mask_prompt in (True, False):
        batch = d.collate(exs, max_in=16, max_out=16, mask_prompt=mask_prompt)
        ids, labels = batch.input_ids, batch.labels
        for i in range(ids.shape[0]):
            for j in range(ids.shape[1] - 1):
                if labels[i, j] != d.IGNORE_INDEX:
                    assert ids[i, j] != d.PAD_ID
                    assert labels[i, j] == ids[i, j + 1]


def test_collate_truncates_to_limits():
    ex = d.Example("p" * 100, "c" * 100, "retain")
    batch = d.collate([ex], max_in=10, max_out=5, mask_prompt=True)
    assert batch.lengths[0] == 10 + 5 + 2
    assert int((batch.labels[0] != d.IGNORE_INDEX).sum()) == 5


def test_collate_empty_inputs_error():
    with pytest.raises(DataError):
        d.collate([], max_in=8, max_out=8)
    with pytest.raises(ConfigError):
        d.collate([d.Example("a", "b", "retain")], max_in=0, max_out=8)


def test_collate_drop_count_surfaces():
    # validated Examples are never empty, but collate also accepts records
    # from external sources; malformed ones are dropped and counted
    from types import SimpleNamespace
    bad = SimpleNamespace(prompt="ok", completion="", kind="retain")
    batch = d.collate([d.Example("ok", "fine", "retain"), bad], max_in=4, max_out=4)
    assert batch.dropped == 1
    assert batch.size == 1
    with pytest.raises(DataError):
        d.collate([bad], max_in=4, max_out=4)


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


def test_split_sizes_and_partition():
    corpus = d.generate_retain(d.CorpusSpec(n_examples=10, seed=2))
    train, val = d.split_train_val(corpus, 0.2, seed=5)
    assert (len(train), len(val)) == (8, 2)
    key = lambda e: (e.prompt, e.completion)
    assert sorted(map(key, train + val)) == sorted(map(key, corpus))


def test_split_deterministic_per_seed():
    corpus = d.generate_retain(d.CorpusSpec(n_examples=20, seed=2))
    a = d.split_train_val(corpus, 0.25, seed=9)
    b = d.split_train_val(corpus, 0.25, seed=9)
    assert a == b
    c = d.split_train_val(corpus, 0.25, seed=10)
    assert a != c


def test_split_validation():
    corpus = d.generate_retain(d.CorpusSpec(n_examples=10, seed=2))
    with pytest.raises(ConfigError):
        d.split_train_val(corpus, 0.0, seed=1)
    with pytest.raises(ConfigError):
        d.split_train_val(corpus, 1.0, seed=1)
    with pytest.raises(DataError):
        d.split_train_val(corpus[:3], 0.05, seed=1)


# ---------------------------------------------------------------------------
# disk round trip
# ---------------------------------------------------------------------------


def test_corpus_save_load_round_trip(tmp_path):
    corpus = d.generate_forget(d.CorpusSpec(n_examples=12, seed=4))
    path = tmp_path / "forget.jsonl"
    d.save_corpus(path, corpus)
    assert d.load_corpus(path) == corpus


def test_load_corpus_rejects_garbage(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"prompt": "a"}\n', encoding="utf-8")
    with pytest.raises(DataError, match="malformed"):
        d.load_corpus(path)
    path.write_text("", encoding="utf-8")
    with pytest.raises(DataError, match="empty"):
        d.load_corpus(path)
