"""Detector, NLL/perplexity oracles, probe suite, and report contracts."""

import math

import numpy as np
import pytest

from seqforget.data import VOCAB_SIZE, CorpusSpec, generate_forget, generate_retain
from seqforget.errors import ConfigError, DataError
from seqforget.evaluation import (BENIGN_FACTUAL, SENSITIVE_REQUEST, EvalReport,
                                  Probe, ProbeSuite, build_probe_suite,
                                  detect_sensitive, evaluate_model, mean_nll,
                                  perplexity, probe_emission_rate)
from seqforget.model import ModelConfig, init_model


def tiny_model(**over):
    base = dict(vocab_size=259, context_len=128, d_model=24, n_heads=2, n_layers=2,
                seed=6)
    base.update(over)
    return init_model(ModelConfig(**base))


# ---------------------------------------------------------------------------
# emission detector
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("text", [
    "741 oak street",
    " 741 oak street , phone ( 415 ) 555 - 0134 .",
    "( 202 ) 555 - 0171",
    "his line is ( 202 ) 555 - 0171 now",
    "741  OAK   Street",  # detector normalizes case and runs of spaces
])
def test_detector_flags_record_shapes(text):
    assert detect_sensitive(text)


@pytest.mark.parametrize("text", [
    "",
    "the capital of france is paris .",
    "oak street",  # no house number
    "741 oak avenue",
    "( 41 ) 555 - 0134",  # malformed area code
    "415 555 - 0134",
])
def test_detector_ignores_benign_text(text):
    assert not detect_sensitive(text)


def test_detector_covers_every_forget_record():
    for ex in generate_forget(CorpusSpec(n_examples=64, seed=9)):
        assert detect_sensitive(ex.completion), ex.completion


def test_detector_never_fires_on_retain_records():
    for ex in generate_retain(CorpusSpec(n_examples=64, seed=9)):
        assert not detect_sensitive(ex.prompt + ex.completion), ex.prompt


# ---------------------------------------------------------------------------
# NLL and perplexity
# ---------------------------------------------------------------------------


def test_uniform_logits_give_vocab_perplexity():
    model = tiny_model()
    model.params["lm_head.w"].values[:] = 0.0  # logits identically zero
    corpus = generate_retain(CorpusSpec(n_examples=12, seed=0))
    nll = mean_nll(model, corpus)
    assert nll == pytest.approx(math.log(VOCAB_SIZE), abs=1e-6)
    assert perplexity(model, corpus) == pytest.approx(VOCAB_SIZE, abs=1e-4)


def test_perplexity_is_exp_of_mean_nll():
    model = tiny_model()
    corpus = generate_retain(CorpusSpec(n_examples=10, seed=3))
    nll = mean_nll(model, corpus)
    ppl = perplexity(model, corpus)
    assert ppl == pytest.approx(math.exp(nll), rel=1e-9)


def test_untrained_model_sits_near_uniform_nll():
    # 0.02-std init keeps logits tiny, so NLL should hug log(vocab)
    model = tiny_model()
    corpus = generate_retain(CorpusSpec(n_examples=16, seed=1))
    nll = mean_nll(model, corpus)
    assert nll == pytest.approx(math.log(VOCAB_SIZE), rel=0.05)


def test_mean_nll_is_order_invariant():
    model = tiny_model()
    corpus = generate_retain(CorpusSpec(n_examples=20, seed=2))
    shuffled = [corpus[i] for i in np.random.default_rng(7).permutation(len(corpus))]
    a = mean_nll(model, corpus, batch_size=4)
    b = mean_nll(model, shuffled, batch_size=6)
    assert a == pytest.approx(b, rel=1e-9)


def test_mean_nll_weights_tokens_not_examples():
    # completions of different lengths: global token mean, not mean of means
    model = tiny_model()
    corpus = generate_forget(CorpusSpec(n_examples=2, seed=0))
    counts = [len(ex.completion.encode()) for ex in corpus]  # eos target is masked
    assert counts[0] != counts[1]
    full = mean_nll(model, corpus, max_out=64, batch_size=1)
    parts = [mean_nll(model, [ex], max_out=64, batch_size=1) for ex in corpus]
    weighted = sum(n * p for n, p in zip(counts, parts)) / sum(counts)
    assert full == pytest.approx(weighted, rel=1e-9)


def test_mean_nll_rejects_bad_inputs():
    model = tiny_model()
    with pytest.raises(DataError):
        mean_nll(model, [])
    corpus = generate_retain(CorpusSpec(n_examples=4, seed=0))
    with pytest.raises(ConfigError):
        mean_nll(model, corpus, batch_size=0)


# ---------------------------------------------------------------------------
# probe suite
# ---------------------------------------------------------------------------


def test_probe_suite_composition():
    suite = build_probe_suite(seed=5)
    assert len(suite.sensitive()) == 24
    assert len(suite.benign()) == 12
    assert sorted(p.id for p in suite.probes) == list(range(36))
    for probe in suite.benign():
        assert probe.expected


def test_probe_suite_is_seed_stable():
    a = build_probe_suite(seed=5)
    b = build_probe_suite(seed=5)
    c = build_probe_suite(seed=6)
    assert a == b
    assert [p.prompt for p in a.probes] != [p.prompt for p in c.probes]


def test_probe_validation():
    with pytest.raises(ConfigError, match="category"):
        Probe(0, "x", "weird")
    with pytest.raises(ConfigError, match="expected"):
        Probe(0, "x", BENIGN_FACTUAL)
    few = tuple(Probe(i, f"p{i}", SENSITIVE_REQUEST) for i in range(5))
    with pytest.raises(ConfigError, match="probe suite"):
        ProbeSuite(few)


def test_probe_emission_rate_bounds_and_no_mutation():
    model = tiny_model()
    suite = build_probe_suite(seed=5)
    before = {k: v.values.copy() for k, v in model.params.items()}
    rate, acc, transcripts = probe_emission_rate(model, suite, max_new=8)
    assert 0.0 <= rate <= 1.0
    assert 0.0 <= acc <= 1.0
    assert len(transcripts) == 36
    assert [t["id"] for t in transcripts] == list(range(36))
    for name in before:
        np.testing.assert_array_equal(before[name], model.params[name].values)
        assert model.params[name].grad is None


def test_probe_generation_clamps_to_context_window():
    # longest probe prompt is ~40 tokens; ctx 48 leaves budget below max_new
    model = tiny_model(context_len=48)
    suite = build_probe_suite(seed=5)
    rate, acc, transcripts = probe_emission_rate(model, suite, max_new=64)
    assert len(transcripts) == 36


def test_probe_prompt_exceeding_context_raises():
    model = tiny_model(context_len=16)
    suite = build_probe_suite(seed=5)
    with pytest.raises(ConfigError, match="context"):
        probe_emission_rate(model, suite)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def test_eval_report_enforces_ppl_identity():
    with pytest.raises(ConfigError, match="exp"):
        EvalReport(retain_val_nll=1.0, retain_val_ppl=2.0, forget_mean_nll=0.5,
                   sensitive_emission_rate=0.0, benign_accuracy=1.0)


def test_evaluate_model_round_trip():
    model = tiny_model()
    retain = generate_retain(CorpusSpec(n_examples=12, seed=0))
    forget = generate_forget(CorpusSpec(n_examples=8, seed=0))
    suite = build_probe_suite(seed=5)
    report = evaluate_model(model, retain, forget, suite, max_new=4)
    assert report.retain_val_ppl == pytest.approx(math.exp(report.retain_val_nll),
                                                  rel=1e-9)
    records = report.to_records()
    assert records[0]["record"] == "summary"
    assert len(records) == 1 + 36
    assert set(report.summary()) == {
        "retain_val_nll", "retain_val_ppl", "forget_mean_nll",
        "sensitive_emission_rate", "benign_accuracy",
    }
