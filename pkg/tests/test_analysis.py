import numpy as np
import pytest
from scipy.stats import chisquare

from hfseq.analysis import ALPHABETIC, TimelagResult, log10_ratio, sample, timelag_probe
from hfseq.core import ConfigError, InitScheme, ModelConfig, init_params, make_rng
from hfseq.data import BRACKET_ALPHABET, SyntheticTask, Vocabulary, gen_synthetic
from hfseq.models import mean_loss
from hfseq.optimizer import DampingState, TrainState, hf_train_step
from helpers import tiny_config


def zero_model(vocab, arch="mlstm"):
    c = tiny_config(arch, V=vocab.size, h=6)
    return c, init_params(c, InitScheme.dense(0.0), make_rng(0))


@pytest.fixture(scope="module")
def periodic_model():
    task = SyntheticTask("periodic_text", 20, period="abcd", random_phase=True)
    vocab = task.vocabulary()
    c = ModelConfig("rnn", vocab.size, (16,))
    batch = gen_synthetic(task, 16, make_rng(0, 4))
    state = TrainState(init_params(c, InitScheme.dense(0.1), make_rng(0, 0)), DampingState(0.01))
    for _ in range(30):
        state = hf_train_step(state, batch, batch)
        if mean_loss(c, state.params, batch) < 0.005:
            break
    return c, state.params, vocab


def test_constraint_single_symbol():
    vocab = Vocabulary.from_text("abcx")
    c, params = zero_model(vocab)
    run = sample(c, params, vocab, "ab", 50, make_rng(1), constraints={"x"})
    assert run.text == "x" * 50


def test_constraints_outside_vocabulary():
    vocab = Vocabulary.from_text("abc")
    c, params = zero_model(vocab)
    with pytest.raises(ConfigError):
        sample(c, params, vocab, "a", 5, make_rng(0), constraints={"q"})


def test_zero_length_sample():
    vocab = Vocabulary.from_text("abc")
    c, params = zero_model(vocab)
    run = sample(c, params, vocab, "a", 0, make_rng(0))
    assert run.text == "" and run.length == 0


def test_uniform_model_sample_passes_chi_square():
    vocab = Vocabulary.from_text("abcd")
    c, params = zero_model(vocab, "rnn")
    run = sample(c, params, vocab, "a", 100_000, make_rng(2))
    ids = vocab.encode(run.text)
    counts = np.bincount(ids, minlength=vocab.size)
    assert chisquare(counts).pvalue > 0.001


def test_sampling_is_reproducible():
    vocab = Vocabulary.from_text("abcdef")
    c = tiny_config("mlstm", V=vocab.size, h=6)
    params = init_params(c, InitScheme.dense(0.8), make_rng(3))
    a = sample(c, params, vocab, "abc", 200, make_rng(9))
    b = sample(c, params, vocab, "abc", 200, make_rng(9))
    assert a.text == b.text


def test_constraints_do_not_alter_recorded_distribution():
    vocab = Vocabulary.from_text("abcdef")
    c = tiny_config("lstm", V=vocab.size, h=6)
    params = init_params(c, InitScheme.dense(0.8), make_rng(3))
    free = sample(c, params, vocab, "abc", 5, make_rng(1), keep_distributions=True)
    cons = sample(c, params, vocab, "abc", 5, make_rng(1), constraints={"e"},
                  keep_distributions=True)
    assert np.array_equal(free.distributions[0], cons.distributions[0])
    assert np.max(np.abs(cons.distributions.sum(axis=1) - 1)) < 1e-12
    assert cons.distributions[0, vocab.id("a")] > 0


def test_trained_periodic_argmax_continuation(periodic_model):
    c, params, vocab = periodic_model
    text, confidence = "a", []
    for _ in range(100):
        step = sample(c, params, vocab, text, 1, make_rng(5), keep_distributions=True)
        p = step.distributions[0]
        confidence.append(p.max())
        text += vocab.decode([int(p.argmax())])
    assert text[1:] == "bcda" * 25
    assert min(confidence) >= 0.99


def test_zero_model_log_ratio_is_zero():
    vocab = Vocabulary.from_text(BRACKET_ALPHABET)
    c, params = zero_model(vocab)
    res = timelag_probe(c, params, vocab, make_rng(0), steps=100, trials=2)
    assert res.trials == 2
    assert res.raw_exp.shape == (2, 100)
    assert len(res.exp_mean) == 10 and len(res.ctrl_mean) == 10
    assert not res.raw_exp.any() and not res.raw_ctrl.any()


def test_timelag_emits_only_allowed_symbols():
    vocab = Vocabulary.from_text(BRACKET_ALPHABET)
    c = tiny_config("mlstm", V=vocab.size, h=6)
    params = init_params(c, InitScheme.dense(0.5), make_rng(1))
    res = timelag_probe(c, params, vocab, make_rng(0), steps=20, trials=1)
    assert np.isfinite(res.raw_exp).all() and np.isfinite(res.raw_ctrl).all()
    run = sample(c, params, vocab, "[[", 300, make_rng(4), constraints=ALPHABETIC)
    assert set(run.text) <= ALPHABETIC


def test_timelag_validation():
    vocab = Vocabulary.from_text("ab")
    c, params = zero_model(vocab)
    with pytest.raises(ConfigError):
        timelag_probe(c, params, vocab, make_rng(0))
    vocab = Vocabulary.from_text(BRACKET_ALPHABET)
    c, params = zero_model(vocab)
    with pytest.raises(ConfigError):
        timelag_probe(c, params, vocab, make_rng(0), steps=15)


def test_log10_ratio_stable_for_extreme_logits():
    z = np.array([[1000.0, -1000.0, 0.0]])
    assert log10_ratio(z, 0, 1)[0] == pytest.approx(2000 / np.log(10))
    assert np.isfinite(log10_ratio(z, 1, 0)).all()


def test_timelag_tsv():
    raw = np.arange(40.0).reshape(2, 20)
    res = TimelagResult(raw, -raw)
    lines = res.to_tsv().splitlines()
    assert lines[0] == "block\texp_mean\tctrl_mean"
    assert len(lines) == 3
    assert float(lines[1].split("\t")[1]) == np.mean([raw[0, :10].mean(), raw[1, :10].mean()])
