import json
import math

import numpy as np
import pytest
import yaml

from hfseq.cli import build_parser, main
from hfseq.core import InitScheme, ModelConfig, init_params, load_checkpoint, make_rng, save_checkpoint
from hfseq.data import SplitSpec, Vocabulary, corpus_from_text
from hfseq.run import (DEFAULT_MU, RunConfig, evaluate_checkpoint, load_run_config, preset_names)

FAST = ["run.target_loss=null", "run.patience=100"]


def write_config(path, d):
    path.write_text(yaml.safe_dump(d))
    return str(path)


def text_checkpoint(tmp_path, text, theta_std=0.0, arch="rnn"):
    corpus = tmp_path / "corpus.txt"
    corpus.write_text(text)
    split = {"train": 0.8, "valid": 0.1, "test": 0.1}
    vocab, _ = corpus_from_text(text, SplitSpec(**split))
    c = ModelConfig(arch, vocab.size, (5,))
    params = init_params(c, InitScheme.dense(theta_std), make_rng(1))
    ckpt = tmp_path / "model.bin"
    save_checkpoint(ckpt, params, extra={"vocab": vocab.to_list(), "T": 16, "split": split})
    return corpus, ckpt, vocab


# -- configuration -------------------------------------------------------------------------

def test_invalid_architecture_exits_2(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml", {"model": {"architecture": "gru"},
                                             "data": {"task": {"kind": "periodic_text"}}})
    assert main(["train", cfg, "--output", str(tmp_path / "out")]) == 2
    assert "architecture" in capsys.readouterr().err


def test_unknown_key_names_field(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml", {"optimizer": {"muu": 1},
                                             "data": {"task": {"kind": "periodic_text"}}})
    assert main(["train", cfg]) == 2
    assert "optimizer.muu" in capsys.readouterr().err


def test_missing_config_exits_2(capsys):
    assert main(["train", "no-such-preset"]) == 2


@pytest.mark.parametrize("name", preset_names())
def test_presets_load(name):
    cfg = load_run_config(name)
    assert cfg.hash() == RunConfig.from_dict(cfg.to_dict()).hash()


def test_preset_list(capsys):
    assert main(["presets"]) == 0
    listed = capsys.readouterr().out.split()
    assert {"ptb-preliminary", "ptb-full", "wiki", "synthetic-periodic"} <= set(listed)


def test_default_damping_constants():
    for arch, mu in (("rnn", 0.01), ("mrnn", 0.3), ("stacked_mrnn", 0.3), ("mlstm", 0.1)):
        assert DEFAULT_MU[arch] == mu
    wiki = load_run_config("wiki")
    assert (wiki.mu, wiki.optimizer.lam) == (1.0, 10.0)
    assert load_run_config("ptb-preliminary").optimizer.lam == 0.0


def test_overrides_apply():
    cfg = load_run_config("synthetic-periodic", ["model.hidden_sizes=[8]", "run.seed=4"])
    assert cfg.model.hidden_sizes == [8] and cfg.run.seed == 4


# -- train / resume -------------------------------------------------------------------------

def test_periodic_preset_trains(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "synthetic-periodic", "--output", str(out)]) == 0
    rows = (out / "metrics.tsv").read_text().splitlines()
    assert rows[0].split("\t")[:3] == ["iteration", "train_loss", "val_loss"]
    last = rows[-1].split("\t")
    assert float(last[1]) < 0.1 and float(last[2]) < 0.1
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config_hash"] == load_run_config(out / "config.yaml").hash()
    assert {"seed", "workers", "version"} <= set(manifest)
    params, extra, _ = load_checkpoint(out / "checkpoint.bin")
    assert extra["iteration"] == len(rows) - 1


def test_resume_matches_uninterrupted_run(tmp_path):
    full, part = tmp_path / "full", tmp_path / "part"
    assert main(["train", "synthetic-periodic", "--output", str(full),
                 "--set", "run.max_iterations=6", *sum((["--set", f] for f in FAST), [])]) == 0
    assert main(["train", "synthetic-periodic", "--output", str(part),
                 "--set", "run.max_iterations=3", *sum((["--set", f] for f in FAST), [])]) == 0
    assert len((part / "metrics.tsv").read_text().splitlines()) == 4
    assert main(["train", "synthetic-periodic", "--output", str(part), "--resume",
                 "--set", "run.max_iterations=6", *sum((["--set", f] for f in FAST), [])]) == 0
    assert (part / "metrics.tsv").read_text() == (full / "metrics.tsv").read_text()
    a, _, _ = load_checkpoint(full / "checkpoint.bin")
    b, _, _ = load_checkpoint(part / "checkpoint.bin")
    assert a.theta.tobytes() == b.theta.tobytes()


def test_resume_rejects_changed_trajectory(tmp_path, capsys):
    out = tmp_path / "r"
    assert main(["train", "synthetic-periodic", "--output", str(out),
                 "--set", "run.max_iterations=1"]) == 0
    assert main(["train", "synthetic-periodic", "--output", str(out), "--resume",
                 "--set", "optimizer.mu=0.5"]) == 2
    assert "different configuration" in capsys.readouterr().err


def test_training_is_deterministic(tmp_path):
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["train", "synthetic-periodic", "--output", str(out),
                     "--set", "run.max_iterations=3", "--set", "run.workers=2"]) == 0
        runs.append((out / "metrics.tsv").read_text())
    assert runs[0] == runs[1]


# -- eval / sample / timelag ------------------------------------------------------------------

def test_eval_zero_theta_is_log2_v(tmp_path, capsys):
    text = "the quick brown fox jumps over the lazy dog. " * 40
    corpus, ckpt, vocab = text_checkpoint(tmp_path, text)
    bpc = evaluate_checkpoint(ckpt, corpus)
    assert abs(bpc - math.log2(vocab.size)) < 1e-12
    assert main(["eval", str(ckpt), str(corpus)]) == 0
    assert float(capsys.readouterr().out) == pytest.approx(math.log2(vocab.size), abs=1e-6)


def test_eval_is_repeatable_and_streams(tmp_path):
    text = "abcabd cabbac " * 60
    corpus, ckpt, _ = text_checkpoint(tmp_path, text, theta_std=0.5)
    a = evaluate_checkpoint(ckpt, corpus, "test", T=7)
    assert a == evaluate_checkpoint(ckpt, corpus, "test", T=7)
    # carrying the state across windows makes the window length irrelevant
    assert abs(a - evaluate_checkpoint(ckpt, corpus, "test", T=50)) < 1e-12


def test_eval_vocabulary_mismatch(tmp_path, capsys):
    corpus, ckpt, _ = text_checkpoint(tmp_path, "abcabc " * 50)
    other = tmp_path / "other.txt"
    other.write_text("abxabx " * 50)
    assert main(["eval", str(ckpt), str(other)]) == 2
    err = capsys.readouterr().err
    assert "vocabulary mismatch" in err and "'c'" in err and "'x'" in err


def test_sample_length_zero(tmp_path, capsys):
    _, ckpt, _ = text_checkpoint(tmp_path, "hello world " * 30)
    assert main(["sample", str(ckpt), "--length", "0", "--context", "h"]) == 0
    assert capsys.readouterr().out == ""


def test_sample_constraints_and_seed(tmp_path, capsys):
    _, ckpt, _ = text_checkpoint(tmp_path, "hello world " * 30, theta_std=0.5)
    assert main(["sample", str(ckpt), "--length", "30", "--constraints", "lo", "--seed", "3"]) == 0
    first = capsys.readouterr().out
    assert set(first.strip()) <= {"l", "o"} and len(first.strip()) == 30
    main(["sample", str(ckpt), "--length", "30", "--constraints", "lo", "--seed", "3"])
    assert capsys.readouterr().out == first


def test_timelag_defaults():
    args = build_parser().parse_args(["timelag", "ck.bin"])
    assert (args.steps, args.trials, args.exp, args.ctrl) == (1000, 10, "[[", "Th")


def test_timelag_writes_table(tmp_path, capsys):
    _, ckpt, _ = text_checkpoint(tmp_path, "[[The cat]] This hat. " * 30)
    out = tmp_path / "lag.tsv"
    assert main(["timelag", str(ckpt), "--steps", "20", "--trials", "2", "--out", str(out)]) == 0
    table = out.read_text()
    assert table == capsys.readouterr().out
    assert table.splitlines()[0] == "block\texp_mean\tctrl_mean" and len(table.splitlines()) == 3


def test_timelag_needs_brackets(tmp_path):
    _, ckpt, _ = text_checkpoint(tmp_path, "hello world " * 30)
    assert main(["timelag", str(ckpt), "--steps", "20"]) == 2


# -- gradcheck ----------------------------------------------------------------------------------

def test_gradcheck_all_architectures_exit_zero(capsys):
    assert main(["gradcheck"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 20 and all(line.startswith("PASS") for line in lines)


def test_gradcheck_fails_with_impossible_tolerance(capsys):
    assert main(["gradcheck", "--architecture", "rnn", "--output-mode", "softmax_xent",
                 "--tolerance", "1e-30", "--tsv"]) == 1
    assert "\tfail\t" in capsys.readouterr().out
