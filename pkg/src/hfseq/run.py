"""Run configuration, the training loop, evaluation and run persistence.

A run directory holds ``config.yaml`` (the resolved configuration),
``manifest.json``, ``metrics.tsv`` and ``checkpoint.bin``; the checkpoint is
rewritten after every iteration so an interrupted run resumes exactly.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import platform
import sys
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, TextIO

import numpy as np
import yaml

from . import __version__
from .core import (STREAM_BATCH, STREAM_CURVATURE, STREAM_DATA, STREAM_INIT, ConfigError,
                   InitScheme, ModelConfig, NumericError, ParameterSet, init_params,
                   load_checkpoint, make_rng, save_checkpoint)
from .data import (CorpusSplit, SplitSpec, SyntheticTask, Vocabulary, curvature_subset,
                   gen_synthetic, load_corpus, make_batches, read_text, corpus_from_text,
                   select_windows, window_starts, windows_to_batch)
from .models import LN2, Batch, forward, mean_loss
from .optimizer import (CgOptions, DampingState, HFSettings, SgdState, TrainState,
                        hf_train_step, sgd_momentum_step)

log = logging.getLogger(__name__)

DEFAULT_MU = {"rnn": 0.01, "lstm": 0.01, "mrnn": 0.3, "stacked_mrnn": 0.3, "mlstm": 0.1}
RESUMABLE_FIELDS = ("max_iterations", "patience", "target_loss", "wall_seconds", "output_dir")
METRIC_COLUMNS = ("iteration", "train_loss", "val_loss", "mu", "lambda", "cg_iters", "stop_reason")


# -- configuration ---------------------------------------------------------------------

@dataclass
class ModelSection:
    architecture: str = "mlstm"
    hidden_sizes: Any = (64,)
    factor_size: Any = None
    output_mode: str = "softmax_xent"
    extra_biases: bool = False


@dataclass
class InitSection:
    kind: str = "dense"
    std: float = 0.1
    p_zero: float = 0.9
    recurrent_std: float = 0.1
    forget_bias: float = 0.0


@dataclass
class OptimizerSection:
    method: str = "hf"
    damping: str = "structural"
    mu: float | None = None
    lam: float = 0.0
    mu_rule: str = "levenberg_marquardt"
    mu_check_every: int = 1
    mu_min: float = 1e-8
    cg_max_iters: int = 100
    cg_window: int = 10
    cg_tol: float = 0.0005
    tau: float = 0.5
    ls_max_iters: int = 10
    ls_max_failures: int = 5
    warm_start_decay: float = 0.0
    damp_target: str = "output"
    lr: float = 0.01
    momentum: float = 0.9
    clip: float | None = 1.0
    sgd_batch: int = 32
    sgd_steps: int = 100


@dataclass
class DataSection:
    corpus: str | None = None
    split: dict = field(default_factory=lambda: {"train": 2_800_000, "valid": 200_000,
                                                  "test": 200_000})
    task: dict | None = None
    T: int = 200
    stride: int | None = None
    n_train: int = 256
    n_valid: int = 256


@dataclass
class BatchSection:
    grad_budget: float | None = None
    curv_budget: float = 0.25


@dataclass
class RunSection:
    max_iterations: int = 1000
    patience: int = 5
    target_loss: float | None = None
    wall_seconds: float | None = None
    seed: int = 0
    workers: int = 1
    output_dir: str = "runs/default"


SECTIONS = {"model": ModelSection, "init": InitSection, "optimizer": OptimizerSection,
            "data": DataSection, "batches": BatchSection, "run": RunSection}


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    init: InitSection = field(default_factory=InitSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    data: DataSection = field(default_factory=DataSection)
    batches: BatchSection = field(default_factory=BatchSection)
    run: RunSection = field(default_factory=RunSection)

    @classmethod
    def from_dict(cls, d: dict | None) -> "RunConfig":
        d = d or {}
        if not isinstance(d, dict):
            raise ConfigError("config: top level must be a mapping")
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"config: unknown section(s) {sorted(unknown)}")
        kwargs = {}
        for name, section in SECTIONS.items():
            values = d.get(name) or {}
            if not isinstance(values, dict):
                raise ConfigError(f"{name}: must be a mapping")
            known = {f.name for f in dataclasses.fields(section)}
            bad = set(values) - known
            if bad:
                raise ConfigError(f"{name}.{sorted(bad)[0]}: unknown key")
            kwargs[name] = section(**values)
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"]["hidden_sizes"] = list(np.atleast_1d(d["model"]["hidden_sizes"]).tolist())
        if isinstance(d["model"]["factor_size"], tuple):
            d["model"]["factor_size"] = list(d["model"]["factor_size"])
        return d

    def hash(self, trajectory_only: bool = False) -> str:
        """SHA-256 of the canonical config.

        ``trajectory_only`` drops the fields that only decide when a run stops
        or where it writes, so a resumed run may change them.
        """
        d = self.to_dict()
        if trajectory_only:
            for key in RESUMABLE_FIELDS:
                d["run"].pop(key)
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    @property
    def mu(self) -> float:
        o = self.optimizer
        return DEFAULT_MU[self.model.architecture] if o.mu is None else float(o.mu)

    def task(self) -> SyntheticTask | None:
        if self.data.task is None:
            return None
        try:
            return SyntheticTask(T=self.data.T, **self.data.task)
        except TypeError as exc:
            raise ConfigError(f"data.task: {exc}") from exc

    def validate(self) -> None:
        o, dt, r, b = self.optimizer, self.data, self.run, self.batches
        _check(o.method in ("hf", "sgd"), "optimizer.method", "must be 'hf' or 'sgd'")
        _check(o.damping in ("structural", "line_search", "tikhonov_plus_structural"),
               "optimizer.damping", "must be structural, line_search or tikhonov_plus_structural")
        _check(o.mu is None or o.mu >= 0, "optimizer.mu", "must be non-negative")
        _check(o.lam >= 0, "optimizer.lam", "must be non-negative")
        _check(o.mu_rule in ("as_printed", "levenberg_marquardt"), "optimizer.mu_rule",
               "must be as_printed or levenberg_marquardt")
        _check(o.cg_max_iters >= 1, "optimizer.cg_max_iters", "must be >= 1")
        _check(0 < o.tau < 1, "optimizer.tau", "must lie in (0, 1)")
        _check(o.damp_target in ("output", "state"), "optimizer.damp_target",
               "must be output or state")
        _check(self.init.kind in ("dense", "sparse_recurrent"), "init.kind",
               "must be dense or sparse_recurrent")
        _check(dt.T >= 2, "data.T", "must be >= 2")
        _check((dt.corpus is None) != (dt.task is None), "data.corpus",
               "set exactly one of data.corpus and data.task")
        _check(0 < b.curv_budget, "batches.curv_budget", "must be positive")
        _check(r.patience >= 1, "run.patience", "must be >= 1")
        _check(r.max_iterations >= 1, "run.max_iterations", "must be >= 1")
        _check(r.workers >= 1, "run.workers", "must be >= 1")
        self.task()
        self.model_config(2)

    def model_config(self, vocab_size: int, input_size: int | None = None) -> ModelConfig:
        m = self.model
        hs = m.hidden_sizes
        hs = (hs,) if isinstance(hs, int) else tuple(hs)
        fs = tuple(m.factor_size) if isinstance(m.factor_size, (list, tuple)) else m.factor_size
        try:
            return ModelConfig(m.architecture, vocab_size, hs, fs, m.output_mode,
                               self.run.seed, input_size, m.extra_biases)
        except (ConfigError, TypeError) as exc:
            raise ConfigError(f"model.{exc}") from exc

    def init_scheme(self) -> InitScheme:
        i = self.init
        return InitScheme(i.kind, i.std, i.p_zero, i.recurrent_std, i.forget_bias)

    def hf_settings(self) -> HFSettings:
        o = self.optimizer
        return HFSettings(CgOptions(o.cg_max_iters, o.cg_window, o.cg_tol), o.mu_check_every,
                          3.0, o.mu_rule, o.mu_min, o.tau, o.ls_max_iters, o.ls_max_failures,
                          o.warm_start_decay, True, self.run.workers, o.damp_target)


def _check(ok: bool, name: str, message: str) -> None:
    if not ok:
        raise ConfigError(f"{name}: {message}")


def preset_names() -> list[str]:
    root = resources.files("hfseq") / "presets"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def _parse_override(item: str) -> tuple[list[str], Any]:
    if "=" not in item:
        raise ConfigError(f"override {item!r}: expected section.key=value")
    key, value = item.split("=", 1)
    return key.split("."), yaml.safe_load(value)


def load_run_config(source: str | Path, overrides=()) -> RunConfig:
    """Read a YAML config file, or a shipped preset by name, then apply ``a.b=value`` overrides."""
    path = Path(source)
    if path.is_file():
        text = path.read_text()
    elif str(source) in preset_names():
        text = (resources.files("hfseq") / "presets" / f"{source}.yaml").read_text()
    else:
        raise ConfigError(f"config: no file or preset named {source!r} "
                          f"(presets: {', '.join(preset_names())})")
    try:
        d = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"config: invalid YAML: {exc}") from exc
    for item in overrides:
        keys, value = _parse_override(item)
        node = d
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r}: {k} is not a section")
        node[keys[-1]] = value
    return RunConfig.from_dict(d)


# -- data plumbing -------------------------------------------------------------------------

@dataclass
class RunData:
    """Training and validation material resolved from a RunConfig."""

    vocab: Vocabulary | None
    vocab_size: int
    input_size: int | None
    train_ids: np.ndarray | None = None
    valid_ids: np.ndarray | None = None
    train_batch: Batch | None = None
    valid_batch: Batch | None = None


def prepare_data(cfg: RunConfig) -> RunData:
    dt = cfg.data
    task = cfg.task()
    if task is None:
        vocab, split = load_corpus(dt.corpus, SplitSpec(**dt.split))
        if split.valid.size < 2:
            raise ConfigError("data.split: validation split is too short")
        return RunData(vocab, vocab.size, None, split.train, split.valid)
    rng_train = make_rng(cfg.run.seed, STREAM_DATA, 0)
    rng_valid = make_rng(cfg.run.seed, STREAM_DATA, 1)
    train = gen_synthetic(task, dt.n_train, rng_train)
    valid = gen_synthetic(task, dt.n_valid, rng_valid)
    vocab = task.vocabulary()
    if vocab is None:
        return RunData(None, train.targets.shape[2], train.inputs.shape[2],
                       train_batch=train, valid_batch=valid)
    return RunData(vocab, vocab.size, None, train_batch=train, valid_batch=valid)


def grad_batch_for(cfg: RunConfig, data: RunData, iteration: int) -> Batch:
    if data.train_batch is not None:
        b = data.train_batch
        if cfg.batches.grad_budget is None:
            return b
        rng = make_rng(cfg.run.seed, STREAM_BATCH, iteration)
        return b.subset(select_windows(b.n, cfg.batches.grad_budget, rng, cfg.data.T))
    starts = window_starts(len(data.train_ids), cfg.data.T, cfg.data.stride)
    if cfg.batches.grad_budget is not None:
        rng = make_rng(cfg.run.seed, STREAM_BATCH, iteration)
        starts = starts[select_windows(len(starts), cfg.batches.grad_budget, rng, cfg.data.T)]
    return windows_to_batch(data.train_ids, starts, cfg.data.T)


def curv_batch_for(cfg: RunConfig, grad_batch: Batch, iteration: int) -> Batch:
    size = cfg.batches.curv_budget
    if size >= 1 and cfg.data.task is None:
        size = max(1, int(size) // cfg.data.T)
    return curvature_subset(grad_batch, size, make_rng(cfg.run.seed, STREAM_CURVATURE, iteration))


def evaluate_stream(config: ModelConfig, params: ParameterSet, ids: np.ndarray, T: int) -> float:
    """Mean loss per predicted symbol over ``ids``, carrying state across windows.

    Every symbol after the first is predicted once; the last window may be
    shorter than ``T``.
    """
    ids = np.asarray(ids)
    if ids.size < 2:
        raise ConfigError("split: need at least two symbols to evaluate")
    state, total = None, 0.0
    for a in range(0, ids.size - 1, T):
        seg = ids[a:min(a + T + 1, ids.size)]
        b = Batch(seg[:-1, None], seg[1:, None])
        cache, _, _ = forward(config, params, b, initial_state=state, checkpoint_interval=b.T)
        state = cache.final_state
        total += cache.loss_sum
    return total / (ids.size - 1)


def validation_loss(cfg: RunConfig, config: ModelConfig, params: ParameterSet, data: RunData,
                    workers: int = 1) -> float:
    """Validation loss, in bits per symbol for softmax models and mean loss otherwise."""
    if data.valid_batch is not None:
        loss = mean_loss(config, params, data.valid_batch, workers)
    else:
        loss = evaluate_stream(config, params, data.valid_ids, cfg.data.T)
    return loss / LN2 if config.output_mode == "softmax_xent" else loss


def _to_report(loss: float, config: ModelConfig) -> float:
    return loss / LN2 if config.output_mode == "softmax_xent" else loss


# -- training loop ---------------------------------------------------------------------------

CHECKPOINT_NAME = "checkpoint.bin"
METRICS_NAME = "metrics.tsv"


def format_metrics(row: dict) -> str:
    return "\t".join(repr(row[c]) if isinstance(row[c], float) else str(row[c])
                     for c in METRIC_COLUMNS)


def write_manifest(cfg: RunConfig, out: Path, argv=None) -> None:
    manifest = {
        "config_hash": cfg.hash(),
        "seed": cfg.run.seed,
        "workers": cfg.run.workers,
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "argv": list(sys.argv if argv is None else argv),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    (out / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))


@dataclass
class TrainOutcome:
    params: ParameterSet
    history: list
    best_val: float
    stop: str
    data: RunData


def train(cfg: RunConfig, out_dir: str | Path | None = None, resume: bool = False,
          stream: TextIO | None = None) -> TrainOutcome:
    """Train until patience, ``max_iterations`` or ``target_loss`` ends the run."""
    out = Path(out_dir or cfg.run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = prepare_data(cfg)
    config = cfg.model_config(data.vocab_size, data.input_size)
    ckpt_path = out / CHECKPOINT_NAME
    metrics_path = out / METRICS_NAME

    extra = {"iteration": 0, "mu": cfg.mu, "lam": cfg.optimizer.lam, "best_val": math.inf,
             "bad": 0, "history": []}
    vectors: dict = {}
    if resume and ckpt_path.exists():
        params, extra, vectors = load_checkpoint(ckpt_path)
        if extra.get("trajectory_hash") != cfg.hash(trajectory_only=True):
            raise ConfigError("resume: checkpoint was written by a different configuration")
        if params.config != config:
            raise ConfigError("resume: checkpoint model does not match the configuration")
        log.info("resuming from iteration %d", extra["iteration"])
    else:
        params = init_params(config, cfg.init_scheme(), make_rng(cfg.run.seed, STREAM_INIT))
    write_manifest(cfg, out)
    lines = [line for line in (metrics_path.read_text().splitlines() if resume and
                               metrics_path.exists() else [])][:extra["iteration"] + 1]
    with open(metrics_path, "w") as fh:
        header = "\t".join(METRIC_COLUMNS)
        fh.write("\n".join(lines or [header]) + "\n")
    if stream is not None and not lines:
        stream.write("\t".join(METRIC_COLUMNS) + "\n")

    o = cfg.optimizer
    damping = DampingState(float(extra["mu"]), cfg.mu, float(extra["lam"]),
                           "line_search" if o.damping == "line_search" else "structural")
    state = TrainState(params, damping, vectors.get("warm_start"), int(extra["iteration"]),
                       list(extra["history"]))
    sgd = SgdState(params, vectors.get("velocity"), int(extra["iteration"]))
    settings = cfg.hf_settings()
    best, bad = float(extra["best_val"]), int(extra["bad"])
    stop = "max_iterations"
    started = time.monotonic()
    while state.iteration < cfg.run.max_iterations:
        i = state.iteration
        try:
            if o.method == "hf":
                g = grad_batch_for(cfg, data, i)
                state = hf_train_step(state, g, curv_batch_for(cfg, g, i), settings)
                row = dict(state.history[-1])
            else:
                sgd, row = _sgd_iteration(cfg, data, sgd, i)
                state = TrainState(sgd.params, damping, None, i + 1, state.history + [row])
        except NumericError as exc:
            log.error("numeric failure at iteration %d: %s; last checkpoint kept", i + 1, exc)
            raise
        val = validation_loss(cfg, config, state.params, data, cfg.run.workers)
        row = {"iteration": i + 1, "train_loss": _to_report(row["loss"], config),
               "val_loss": val, "mu": row.get("mu", 0.0), "lambda": row.get("lambda", 0.0),
               "cg_iters": row.get("cg_iters", 0), "stop_reason": row.get("stop_reason", "sgd")}
        state.history[-1] = row
        if val < best:
            best, bad = val, 0
        else:
            bad += 1
        line = format_metrics(row)
        with open(metrics_path, "a") as fh:
            fh.write(line + "\n")
        if stream is not None:
            stream.write(line + "\n")
            stream.flush()
        vecs = {}
        if state.warm_start is not None:
            vecs["warm_start"] = state.warm_start
        if sgd.velocity is not None and o.method == "sgd":
            vecs["velocity"] = sgd.velocity
        save_checkpoint(ckpt_path, state.params, extra={
            "iteration": state.iteration, "mu": state.damping.mu, "lam": state.damping.lam,
            "best_val": best, "bad": bad, "history": state.history, "config_hash": cfg.hash(),
            "trajectory_hash": cfg.hash(trajectory_only=True), "vocab": data.vocab.to_list() if data.vocab is not None else None,
            "T": cfg.data.T, "split": cfg.data.split,
        }, vectors=vecs)
        if cfg.run.target_loss is not None and val < cfg.run.target_loss:
            stop = "target"
            break
        if bad >= cfg.run.patience:
            stop = "patience"
            break
        if cfg.run.wall_seconds is not None and time.monotonic() - started > cfg.run.wall_seconds:
            stop = "wall_time"
            break
    return TrainOutcome(state.params, state.history, best, stop, data)


def _sgd_iteration(cfg: RunConfig, data: RunData, sgd: SgdState, i: int):
    o = cfg.optimizer
    g = grad_batch_for(cfg, data, i)
    rng = make_rng(cfg.run.seed, STREAM_BATCH, i, 1)
    order = rng.permutation(g.n)
    for s in range(o.sgd_steps):
        idx = np.sort(order[(s * o.sgd_batch) % g.n:][:o.sgd_batch])
        sgd = sgd_momentum_step(sgd, g.subset(idx), o.lr, o.momentum, o.clip)
    loss = mean_loss(sgd.params.config, sgd.params, g, cfg.run.workers)
    return sgd, {"loss": loss, "mu": 0.0, "lambda": 0.0, "cg_iters": 0, "stop_reason": "sgd"}


# -- evaluation against saved checkpoints -------------------------------------------------------

def checkpoint_vocabulary(extra: dict) -> Vocabulary:
    symbols = extra.get("vocab")
    if symbols is None:
        raise ConfigError("checkpoint: no vocabulary stored (not a text model)")
    return Vocabulary(tuple(symbols))


def evaluate_checkpoint(checkpoint: str | Path, corpus: str | Path, split: str = "valid",
                        T: int | None = None) -> float:
    """Bits per character of a saved text model on one split of ``corpus``."""
    params, extra, _ = load_checkpoint(checkpoint)
    vocab = checkpoint_vocabulary(extra)
    text = read_text(corpus)
    spec = SplitSpec(**extra.get("split", {}))
    fresh, parts = corpus_from_text(text, spec, str(corpus))
    if fresh.symbols != vocab.symbols:
        a, b = set(vocab.symbols), set(fresh.symbols)
        raise ConfigError(
            f"vocabulary mismatch: only in checkpoint {sorted(a - b)!r}, "
            f"only in corpus {sorted(b - a)!r}")
    ids = parts.get(split)
    loss = evaluate_stream(params.config, params, ids, T or int(extra.get("T", 200)))
    return loss / LN2
