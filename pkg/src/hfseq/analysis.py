"""Sampling text from a trained model and the bracket time-lag probe."""

from __future__ import annotations

import logging
import math
import string
from dataclasses import dataclass

import numpy as np

from .core import ConfigError, ModelConfig, ParameterSet
from .data import Vocabulary
from .models import log_softmax
from .models.cells import make_cell

log = logging.getLogger(__name__)

ALPHABETIC = frozenset(string.ascii_letters + " ")


@dataclass(frozen=True)
class SampleRun:
    context: str
    length: int
    text: str
    constraints: frozenset | None = None
    distributions: np.ndarray | None = None


@dataclass(frozen=True)
class TimelagResult:
    """Raw per-trial log10 ratios and their block-smoothed means.

    ``raw_*`` has shape ``(trials, steps)``; ``exp_mean``/``ctrl_mean`` are the
    cross-trial means of the series smoothed over blocks of ``block`` steps.
    """

    raw_exp: np.ndarray
    raw_ctrl: np.ndarray
    block: int = 10

    @property
    def trials(self) -> int:
        return self.raw_exp.shape[0]

    @staticmethod
    def smooth(raw: np.ndarray, block: int) -> np.ndarray:
        t, n = raw.shape
        return raw.reshape(t, n // block, block).mean(axis=2)

    @property
    def exp_mean(self) -> np.ndarray:
        return self.smooth(self.raw_exp, self.block).mean(axis=0)

    @property
    def ctrl_mean(self) -> np.ndarray:
        return self.smooth(self.raw_ctrl, self.block).mean(axis=0)

    def to_tsv(self) -> str:
        lines = ["block\texp_mean\tctrl_mean"]
        lines += [f"{i}\t{float(e)!r}\t{float(c)!r}" for i, (e, c) in enumerate(zip(self.exp_mean, self.ctrl_mean))]
        return "\n".join(lines) + "\n"


class _Stepper:
    """Feeds one symbol per chain per step, carrying the recurrent state."""

    def __init__(self, config: ModelConfig, params: ParameterSet, chains: int):
        if config.output_mode != "softmax_xent":
            raise ConfigError("output_mode: sampling needs a softmax model")
        self.cell = make_cell(config)
        self.p = params.views()
        self.state = self.cell.zero_state(chains)

    def __call__(self, ids: np.ndarray) -> np.ndarray:
        _, self.state, z = self.cell.step(self.p, ids, self.state)
        return z


def _encode_context(vocab: Vocabulary, context: str) -> np.ndarray:
    if not context:
        raise ConfigError("context: must contain at least one symbol")
    missing = sorted({c for c in context if c not in vocab})
    if missing:
        log.warning("context symbols %r not in vocabulary, using UNK", missing)
    return vocab.encode(context)


def _allowed_mask(vocab: Vocabulary, constraints) -> np.ndarray | None:
    if constraints is None:
        return None
    mask = np.zeros(vocab.size, dtype=bool)
    for c in constraints:
        if c in vocab:
            mask[vocab.id(c)] = True
    if not mask.any():
        raise ConfigError("constraints: no allowed symbol is in the vocabulary")
    return mask


def _draw(logp: np.ndarray, allowed: np.ndarray | None, rngs) -> np.ndarray:
    """One categorical draw per chain, renormalized over ``allowed`` symbols."""
    if allowed is not None:
        logp = np.where(allowed, logp, -np.inf)
    p = np.exp(logp - logp.max(axis=1, keepdims=True))
    cdf = np.cumsum(p, axis=1)
    u = np.array([g.random() for g in rngs]) * cdf[:, -1]
    out = (cdf <= u[:, None]).sum(axis=1)
    return np.minimum(out, p.shape[1] - 1)


def _run_chains(config, params, vocab, context, steps, rngs, allowed, record):
    """Run ``len(rngs)`` independent samplers and apply ``record`` to each step's log-probs."""
    step = _Stepper(config, params, len(rngs))
    z = None
    for c in _encode_context(vocab, context):
        z = step(np.full(len(rngs), c))
    emitted = np.empty((steps, len(rngs)), dtype=np.int64)
    for t in range(steps):
        logp = log_softmax(z)
        record(t, z, logp)
        emitted[t] = _draw(logp, allowed, rngs)
        if t + 1 < steps:
            z = step(emitted[t])
    return emitted


def sample(config: ModelConfig, params: ParameterSet, vocab: Vocabulary, context: str,
           length: int, rng: np.random.Generator, constraints=None,
           keep_distributions: bool = False) -> SampleRun:
    """Continue ``context`` for ``length`` symbols drawn from the model.

    With ``constraints`` only those symbols are emitted (the distribution is
    renormalized over them), while retained distributions stay over the full
    vocabulary.
    """
    if length < 0:
        raise ConfigError("length: must be non-negative")
    allowed = _allowed_mask(vocab, constraints)
    cons = None if constraints is None else frozenset(constraints)
    if length == 0:
        return SampleRun(context, 0, "", cons, np.empty((0, vocab.size)) if keep_distributions else None)
    dists = np.empty((length, vocab.size)) if keep_distributions else None

    def record(t, z, logp):
        if dists is not None:
            dists[t] = np.exp(logp[0])

    ids = _run_chains(config, params, vocab, context, length, [rng], allowed, record)
    return SampleRun(context, length, vocab.decode(ids[:, 0]), cons, dists)


def log10_ratio(z: np.ndarray, hi: int, lo: int) -> np.ndarray:
    """``log10 P(hi) - log10 P(lo)`` from logits; the normalizer cancels."""
    return (z[..., hi] - z[..., lo]) / math.log(10.0)


def timelag_probe(config: ModelConfig, params: ParameterSet, vocab: Vocabulary,
                  rng: np.random.Generator, exp_context: str = "[[", ctrl_context: str = "Th",
                  steps: int = 1000, trials: int = 10, constraints=ALPHABETIC,
                  block: int = 10) -> TimelagResult:
    """Track ``log10 P(']')/P('[')`` while sampling after each context.

    Each trial samples ``steps`` symbols restricted to ``constraints`` and
    records the ratio from the unrestricted prediction at every step.
    """
    for c in "[]":
        if c not in vocab:
            raise ConfigError(f"vocabulary: probe needs {c!r}")
    if steps < block or steps % block:
        raise ConfigError(f"steps: must be a positive multiple of {block}")
    if trials < 1:
        raise ConfigError("trials: must be positive")
    close, open_ = vocab.id("]"), vocab.id("[")
    allowed = _allowed_mask(vocab, constraints)
    children = rng.spawn(2 * trials)
    raws = []
    for k, ctx in enumerate((exp_context, ctrl_context)):
        raw = np.empty((trials, steps))

        def record(t, z, logp):
            raw[:, t] = log10_ratio(z, close, open_)

        _run_chains(config, params, vocab, ctx, steps, children[k * trials:(k + 1) * trials],
                    allowed, record)
        raws.append(raw)
    return TimelagResult(raws[0], raws[1], block)
