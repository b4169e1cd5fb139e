"""Character corpora, batching and synthetic benchmark tasks.

Text is handled as Unicode code points. Symbols never seen in the training
split, and bytes that fail to decode, share a single UNK id.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .core import ConfigError
from .models import Batch

log = logging.getLogger(__name__)

UNK_CHAR = "�"


@dataclass(frozen=True)
class Vocabulary:
    """Sorted distinct symbols plus a final UNK id."""

    symbols: tuple[str, ...]

    def __post_init__(self):
        if list(self.symbols) != sorted(set(self.symbols)):
            raise ValueError("symbols must be distinct and sorted by code point")
        if UNK_CHAR in self.symbols:
            raise ValueError("the UNK character cannot be an ordinary symbol")
        object.__setattr__(self, "_index", {s: i for i, s in enumerate(self.symbols)})

    @classmethod
    def from_text(cls, text: str) -> "Vocabulary":
        return cls(tuple(sorted(set(text) - {UNK_CHAR})))

    @property
    def size(self) -> int:
        return len(self.symbols) + 1

    @property
    def unk_id(self) -> int:
        return len(self.symbols)

    def __contains__(self, symbol: str) -> bool:
        return symbol in self._index

    def id(self, symbol: str) -> int:
        return self._index.get(symbol, self.unk_id)

    def encode(self, text: str) -> np.ndarray:
        index, unk = self._index, self.unk_id
        return np.fromiter((index.get(c, unk) for c in text), dtype=np.int64, count=len(text))

    def decode(self, ids) -> str:
        syms = self.symbols
        return "".join(syms[i] if i < len(syms) else UNK_CHAR for i in np.asarray(ids).ravel())

    def to_list(self) -> list[str]:
        return list(self.symbols)


@dataclass(frozen=True)
class SplitSpec:
    """Split sizes, in characters when ``>= 1`` and as fractions of the file otherwise."""

    train: float = 2_800_000
    valid: float = 200_000
    test: float = 200_000

    def lengths(self, total: int) -> tuple[int, int, int]:
        sizes = [self.train, self.valid, self.test]
        if any(s < 0 for s in sizes):
            raise ConfigError("split: sizes must be non-negative")
        fractional = [s for s in sizes if 0 < s < 1]
        if fractional and sum(fractional) > 1 + 1e-12:
            raise ConfigError("split: fractions sum to more than 1")
        out, used = [], 0
        for s in sizes:
            n = int(s * total) if 0 < s < 1 else int(s)
            n = max(0, min(n, total - used))
            out.append(n)
            used += n
        return tuple(out)


@dataclass(frozen=True)
class CorpusSplit:
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    source: str = ""
    byte_ranges: tuple = ()

    def get(self, name: str) -> np.ndarray:
        if name not in ("train", "valid", "test"):
            raise ConfigError(f"split: unknown split {name!r}")
        return getattr(self, name)


def read_text(path: str | Path) -> str:
    """Decode UTF-8, replacing undecodable bytes with the UNK character."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ConfigError(f"corpus: cannot read {path}: {exc}") from exc
    return raw.decode("utf-8", errors="replace")


def corpus_from_text(text: str, spec: SplitSpec | None = None, source: str = "",
                     vocab: Vocabulary | None = None) -> tuple[Vocabulary, CorpusSplit]:
    """Cut ``text`` into ordered train/valid/test pieces and encode them.

    The vocabulary comes from the training piece unless one is supplied.
    """
    spec = spec or SplitSpec()
    n_train, n_valid, n_test = spec.lengths(len(text))
    if n_train == 0:
        raise ConfigError("split: training split is empty")
    bounds = np.cumsum([0, n_train, n_valid, n_test])
    pieces = [text[bounds[i]:bounds[i + 1]] for i in range(3)]
    vocab = vocab or Vocabulary.from_text(pieces[0])
    offsets = [len(text[:b].encode("utf-8")) for b in bounds]
    ranges = tuple((offsets[i], offsets[i + 1]) for i in range(3))
    split = CorpusSplit(*(vocab.encode(p) for p in pieces), source=source, byte_ranges=ranges)
    return vocab, split


def load_corpus(path: str | Path, spec: SplitSpec | None = None,
                vocab: Vocabulary | None = None) -> tuple[Vocabulary, CorpusSplit]:
    text = read_text(path)
    vocab, split = corpus_from_text(text, spec, str(path), vocab)
    log.info("corpus %s: V=%d, train/valid/test = %d/%d/%d chars", path, vocab.size,
             split.train.size, split.valid.size, split.test.size)
    return vocab, split


def unigram_entropy(ids: np.ndarray, V: int) -> float:
    """Order-0 entropy in bits of the empirical symbol distribution of ``ids``."""
    counts = np.bincount(np.asarray(ids), minlength=V).astype(float)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log2(p)).sum())


# -- batching ---------------------------------------------------------------------

def window_starts(length: int, T: int, stride: int | None = None) -> np.ndarray:
    """Start offsets of the windows of ``T + 1`` characters that fit in ``length``."""
    if T < 2:
        raise ConfigError("T: must be at least 2")
    stride = T if stride is None else int(stride)
    if stride < 1:
        raise ConfigError("stride: must be positive")
    if T + 1 > length:
        raise ConfigError(f"T: window of {T + 1} characters exceeds split length {length}")
    return np.arange(0, length - T, stride)


def windows_to_batch(ids: np.ndarray, starts, T: int) -> Batch:
    idx = np.asarray(starts)[None, :] + np.arange(T + 1)[:, None]
    seqs = ids[idx]
    return Batch(seqs[:-1], seqs[1:])


def select_windows(n_windows: int, budget: float | None, rng: np.random.Generator,
                   T: int | None = None) -> np.ndarray:
    """Indices of a seeded random subset of windows, in increasing order.

    ``budget`` below 1 is a fraction of the windows; otherwise it is a number
    of characters, converted to ``budget // T`` windows.
    """
    if budget is None:
        return np.arange(n_windows)
    if budget <= 0:
        raise ConfigError("budget: must be positive")
    if budget < 1:
        count = int(n_windows * budget)
    else:
        if T is None:
            raise ConfigError("budget: a character budget needs T")
        count = int(budget) // T
    count = max(1, min(count, n_windows))
    return np.sort(rng.choice(n_windows, size=count, replace=False))


def make_batches(ids: np.ndarray, T: int, n: int, rng: np.random.Generator | None = None,
                 strategy: str = "all", budget: float | None = None,
                 stride: int | None = None) -> Iterator[Batch]:
    """Yield batches of up to ``n`` windows.

    ``strategy="all"`` walks every window in order; ``"budget"`` draws a seeded
    random subset sized by ``budget`` (see :func:`select_windows`).
    """
    starts = window_starts(len(ids), T, stride)
    if strategy == "all":
        chosen = starts
    elif strategy == "budget":
        if rng is None:
            raise ConfigError("strategy: 'budget' needs an rng")
        chosen = starts[select_windows(len(starts), budget, rng, T)]
    else:
        raise ConfigError(f"strategy: unknown value {strategy!r}")
    if n < 1:
        raise ConfigError("n: must be positive")
    for i in range(0, len(chosen), n):
        yield windows_to_batch(ids, chosen[i:i + n], T)


def curvature_subset(batch: Batch, size: float, rng: np.random.Generator) -> Batch:
    """Random subset of the sequences in ``batch`` (fraction if ``size < 1``)."""
    count = int(batch.n * size) if size < 1 else int(size)
    count = max(1, min(count, batch.n))
    if count == batch.n:
        return batch
    return batch.subset(np.sort(rng.choice(batch.n, size=count, replace=False)))


# -- synthetic tasks ---------------------------------------------------------------

SYNTHETIC_KINDS = ("periodic_text", "bracket_language", "marked_addition")

FILLER_WORDS = (
    "The", "This", "the", "this", "that", "there", "then", "they", "them", "these",
    "history", "house", "hand", "high", "home", "human", "where", "which", "while",
    "river", "city", "world", "water", "paper", "north", "south", "small", "great",
    "early", "later", "known", "named", "found", "built", "about", "after", "before",
    "under", "over", "into", "from", "with", "and", "of", "in", "on", "is", "was", "a",
)
BRACKET_ALPHABET = "".join(sorted(set("".join(FILLER_WORDS)) | set(" .[]")))


@dataclass(frozen=True)
class SyntheticTask:
    kind: str
    T: int
    period: str = "abcdefgh"
    random_phase: bool = False
    span: int = 100
    open_prob: float = 0.05

    def __post_init__(self):
        if self.kind not in SYNTHETIC_KINDS:
            raise ConfigError(f"task: unknown kind {self.kind!r}; expected one of {SYNTHETIC_KINDS}")
        if self.T < 2:
            raise ConfigError("task: T must be at least 2")
        if self.kind == "periodic_text" and not self.period:
            raise ConfigError("task: period must be non-empty")
        if self.kind == "bracket_language" and (self.span < 4 or not 0 < self.open_prob <= 1):
            raise ConfigError("task: span must be >= 4 and open_prob in (0, 1]")

    def vocabulary(self) -> Vocabulary | None:
        if self.kind == "periodic_text":
            return Vocabulary.from_text(self.period)
        if self.kind == "bracket_language":
            return Vocabulary.from_text(BRACKET_ALPHABET)
        return None


def periodic_text(period: str, length: int, phase: int = 0) -> str:
    reps = (length + phase) // len(period) + 1
    return (period * reps)[phase:phase + length]


def _words(rng: np.random.Generator, n_chars: int) -> str:
    out, size = [], 0
    while size < n_chars:
        w = FILLER_WORDS[rng.integers(len(FILLER_WORDS))]
        out.append(w)
        size += len(w) + 1
    return " ".join(out)


def bracket_text(length: int, rng: np.random.Generator, span: int = 100,
                 open_prob: float = 0.05) -> str:
    """Filler text in which every ``[[`` is closed by ``]]`` within ``span`` characters.

    Brackets never nest: a new ``[[`` can only open after the previous one is
    closed. The closing distance is uniform over the span.
    """
    parts, size = [], 0
    while size <= length:
        if rng.random() < open_prob:
            inner = _words(rng, int(rng.integers(1, span - 3)))[:span - 4].strip() or "a"
            piece = "[[" + inner + "]]"
        else:
            piece = FILLER_WORDS[rng.integers(len(FILLER_WORDS))]
            if rng.random() < 0.1:
                piece += "."
        parts.append(piece)
        size += len(piece) + 1
    return " ".join(parts)[:length]


def open_close_spans(text: str, allow_open_tail: bool = False) -> list[tuple[int, int]]:
    """Positions of each ``[[`` and its matching ``]]``.

    Raises on nesting, and on an unclosed ``[[`` unless ``allow_open_tail``
    (a window cut from a longer stream may end inside a bracket).
    """
    spans, i, n = [], 0, len(text)
    while True:
        a = text.find("[[", i)
        if a < 0:
            return spans
        b = text.find("]]", a + 2)
        nxt = text.find("[[", a + 2)
        if b < 0:
            if allow_open_tail and nxt < 0:
                return spans
            raise ValueError(f"unclosed '[[' at {a}")
        if 0 <= nxt < b:
            raise ValueError(f"'[[' at {nxt} opens before '[[' at {a} closes")
        spans.append((a, b))
        i = b + 2


def marked_addition(T: int, n: int, rng: np.random.Generator) -> Batch:
    """Two input channels: a uniform value and a 0/1 marker; only the last step is scored."""
    values = rng.random((T, n))
    markers = np.zeros((T, n))
    for j in range(n):
        markers[rng.choice(T, size=2, replace=False), j] = 1.0
    inputs = np.stack([values, markers], axis=2)
    targets = np.zeros((T, n, 1))
    targets[-1, :, 0] = (values * markers).sum(axis=0)
    mask = np.zeros((T, n))
    mask[-1] = 1.0
    return Batch(inputs, targets, mask)


def gen_synthetic(task: SyntheticTask, n: int, rng: np.random.Generator) -> Batch:
    """Draw ``n`` sequences of length ``task.T`` as a batch."""
    if n < 1:
        raise ConfigError("n: must be positive")
    if task.kind == "marked_addition":
        return marked_addition(task.T, n, rng)
    vocab = task.vocabulary()
    if task.kind == "periodic_text":
        p = len(task.period)
        phases = rng.integers(p, size=n) if task.random_phase else np.zeros(n, dtype=int)
        texts = [periodic_text(task.period, task.T + 1, int(ph)) for ph in phases]
    else:
        texts = [bracket_text(task.T + 1, rng, task.span, task.open_prob) for _ in range(n)]
    seqs = np.stack([vocab.encode(t) for t in texts], axis=1)
    return Batch(seqs[:-1], seqs[1:])
