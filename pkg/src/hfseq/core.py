"""Model configuration, flat parameter storage, seeded randomness and checkpoints.

Every architecture keeps its weights in one contiguous float64 vector. A layout
maps names to ``(rows, cols, offset)`` slices of that vector, so the optimizer
only ever sees flat vectors while the models work with matrix views.

Weight names use ASCII for the gate symbols: ``w`` is the input gate, ``f`` the
forget gate and ``r`` the output gate. ``W_wm`` is therefore the matrix feeding
the multiplicative state into the input gate. Stacked mRNN layers carry their
index in the name (``W_m2i``, ``W_h2m``, ``B_h2``, ...).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

ARCHITECTURES = ("rnn", "lstm", "mrnn", "stacked_mrnn", "mlstm")
OUTPUT_MODES = ("softmax_xent", "linear_mse")
MULTIPLICATIVE = ("mrnn", "stacked_mrnn", "mlstm")

CHECKPOINT_MAGIC = b"HFSEQ1\n"

# Fixed stream ids so unrelated consumers never share a generator.
STREAM_INIT = 0
STREAM_BATCH = 1
STREAM_CURVATURE = 2
STREAM_SAMPLE = 3
STREAM_DATA = 4


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DimensionError(ValueError):
    """Vector or matrix with the wrong size."""


class NumericError(ArithmeticError):
    """Non-finite value produced during a computation."""

    def __init__(self, message: str, timestep: int | None = None):
        super().__init__(message)
        self.timestep = timestep


@dataclass(frozen=True)
class ModelConfig:
    architecture: str
    vocab_size: int
    hidden_sizes: tuple[int, ...]
    factor_size: int | tuple[int, ...] | None = None
    output_mode: str = "softmax_xent"
    seed: int = 0
    input_size: int | None = None
    extra_biases: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if isinstance(self.factor_size, (list, tuple)):
            object.__setattr__(self, "factor_size", tuple(int(m) for m in self.factor_size))
        self.validate()

    def validate(self) -> None:
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(
                f"architecture: unknown value {self.architecture!r}; expected one of {ARCHITECTURES}")
        if self.output_mode not in OUTPUT_MODES:
            raise ConfigError(
                f"output_mode: unknown value {self.output_mode!r}; expected one of {OUTPUT_MODES}")
        if self.vocab_size < 1:
            raise ConfigError("vocab_size: must be positive")
        if self.input_size is not None and self.input_size < 1:
            raise ConfigError("input_size: must be positive")
        if not self.hidden_sizes or any(h < 1 for h in self.hidden_sizes):
            raise ConfigError("hidden_sizes: must be a non-empty list of positive integers")
        if self.architecture != "stacked_mrnn" and len(self.hidden_sizes) != 1:
            raise ConfigError(f"hidden_sizes: {self.architecture} takes exactly one hidden size")
        if self.architecture in MULTIPLICATIVE:
            if self.factor_size is None:
                raise ConfigError(f"factor_size: required for {self.architecture}")
            sizes = self.factor_sizes
            if len(sizes) != len(self.hidden_sizes) or any(m < 1 for m in sizes):
                raise ConfigError("factor_size: one positive size per layer required")
            if self.architecture == "mlstm" and sizes[0] != self.hidden_sizes[0]:
                raise ConfigError("factor_size: mlstm requires factor_size == hidden size")
        elif self.factor_size is not None:
            raise ConfigError(f"factor_size: not used by {self.architecture}")
        if self.extra_biases and self.architecture not in ("lstm", "mlstm"):
            raise ConfigError("extra_biases: only meaningful for lstm and mlstm")

    @property
    def n_inputs(self) -> int:
        return self.vocab_size if self.input_size is None else self.input_size

    @property
    def factor_sizes(self) -> tuple[int, ...]:
        if self.factor_size is None:
            return ()
        if isinstance(self.factor_size, tuple):
            return self.factor_size
        return (int(self.factor_size),) * len(self.hidden_sizes)

    def to_dict(self) -> dict:
        return {
            "architecture": self.architecture,
            "vocab_size": self.vocab_size,
            "hidden_sizes": list(self.hidden_sizes),
            "factor_size": list(self.factor_size) if isinstance(self.factor_size, tuple)
            else self.factor_size,
            "output_mode": self.output_mode,
            "seed": self.seed,
            "input_size": self.input_size,
            "extra_biases": self.extra_biases,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {"architecture", "vocab_size", "hidden_sizes", "factor_size",
                 "output_mode", "seed", "input_size", "extra_biases"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"model: unknown keys {sorted(unknown)}")
        d = dict(d)
        if "hidden_sizes" in d and isinstance(d["hidden_sizes"], int):
            d["hidden_sizes"] = [d["hidden_sizes"]]
        return cls(**d)


@dataclass(frozen=True)
class Slot:
    name: str
    rows: int
    cols: int
    offset: int

    @property
    def size(self) -> int:
        return self.rows * self.cols

    @property
    def is_bias(self) -> bool:
        return self.name.startswith("B_")


def build_layout(config: ModelConfig) -> tuple[Slot, ...]:
    """Ordered slot descriptors for ``config``; the order is part of the checkpoint format."""
    V, I = config.vocab_size, config.n_inputs
    shapes: list[tuple[str, int, int]] = []
    arch = config.architecture
    if arch == "rnn":
        h = config.hidden_sizes[0]
        shapes = [("W_hi", h, I), ("W_hh", h, h), ("W_oh", V, h), ("B_h", h, 1)]
    elif arch == "lstm":
        h = config.hidden_sizes[0]
        shapes = [("W_hi", h, I), ("W_wi", h, I), ("W_fi", h, I), ("W_ri", h, I),
                  ("W_hh", h, h), ("W_wh", h, h), ("W_fh", h, h), ("W_rh", h, h),
                  ("W_oh", V, h)]
    elif arch == "mrnn":
        h, m = config.hidden_sizes[0], config.factor_sizes[0]
        shapes = [("W_hi", h, I), ("W_mi", m, I), ("W_mh", m, h), ("W_hm", h, m),
                  ("W_oh", V, h), ("B_h", h, 1)]
    elif arch == "mlstm":
        h, m = config.hidden_sizes[0], config.factor_sizes[0]
        shapes = [("W_hi", h, I), ("W_wi", h, I), ("W_fi", h, I), ("W_ri", h, I),
                  ("W_hm", h, m), ("W_wm", h, m), ("W_fm", h, m), ("W_rm", h, m),
                  ("W_mi", m, I), ("W_mh", m, h), ("W_oh", V, h)]
    elif arch == "stacked_mrnn":
        prev = None
        for l, (h, m) in enumerate(zip(config.hidden_sizes, config.factor_sizes), start=1):
            shapes += [(f"W_m{l}i", m, I), (f"W_m{l}h", m, h), (f"W_h{l}i", h, I),
                       (f"W_h{l}m", h, m)]
            if prev is not None:
                shapes.append((f"W_h{l}h", h, prev))
            shapes += [(f"W_o{l}h", V, h), (f"B_h{l}", h, 1)]
            prev = h
    if config.extra_biases:
        h = config.hidden_sizes[0]
        shapes += [("B_in", h, 1), ("B_w", h, 1), ("B_f", h, 1), ("B_r", h, 1)]
    slots, offset = [], 0
    for name, rows, cols in shapes:
        slots.append(Slot(name, rows, cols, offset))
        offset += rows * cols
    return tuple(slots)


def parameter_count(config: ModelConfig) -> int:
    last = build_layout(config)[-1]
    return last.offset + last.size


@dataclass(frozen=True)
class ParameterSet:
    """Flat parameter vector plus named matrix views onto it.

    ``theta`` is made read-only; derive new sets with :func:`axpy_view` or
    :meth:`with_theta` instead of mutating.
    """

    config: ModelConfig
    theta: np.ndarray
    layout: tuple[Slot, ...] = field(default=())

    def __post_init__(self):
        layout = self.layout or build_layout(self.config)
        object.__setattr__(self, "layout", layout)
        theta = np.array(self.theta, dtype=np.float64, copy=True)
        total = layout[-1].offset + layout[-1].size
        if theta.shape != (total,):
            raise DimensionError(f"theta has shape {theta.shape}, layout needs ({total},)")
        theta.flags.writeable = False
        object.__setattr__(self, "theta", theta)

    @property
    def size(self) -> int:
        return self.theta.size

    def views(self) -> dict[str, np.ndarray]:
        return unflatten(self.theta, self.layout)

    def __getitem__(self, name: str) -> np.ndarray:
        for s in self.layout:
            if s.name == name:
                return self.theta[s.offset:s.offset + s.size].reshape(s.rows, s.cols)
        raise KeyError(name)

    def with_theta(self, theta: np.ndarray) -> "ParameterSet":
        return ParameterSet(self.config, theta, self.layout)


def unflatten(vec: np.ndarray, layout: Sequence[Slot]) -> dict[str, np.ndarray]:
    """Matrix views (no copies) of ``vec`` following ``layout``."""
    total = layout[-1].offset + layout[-1].size
    if vec.shape != (total,):
        raise DimensionError(f"vector has shape {vec.shape}, layout needs ({total},)")
    return {s.name: vec[s.offset:s.offset + s.size].reshape(s.rows, s.cols) for s in layout}


def flatten(mats: dict[str, np.ndarray], layout: Sequence[Slot]) -> np.ndarray:
    out = np.empty(layout[-1].offset + layout[-1].size)
    for s in layout:
        m = np.asarray(mats[s.name], dtype=np.float64)
        if m.shape != (s.rows, s.cols):
            raise DimensionError(f"{s.name}: shape {m.shape}, expected {(s.rows, s.cols)}")
        out[s.offset:s.offset + s.size] = m.ravel()
    return out


def make_rng(seed: int, stream: int = 0, *extra: int) -> np.random.Generator:
    """Generator keyed by ``(seed, stream, *extra)``.

    Distinct streams (and e.g. iteration numbers passed as ``extra``) give
    independent generators, so a resumed run can rebuild any of them.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed) & (2**64 - 1),
                                                                       int(stream), *map(int, extra)])))


@dataclass(frozen=True)
class InitScheme:
    kind: str = "dense"
    std: float = 0.1
    p_zero: float = 0.9
    recurrent_std: float = 0.1
    forget_bias: float = 0.0

    @classmethod
    def dense(cls, std: float, forget_bias: float = 0.0) -> "InitScheme":
        return cls("dense", std=std, forget_bias=forget_bias)

    @classmethod
    def sparse_recurrent(cls, p_zero: float = 0.9, std: float = 0.1,
                         recurrent_std: float = 0.1) -> "InitScheme":
        return cls("sparse_recurrent", std=std, p_zero=p_zero, recurrent_std=recurrent_std)


def init_params(config: ModelConfig, scheme: InitScheme | None = None,
                rng: np.random.Generator | None = None) -> ParameterSet:
    """Random initial parameters; biases start at zero.

    ``sparse_recurrent`` zeroes each entry of ``W_hh`` with probability
    ``p_zero`` and draws the survivors from N(0, recurrent_std^2); everything
    else is dense N(0, std^2). ``forget_bias`` fills ``B_f`` when the model
    has gate biases, which lengthens the initial memory of the cell.
    """
    scheme = scheme or InitScheme()
    if scheme.kind not in ("dense", "sparse_recurrent"):
        raise ConfigError(f"init scheme: unknown kind {scheme.kind!r}")
    if rng is None:
        rng = make_rng(config.seed, STREAM_INIT)
    layout = build_layout(config)
    if scheme.kind == "sparse_recurrent" and not any(s.name == "W_hh" for s in layout):
        raise ConfigError(f"init scheme: sparse_recurrent needs W_hh, absent in {config.architecture}")
    theta = np.zeros(layout[-1].offset + layout[-1].size)
    for s in layout:
        block = theta[s.offset:s.offset + s.size]
        if s.is_bias:
            if s.name == "B_f":
                block[:] = scheme.forget_bias
            continue
        if scheme.kind == "sparse_recurrent" and s.name == "W_hh":
            keep = rng.random(s.size) >= scheme.p_zero
            block[:] = np.where(keep, rng.standard_normal(s.size) * scheme.recurrent_std, 0.0)
        else:
            block[:] = rng.standard_normal(s.size) * scheme.std
    return ParameterSet(config, theta, layout)


def axpy_view(params: ParameterSet, direction: np.ndarray, scale: float = 1.0) -> ParameterSet:
    """``theta + scale * direction`` as a new parameter set."""
    direction = np.asarray(direction, dtype=np.float64)
    if direction.shape != params.theta.shape:
        raise DimensionError(
            f"direction has shape {direction.shape}, theta has {params.theta.shape}")
    return params.with_theta(params.theta + scale * direction)


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(path: str | Path, params: ParameterSet,
                    extra: dict | None = None,
                    vectors: dict[str, np.ndarray] | None = None) -> None:
    """Write magic, a one-line JSON header, then little-endian float64 blocks.

    The first block is ``theta``; ``vectors`` (e.g. a CG warm start) follow in
    the order listed under ``"vectors"`` in the header.
    """
    vectors = vectors or {}
    cfg = params.config
    header = {
        "architecture": cfg.architecture,
        "vocab_size": cfg.vocab_size,
        "hidden_sizes": list(cfg.hidden_sizes),
        "factor_size": list(cfg.factor_size) if isinstance(cfg.factor_size, tuple) else cfg.factor_size,
        "output_mode": cfg.output_mode,
        "parameter_count": params.size,
        "seed": cfg.seed,
        "input_size": cfg.input_size,
        "extra_biases": cfg.extra_biases,
        "vectors": [[k, int(np.asarray(v).size)] for k, v in vectors.items()],
        "extra": extra or {},
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(params.theta.astype("<f8").tobytes())
        for v in vectors.values():
            fh.write(np.asarray(v, dtype=np.float64).astype("<f8").tobytes())
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[ParameterSet, dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ConfigError(f"{path}: not a checkpoint (bad magic {magic!r})")
        header = json.loads(fh.readline().decode("utf-8"))
        config = ModelConfig(
            architecture=header["architecture"],
            vocab_size=header["vocab_size"],
            hidden_sizes=tuple(header["hidden_sizes"]),
            factor_size=tuple(header["factor_size"]) if isinstance(header["factor_size"], list)
            else header["factor_size"],
            output_mode=header["output_mode"],
            seed=header["seed"],
            input_size=header.get("input_size"),
            extra_biases=header.get("extra_biases", False),
        )
        count = header["parameter_count"]
        if count != parameter_count(config):
            raise ConfigError(f"{path}: header count {count} does not match layout")
        theta = np.frombuffer(_read_exact(fh, 8 * count), dtype="<f8").astype(np.float64)
        vectors = {}
        for name, size in header.get("vectors", []):
            vectors[name] = np.frombuffer(_read_exact(fh, 8 * size), dtype="<f8").astype(np.float64)
    return ParameterSet(config, theta), header.get("extra", {}), vectors


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise ConfigError("checkpoint truncated")
    return data


def layout_table(layout: Iterable[Slot]) -> str:
    return "\n".join(f"{s.name}\t{s.rows}x{s.cols}\t@{s.offset}" for s in layout)


__all__ = [
    "ARCHITECTURES", "OUTPUT_MODES", "ConfigError", "DimensionError", "NumericError",
    "ModelConfig", "Slot", "ParameterSet", "InitScheme", "build_layout", "parameter_count",
    "unflatten", "flatten", "make_rng", "init_params", "axpy_view", "save_checkpoint",
    "load_checkpoint", "layout_table", "MULTIPLICATIVE", "CHECKPOINT_MAGIC", "STREAM_INIT",
    "STREAM_BATCH", "STREAM_CURVATURE", "STREAM_SAMPLE", "STREAM_DATA",
]
