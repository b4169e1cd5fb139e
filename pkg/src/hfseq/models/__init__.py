"""Forward, backward (BPTT) and R-operator passes plus curvature-vector products.

All losses, gradients and curvature products are means over the weighted
``(timestep, sequence)`` terms of a batch (``T * n`` of them without a mask),
so damping constants do not depend on batch size.

For softmax outputs the Gauss-Newton products use the Jacobian of the logits
together with the softmax/cross-entropy Hessian ``diag(O) - O O^T``; for
linear outputs with squared error that Hessian is the identity.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..core import (DimensionError, ModelConfig, NumericError, ParameterSet, build_layout,
                    flatten, unflatten)
from .batch import Batch
from .cells import make_cell

LN2 = math.log(2.0)


# -- output layer -------------------------------------------------------------

def log_softmax(z: np.ndarray) -> np.ndarray:
    zmax = z.max(axis=-1, keepdims=True)
    shifted = z - zmax
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _step_loss(z, target, mask, mode) -> float:
    if mode == "softmax_xent":
        lp = log_softmax(z)
        per = -lp[np.arange(z.shape[0]), target]
    else:
        diff = z - target
        per = 0.5 * (diff * diff).sum(axis=-1)
    if mask is not None:
        per = per * mask
    return float(per.sum())


def _output_grad(z, target, mask, mode):
    """dE/dz for one timestep (unnormalized)."""
    if mode == "softmax_xent":
        d = softmax(z)
        d[np.arange(z.shape[0]), target] -= 1.0
    else:
        d = z - target
    if mask is not None:
        d = d * mask[:, None]
    return d


def hsigma_multiply(O_t: np.ndarray, r: np.ndarray, mode: str = "softmax_xent") -> np.ndarray:
    """Loss Hessian (w.r.t. logits) times ``r``, without forming the matrix.

    Softmax/cross-entropy: ``O * r - O * (O . r)``; squared error: ``r``.
    Works on a single column or on stacked rows (last axis is the output).
    """
    if mode == "linear_mse":
        return np.array(r, dtype=np.float64, copy=True)
    return O_t * r - O_t * (O_t * r).sum(axis=-1, keepdims=True)


# -- forward ---------------------------------------------------------------------

@dataclass
class ActivationCache:
    """Per-timestep activations of one forward pass.

    With full storage ``steps[t]`` holds the cell cache of step ``t`` and
    ``states[t]`` the recurrent state entering it. With checkpointing only
    ``boundaries`` (states entering every ``k``-th step) are kept.
    """

    config: ModelConfig
    logits: np.ndarray
    steps: list | None
    states: list | None
    boundaries: dict | None
    final_state: tuple
    loss_sum: float
    weight: float
    checkpoint_interval: int = 0

    @property
    def outputs(self) -> np.ndarray:
        if self.config.output_mode == "softmax_xent":
            return softmax(self.logits)
        return self.logits

    @property
    def mean_loss(self) -> float:
        return self.loss_sum / self.weight

    def damped_states(self, cell) -> np.ndarray:
        if self.steps is None:
            raise ValueError("damped states need a full-storage forward pass")
        return np.stack([cell.damped(c) for c in self.steps])

    def __getitem__(self, key: str) -> np.ndarray:
        """Stack a per-step quantity over time, e.g. ``cache["H"]`` -> ``(T, n, h)``."""
        if self.steps is None:
            raise ValueError("per-step quantities need a full-storage forward pass")
        return np.stack([c[key] for c in self.steps])


def _check_finite(arrays, t):
    for a in arrays:
        if not np.isfinite(a).all():
            raise NumericError(f"non-finite activation at timestep {t}", timestep=t)


def _forward_pass(cell, p, batch: Batch, config: ModelConfig, initial_state=None,
                  checkpoint_interval: int = 0) -> ActivationCache:
    T, n = batch.T, batch.n
    mode = config.output_mode
    state = initial_state if initial_state is not None else cell.zero_state(n)
    k = checkpoint_interval
    steps, states, boundaries = ([], [], None) if k <= 0 else (None, None, {})
    logits = np.empty((T, n, config.vocab_size))
    loss = 0.0
    mask = batch.mask
    for t in range(T):
        if k <= 0:
            states.append(state)
        elif t % k == 0:
            boundaries[t] = state
        c, state, z = cell.step(p, batch.inputs[t], state)
        _check_finite((z, *state), t)
        if k <= 0:
            steps.append(c)
        logits[t] = z
        loss += _step_loss(z, batch.targets[t], None if mask is None else mask[t], mode)
    return ActivationCache(config, logits, steps, states, boundaries, state, loss,
                           batch.weight, max(k, 0))


def _check_inputs(config: ModelConfig, params: ParameterSet, batch: Batch):
    if params.layout != build_layout(config):
        raise DimensionError("parameter layout does not match config")
    if batch.symbolic:
        if batch.inputs.size and (batch.inputs.max() >= config.n_inputs or batch.inputs.min() < 0):
            raise DimensionError("input symbol id out of range")
    elif batch.inputs.shape[2] != config.n_inputs:
        raise DimensionError(f"input width {batch.inputs.shape[2]} != {config.n_inputs}")
    if config.output_mode == "softmax_xent":
        if batch.targets.ndim != 2:
            raise DimensionError("softmax mode needs integer target ids")
        if batch.targets.size and batch.targets.max() >= config.vocab_size:
            raise DimensionError("target symbol id out of range")
    elif batch.targets.shape[2:] != (config.vocab_size,):
        raise DimensionError("linear mode needs (T, n, V) real targets")


def forward(config: ModelConfig, params: ParameterSet, batch: Batch, *,
            checkpoint_interval: int | None = None, initial_state=None,
            damp_target: str = "output"):
    """Run the network over ``batch``.

    Returns ``(cache, mean_loss, bits_per_char)``; bits/char is ``nan`` for
    linear outputs.
    """
    _check_inputs(config, params, batch)
    cell = make_cell(config, damp_target)
    cache = _forward_pass(cell, params.views(), batch, config, initial_state,
                          checkpoint_interval or 0)
    loss = cache.mean_loss
    bpc = loss / LN2 if config.output_mode == "softmax_xent" else float("nan")
    return cache, loss, bpc


def mean_loss(config: ModelConfig, params: ParameterSet, batch: Batch, workers: int = 1) -> float:
    """Mean loss only (no cache kept beyond each shard)."""
    _check_inputs(config, params, batch)
    cell = make_cell(config)
    p = params.views()
    sums = _map_shards(lambda b: _forward_pass(cell, p, b, config, None, b.T).loss_sum,
                       batch, workers)
    return sum(sums) / batch.weight


# -- backward ------------------------------------------------------------------

def _backward_full(cell, p, batch, cache, dz_scale, inject, g, with_outputs=True):
    """BPTT over a full-storage cache.

    ``dz_scale`` multiplies the loss derivative; ``inject`` is a ``(T, n, D)``
    array added at the damped quantity or None. With ``with_outputs=False``
    the loss derivative is skipped entirely.
    """
    mode = cache.config.output_mode
    carry = tuple(np.zeros_like(s) for s in cache.states[0])
    for t in range(batch.T - 1, -1, -1):
        dz = None
        if with_outputs:
            dz = _output_grad(cache.logits[t], batch.targets[t],
                              None if batch.mask is None else batch.mask[t], mode)
            if dz_scale != 1.0:
                dz = dz * dz_scale
        carry = cell.back_step(p, batch.inputs[t], cache.steps[t], cache.states[t], carry, dz,
                               None if inject is None else inject[t], g)


def _backward_checkpointed(cell, p, batch, cache, g, stats=None):
    mode = cache.config.output_mode
    k = cache.checkpoint_interval
    T = batch.T
    starts = sorted(cache.boundaries)
    carry = tuple(np.zeros_like(s) for s in cache.boundaries[0])
    peak = 0
    for s0 in reversed(starts):
        s1 = min(s0 + k, T)
        state = cache.boundaries[s0]
        seg_states, seg_steps = [], []
        for t in range(s0, s1):
            seg_states.append(state)
            c, state, _ = cell.step(p, batch.inputs[t], state)
            seg_steps.append(c)
        peak = max(peak, len(cache.boundaries) + len(seg_states))
        for i in range(s1 - s0 - 1, -1, -1):
            t = s0 + i
            dz = _output_grad(cache.logits[t], batch.targets[t],
                              None if batch.mask is None else batch.mask[t], mode)
            carry = cell.back_step(p, batch.inputs[t], seg_steps[i], seg_states[i], carry, dz,
                                   None, g)
        del seg_states, seg_steps
    if stats is not None:
        stats["peak_states"] = peak
        stats["boundaries"] = len(cache.boundaries)


def _map_shards(fn, batch: Batch, workers: int):
    shards = batch.shards(workers) if workers > 1 else [batch]
    if len(shards) == 1:
        return [fn(shards[0])]
    with ThreadPoolExecutor(max_workers=len(shards)) as pool:
        return list(pool.map(fn, shards))


def gradient(config: ModelConfig, params: ParameterSet, batch: Batch, *,
             checkpoint_interval: int | None = None, workers: int = 1,
             stats: dict | None = None):
    """Mean-loss gradient by backpropagation through time.

    Returns ``(grad, mean_loss)``. ``checkpoint_interval=k`` keeps only every
    k-th recurrent state and recomputes segments during the backward pass.
    Shard results are summed in shard order, so a fixed ``workers`` value is
    deterministic.
    """
    _check_inputs(config, params, batch)
    cell = make_cell(config)
    p = params.views()
    k = checkpoint_interval or 0
    if k < 0 or k > batch.T:
        raise ValueError(f"checkpoint_interval must be in [1, T], got {k}")

    def run(b):
        g, gv = _zeros(params)
        cache = _forward_pass(cell, p, b, config, None, k)
        if k > 0:
            _backward_checkpointed(cell, p, b, cache, gv, stats)
        else:
            _backward_full(cell, p, b, cache, 1.0, None, gv)
        return g, cache.loss_sum

    results = _map_shards(run, batch, workers)
    g = results[0][0]
    loss = results[0][1]
    for gi, li in results[1:]:
        g = g + gi
        loss += li
    w = batch.weight
    return g / w, loss / w


def checkpointed_backward(config: ModelConfig, params: ParameterSet, batch: Batch,
                          k: int | None = None, stats: dict | None = None) -> np.ndarray:
    """Gradient with sqrt(T) checkpointing (``k`` defaults to ceil(sqrt(T)))."""
    if k is None:
        k = max(1, math.ceil(math.sqrt(batch.T)))
    if not 1 <= k <= batch.T:
        raise ValueError(f"k must be in [1, T], got {k}")
    g, _ = gradient(config, params, batch, checkpoint_interval=k, stats=stats)
    return g


def _zeros(params):
    g = np.zeros_like(params.theta)
    return g, unflatten(g, params.layout)


# -- curvature ---------------------------------------------------------------------

@dataclass
class CurvatureContext:
    """Everything needed to apply ``v -> (G + mu G_s + lam I) v`` on one batch."""

    config: ModelConfig
    params: ParameterSet
    batch: Batch
    mu: float = 0.0
    lam: float = 0.0
    workers: int = 1
    damp_target: str = "output"
    shards: list = field(default_factory=list)

    def __post_init__(self):
        if not (np.isfinite(self.mu) and np.isfinite(self.lam)) or self.mu < 0 or self.lam < 0:
            raise ValueError(f"mu and lam must be finite and non-negative (mu={self.mu}, lam={self.lam})")

    @property
    def cell(self):
        return make_cell(self.config, self.damp_target)


def make_context(config: ModelConfig, params: ParameterSet, batch: Batch, mu: float = 0.0,
                 lam: float = 0.0, workers: int = 1, damp_target: str = "output") -> CurvatureContext:
    _check_inputs(config, params, batch)
    ctx = CurvatureContext(config, params, batch, mu, lam, workers, damp_target)
    cell = ctx.cell
    p = params.views()
    parts = batch.shards(workers) if workers > 1 else [batch]
    ctx.shards = [(b, _forward_pass(cell, p, b, config)) for b in parts]
    return ctx


def with_damping(ctx: CurvatureContext, mu: float | None = None,
                 lam: float | None = None) -> CurvatureContext:
    """Same cached forward pass, different damping weights."""
    out = CurvatureContext(ctx.config, ctx.params, ctx.batch,
                           ctx.mu if mu is None else mu, ctx.lam if lam is None else lam,
                           ctx.workers, ctx.damp_target)
    out.shards = ctx.shards
    return out


def _r_pass(cell, p, r, batch, cache):
    T, n = batch.T, batch.n
    rz = np.empty((T, n, cache.config.vocab_size))
    rd = np.empty((T, n, cell.damped_size))
    rstate = tuple(np.zeros_like(s) for s in cache.states[0])
    for t in range(T):
        rz[t], rstate, rd[t] = cell.r_step(p, r, batch.inputs[t], cache.steps[t],
                                           cache.states[t], rstate)
    return rz, rd


def _check_vector(ctx, v):
    v = np.asarray(v, dtype=np.float64)
    if v.shape != ctx.params.theta.shape:
        raise DimensionError(f"vector has shape {v.shape}, theta has {ctx.params.theta.shape}")
    return v


def r_forward(ctx: CurvatureContext, v: np.ndarray, return_damped: bool = False):
    """Directional derivative ``J v`` of the logits, ``(T, n, V)``.

    With ``return_damped`` also returns ``R`` of the damped hidden quantity.
    """
    v = _check_vector(ctx, v)
    cell = ctx.cell
    p = ctx.params.views()
    r = unflatten(v, ctx.params.layout)
    outs = [_r_pass(cell, p, r, b, cache) for b, cache in ctx.shards]
    rz = np.concatenate([o[0] for o in outs], axis=1)
    if return_damped:
        return rz, np.concatenate([o[1] for o in outs], axis=1)
    return rz


def _curvature_product(ctx: CurvatureContext, v, output_weight: float, mu: float):
    v = _check_vector(ctx, v)
    cell = ctx.cell
    p = ctx.params.views()
    r = unflatten(v, ctx.params.layout)
    mode = ctx.config.output_mode

    def run(item):
        b, cache = item
        rz, rd = _r_pass(cell, p, r, b, cache)
        g, gv = _zeros(ctx.params)
        carry = tuple(np.zeros_like(s) for s in cache.states[0])
        O = cache.outputs if mode == "softmax_xent" else None
        mask = b.mask
        for t in range(b.T - 1, -1, -1):
            dz = None
            if output_weight:
                dz = hsigma_multiply(O[t] if O is not None else None, rz[t], mode)
                if mask is not None:
                    dz = dz * mask[t][:, None]
            inj = mu * rd[t] if mu else None
            carry = cell.back_step(p, b.inputs[t], cache.steps[t], cache.states[t], carry, dz,
                                   inj, gv)
        return g

    items = ctx.shards
    if ctx.workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=len(items)) as pool:
            parts = list(pool.map(run, items))
    else:
        parts = [run(it) for it in items]
    total = parts[0]
    for part in parts[1:]:
        total = total + part
    return total / ctx.batch.weight


def gv_product(ctx: CurvatureContext, v: np.ndarray) -> np.ndarray:
    """``(G + mu G_s + lam I) v`` via one R-forward and one backward pass.

    The structural term enters the backward pass as ``mu * R(damped)`` added
    to the derivative at the damped hidden quantity.
    """
    v = _check_vector(ctx, v)
    out = _curvature_product(ctx, v, 1.0, ctx.mu)
    if ctx.lam:
        out = out + ctx.lam * v
    return out


def structural_gsv(ctx: CurvatureContext, v: np.ndarray) -> np.ndarray:
    """``G_s v``: Gauss-Newton product of the squared hidden-state change."""
    return _curvature_product(ctx, v, 0.0, 1.0)


# -- diagnostics -------------------------------------------------------------------

def recurrent_jacobian_norms(config: ModelConfig, params: ParameterSet, batch: Batch,
                             max_lag: int, sequence: int = 0) -> np.ndarray:
    """Spectral norms of dH(T)/dH(T-n) for n = 1..max_lag (standard RNN).

    Built by multiplying the one-step Jacobians ``diag(1 - H(t)^2) W_hh``
    backwards from the last timestep.
    """
    if config.architecture != "rnn":
        raise ValueError("recurrent_jacobian_norms is defined for the standard RNN")
    cache, _, _ = forward(config, params, batch)
    H = cache["H"][:, sequence, :]
    W = params["W_hh"]
    T = H.shape[0]
    if max_lag >= T:
        raise ValueError("max_lag must be smaller than T")
    J = np.eye(W.shape[0])
    norms = np.empty(max_lag)
    for k in range(max_lag):
        J = J @ ((1.0 - H[T - 1 - k] ** 2)[:, None] * W)
        norms[k] = np.linalg.norm(J, 2)
    return norms


__all__ = [
    "Batch", "ActivationCache", "CurvatureContext", "forward", "mean_loss", "gradient",
    "checkpointed_backward", "make_context", "with_damping", "r_forward", "hsigma_multiply",
    "gv_product", "structural_gsv", "recurrent_jacobian_norms", "softmax", "log_softmax",
    "flatten", "LN2",
]
