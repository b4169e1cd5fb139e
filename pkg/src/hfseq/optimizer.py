"""Conjugate gradient, damping control, line searches and the HF outer loop.

The HF step minimizes the local quadratic ``q(x) = x'Ax/2 + b'x`` with ``b``
the gradient and ``A`` the damped Gauss-Newton matrix, so CG returns an
approximation of ``-A^{-1} b``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .core import DimensionError, NumericError, ParameterSet, axpy_view
from .models import Batch, gradient, gv_product, make_context, mean_loss

log = logging.getLogger(__name__)


class CurvatureError(NumericError):
    """A search direction with non-positive curvature was met."""

    def __init__(self, message, iteration, x):
        super().__init__(message)
        self.iteration = iteration
        self.x = x


# -- conjugate gradient ------------------------------------------------------------

@dataclass(frozen=True)
class CgOptions:
    max_iters: int = 100
    progress_window: int = 10
    progress_tol: float = 0.0005
    x0: np.ndarray | None = None
    record_iterates: bool = False
    residual_tol: float = 0.0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.progress_window < 1:
            raise ValueError("progress_window must be >= 1")
        if self.progress_tol <= 0:
            raise ValueError("progress_tol must be > 0")


@dataclass
class CgTrace:
    """Per-iteration record; ``q[0]`` is the quadratic at the starting point."""

    q: list = field(default_factory=list)
    alpha: list = field(default_factory=list)
    beta: list = field(default_factory=list)
    residual_norm: list = field(default_factory=list)
    iterates: list = field(default_factory=list)
    directions: list = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.alpha)


@dataclass(frozen=True)
class CgStep:
    """What a stop hook sees after each CG iteration."""

    iteration: int
    x: np.ndarray
    q: float
    alpha: float
    direction: np.ndarray
    trace: CgTrace


def progress_stalled(q: Sequence[float], i: int, k: int, eps: float) -> bool:
    """Relative-progress test: ``(q_i - q_{i-k}) / q_i < k eps`` once ``i >= k`` and ``q_i < 0``."""
    if i < k or q[i] >= 0:
        return False
    return (q[i] - q[i - k]) / q[i] < k * eps


def conjugate_gradient(apply_A: Callable[[np.ndarray], np.ndarray], b: np.ndarray,
                       opts: CgOptions | None = None,
                       stop_hooks: Sequence[Callable[[CgStep], str | None]] = ()):
    """Minimize ``x'Ax/2 + b'x`` using only products with ``A``.

    Returns ``(x, trace, reason)`` where reason is one of ``max_iters``,
    ``progress``, ``converged`` or whatever string a stop hook returned.
    """
    opts = opts or CgOptions()
    b = np.asarray(b, dtype=np.float64)
    x = np.zeros_like(b) if opts.x0 is None else np.array(opts.x0, dtype=np.float64)
    if x.shape != b.shape:
        raise DimensionError(f"x0 has shape {x.shape}, b has {b.shape}")
    trace = CgTrace()
    if opts.x0 is None:
        r = b.copy()
    else:
        r = _apply(apply_A, x, 0) + b
    q = 0.5 * float(x @ (r + b))
    trace.q.append(q)
    trace.residual_norm.append(float(np.linalg.norm(r)))
    if opts.record_iterates:
        trace.iterates.append(x.copy())
    S = -r
    reason = "max_iters"
    for i in range(1, opts.max_iters + 1):
        if not np.any(S) or trace.residual_norm[-1] <= opts.residual_tol:
            reason = "converged"
            break
        AS = _apply(apply_A, S, i)
        curv = float(S @ AS)
        if not curv > 0:
            raise CurvatureError(f"non-positive curvature {curv:.3e} at CG iteration {i}", i, x)
        alpha = -float(S @ r) / curv
        x = x + alpha * S
        r = r + alpha * AS
        beta = float(r @ AS) / curv
        q = 0.5 * float(x @ (r + b))
        trace.alpha.append(alpha)
        trace.beta.append(beta)
        trace.q.append(q)
        trace.residual_norm.append(float(np.linalg.norm(r)))
        if opts.record_iterates:
            trace.iterates.append(x.copy())
            trace.directions.append(S.copy())
        step = CgStep(i, x, q, alpha, S, trace)
        S = -r + beta * S
        stop = None
        for hook in stop_hooks:
            stop = hook(step)
            if stop:
                break
        if stop:
            reason = stop
            break
        if progress_stalled(trace.q, i, opts.progress_window, opts.progress_tol):
            reason = "progress"
            break
    return x, trace, reason


def _apply(apply_A, v, i):
    out = np.asarray(apply_A(v), dtype=np.float64)
    if not np.isfinite(out).all():
        raise NumericError(f"curvature product returned non-finite values at CG iteration {i}")
    return out


# -- damping ------------------------------------------------------------------------

DAMPING_MODES = ("structural", "line_search", "tikhonov_plus_structural")


@dataclass(frozen=True)
class DampingState:
    mu: float
    mu0: float | None = None
    lam: float = 0.0
    mode: str = "structural"

    def __post_init__(self):
        if self.mode not in DAMPING_MODES:
            raise ValueError(f"damping mode must be one of {DAMPING_MODES}, got {self.mode!r}")
        if not math.isfinite(self.mu) or self.mu < 0 or self.lam < 0:
            raise ValueError("mu and lam must be finite and non-negative")
        if self.mu0 is None:
            object.__setattr__(self, "mu0", self.mu)


def reduction_ratio(f_new: float, f_old: float, q_new: float, q_old: float) -> float:
    if q_new == q_old:
        raise ZeroDivisionError("reduction ratio undefined: quadratic did not change")
    return (f_new - f_old) / (q_new - q_old)


MU_RULES = ("as_printed", "levenberg_marquardt")


def adjust_mu(state: DampingState, f_new: float, f_old: float, q_new: float,
              q_old: float, rule: str = "as_printed") -> DampingState:
    """Rescale ``mu`` from the reduction ratio ``p`` of loss to quadratic.

    ``as_printed``: ``mu * 2/3`` when ``p < 0.25`` and ``mu * 3/2`` when
    ``p > 0.75``. ``levenberg_marquardt`` swaps the two factors, raising the
    damping when the quadratic predicts the loss badly. Both comparisons are
    strict, so ratios of exactly 0.25 or 0.75 leave ``mu`` alone.
    """
    if rule not in MU_RULES:
        raise ValueError(f"mu rule must be one of {MU_RULES}, got {rule!r}")
    p = reduction_ratio(f_new, f_old, q_new, q_old)
    low, high = (2.0 / 3.0, 1.5) if rule == "as_printed" else (1.5, 2.0 / 3.0)
    if p < 0.25:
        return replace(state, mu=state.mu * low)
    if p > 0.75:
        return replace(state, mu=state.mu * high)
    return state


# -- line searches ---------------------------------------------------------------------

@dataclass(frozen=True)
class LineSearchResult:
    eps: float
    loss: float
    failed: bool
    evaluations: int


def backtracking_line_search(eval_loss: Callable[[float], float], tau: float = 0.5,
                             max_iterations: int = 10,
                             base_loss: float | None = None) -> LineSearchResult:
    """Shrink the step from 1 by ``tau`` while the loss keeps improving.

    ``eval_loss(eps)`` is the loss after a step of ``eps`` times the full
    direction. The search stops at the first probe that does not improve on
    the previous one. It is flagged as failed when the best loss found does
    not beat ``base_loss`` (the loss before any step).
    """
    if not 0 < tau < 1:
        raise ValueError("tau must lie in (0, 1)")
    eps = 1.0
    F = _finite_or_inf(eval_loss(eps))
    evals = 1
    for _ in range(max_iterations):
        F2 = _finite_or_inf(eval_loss(tau * eps))
        evals += 1
        if F2 < F:
            F = F2
            eps = tau * eps
        else:
            break
    failed = base_loss is not None and not F < base_loss
    return LineSearchResult(eps, F, failed, evals)


def _finite_or_inf(v) -> float:
    v = float(v)
    return v if math.isfinite(v) else math.inf


def cg_with_linesearch_damping(apply_A, b, loss_of_step: Callable[[np.ndarray], float],
                               opts: CgOptions | None = None, tau: float = 0.5,
                               max_ls_iterations: int = 10, max_failures: int = 5):
    """CG where each direction's contribution to the update is line-searched.

    The quadratic iterate ``x_q`` advances exactly as in plain CG. The update
    actually returned, ``x_f``, adds ``eps_i * alpha_i * S_i`` with ``eps_i``
    from a backtracking search on ``loss_of_step`` (the loss at ``theta + x``).
    A failed search contributes nothing; CG stops once ``max_failures``
    searches have failed.

    Returns ``(x_f, trace, reason, info)``; ``info`` records each ``eps_i``,
    the failure count and the final ``x_q``.
    """
    b = np.asarray(b, dtype=np.float64)
    x_f = np.zeros_like(b)
    info = {"eps": [], "failures": 0, "losses": [], "x_q": None}
    current = [float(loss_of_step(x_f))]
    info["losses"].append(current[0])

    def hook(step: CgStep):
        d = step.alpha * step.direction
        base = current[0]
        res = backtracking_line_search(lambda e: loss_of_step(x_f + e * d), tau,
                                       max_ls_iterations, base_loss=base)
        if res.failed:
            info["failures"] += 1
            info["eps"].append(0.0)
        else:
            x_f[:] = x_f + res.eps * d
            current[0] = res.loss
            info["eps"].append(res.eps)
        info["losses"].append(current[0])
        if info["failures"] >= max_failures:
            return "line_search_failures"
        return None

    x_q, trace, reason = conjugate_gradient(apply_A, b, opts, [hook])
    info["x_q"] = x_q
    return x_f, trace, reason, info


# -- Hessian-free outer loop ------------------------------------------------------------

@dataclass(frozen=True)
class HFSettings:
    cg: CgOptions = CgOptions()
    mu_check_every: int = 1
    mu_escalation: float = 3.0
    mu_rule: str = "levenberg_marquardt"
    mu_min: float = 1e-8
    tau: float = 0.5
    max_ls_iterations: int = 10
    max_ls_failures: int = 5
    warm_start_decay: float = 0.0
    final_line_search: bool = True
    workers: int = 1
    damp_target: str = "output"


@dataclass
class TrainState:
    params: ParameterSet
    damping: DampingState
    warm_start: np.ndarray | None = None
    iteration: int = 0
    history: list = field(default_factory=list)

    def appended(self, **row) -> list:
        return [*self.history, row]


def hf_train_step(state: TrainState, grad_batch: Batch, curv_batch: Batch,
                  settings: HFSettings | None = None) -> TrainState:
    """One Hessian-free update.

    Gradient on ``grad_batch``; curvature products and the damping checks on
    ``curv_batch``. Structural modes adapt ``mu`` during CG (stopping once it
    reaches ``mu_escalation`` times its value at the start of the run) and
    finish with a backtracking search on the gradient-batch loss. Line-search
    mode searches every CG direction on the curvature batch instead. A step
    that does not lower the gradient-batch loss is rejected.
    """
    settings = settings or HFSettings()
    params = state.params
    config = params.config
    damping = state.damping
    grad, f0 = gradient(config, params, grad_batch, workers=settings.workers)
    if not np.isfinite(grad).all():
        raise NumericError(f"non-finite gradient at HF iteration {state.iteration}")
    mu_run = 0.0 if damping.mode == "line_search" else damping.mu
    ctx = make_context(config, params, curv_batch, mu=mu_run, lam=damping.lam,
                       workers=settings.workers, damp_target=settings.damp_target)

    def apply_A(v):
        return gv_product(ctx, v)

    def curv_loss(x):
        return mean_loss(config, axpy_view(params, x), curv_batch, settings.workers)

    x0 = None
    if settings.warm_start_decay and state.warm_start is not None:
        x0 = settings.warm_start_decay * state.warm_start
    cg_opts = replace(settings.cg, x0=x0)
    info: dict = {}

    if damping.mode == "line_search":
        x, trace, reason, ls_info = cg_with_linesearch_damping(
            apply_A, grad, curv_loss, cg_opts, settings.tau, settings.max_ls_iterations,
            settings.max_ls_failures)
        info["ls_failures"] = ls_info["failures"]
        new_damping = damping
        warm = ls_info["x_q"]
    else:
        mu_start = damping.mu
        run = {"damping": damping}
        f_start = curv_loss(x0) if x0 is not None else mean_loss(config, params, curv_batch,
                                                                   settings.workers)

        def mu_hook(step: CgStep):
            if step.iteration % settings.mu_check_every:
                return None
            q0 = step.trace.q[0]
            if step.q == q0:
                return None
            d = adjust_mu(run["damping"], curv_loss(step.x), f_start, step.q, q0,
                          settings.mu_rule)
            run["damping"] = replace(d, mu=max(d.mu, settings.mu_min))
            if run["damping"].mu >= settings.mu_escalation * mu_start:
                return "mu_escalation"
            return None

        x, trace, reason = conjugate_gradient(apply_A, grad, cg_opts, [mu_hook])
        new_damping = replace(run["damping"], mu0=damping.mu0)
        warm = x

    eps = 1.0
    new_params = params
    accepted = True
    f_new = mean_loss(config, axpy_view(params, x), grad_batch, settings.workers)
    if damping.mode != "line_search" and settings.final_line_search or not f_new < f0:
        res = backtracking_line_search(
            lambda e: mean_loss(config, axpy_view(params, x, e), grad_batch, settings.workers),
            settings.tau, settings.max_ls_iterations, base_loss=f0)
        eps, f_new, accepted = res.eps, res.loss, not res.failed
    if accepted:
        new_params = axpy_view(params, x, eps)
    else:
        f_new = f0
    row = {
        "iteration": state.iteration + 1,
        "loss_before": f0,
        "loss": f_new,
        "mu": new_damping.mu,
        "lambda": new_damping.lam,
        "cg_iters": trace.iterations,
        "stop_reason": reason,
        "step_scale": eps if accepted else 0.0,
        **info,
    }
    log.info("HF iter %d: loss %.6f -> %.6f, mu %.4g, CG %d (%s)", row["iteration"], f0, f_new,
             new_damping.mu, trace.iterations, reason)
    return TrainState(new_params, new_damping, warm, state.iteration + 1, state.appended(**row))


# -- first-order baseline ---------------------------------------------------------------

@dataclass
class SgdState:
    params: ParameterSet
    velocity: np.ndarray | None = None
    iteration: int = 0


def clip_by_norm(g: np.ndarray, threshold: float | None) -> np.ndarray:
    if threshold is None or threshold <= 0:
        return g
    norm = float(np.linalg.norm(g))
    if norm > threshold:
        return g * (threshold / norm)
    return g


def sgd_momentum_step(state: SgdState, batch: Batch, lr: float, momentum: float = 0.0,
                      clip_threshold: float | None = None) -> SgdState:
    """Classical momentum: ``v <- momentum v - lr g``; ``theta <- theta + v``.

    ``g`` is rescaled to norm ``clip_threshold`` when it is larger.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if not 0 <= momentum < 1:
        raise ValueError("momentum must be in [0, 1)")
    params = state.params
    g, _ = gradient(params.config, params, batch)
    if not np.isfinite(g).all():
        raise NumericError(f"non-finite gradient at SGD step {state.iteration}")
    return sgd_update(state, g, lr, momentum, clip_threshold)


def sgd_update(state: SgdState, g: np.ndarray, lr: float, momentum: float = 0.0,
               clip_threshold: float | None = None) -> SgdState:
    g = clip_by_norm(g, clip_threshold)
    v = -lr * g if state.velocity is None else momentum * state.velocity - lr * g
    return SgdState(axpy_view(state.params, v), v, state.iteration + 1)
