"""Brute-force oracles for checking the analytic derivative code.

Nothing here calls a backward or R-operator pass: gradients and Jacobians come
from central differences of the forward loss, curvature matrices are assembled
densely, and :func:`reference_logits` re-evaluates each architecture with
scalar loops so the vectorized forward pass can be checked too.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .core import ConfigError, ModelConfig, ParameterSet
from .models import Batch, forward, mean_loss, softmax
from .models.cells import make_cell

FD_GRADIENT_LIMIT = 5000
DENSE_LIMIT = 500


@dataclass(frozen=True)
class OracleReport:
    quantity: str
    max_rel_error: float
    mean_rel_error: float
    worst_index: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tolerance)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.quantity}: max rel err {self.max_rel_error:.3e} "
                f"(mean {self.mean_rel_error:.3e}, worst index {self.worst_index}, "
                f"tol {self.tolerance:g})")

    def as_line(self, sep: str = "\t") -> str:
        return sep.join([self.quantity, "pass" if self.passed else "fail",
                         repr(self.max_rel_error), repr(self.mean_rel_error),
                         str(self.worst_index), repr(self.tolerance)])


def relative_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def compare(quantity: str, analytic, oracle, tolerance: float) -> OracleReport:
    err = relative_error(analytic, oracle).ravel()
    worst = int(np.argmax(err)) if err.size else -1
    return OracleReport(quantity, float(err.max(initial=0.0)), float(err.mean()) if err.size else 0.0,
                        worst, tolerance)


def fd_gradient(config: ModelConfig, params: ParameterSet, batch: Batch, h: float = 1e-5,
                loss_fn=None) -> np.ndarray:
    """Central-difference gradient of the mean loss, one coordinate at a time."""
    if h <= 0:
        raise ValueError("h must be positive")
    if params.size > FD_GRADIENT_LIMIT:
        raise ConfigError(
            f"fd_gradient: {params.size} parameters exceeds the {FD_GRADIENT_LIMIT} limit; "
            "shrink hidden sizes or vocabulary for gradient checks")
    if loss_fn is None:
        def loss_fn(theta):
            return mean_loss(config, params.with_theta(theta), batch)
    theta = params.theta.copy()
    grad = np.empty_like(theta)
    for i in range(theta.size):
        old = theta[i]
        theta[i] = old + h
        fp = loss_fn(theta)
        theta[i] = old - h
        fm = loss_fn(theta)
        theta[i] = old
        grad[i] = (fp - fm) / (2 * h)
    return grad


def _outputs_and_hidden(config, params, batch, damp_target="output"):
    cache, _, _ = forward(config, params, batch, damp_target=damp_target)
    return cache.logits, cache.damped_states(make_cell(config, damp_target))


def fd_jacobians(config: ModelConfig, params: ParameterSet, batch: Batch, h: float = 1e-5,
                 damp_target: str = "output") -> tuple[np.ndarray, np.ndarray]:
    """Central-difference Jacobians of the logits and of the damped hidden states.

    Returns ``J`` with shape ``(T*n*V, P)`` and ``J_h`` with shape ``(T*n*D, P)``.
    """
    if params.size > DENSE_LIMIT:
        raise ConfigError(f"dense oracle: {params.size} parameters exceeds the {DENSE_LIMIT} limit")
    theta = params.theta.copy()
    cols_o, cols_h = [], []
    for i in range(theta.size):
        old = theta[i]
        theta[i] = old + h
        op, hp = _outputs_and_hidden(config, params.with_theta(theta), batch, damp_target)
        theta[i] = old - h
        om, hm = _outputs_and_hidden(config, params.with_theta(theta), batch, damp_target)
        theta[i] = old
        cols_o.append(((op - om) / (2 * h)).ravel())
        cols_h.append(((hp - hm) / (2 * h)).ravel())
    return np.stack(cols_o, axis=1), np.stack(cols_h, axis=1)


def dense_loss_hessian(config: ModelConfig, params: ParameterSet, batch: Batch) -> np.ndarray:
    """Block-diagonal loss Hessian w.r.t. all logits, mask weights included."""
    cache, _, _ = forward(config, params, batch)
    T, n, V = cache.logits.shape
    weights = np.ones((T, n)) if batch.mask is None else batch.mask
    H = np.zeros((T * n * V, T * n * V))
    for t in range(T):
        for j in range(n):
            k = (t * n + j) * V
            if config.output_mode == "softmax_xent":
                o = softmax(cache.logits[t, j])
                block = np.diag(o) - np.outer(o, o)
            else:
                block = np.eye(V)
            H[k:k + V, k:k + V] = weights[t, j] * block
    return H


def dense_gauss_newton(config: ModelConfig, params: ParameterSet, batch: Batch, mu: float = 0.0,
                       lam: float = 0.0, h: float = 1e-5, damp_target: str = "output",
                       jacobians=None) -> np.ndarray:
    """``J^T H J / N + mu J_h^T J_h / N + lam I`` assembled explicitly.

    ``N`` is the batch weight (``T * n`` without a mask). Pass precomputed
    ``jacobians`` to reuse one finite-difference sweep across damping values.
    """
    J, Jh = jacobians if jacobians is not None else fd_jacobians(config, params, batch, h, damp_target)
    N = batch.weight
    Hs = dense_loss_hessian(config, params, batch)
    G = J.T @ Hs @ J / N
    if mu:
        G = G + mu * (Jh.T @ Jh) / N
    if lam:
        G = G + lam * np.eye(G.shape[0])
    return 0.5 * (G + G.T)


def cg_direct_solve(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``A x = -b`` by Cholesky; raises ``LinAlgError`` if A is not SPD."""
    A = np.asarray(A, dtype=float)
    if A.shape[0] > DENSE_LIMIT:
        raise ConfigError(f"cg_direct_solve: {A.shape[0]} exceeds the {DENSE_LIMIT} limit")
    c = scipy.linalg.cho_factor(A, lower=True)
    return -scipy.linalg.cho_solve(c, np.asarray(b, dtype=float))


# -- scalar reference forward passes ---------------------------------------------

def _sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def _matvec(W, x):
    return [sum(W[i][j] * x[j] for j in range(len(x))) for i in range(len(W))]


def _input_vec(batch, t, j, width):
    if batch.symbolic:
        v = [0.0] * width
        v[int(batch.inputs[t, j])] = 1.0
        return v
    return [float(a) for a in batch.inputs[t, j]]


def reference_logits(config: ModelConfig, params: ParameterSet, batch: Batch) -> np.ndarray:
    """Logits computed element by element with Python floats.

    A literal transcription of each architecture's recurrences with explicit
    one-hot inputs, meant only for tiny configurations.
    """
    W = {k: v.tolist() for k, v in params.views().items()}
    arch = config.architecture
    T, n, V = batch.T, batch.n, config.vocab_size
    out = np.zeros((T, n, V))
    for j in range(n):
        if arch == "stacked_mrnn":
            Hs = [[0.0] * h for h in config.hidden_sizes]
        else:
            h = config.hidden_sizes[0]
            H = [0.0] * h
            S = [0.0] * h
        for t in range(T):
            x = _input_vec(batch, t, j, config.n_inputs)
            if arch == "rnn":
                a1, a2 = _matvec(W["W_hi"], x), _matvec(W["W_hh"], H)
                H = [math.tanh(W["B_h"][i][0] + a1[i] + a2[i]) for i in range(h)]
                z = _matvec(W["W_oh"], H)
            elif arch == "mrnn":
                chi, xi = _matvec(W["W_mi"], x), _matvec(W["W_mh"], H)
                M = [chi[i] * xi[i] for i in range(len(chi))]
                a1, a2 = _matvec(W["W_hi"], x), _matvec(W["W_hm"], M)
                H = [math.tanh(W["B_h"][i][0] + a1[i] + a2[i]) for i in range(h)]
                z = _matvec(W["W_oh"], H)
            elif arch == "stacked_mrnn":
                z = [0.0] * V
                below = None
                for l in range(1, len(config.hidden_sizes) + 1):
                    Hp = Hs[l - 1]
                    chi, xi = _matvec(W[f"W_m{l}i"], x), _matvec(W[f"W_m{l}h"], Hp)
                    M = [chi[i] * xi[i] for i in range(len(chi))]
                    a = [W[f"B_h{l}"][i][0] + u + v for i, (u, v) in
                         enumerate(zip(_matvec(W[f"W_h{l}i"], x), _matvec(W[f"W_h{l}m"], M)))]
                    if below is not None:
                        a = [u + v for u, v in zip(a, _matvec(W[f"W_h{l}h"], below))]
                    Hl = [math.tanh(u) for u in a]
                    Hs[l - 1] = Hl
                    z = [u + v for u, v in zip(z, _matvec(W[f"W_o{l}h"], Hl))]
                    below = Hl
            else:
                if arch == "mlstm":
                    chi, xi = _matvec(W["W_mi"], x), _matvec(W["W_mh"], H)
                    src = [chi[i] * xi[i] for i in range(h)]
                    s = "m"
                else:
                    src, s = H, "h"
                pre = {}
                for g, b in (("h", "B_in"), ("w", "B_w"), ("f", "B_f"), ("r", "B_r")):
                    u, v = _matvec(W[f"W_{g}i"], x), _matvec(W[f"W_{g}{s}"], src)
                    pre[g] = [u[i] + v[i] + (W[b][i][0] if config.extra_biases else 0.0)
                              for i in range(h)]
                w = [_sig(a) for a in pre["w"]]
                f = [_sig(a) for a in pre["f"]]
                r = [_sig(a) for a in pre["r"]]
                S = [w[i] * pre["h"][i] + f[i] * S[i] for i in range(h)]
                H = [math.tanh(S[i] * r[i]) for i in range(h)]
                z = _matvec(W["W_oh"], H)
            out[t, j] = z
    return out
