"""Per-timestep cells for the five architectures.

Each cell implements three kernels over a batch of ``n`` sequences stored as
rows (states are ``(n, h)``, weights are ``(out, in)``):

``step``
    one forward timestep; returns the per-step cache, the new recurrent state
    and the output logits.
``back_step``
    one timestep of backpropagation through time. ``carry`` holds the
    derivatives flowing into the recurrent state from step ``t + 1``;
    ``inject`` is an extra derivative added at the damped hidden quantity
    (used for structural damping). Gradients accumulate into ``g`` in place.
``r_step``
    one timestep of the R-operator (forward-mode directional derivative);
    returns ``R(logits)``, the new R-state and ``R`` of the damped quantity.

The recurrent state before the first step is all zeros, which reproduces the
``t > 1`` guards of the reference algorithms exactly.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from ..core import ModelConfig


def affine_input(W: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``x @ W.T`` for dense inputs, a column gather for symbol ids."""
    if x.dtype.kind in "iu":
        return W[:, x].T
    return x @ W.T


def accumulate_input_grad(G: np.ndarray, x: np.ndarray, d: np.ndarray) -> None:
    if x.dtype.kind in "iu":
        np.add.at(G.T, x, d)
    else:
        G += d.T @ x


def _dtanh(y):
    return 1.0 - y * y


def _dsigmoid(s):
    return s * (1.0 - s)


class RNNCell:
    def __init__(self, config: ModelConfig):
        self.h = config.hidden_sizes[0]
        self.damped_size = self.h

    def zero_state(self, n):
        return (np.zeros((n, self.h)),)

    def step(self, p, x, state):
        (Hp,) = state
        a = p["B_h"][:, 0] + affine_input(p["W_hi"], x) + Hp @ p["W_hh"].T
        H = np.tanh(a)
        return {"H": H}, (H,), H @ p["W_oh"].T

    def back_step(self, p, x, c, state, carry, dz, inject, g):
        (Hp,) = state
        H = c["H"]
        dH = carry[0]
        if dz is not None:
            dH = dH + dz @ p["W_oh"]
            g["W_oh"] += dz.T @ H
        if inject is not None:
            dH = dH + inject
        dA = dH * _dtanh(H)
        g["B_h"][:, 0] += dA.sum(axis=0)
        accumulate_input_grad(g["W_hi"], x, dA)
        g["W_hh"] += dA.T @ Hp
        return (dA @ p["W_hh"],)

    def r_step(self, p, r, x, c, state, rstate):
        (Hp,) = state
        (rHp,) = rstate
        H = c["H"]
        rA = (r["B_h"][:, 0] + affine_input(r["W_hi"], x)
              + Hp @ r["W_hh"].T + rHp @ p["W_hh"].T)
        rH = rA * _dtanh(H)
        rz = H @ r["W_oh"].T + rH @ p["W_oh"].T
        return rz, (rH,), rH

    def damped(self, c):
        return c["H"]


class MRNNCell:
    def __init__(self, config: ModelConfig):
        self.h = config.hidden_sizes[0]
        self.m = config.factor_sizes[0]
        self.damped_size = self.h

    def zero_state(self, n):
        return (np.zeros((n, self.h)),)

    def step(self, p, x, state):
        (Hp,) = state
        chi = affine_input(p["W_mi"], x)
        xi = Hp @ p["W_mh"].T
        M = chi * xi
        a = p["B_h"][:, 0] + affine_input(p["W_hi"], x) + M @ p["W_hm"].T
        H = np.tanh(a)
        return {"H": H, "M": M, "chi": chi, "xi": xi}, (H,), H @ p["W_oh"].T

    def back_step(self, p, x, c, state, carry, dz, inject, g):
        (Hp,) = state
        H = c["H"]
        dH = carry[0]
        if dz is not None:
            dH = dH + dz @ p["W_oh"]
            g["W_oh"] += dz.T @ H
        if inject is not None:
            dH = dH + inject
        dA = dH * _dtanh(H)
        g["B_h"][:, 0] += dA.sum(axis=0)
        accumulate_input_grad(g["W_hi"], x, dA)
        g["W_hm"] += dA.T @ c["M"]
        dM = dA @ p["W_hm"]
        dchi = dM * c["xi"]
        dxi = dM * c["chi"]
        accumulate_input_grad(g["W_mi"], x, dchi)
        g["W_mh"] += dxi.T @ Hp
        return (dxi @ p["W_mh"],)

    def r_step(self, p, r, x, c, state, rstate):
        (Hp,) = state
        (rHp,) = rstate
        H = c["H"]
        rchi = affine_input(r["W_mi"], x)
        rxi = Hp @ r["W_mh"].T + rHp @ p["W_mh"].T
        rM = rchi * c["xi"] + c["chi"] * rxi
        rA = (r["B_h"][:, 0] + affine_input(r["W_hi"], x)
              + c["M"] @ r["W_hm"].T + rM @ p["W_hm"].T)
        rH = rA * _dtanh(H)
        rz = H @ r["W_oh"].T + rH @ p["W_oh"].T
        return rz, (rH,), rH

    def damped(self, c):
        return c["H"]


class StackedMRNNCell:
    """mRNN layers with direct input and output connections for every layer.

    Layer ``l > 1`` also receives the current hidden state of layer ``l - 1``;
    the logits are the sum of every layer's output projection.
    """

    def __init__(self, config: ModelConfig):
        self.hs = config.hidden_sizes
        self.ms = config.factor_sizes
        self.L = len(self.hs)
        self.damped_size = sum(self.hs)
        self._splits = np.cumsum(self.hs)[:-1]

    def zero_state(self, n):
        return tuple(np.zeros((n, h)) for h in self.hs)

    def step(self, p, x, state):
        layers = []
        z = 0.0
        below = None
        for l in range(1, self.L + 1):
            Hp = state[l - 1]
            chi = affine_input(p[f"W_m{l}i"], x)
            xi = Hp @ p[f"W_m{l}h"].T
            M = chi * xi
            a = p[f"B_h{l}"][:, 0] + affine_input(p[f"W_h{l}i"], x) + M @ p[f"W_h{l}m"].T
            if below is not None:
                a = a + below @ p[f"W_h{l}h"].T
            H = np.tanh(a)
            z = z + H @ p[f"W_o{l}h"].T
            layers.append({"H": H, "M": M, "chi": chi, "xi": xi})
            below = H
        return {"layers": layers}, tuple(c["H"] for c in layers), z

    def back_step(self, p, x, c, state, carry, dz, inject, g):
        layers = c["layers"]
        injects = np.split(inject, self._splits, axis=1) if inject is not None else None
        new_carry = [None] * self.L
        from_above = None
        for l in range(self.L, 0, -1):
            lc = layers[l - 1]
            H = lc["H"]
            dH = carry[l - 1]
            if dz is not None:
                dH = dH + dz @ p[f"W_o{l}h"]
                g[f"W_o{l}h"] += dz.T @ H
            if injects is not None:
                dH = dH + injects[l - 1]
            if from_above is not None:
                dH = dH + from_above
            dA = dH * _dtanh(H)
            g[f"B_h{l}"][:, 0] += dA.sum(axis=0)
            accumulate_input_grad(g[f"W_h{l}i"], x, dA)
            g[f"W_h{l}m"] += dA.T @ lc["M"]
            if l > 1:
                g[f"W_h{l}h"] += dA.T @ layers[l - 2]["H"]
                from_above = dA @ p[f"W_h{l}h"]
            dM = dA @ p[f"W_h{l}m"]
            dchi = dM * lc["xi"]
            dxi = dM * lc["chi"]
            accumulate_input_grad(g[f"W_m{l}i"], x, dchi)
            g[f"W_m{l}h"] += dxi.T @ state[l - 1]
            new_carry[l - 1] = dxi @ p[f"W_m{l}h"]
        return tuple(new_carry)

    def r_step(self, p, r, x, c, state, rstate):
        layers = c["layers"]
        rz = 0.0
        rH_all = []
        below, rbelow = None, None
        for l in range(1, self.L + 1):
            lc = layers[l - 1]
            Hp, rHp = state[l - 1], rstate[l - 1]
            rchi = affine_input(r[f"W_m{l}i"], x)
            rxi = Hp @ r[f"W_m{l}h"].T + rHp @ p[f"W_m{l}h"].T
            rM = rchi * lc["xi"] + lc["chi"] * rxi
            rA = (r[f"B_h{l}"][:, 0] + affine_input(r[f"W_h{l}i"], x)
                  + lc["M"] @ r[f"W_h{l}m"].T + rM @ p[f"W_h{l}m"].T)
            if below is not None:
                rA = rA + below @ r[f"W_h{l}h"].T + rbelow @ p[f"W_h{l}h"].T
            H = lc["H"]
            rH = rA * _dtanh(H)
            rz = rz + H @ r[f"W_o{l}h"].T + rH @ p[f"W_o{l}h"].T
            rH_all.append(rH)
            below, rbelow = H, rH
        return rz, tuple(rH_all), np.concatenate(rH_all, axis=1)

    def damped(self, c):
        return np.concatenate([lc["H"] for lc in c["layers"]], axis=1)


class LSTMCell:
    """LSTM without peepholes; the output gate sits inside the tanh.

    ``multiplicative=True`` turns this into the mLSTM, where the previous
    output feeds the cell input and all three gates only through the factored
    state ``M = (W_mh H_out(t-1)) * (W_mi I(t))``.

    ``damp_target`` picks the quantity penalized by structural damping:
    ``"output"`` (H_out) or ``"state"`` (the cell state).
    """

    def __init__(self, config: ModelConfig, multiplicative: bool = False,
                 damp_target: str = "output"):
        if damp_target not in ("output", "state"):
            raise ValueError(f"damp_target must be 'output' or 'state', got {damp_target!r}")
        self.h = config.hidden_sizes[0]
        self.mult = multiplicative
        self.biases = config.extra_biases
        self.damp_target = damp_target
        self.damped_size = self.h
        # recurrent source matrices: from H_out(t-1) for lstm, from M(t) for mlstm
        self.src = "m" if multiplicative else "h"

    def zero_state(self, n):
        return (np.zeros((n, self.h)), np.zeros((n, self.h)))

    def _preacts(self, p, x, src):
        s = self.src
        hin = affine_input(p["W_hi"], x) + src @ p[f"W_h{s}"].T
        aw = affine_input(p["W_wi"], x) + src @ p[f"W_w{s}"].T
        af = affine_input(p["W_fi"], x) + src @ p[f"W_f{s}"].T
        ar = affine_input(p["W_ri"], x) + src @ p[f"W_r{s}"].T
        if self.biases:
            hin = hin + p["B_in"][:, 0]
            aw = aw + p["B_w"][:, 0]
            af = af + p["B_f"][:, 0]
            ar = ar + p["B_r"][:, 0]
        return hin, aw, af, ar

    def step(self, p, x, state):
        Hp, Sp = state
        c = {}
        if self.mult:
            chi = affine_input(p["W_mi"], x)
            xi = Hp @ p["W_mh"].T
            src = chi * xi
            c.update(chi=chi, xi=xi, M=src)
        else:
            src = Hp
        hin, aw, af, ar = self._preacts(p, x, src)
        w, f, rg = expit(aw), expit(af), expit(ar)
        S = w * hin + f * Sp
        Hout = np.tanh(S * rg)
        c.update(hin=hin, w=w, f=f, r=rg, S=S, Hout=Hout)
        return c, (Hout, S), Hout @ p["W_oh"].T

    def back_step(self, p, x, c, state, carry, dz, inject, g):
        Hp, Sp = state
        carry_h, carry_s = carry
        Hout, S, w, f, rg, hin = c["Hout"], c["S"], c["w"], c["f"], c["r"], c["hin"]
        dH = carry_h
        if dz is not None:
            dH = dH + dz @ p["W_oh"]
            g["W_oh"] += dz.T @ Hout
        if inject is not None and self.damp_target == "output":
            dH = dH + inject
        dzeta = dH * _dtanh(Hout)
        dr_in = dzeta * S * _dsigmoid(rg)
        dS = dzeta * rg + carry_s
        if inject is not None and self.damp_target == "state":
            dS = dS + inject
        df_in = Sp * dS * _dsigmoid(f)
        dw_in = hin * dS * _dsigmoid(w)
        dhin = w * dS
        s = self.src
        src = c["M"] if self.mult else Hp
        for name, d in (("h", dhin), ("w", dw_in), ("f", df_in), ("r", dr_in)):
            accumulate_input_grad(g[f"W_{name}i"], x, d)
            g[f"W_{name}{s}"] += d.T @ src
        if self.biases:
            g["B_in"][:, 0] += dhin.sum(axis=0)
            g["B_w"][:, 0] += dw_in.sum(axis=0)
            g["B_f"][:, 0] += df_in.sum(axis=0)
            g["B_r"][:, 0] += dr_in.sum(axis=0)
        dsrc = (dhin @ p[f"W_h{s}"] + dw_in @ p[f"W_w{s}"]
                + df_in @ p[f"W_f{s}"] + dr_in @ p[f"W_r{s}"])
        if self.mult:
            dchi = dsrc * c["xi"]
            dxi = dsrc * c["chi"]
            accumulate_input_grad(g["W_mi"], x, dchi)
            g["W_mh"] += dxi.T @ Hp
            dHp = dxi @ p["W_mh"]
        else:
            dHp = dsrc
        return dHp, f * dS

    def r_step(self, p, r, x, c, state, rstate):
        Hp, Sp = state
        rHp, rSp = rstate
        s = self.src
        if self.mult:
            rchi = affine_input(r["W_mi"], x)
            rxi = Hp @ r["W_mh"].T + rHp @ p["W_mh"].T
            src = c["M"]
            rsrc = rchi * c["xi"] + c["chi"] * rxi
        else:
            src, rsrc = Hp, rHp

        def rpre(name):
            out = (affine_input(r[f"W_{name}i"], x) + src @ r[f"W_{name}{s}"].T
                   + rsrc @ p[f"W_{name}{s}"].T)
            if self.biases:
                out = out + r[{"h": "B_in", "w": "B_w", "f": "B_f", "r": "B_r"}[name]][:, 0]
            return out

        Hout, S, w, f, rg, hin = c["Hout"], c["S"], c["w"], c["f"], c["r"], c["hin"]
        rhin = rpre("h")
        rw = rpre("w") * _dsigmoid(w)
        rf = rpre("f") * _dsigmoid(f)
        rr = rpre("r") * _dsigmoid(rg)
        rS = hin * rw + rhin * w + rf * Sp + f * rSp
        rzeta = rS * rg + S * rr
        rH = rzeta * _dtanh(Hout)
        rz = Hout @ r["W_oh"].T + rH @ p["W_oh"].T
        return rz, (rH, rS), (rH if self.damp_target == "output" else rS)

    def damped(self, c):
        return c["Hout"] if self.damp_target == "output" else c["S"]


def make_cell(config: ModelConfig, damp_target: str = "output"):
    arch = config.architecture
    if arch == "rnn":
        return RNNCell(config)
    if arch == "mrnn":
        return MRNNCell(config)
    if arch == "stacked_mrnn":
        return StackedMRNNCell(config)
    if arch == "lstm":
        return LSTMCell(config, multiplicative=False, damp_target=damp_target)
    if arch == "mlstm":
        return LSTMCell(config, multiplicative=True, damp_target=damp_target)
    raise ValueError(arch)
