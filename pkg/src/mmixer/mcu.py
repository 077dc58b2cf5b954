"""Gated recurrent fusion cell.

Each modality owns one cell. Per timestep the cell first mixes the
modality's frame feature f_t with a (sequence-constant) content vector g
from the other modalities, then gates the mix against the previous hidden
state:

    fbar = tanh(LN(W_f f_t))           gbar = tanh(LN(W_g g))
    s    = sigmoid(LN(W_s [fbar || gbar]))
    fmix = s * fbar + (1 - s) * gbar
    r    = sigmoid(LN(W_hr (fmix + h_prev)))
    z    = sigmoid(LN(W_hz (fmix + h_prev)))
    hcand = tanh(LN(W_hh (r * h_prev + fmix)))
    h    = z * hcand + (1 - z) * h_prev

The gate inputs are elementwise sums, not concatenations. None of the
projections carries a bias; each of the six layer-norm calls has its own
gain/bias pair. Because hcand is tanh-bounded and h is a convex mix,
|h_t| never exceeds max(|h_prev|, 1) elementwise.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .init import ln_pair, xavier_uniform
from .util import ConfigError, ShapeError

LN_EPS = 1e-5


class MCUParams:
    """Cell weights for one modality; d_g is the content-vector width."""

    def __init__(self, rng, d_h, d_g, dtype, prefix="mcu"):
        self.d_h = d_h
        self.d_g = d_g
        self.w_f = xavier_uniform(rng, d_h, d_h, dtype, name=f"{prefix}.W_f")
        self.w_g = xavier_uniform(rng, d_g, d_h, dtype, name=f"{prefix}.W_g")
        self.w_s = xavier_uniform(rng, 2 * d_h, d_h, dtype, name=f"{prefix}.W_s")
        self.w_hr = xavier_uniform(rng, d_h, d_h, dtype, name=f"{prefix}.W_hr")
        self.w_hz = xavier_uniform(rng, d_h, d_h, dtype, name=f"{prefix}.W_hz")
        self.w_hh = xavier_uniform(rng, d_h, d_h, dtype, name=f"{prefix}.W_hh")
        self.ln_f = ln_pair(d_h, dtype, f"{prefix}.ln_f")
        self.ln_g = ln_pair(d_h, dtype, f"{prefix}.ln_g")
        self.ln_s = ln_pair(d_h, dtype, f"{prefix}.ln_s")
        self.ln_r = ln_pair(d_h, dtype, f"{prefix}.ln_r")
        self.ln_z = ln_pair(d_h, dtype, f"{prefix}.ln_z")
        self.ln_h = ln_pair(d_h, dtype, f"{prefix}.ln_h")

    def tensors(self):
        out = [self.w_f, self.w_g, self.w_s, self.w_hr, self.w_hz, self.w_hh]
        for pair in (self.ln_f, self.ln_g, self.ln_s, self.ln_r, self.ln_z, self.ln_h):
            out.extend(pair)
        return out


@dataclass
class MCUState:
    h: T.Tensor  # (B, d_h)
    t: int = 0


@dataclass
class StepGates:
    s: T.Tensor
    r: T.Tensor
    z: T.Tensor
    f_mixed: T.Tensor
    h_cand: T.Tensor


def zero_state(batch, d_h, dtype):
    return MCUState(T.Tensor(np.zeros((batch, d_h), dtype=dtype)), t=0)


def _gated(x, w, ln, offset=None):
    pre = T.layer_norm(x @ w, *ln, eps=LN_EPS)
    if offset is not None:
        pre = T.add(pre, offset)
    return T.sigmoid(pre)


def content_embed(g, params):
    """tanh(LN(W_g g)); constant per sequence, so compute it once."""
    if g.shape[-1] != params.d_g:
        raise ConfigError(
            f"content width {g.shape[-1]} does not match the cell's "
            f"d_g={params.d_g}"
        )
    return T.tanh(T.layer_norm(g @ params.w_g, *params.ln_g, eps=LN_EPS))


def convex_mix(gate, a, b):
    """gate * a + (1 - gate) * b."""
    return T.convex_mix(gate, a, b)


def _mix(fbar, gbar, params, gate_offsets):
    off = (gate_offsets or {}).get("s")
    s = _gated(T.concat([fbar, gbar], axis=1), params.w_s, params.ln_s, off)
    return convex_mix(s, fbar, gbar), s


def cross_modality_mix(f_t, g, params, gate_offsets=None):
    """Mix one frame feature with the content vector.

    Returns (f_mixed, s): the supplemented feature and the integration
    score, both (B, d_h). s is exposed for tests and telemetry; the
    gate_offsets test hook adds constants to gate pre-activations.
    """
    fbar = T.tanh(T.layer_norm(f_t @ params.w_f, *params.ln_f, eps=LN_EPS))
    gbar = content_embed(g, params)
    return _mix(fbar, gbar, params, gate_offsets)


def _recur(f_mixed, h_prev, params, gate_offsets):
    """Reset/update gating of the mixed feature against the hidden state."""
    offsets = gate_offsets or {}
    drive = T.add(f_mixed, h_prev)
    r = _gated(drive, params.w_hr, params.ln_r, offsets.get("r"))
    z = _gated(drive, params.w_hz, params.ln_z, offsets.get("z"))
    cand_in = T.add(T.mul(r, h_prev), f_mixed)
    h_cand = T.tanh(T.layer_norm(cand_in @ params.w_hh, *params.ln_h, eps=LN_EPS))
    h = convex_mix(z, h_cand, h_prev)
    return h, r, z, h_cand


def _advance(fbar, gbar, h_prev, params, gate_offsets):
    f_mixed, s = _mix(fbar, gbar, params, gate_offsets)
    h, r, z, h_cand = _recur(f_mixed, h_prev, params, gate_offsets)
    return h, StepGates(s=s, r=r, z=z, f_mixed=f_mixed, h_cand=h_cand)


def mcu_step(f_t, g, state, params, gate_offsets=None, return_gates=False):
    """One recurrent step; returns the next MCUState.

    With return_gates=True also returns the StepGates record holding
    s/r/z and the intermediate features.
    """
    T.check_finite(state.h, "in recurrent state")
    fbar = T.tanh(T.layer_norm(f_t @ params.w_f, *params.ln_f, eps=LN_EPS))
    gbar = content_embed(g, params)
    h, gates = _advance(fbar, gbar, state.h, params, gate_offsets)
    new_state = MCUState(h, state.t + 1)
    return (new_state, gates) if return_gates else new_state


def mcu_run(f_seq, g, params, h0=None, gate_offsets=None):
    """Unrolled cell over f_seq (B, d_h, T); returns the list of h_t.

    The content vector is constant per sequence, so the whole mix stage
    (fbar, the integration score, the supplemented feature) is computed
    for every timestep in one batched pass; only the reset/update gating
    stays inside the sequential loop.
    """
    if f_seq.ndim != 3:
        raise ShapeError(f"expected (B, d_h, T) feature sequence, got {f_seq.shape}")
    batch, _, steps = f_seq.shape
    if steps == 0:
        raise ShapeError("cannot unroll over an empty sequence (T=0)")
    h = h0 if h0 is not None else zero_state(batch, params.d_h, f_seq.dtype).h

    seq = T.transpose(f_seq, (0, 2, 1))                       # (B, T, d)
    fbar = T.tanh(T.layer_norm(seq @ params.w_f, *params.ln_f, eps=LN_EPS))
    gbar = content_embed(g, params)
    gbar_t = T.broadcast_to(T.reshape(gbar, (batch, 1, params.d_h)),
                            (batch, steps, params.d_h))
    off = (gate_offsets or {}).get("s")
    s = _gated(T.concat([fbar, gbar_t], axis=2), params.w_s, params.ln_s, off)
    f_mixed_all = convex_mix(s, fbar, gbar_t)                 # (B, T, d)

    hs = []
    for t in range(steps):
        T.check_finite(h, f"in recurrent state at t={t}")
        f_mixed = T.take_index(f_mixed_all, 1, t)
        h, _, _, _ = _recur(f_mixed, h, params, gate_offsets)
        hs.append(h)
    return hs


def mcu_unroll(f_seq, g, params, h0=None, gate_offsets=None):
    """All hidden states stacked to (B, d_h, T); last slice is h_T."""
    return T.stack(mcu_run(f_seq, g, params, h0, gate_offsets), axis=2)
