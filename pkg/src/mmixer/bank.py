"""Multi-modal feature bank.

K location vectors of width d are updated once per timestep from the
concatenated (dimension-reduced) hidden states of all modalities and read
once at the end of the sequence:

    h_cat  = concat over i of (W_h^i h^i_t)      each slice d // N wide
    alpha  = sigmoid(M^(t-1) h_cat)              one score per location
    Mhat   = alpha * M^(t-1) + (1 - alpha) * h_cat   (h_cat on every row)
    M^(t)  = Mhat W_u
    read   = W_r M^(T)                           K read weights

alpha broadcasts across the feature axis and h_cat across the location
axis; Mhat is therefore an elementwise convex mix of the old bank and the
new joint feature.
"""

import logging
from dataclasses import dataclass

from . import tensor as T
from .init import constant, small_normal, xavier_uniform
from .util import ConfigError

log = logging.getLogger(__name__)


class BankParams:
    def __init__(self, rng, d_h, n_modalities, n_slots, dtype, prefix="bank"):
        if d_h % n_modalities != 0:
            raise ConfigError(
                f"hidden width {d_h} must be divisible by the modality "
                f"count {n_modalities} to build the bank projections"
            )
        self.d_h = d_h
        self.n_slots = n_slots
        slice_w = d_h // n_modalities
        self.w_h = [
            xavier_uniform(rng, d_h, slice_w, dtype, name=f"{prefix}.W_h.{i}")
            for i in range(n_modalities)
        ]
        self.w_u = xavier_uniform(rng, d_h, d_h, dtype, name=f"{prefix}.W_u")
        self.w_r = constant(1.0 / n_slots, (n_slots,), dtype, name=f"{prefix}.W_r")
        self.m_init = small_normal(rng, (n_slots, d_h), dtype,
                                   name=f"{prefix}.M_init")

    def tensors(self):
        return [*self.w_h, self.w_u, self.w_r, self.m_init]


@dataclass
class BankState:
    m: T.Tensor  # (B, K, d) after the first update; (1, K, d) fresh
    t: int = 0


def init_state(params):
    """Fresh bank: the learnable init, broadcast-ready over the batch."""
    k, d = params.m_init.shape
    return BankState(T.reshape(params.m_init, (1, k, d)), t=0)


def project_hidden(h_list, params):
    """Reduce each modality's hidden state and concatenate -> (B, d)."""
    if len(h_list) != len(params.w_h):
        raise ConfigError(
            f"expected {len(params.w_h)} hidden states, got {len(h_list)}"
        )
    parts = [h @ w for h, w in zip(h_list, params.w_h)]
    return parts[0] if len(parts) == 1 else T.concat(parts, axis=1)


def update_bank(state, h_cat, params, return_alpha=False):
    """One bank update from the joint hidden feature h_cat (B, d)."""
    batch, d = h_cat.shape
    alpha = T.sigmoid(state.m @ T.reshape(h_cat, (batch, d, 1)))  # (B, K, 1)
    spread = T.reshape(h_cat, (batch, 1, d))
    mhat = T.add(T.mul(alpha, state.m), T.mul(T.rsub(alpha, 1.0), spread))
    new = BankState(mhat @ params.w_u, state.t + 1)
    return (new, alpha) if return_alpha else new


def read_bank(state, params):
    """W_r-weighted combination of the location vectors -> (B, d)."""
    if state.t == 0:
        log.warning("reading a feature bank that was never updated")
    k = params.n_slots
    row = T.reshape(params.w_r, (1, 1, k))
    out = row @ state.m                                  # (B, 1, d)
    return T.reshape(out, (out.shape[0], out.shape[2]))


def run_bank(h_per_step, params, return_states=False):
    """Sequential updates over a full sequence, then one read.

    h_per_step: list over t of per-modality hidden-state lists.
    """
    state = init_state(params)
    states = [state]
    for h_list in h_per_step:
        state = update_bank(state, project_hidden(h_list, params), params)
        states.append(state)
    out = read_bank(state, params)
    return (out, states) if return_states else out


def run_bank_sequences(h_seqs, params, return_states=False):
    """run_bank over per-modality (B, T, d) stacked hidden sequences.

    The per-modality projections are batched over T up front; the bank
    updates themselves stay strictly sequential in t.
    """
    proj = [hs @ w for hs, w in zip(h_seqs, params.w_h)]
    h_cat_all = proj[0] if len(proj) == 1 else T.concat(proj, axis=2)
    steps = h_cat_all.shape[1]
    state = init_state(params)
    states = [state]
    for t in range(steps):
        state = update_bank(state, T.take_index(h_cat_all, 1, t), params)
        states.append(state)
    out = read_bank(state, params)
    return (out, states) if return_states else out
