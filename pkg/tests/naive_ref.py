"""Loop-and-index reference implementations, independent of the engine.

These recompute the recurrent cell and the feature bank directly from
their defining formulas, one batch row at a time, with no autodiff and
no broadcasting tricks. The test suite holds the fast implementations to
these references at 1e-10 in 64-bit.
"""

import numpy as np

LN_EPS = 1e-5


def ln_row(v, gain, bias, eps=LN_EPS):
    mu = v.mean()
    var = ((v - mu) ** 2).mean()
    return (v - mu) / np.sqrt(var + eps) * gain + bias


def sig(v):
    return 1.0 / (1.0 + np.exp(-v))


def mcu_params_arrays(params):
    """Pull plain float64 arrays out of an engine MCUParams."""
    g = lambda t: np.asarray(t.data, dtype=np.float64)
    return {
        "W_f": g(params.w_f), "W_g": g(params.w_g), "W_s": g(params.w_s),
        "W_hr": g(params.w_hr), "W_hz": g(params.w_hz), "W_hh": g(params.w_hh),
        "ln_f": (g(params.ln_f[0]), g(params.ln_f[1])),
        "ln_g": (g(params.ln_g[0]), g(params.ln_g[1])),
        "ln_s": (g(params.ln_s[0]), g(params.ln_s[1])),
        "ln_r": (g(params.ln_r[0]), g(params.ln_r[1])),
        "ln_z": (g(params.ln_z[0]), g(params.ln_z[1])),
        "ln_h": (g(params.ln_h[0]), g(params.ln_h[1])),
    }


def naive_mcu_step(f_t, g, h_prev, p):
    out = np.zeros_like(h_prev)
    for b in range(f_t.shape[0]):
        fbar = np.tanh(ln_row(f_t[b] @ p["W_f"], *p["ln_f"]))
        gbar = np.tanh(ln_row(g[b] @ p["W_g"], *p["ln_g"]))
        s = sig(ln_row(np.concatenate([fbar, gbar]) @ p["W_s"], *p["ln_s"]))
        fmix = s * fbar + (1.0 - s) * gbar
        drive = fmix + h_prev[b]
        r = sig(ln_row(drive @ p["W_hr"], *p["ln_r"]))
        z = sig(ln_row(drive @ p["W_hz"], *p["ln_z"]))
        hc = np.tanh(ln_row((r * h_prev[b] + fmix) @ p["W_hh"], *p["ln_h"]))
        out[b] = z * hc + (1.0 - z) * h_prev[b]
    return out


def naive_mcu_unroll(f_seq, g, p):
    """f_seq (B, d, T) -> stacked hidden states (B, d, T), h_0 = 0."""
    batch, d, steps = f_seq.shape
    h = np.zeros((batch, d))
    states = []
    for t in range(steps):
        h = naive_mcu_step(f_seq[:, :, t], g, h, p)
        states.append(h)
    return np.stack(states, axis=2)


def bank_params_arrays(params):
    g = lambda t: np.asarray(t.data, dtype=np.float64)
    return {
        "W_h": [g(w) for w in params.w_h],
        "W_u": g(params.w_u),
        "W_r": g(params.w_r),
        "M_init": g(params.m_init),
    }


def naive_bank_run(h_steps, p):
    """Sequential bank evolution + final read, one batch row at a time.

    h_steps: list over t of per-modality (B, d) hidden-state arrays.
    Returns (read (B, d), final bank (B, K, d)).
    """
    batch = h_steps[0][0].shape[0]
    k, d = p["M_init"].shape
    mem = np.repeat(p["M_init"][None], batch, axis=0)
    for h_list in h_steps:
        for b in range(batch):
            hcat = np.concatenate(
                [h_list[i][b] @ p["W_h"][i] for i in range(len(h_list))]
            )
            alpha = sig(mem[b] @ hcat)
            mhat = np.zeros((k, d))
            for loc in range(k):
                mhat[loc] = alpha[loc] * mem[b, loc] + (1.0 - alpha[loc]) * hcat
            mem[b] = mhat @ p["W_u"]
    read = np.zeros((batch, d))
    for b in range(batch):
        read[b] = p["W_r"] @ mem[b]
    return read, mem
