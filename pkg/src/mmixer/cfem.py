"""Complementary content extraction.

Per modality, an encoding block (two temporal convolutions, kernel 4 /
stride 2 along time only, tanh after each, then a global temporal mean)
squeezes a (B, d, T, h, w) feature volume into h*w spatial tokens of
width d. A decoding block then lets a learnable query attend over the
concatenated tokens of all *other* modalities:

    c_i = concat over j != i of tokens_j          (token axis)
    g_i = LN(MHA(q_i, c_i + pos, c_i) + q_i)

The positional embedding is added to the keys only; a flag can mirror it
onto the values for experimentation. Content vectors therefore never see
their own modality's input.

The simpler content variants live here too: the spatio-temporal mean of a
modality's own volume ("self" content) and the concatenation of the other
modalities' means ("cross-concat" content).
"""

from . import tensor as T
from .attention import MHAParams, multi_head_attention
from .init import conv_kernel, ln_pair, small_normal, zeros
from .util import ConfigError, ShapeError

LN_EPS = 1e-5
CONV_KERNEL = 4
CONV_STRIDE = 2
ENCODER_DEPTH = 2


def min_seq_len(depth=ENCODER_DEPTH):
    """Shortest T the stacked temporal convolutions accept."""
    t = 1
    for _ in range(depth):
        t = (t - 1) * CONV_STRIDE + CONV_KERNEL
    return t


class ModalityContentParams:
    """Encoder/decoder weights for one modality."""

    def __init__(self, rng, d_h, n_modalities, grid_h, grid_w, dtype, prefix):
        k = CONV_KERNEL
        self.conv1_w = conv_kernel(rng, d_h, d_h, k, dtype, name=f"{prefix}.conv1.weight")
        self.conv1_b = zeros(d_h, dtype, name=f"{prefix}.conv1.bias")
        self.conv2_w = conv_kernel(rng, d_h, d_h, k, dtype, name=f"{prefix}.conv2.weight")
        self.conv2_b = zeros(d_h, dtype, name=f"{prefix}.conv2.bias")
        self.query = small_normal(rng, (d_h,), dtype, name=f"{prefix}.query")
        self.mha = MHAParams(rng, d_h, dtype, prefix=f"{prefix}.mha")
        self.ln = ln_pair(d_h, dtype, f"{prefix}.ln")
        n_tokens = (n_modalities - 1) * grid_h * grid_w
        self.pos = small_normal(rng, (n_tokens, d_h), dtype, name=f"{prefix}.pos")

    def tensors(self):
        return [self.conv1_w, self.conv1_b, self.conv2_w, self.conv2_b,
                self.query, *self.mha.tensors(), *self.ln, self.pos]


class CFEMParams:
    def __init__(self, rng, d_h, n_modalities, grid_h, grid_w, heads, dtype,
                 prefix="cfem"):
        if n_modalities < 2:
            raise ConfigError("CFEM requires >=2 modalities")
        if d_h % heads != 0:
            raise ConfigError(
                f"hidden width {d_h} must be divisible by {heads} attention heads"
            )
        self.heads = heads
        self.modalities = [
            ModalityContentParams(rng, d_h, n_modalities, grid_h, grid_w,
                                  dtype, prefix=f"{prefix}.{i}")
            for i in range(n_modalities)
        ]

    def tensors(self):
        out = []
        for m in self.modalities:
            out.extend(m.tensors())
        return out


def encode_modality(feat, params, modality):
    """Two temporal convolutions + temporal mean -> (B, h*w, d) tokens."""
    p = params.modalities[modality]
    t = feat.shape[2]
    if t < min_seq_len():
        raise ShapeError(
            f"sequence too short for the {ENCODER_DEPTH}-layer temporal "
            f"encoder: T={t}, minimum is {min_seq_len()}"
        )
    x = T.tanh(T.temporal_conv(feat, p.conv1_w, p.conv1_b, stride=CONV_STRIDE))
    x = T.tanh(T.temporal_conv(x, p.conv2_w, p.conv2_b, stride=CONV_STRIDE))
    x = T.mean_pool(x, axes=2)                       # (B, d, h, w)
    b, d = x.shape[0], x.shape[1]
    tokens = T.reshape(x, (b, d, -1))                # (B, d, h*w)
    return T.transpose(tokens, (0, 2, 1))            # (B, h*w, d)


def build_content(token_lists, target):
    """Concatenate other modalities' tokens, ascending modality order."""
    if len(token_lists) < 2:
        raise ConfigError("CFEM requires >=2 modalities")
    others = [tok for j, tok in enumerate(token_lists) if j != target]
    return others[0] if len(others) == 1 else T.concat(others, axis=1)


def decode_content(content, params, modality, pos_on_values=False):
    """Single-query attention over the content tokens, residual + LN.

    Returns (g (B, d), attention (B, heads, 1, L)).
    """
    p = params.modalities[modality]
    d = p.query.shape[0]
    query = T.reshape(p.query, (1, 1, d))
    keys = T.add(content, p.pos)
    values = T.add(content, p.pos) if pos_on_values else content
    attended, attn = multi_head_attention(query, keys, values, p.mha, params.heads)
    decoded = T.layer_norm(T.add(attended, query), *p.ln, eps=LN_EPS)
    return T.reshape(decoded, (decoded.shape[0], d)), attn


def cfem_forward(feats, params, pos_on_values=False):
    """Content vector per modality; each encoder runs exactly once.

    feats: per-modality (B, d, T, h, w) tensors sharing B/T/h/w.
    Returns (content list, attention list).
    """
    ref = feats[0].shape
    for i, f in enumerate(feats[1:], start=1):
        if (f.shape[0], f.shape[2], f.shape[3], f.shape[4]) != (
            ref[0], ref[2], ref[3], ref[4]
        ):
            raise ShapeError(
                f"modalities 0 and {i} disagree on batch/sequence geometry: "
                f"{ref} vs {f.shape}"
            )
    tokens = [encode_modality(f, params, i) for i, f in enumerate(feats)]
    contents, attns = [], []
    for i in range(len(feats)):
        g, attn = decode_content(build_content(tokens, i), params, i,
                                 pos_on_values=pos_on_values)
        contents.append(g)
        attns.append(attn)
    return contents, attns


def pooled_summary(feat):
    """Spatio-temporal mean of one modality volume -> (B, d)."""
    return T.mean_pool(feat, axes=(2, 3, 4))


def self_content(feats, target, mode):
    """Content without the attention machinery.

    mode "self": the target modality's own pooled summary (width d).
    mode "cross-concat": other modalities' summaries concatenated in
    ascending order (width d * (N - 1)).
    """
    if mode == "self":
        return pooled_summary(feats[target])
    if mode == "cross-concat":
        others = [pooled_summary(f) for j, f in enumerate(feats) if j != target]
        if not others:
            raise ConfigError("cross-concat content requires >=2 modalities")
        return others[0] if len(others) == 1 else T.concat(others, axis=1)
    raise ConfigError(f"unknown content mode {mode!r}")
