"""Multi-head scaled dot-product attention."""

from . import tensor as T
from .init import xavier_uniform
from .util import ShapeError


class MHAParams:
    """Query/key/value/output projection matrices, each (d, d)."""

    def __init__(self, rng, d, dtype, prefix="mha"):
        self.wq = xavier_uniform(rng, d, d, dtype, name=f"{prefix}.Wq")
        self.wk = xavier_uniform(rng, d, d, dtype, name=f"{prefix}.Wk")
        self.wv = xavier_uniform(rng, d, d, dtype, name=f"{prefix}.Wv")
        self.wo = xavier_uniform(rng, d, d, dtype, name=f"{prefix}.Wo")

    def tensors(self):
        return [self.wq, self.wk, self.wv, self.wo]


def _split_heads(x, heads):
    b, length, d = x.shape
    return T.transpose(T.reshape(x, (b, length, heads, d // heads)), (0, 2, 1, 3))


def multi_head_attention(q, k, v, params, heads):
    """Attend q over (k, v) with per-head projections and an output map.

    q: (B_q, L_q, d) with B_q in {1, B}; k, v: (B, L_k, d). Per head,
    weights are softmax(Q K^T / sqrt(d/heads)), so every attention row
    sums to 1. Returns (output (B, L_q, d), attention (B, heads, L_q, L_k)).
    """
    d = q.shape[-1]
    if d % heads != 0:
        raise ShapeError(f"feature dim {d} not divisible by {heads} heads")
    if k.shape != v.shape:
        raise ShapeError(f"key/value shapes disagree: {k.shape} vs {v.shape}")
    dk = d // heads

    qh = _split_heads(q @ params.wq, heads)          # (B_q, H, L_q, dk)
    kh = _split_heads(k @ params.wk, heads)          # (B, H, L_k, dk)
    vh = _split_heads(v @ params.wv, heads)

    scores = T.mul(qh @ T.transpose(kh, (0, 1, 3, 2)), 1.0 / dk**0.5)
    attn = T.softmax(scores)                         # (B, H, L_q, L_k)
    ctx = attn @ vh                                  # (B, H, L_q, dk)
    b, _, lq, _ = ctx.shape
    merged = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, lq, d))
    return merged @ params.wo, attn
