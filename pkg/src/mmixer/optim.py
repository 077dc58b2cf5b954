"""Adam optimizer with bias correction."""

import numpy as np

from .util import NumericError


class Adam:
    """Standard bias-corrected Adam over a list of parameter tensors.

    m(t) = b1 m(t-1) + (1-b1) g        v(t) = b2 v(t-1) + (1-b2) g^2
    step = -lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
    """

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                name = p.name or f"param[{i}]"
                raise NumericError(f"non-finite gradient in {name}")
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(
                p.data.dtype, copy=False
            )

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state_arrays(self):
        """(t, m list, v list) in parameter order, for checkpointing."""
        return self.t, self.m, self.v

    def load_state(self, t, m, v):
        self.t = t
        self.m = [np.array(a) for a in m]
        self.v = [np.array(a) for a in v]
