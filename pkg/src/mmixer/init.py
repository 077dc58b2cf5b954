"""Parameter initializers.

Weight matrices are stored input-major, shape (fan_in, fan_out), so that
applying a map is ``x @ W`` for row-vector batches. Matrices get
Xavier-uniform init, convolution kernels are fan-in scaled, biases start
at zero, and embeddings (queries, positions, bank init) draw from a small
normal.
"""

import numpy as np

from .tensor import Tensor


def xavier_uniform(rng, fan_in, fan_out, dtype, name=None):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    data = rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)
    return Tensor(data, requires_grad=True, name=name)


def conv_kernel(rng, c_out, c_in, k, dtype, name=None):
    limit = 1.0 / np.sqrt(c_in * k)
    data = rng.uniform(-limit, limit, size=(c_out, c_in, k)).astype(dtype)
    return Tensor(data, requires_grad=True, name=name)


def zeros(shape, dtype, name=None):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True, name=name)


def small_normal(rng, shape, dtype, std=0.02, name=None):
    data = (rng.standard_normal(size=shape) * std).astype(dtype)
    return Tensor(data, requires_grad=True, name=name)


def constant(value, shape, dtype, name=None):
    return Tensor(np.full(shape, value, dtype=dtype), requires_grad=True, name=name)


def ln_pair(d, dtype, prefix):
    """Learnable layer-norm gain (ones) and bias (zeros) of width d."""
    gain = Tensor(np.ones(d, dtype=dtype), requires_grad=True, name=f"{prefix}.gain")
    bias = Tensor(np.zeros(d, dtype=dtype), requires_grad=True, name=f"{prefix}.bias")
    return gain, bias
