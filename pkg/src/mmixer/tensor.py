"""Dense-tensor reverse-mode autodiff engine.

Covers exactly the operator set the network graph needs: elementwise
arithmetic with numpy broadcasting, matmul (incl. stacked/batched),
sigmoid/tanh, layer norm, softmax + cross-entropy, temporal convolution,
mean pooling, concat/stack/slice, and 1x1 channel maps.

The graph is define-by-run: every op appends a node holding its parent
tensors and a backward closure. ``Tensor.backward()`` walks the nodes once
in reverse topological order. Calling ``backward`` repeatedly without
zeroing grads accumulates, which is what the training loop relies on.
Tensors participating in a live graph must not be mutated in place.
"""

import contextlib

import numpy as np

from .util import NumericError, ShapeError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(g, shape):
    """Reduce a gradient of a broadcast result back to `shape`."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Tensor:
    """A dense array with an optional gradient slot and graph linkage."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    def zero_grad(self):
        self.grad = None

    def detach(self):
        """A view of the same data cut off from the graph."""
        return Tensor(self.data, requires_grad=False)

    def item(self):
        return float(self.data)

    def accumulate_grad(self, g):
        # first write holds a reference; later writes allocate a fresh sum,
        # so a gradient buffer shared between nodes is never mutated
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    def backward(self):
        """Populate grads of every requires_grad tensor reachable from self.

        The seed must be scalar-valued. Traversal is iterative (graphs from
        long unrolls exceed the recursion limit) and visits each node once,
        parents in construction order, so accumulation order is
        deterministic.
        """
        if self.data.size != 1:
            raise ShapeError(
                f"backward seed must be scalar, got shape {self.data.shape}"
            )
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in reversed(node._parents):
                if id(p) not in visited:
                    stack.append((p, False))
        # interior grads are per-traversal scratch; only leaves accumulate
        # across repeated backward calls
        for node in topo:
            if node._parents:
                node.grad = None
        self.accumulate_grad(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return rsub(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *perm):
        return transpose(self, perm if len(perm) > 1 else perm[0])


def as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def make_node(data, parents, backward):
    """Build a graph node; extension point used by tests for op mutation."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# -- elementwise arithmetic ---------------------------------------------


def add(a, b):
    if isinstance(b, (int, float)):
        def back(g):
            if a.requires_grad:
                a.accumulate_grad(g)
        return make_node(a.data + b, (a,), back)
    if isinstance(a, (int, float)):
        return add(b, a)

    def back(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.data.shape))

    return make_node(a.data + b.data, (a, b), back)


def sub(a, b):
    if isinstance(b, (int, float)):
        return add(a, -b)

    def back(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.data.shape))

    return make_node(a.data - b.data, (a, b), back)


def rsub(a, scalar):
    """scalar - a, keeping the graph lean for gate complements like 1 - s."""

    def back(g):
        if a.requires_grad:
            a.accumulate_grad(-g)

    return make_node(scalar - a.data, (a,), back)


def mul(a, b):
    if isinstance(b, (int, float)):
        def back(g):
            if a.requires_grad:
                a.accumulate_grad(g * b)
        return make_node(a.data * b, (a,), back)
    if isinstance(a, (int, float)):
        return mul(b, a)

    def back(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

    return make_node(a.data * b.data, (a, b), back)


def convex_mix(gate, a, b):
    """gate * a + (1 - gate) * b as one node (the graph's hottest pattern)."""
    out = gate.data * a.data + (1.0 - gate.data) * b.data

    def back(g):
        if gate.requires_grad:
            gate.accumulate_grad(_unbroadcast(g * (a.data - b.data), gate.data.shape))
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * gate.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * (1.0 - gate.data), b.data.shape))

    return make_node(out, (gate, a, b), back)


def broadcast_to(x, shape):
    shape = tuple(shape)

    def back(g):
        if x.requires_grad:
            x.accumulate_grad(_unbroadcast(g, x.data.shape))

    return make_node(np.broadcast_to(x.data, shape), (x,), back)


# -- linear algebra ------------------------------------------------------


def _mT(x):
    return np.swapaxes(x, -1, -2)


def matmul(a, b):
    """Matrix product via numpy matmul semantics on >=2-D operands."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(
            f"matmul needs >=2-D operands, got {a.data.shape} x {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.data.shape} x {b.data.shape}"
        )
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeError(
            f"matmul broadcast failure: {a.data.shape} x {b.data.shape}"
        ) from e

    def back(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(np.matmul(g, _mT(b.data)), a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(np.matmul(_mT(a.data), g), b.data.shape))

    return make_node(out, (a, b), back)


# -- activations ---------------------------------------------------------


def sigmoid(x):
    # clip keeps exp() in range; saturation to the open interval's edge is
    # a float rounding fact, not an error
    out = 1.0 / (1.0 + np.exp(-np.clip(x.data, -60.0, 60.0)))

    def back(g):
        if x.requires_grad:
            x.accumulate_grad(g * out * (1.0 - out))

    return make_node(out, (x,), back)


def tanh(x):
    out = np.tanh(x.data)

    def back(g):
        if x.requires_grad:
            x.accumulate_grad(g * (1.0 - out * out))

    return make_node(out, (x,), back)


# -- reductions / shape ops ----------------------------------------------


def tsum(x, axis=None, keepdims=False):
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if not x.requires_grad:
            return
        if axis is None:
            x.accumulate_grad(np.broadcast_to(g, x.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        x.accumulate_grad(np.broadcast_to(g, x.data.shape).copy())

    return make_node(out, (x,), back)


def tmean(x, axis=None, keepdims=False):
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = 1
        for ax in axes:
            count *= x.data.shape[ax]
    out = x.data.mean(axis=axis, keepdims=keepdims)

    def back(g):
        if not x.requires_grad:
            return
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x.accumulate_grad(np.broadcast_to(g / count, x.data.shape).copy())

    return make_node(out, (x,), back)


def mean_pool(x, axes):
    """Arithmetic mean over `axes`; the pooled axes are removed."""
    axes = (axes,) if isinstance(axes, int) else tuple(axes)
    for ax in axes:
        if not -x.ndim <= ax < x.ndim:
            raise ShapeError(f"pool axis {ax} out of range for shape {x.data.shape}")
        if x.data.shape[ax] == 0:
            raise ShapeError(f"cannot pool over empty axis {ax} of {x.data.shape}")
    return tmean(x, axis=axes, keepdims=False)


def reshape(x, shape):
    orig = x.data.shape

    def back(g):
        if x.requires_grad:
            x.accumulate_grad(g.reshape(orig))

    return make_node(x.data.reshape(shape), (x,), back)


def transpose(x, perm):
    perm = tuple(perm)
    inv = tuple(np.argsort(perm))

    def back(g):
        if x.requires_grad:
            x.accumulate_grad(g.transpose(inv))

    return make_node(x.data.transpose(perm), (x,), back)


def concat(parts, axis):
    """Order-preserving concatenation; backward splits the gradient."""
    parts = list(parts)
    if not parts:
        raise ShapeError("concat of zero tensors")
    ref = list(parts[0].data.shape)
    ref[axis] = None
    for i, p in enumerate(parts[1:], start=1):
        s = list(p.data.shape)
        s[axis] = None
        if s != ref:
            raise ShapeError(
                f"concat mismatch on non-concat axes: part 0 has "
                f"{parts[0].data.shape}, part {i} has {p.data.shape}"
            )
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for p, start, stop in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(start, stop)
                p.accumulate_grad(g[tuple(idx)])

    return make_node(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), back)


def stack(parts, axis):
    parts = list(parts)

    def back(g):
        for i, p in enumerate(parts):
            if p.requires_grad:
                p.accumulate_grad(np.take(g, i, axis=axis))

    return make_node(np.stack([p.data for p in parts], axis=axis), tuple(parts), back)


def take_index(x, axis, index):
    """Select one index along an axis, removing that axis."""

    def back(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            idx = [slice(None)] * x.ndim
            idx[axis] = index
            gx[tuple(idx)] = g
            x.accumulate_grad(gx)

    return make_node(np.take(x.data, index, axis=axis), (x,), back)


def narrow(x, axis, start, length):
    """Contiguous slice [start, start+length) along an axis."""
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def back(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[idx] = g
            x.accumulate_grad(gx)

    return make_node(x.data[idx].copy(), (x,), back)


# -- normalization / softmax ----------------------------------------------


def layer_norm(x, gain, bias, eps=1e-5):
    """Standardize the last axis to zero mean / unit variance, then affine."""
    d = x.data.shape[-1]
    if d == 0:
        raise ShapeError("layer_norm over an empty last axis")
    inv_d = 1.0 / d
    mu = x.data.sum(axis=-1, keepdims=True) * inv_d
    xc = x.data - mu
    var = (xc * xc).sum(axis=-1, keepdims=True) * inv_d
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    out = xhat * gain.data + bias.data

    def back(g):
        g_xhat = g * gain.data
        if x.requires_grad:
            m1 = g_xhat.sum(axis=-1, keepdims=True) * inv_d
            m2 = (g_xhat * xhat).sum(axis=-1, keepdims=True) * inv_d
            x.accumulate_grad(inv_std * (g_xhat - m1 - xhat * m2))
        red = tuple(range(g.ndim - 1))
        if gain.requires_grad:
            gain.accumulate_grad((g * xhat).sum(axis=red))
        if bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=red))

    return make_node(out, (x, gain, bias), back)


def softmax(x):
    """Softmax over the last axis, stabilized by max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        if x.requires_grad:
            gs = (g * out).sum(axis=-1, keepdims=True)
            x.accumulate_grad(out * (g - gs))

    return make_node(out, (x,), back)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer labels under softmax logits.

    Returns (loss, probs) where loss is a scalar graph node and probs is the
    (B, C) softmax array (forward values only, not part of the graph).
    """
    if logits.ndim != 2:
        raise ShapeError(f"expected (B, C) logits, got {logits.data.shape}")
    labels = np.asarray(labels)
    b, c = logits.data.shape
    if labels.shape != (b,):
        raise ShapeError(f"expected {b} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        bad = labels[(labels < 0) | (labels >= c)][0]
        raise IndexError(f"label {bad} out of range [0, {c})")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logz
    probs = np.exp(logp)
    loss = -logp[np.arange(b), labels].mean()

    def back(g):
        if logits.requires_grad:
            d = probs.copy()
            d[np.arange(b), labels] -= 1.0
            logits.accumulate_grad(d * (g / b))

    return make_node(np.asarray(loss, dtype=logits.dtype), (logits,), back), probs


# -- convolutions ----------------------------------------------------------


def temporal_conv(x, weight, bias, stride=2):
    """Convolve the time axis of a (B, C, T, H, W) tensor, no padding.

    `weight` is (C_out, C_in, K); spatial axes pass through untouched.
    """
    b, cin, t, h, w = x.data.shape
    cout, cin_w, k = weight.data.shape
    if cin != cin_w:
        raise ShapeError(f"conv channel mismatch: input {cin}, kernel {cin_w}")
    if t < k:
        raise ShapeError(
            f"sequence too short for temporal conv: T={t}, need T >= {k}"
        )
    windows = np.lib.stride_tricks.sliding_window_view(x.data, k, axis=2)
    windows = windows[:, :, ::stride]  # (B, Cin, T', H, W, K)
    out = np.tensordot(windows, weight.data, axes=([1, 5], [1, 2]))
    out = np.ascontiguousarray(np.moveaxis(out, -1, 1))  # (B, Cout, T', H, W)
    out += bias.data[None, :, None, None, None]

    def back(g):
        if weight.requires_grad:
            weight.accumulate_grad(
                np.tensordot(g, windows, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
            )
        if bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=(0, 2, 3, 4)))
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            t_out = g.shape[2]
            # (B, Cout, T', H, W) x (Cout, Cin, K) -> (B, T', H, W, Cin, K)
            patch = np.tensordot(g, weight.data, axes=([1], [0]))
            patch = patch.transpose(0, 4, 1, 2, 3, 5)  # (B, Cin, T', H, W, K)
            for tap in range(k):
                # output step j reads input frame j*stride + tap
                gx[:, :, tap : tap + stride * t_out : stride] += patch[..., tap]
            x.accumulate_grad(gx)

    return make_node(out, (x, weight, bias), back)


def conv1x1(x, weight, bias):
    """Per-frame, per-location channel map of a (B, C, T, H, W) tensor."""
    cin = x.data.shape[1]
    if weight.data.shape[0] != cin:
        raise ShapeError(
            f"channel mismatch: input has {cin}, weight maps {weight.data.shape[0]}"
        )
    out = np.tensordot(x.data, weight.data, axes=([1], [0]))  # (B, T, H, W, D)
    out = np.ascontiguousarray(np.moveaxis(out, -1, 1))
    out += bias.data[None, :, None, None, None]

    def back(g):
        if weight.requires_grad:
            weight.accumulate_grad(
                np.tensordot(g, x.data, axes=([0, 2, 3, 4], [0, 2, 3, 4])).T
            )
        if bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=(0, 2, 3, 4)))
        if x.requires_grad:
            gx = np.tensordot(g, weight.data, axes=([1], [1]))  # (B,T,H,W,C)
            x.accumulate_grad(np.ascontiguousarray(np.moveaxis(gx, -1, 1)))

    return make_node(out, (x, weight, bias), back)


def check_finite(x, context=""):
    """Raise NumericError if x holds NaN/Inf; forward ops must stay finite."""
    data = x.data if isinstance(x, Tensor) else x
    if not np.isfinite(data).all():
        raise NumericError(f"non-finite values encountered {context}".strip())
    return x
