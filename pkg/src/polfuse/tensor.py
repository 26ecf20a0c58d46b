"""Dense tensors with reverse-mode automatic differentiation.

Every op builds its output eagerly with numpy and, when any input requires a
gradient, records a closure that maps the output gradient to input gradients.
``Tensor.backward`` walks the recorded graph in reverse topological order.
"""

import contextlib

import numpy as np

from . import _kernels


class ContractError(ValueError):
    """An op was called with arguments that violate its shape/value contract."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference, graph rebuilds)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled():
    return _GRAD_ENABLED


class Tensor:
    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind in "biu":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = ""

    # -- basic properties -------------------------------------------------
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

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return len(self.data)

    # -- autograd ----------------------------------------------------------
    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        self.grad = np.asarray(grad, dtype=self.dtype).reshape(self.shape)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else None))


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.dtype, copy=True)
    else:
        t.grad = t.grad + g


def _result(data, parents, backward, op):
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_finite(x, name):
    if np.isnan(x).any():
        raise ContractError(f"{name}: NaN in input")


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b):
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, -_unbroadcast(g, b.shape))

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    """Broadcasting product; a Python scalar ``b`` is treated as a constant."""
    a = as_tensor(a)
    if np.isscalar(b):
        s = b

        def backward_scalar(g):
            _accumulate(a, g * s)

        return _result(a.data * s, (a,), backward_scalar, "scale")
    b = as_tensor(b, a.dtype)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward, "mul")


def elementwise_mul(a, b):
    """Hadamard product of two tensors of identical shape."""
    if a.shape != b.shape:
        raise ContractError(f"elementwise_mul: shape mismatch {a.shape} vs {b.shape}")
    return mul(a, b)


def div(a, b):
    a = as_tensor(a)
    if np.isscalar(b):
        return mul(a, 1.0 / b)
    b = as_tensor(b, a.dtype)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _result(a.data / b.data, (a, b), backward, "div")


def maximum(a, b):
    """Elementwise max; ties route the gradient to ``a``."""
    if a.shape != b.shape:
        raise ContractError(f"maximum: shape mismatch {a.shape} vs {b.shape}")
    pick_a = a.data >= b.data

    def backward(g):
        _accumulate(a, np.where(pick_a, g, 0))
        _accumulate(b, np.where(pick_a, 0, g))

    return _result(np.where(pick_a, a.data, b.data), (a, b), backward, "maximum")


def relu(x):
    mask = x.data > 0

    def backward(g):
        _accumulate(x, g * mask)

    return _result(x.data * mask, (x,), backward, "relu")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def tsum(x, axis=None, keepdims=False):
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _result(out, (x,), backward, "sum")


def mean(x, axis=None, keepdims=False):
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(x, shape):
    def backward(g):
        _accumulate(x, g.reshape(x.shape))

    return _result(x.data.reshape(shape), (x,), backward, "reshape")


def concat(parts, axis=0):
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        for p, piece in zip(parts, np.split(g, bounds, axis=axis)):
            _accumulate(p, piece)

    return _result(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), backward, "concat")


def concat_channels(parts):
    """Concatenate (C_i, H, W) or (B, C_i, H, W) tensors along the channel axis."""
    if not parts:
        raise ContractError("concat_channels: empty part list")
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != len(ref) or p.shape[-2:] != ref[-2:] or p.shape[:-3] != ref[:-3]:
            raise ContractError(f"concat_channels: incompatible shapes {ref} and {p.shape}")
    if len(parts) == 1:
        return parts[0]
    return concat(parts, axis=-3)


def matmul(a, b):
    def backward(g):
        if a.requires_grad:
            _accumulate(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            _accumulate(b, np.swapaxes(a.data, -1, -2) @ g)

    return _result(a.data @ b.data, (a, b), backward, "matmul")


# ---------------------------------------------------------------------------
# network layers
# ---------------------------------------------------------------------------


def conv2d(x, kernel, bias=None):
    """Zero-padded "same" cross-correlation.

    ``x`` is (C_in, H, W) or (B, C_in, H, W); ``kernel`` is (C_out, C_in, k, k).
    """
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or kernel.ndim != 4:
        raise ContractError(f"conv2d: bad ranks input={x.shape} kernel={kernel.shape}")
    B, C, H, W = xd.shape
    Cout, Cin, k, k2 = kernel.shape
    if Cin != C:
        raise ContractError(f"conv2d: kernel expects {Cin} input channels, input has {C}")
    if k != k2 or k % 2 == 0:
        raise ContractError(f"conv2d: kernel must be square with odd size, got {k}x{k2}")
    if bias is not None and bias.shape != (Cout,):
        raise ContractError(f"conv2d: bias shape {bias.shape} != ({Cout},)")

    cols = _kernels.im2col(xd, k)
    wmat = kernel.data.reshape(Cout, Cin * k * k)
    out = (wmat @ cols).reshape(Cout, B, H, W).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    if squeeze:
        out = out[0]

    def backward(g):
        g4 = g[None] if squeeze else g
        gmat = g4.transpose(1, 0, 2, 3).reshape(Cout, B * H * W)
        if kernel.requires_grad:
            _accumulate(kernel, (gmat @ cols.T).reshape(kernel.shape))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, gmat.sum(axis=1))
        if x.requires_grad:
            gx = _kernels.col2im(wmat.T @ gmat, (B, C, H, W), k)
            _accumulate(x, gx[0] if squeeze else gx)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(out, parents, backward, "conv2d")


class BatchNormStats:
    """Running mean/variance of a batch-norm layer."""

    def __init__(self, channels, dtype=np.float32, momentum=0.1):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.initialized = False


def batchnorm2d(x, gamma, beta, mode="train", running=None, eps=1e-5):
    if x.ndim != 4:
        raise ContractError(f"batchnorm2d: expected B x C x H x W, got {x.shape}")
    B, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ContractError("batchnorm2d: gamma/beta must have one entry per channel")
    if mode == "train":
        n = B * H * W
        if n < 2:
            raise ContractError("batchnorm2d: need at least two values per channel in train mode")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if running is not None:
            m = running.momentum
            running.mean[...] = (1 - m) * running.mean + m * mu
            running.var[...] = (1 - m) * running.var + m * var * (n / (n - 1))
            running.initialized = True
    elif mode == "eval":
        if running is None or not running.initialized:
            raise ContractError("batchnorm2d: eval mode requires initialized running statistics")
        mu, var = running.mean.astype(x.dtype), running.var.astype(x.dtype)
    else:
        raise ContractError(f"batchnorm2d: unknown mode {mode!r}")

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward(g):
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gx = g * (gamma.data * inv)[None, :, None, None]
            if mode == "train":
                gx = gx - gx.mean(axis=(0, 2, 3), keepdims=True) - xhat * (gx * xhat).mean(axis=(0, 2, 3), keepdims=True)
            _accumulate(x, gx)

    return _result(out.astype(x.dtype, copy=False), (x, gamma, beta), backward, "batchnorm2d")


def global_avg_pool(x):
    """Spatial mean: (C, H, W) -> (C,) or (B, C, H, W) -> (B, C)."""
    if x.ndim not in (3, 4):
        raise ContractError(f"global_avg_pool: expected rank 3 or 4, got {x.shape}")
    return mean(x, axis=(-2, -1))


def linear(x, weight, bias=None):
    if x.shape[-1] != weight.shape[1]:
        raise ContractError(f"linear: input width {x.shape[-1]} != weight input dim {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ContractError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g @ weight.data)
        if weight.requires_grad:
            g2 = g.reshape(-1, g.shape[-1])
            x2 = x.data.reshape(-1, x.shape[-1])
            _accumulate(weight, g2.T @ x2)
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g.reshape(-1, g.shape[-1]).sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward, "linear")


def softmax(logits, axis=-1):
    _check_finite(logits.data, "softmax")
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        _accumulate(logits, s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _result(s, (logits,), backward, "softmax")


PROB_FLOOR = 1e-12


def cross_entropy(probs, labels):
    """Mean of -log p[label] over the batch; probabilities floored at 1e-12.

    ``probs`` is (C,) with an int label, or (B, C) with B int labels.
    """
    single = probs.ndim == 1
    p = probs.data[None] if single else probs.data
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    B, C = p.shape
    if lab.shape != (B,):
        raise ContractError(f"cross_entropy: {lab.shape[0]} labels for batch of {B}")
    if (lab < 0).any() or (lab >= C).any():
        raise ContractError(f"cross_entropy: label out of range [0, {C})")
    picked = p[np.arange(B), lab]
    clamped = np.maximum(picked, PROB_FLOOR)
    loss = -np.log(clamped).mean()

    def backward(g):
        gp = np.zeros_like(p)
        gp[np.arange(B), lab] = np.where(picked >= PROB_FLOOR, -1.0 / clamped, 0.0) * (g / B)
        _accumulate(probs, gp[0] if single else gp)

    return _result(np.asarray(loss, dtype=probs.dtype), (probs,), backward, "cross_entropy")


def l2_norm(x):
    n = float(np.sqrt((x.data.astype(np.float64) ** 2).sum()))

    def backward(g):
        if n == 0.0:
            _accumulate(x, np.zeros_like(x.data))
        else:
            _accumulate(x, g * x.data / n)

    return _result(np.asarray(n, dtype=x.dtype), (x,), backward, "l2_norm")


def outer_channels(a, b):
    """Channel-wise outer product of two (B, m, H, W) maps -> (B, m*n, H, W)."""
    if a.ndim != 4 or b.ndim != 4 or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ContractError(f"outer_channels: incompatible shapes {a.shape} and {b.shape}")
    out = _kernels.outer_channels(a.data, b.data)

    def backward(g):
        ga, gb = _kernels.outer_channels_grad(g, a.data, b.data)
        _accumulate(a, ga)
        _accumulate(b, gb)

    return _result(out, (a, b), backward, "outer_channels")


def neighbor_mean(h, indptr, indices):
    """Row v -> mean of h[v] and h[u] for u in the CSR neighbor list of v."""
    if h.ndim != 2 or len(indptr) != h.shape[0] + 1:
        raise ContractError(f"neighbor_mean: features {h.shape} vs {len(indptr) - 1} nodes")
    out = _kernels.neighbor_mean(h.data, indptr, indices)

    def backward(g):
        _accumulate(h, _kernels.neighbor_mean_grad(g, indptr, indices))

    return _result(out, (h,), backward, "neighbor_mean")
