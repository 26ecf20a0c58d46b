"""Parameter containers, layer building blocks and the Adam optimizer."""

from dataclasses import dataclass, field

import numpy as np

from .tensor import BatchNormStats, Tensor, batchnorm2d, conv2d, linear, relu


def he_uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Collects parameters and buffers from attributes, recursively.

    Sub-modules may live in attributes directly or inside lists.
    """

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def named_buffers(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, BatchNormStats):
                yield f"{full}.mean", value.mean
                yield f"{full}.var", value.var
            elif isinstance(value, Module):
                yield from value.named_buffers(full + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def batchnorm_stats(self):
        out = []
        for value in vars(self).values():
            if isinstance(value, BatchNormStats):
                out.append(value)
            elif isinstance(value, Module):
                out.extend(value.batchnorm_stats())
            elif isinstance(value, list):
                for item in value:
                    if isinstance(item, Module):
                        out.extend(item.batchnorm_stats())
        return out


class Linear(Module):
    def __init__(self, d_in, d_out, rng, dtype=np.float32, bias=True):
        self.weight = Tensor(he_uniform(rng, (d_out, d_in), d_in, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x):
        return linear(x, self.weight, self.bias)


class ConvBlock(Module):
    """conv -> batch norm -> ReLU with "same" padding."""

    def __init__(self, c_in, c_out, k, rng, dtype=np.float32):
        fan_in = c_in * k * k
        self.weight = Tensor(he_uniform(rng, (c_out, c_in, k, k), fan_in, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
        self.gamma = Tensor(np.ones(c_out, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
        self.stats = BatchNormStats(c_out, dtype=dtype)

    @property
    def out_channels(self):
        return self.weight.shape[0]

    @property
    def in_channels(self):
        return self.weight.shape[1]

    def __call__(self, x, mode="train"):
        """``mode`` is "train", "eval", or "batch" (batch statistics, running stats untouched)."""
        y = conv2d(x, self.weight, self.bias)
        if mode == "batch":
            y = batchnorm2d(y, self.gamma, self.beta, mode="train", running=None)
        else:
            y = batchnorm2d(y, self.gamma, self.beta, mode=mode, running=self.stats)
        return relu(y)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


class Adam:
    """Bias-corrected Adam; ``step`` applies the update in place and clears grads.

    Parameters whose grad is ``None`` at a step are left untouched.
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = AdamState(
            lr=lr,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
            m=[np.zeros_like(p.data) for p in self.params],
            v=[np.zeros_like(p.data) for p in self.params],
        )

    def step(self):
        st = self.state
        st.step += 1
        c1 = 1.0 - st.beta1**st.step
        c2 = 1.0 - st.beta2**st.step
        for p, m, v in zip(self.params, st.m, st.v):
            g = p.grad
            if g is None:
                continue
            m *= st.beta1
            m += (1.0 - st.beta1) * g
            v *= st.beta2
            v += (1.0 - st.beta2) * (g * g)
            upd = st.lr * (m / c1) / (np.sqrt(v / c2) + st.eps)
            p.data -= upd.astype(p.dtype, copy=False)
            p.grad = None

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def adam_step(params, state):
    """Functional form over an existing :class:`AdamState` (buffers created on first use)."""
    params = list(params)
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    opt = Adam.__new__(Adam)
    opt.params = params
    opt.state = state
    opt.step()
    return params
