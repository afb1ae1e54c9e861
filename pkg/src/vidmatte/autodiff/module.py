"""Parameter containers."""
from __future__ import annotations

import numpy as np

from .nn_ops import conv2d, layer_norm
from .tensor import Parameter, linear, relu


class Module:
    """Holds Parameters and child Modules as attributes (or lists of them).

    Parameter names are dotted attribute paths from the root, assigned by
    :meth:`named_parameters`, so they are unique within a model.
    """

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(val, Parameter):
                val.name = path
                yield path, val
            elif isinstance(val, Module):
                yield from val.named_parameters(path + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Parameter):
                        item.name = f"{path}.{i}"
                        yield item.name, item
                    elif isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data[...] = arr


def kaiming_uniform(rng, shape, fan_in, gain=np.sqrt(2.0)):
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, rng, n_in, n_out, zero=False, bias=True):
        if zero:
            w = np.zeros((n_in, n_out))
        else:
            w = kaiming_uniform(rng, (n_in, n_out), n_in, gain=1.0)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(n_out)) if bias else None

    def __call__(self, x):
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x):
        return layer_norm(x, self.gamma, self.beta, self.eps)


class Conv2d(Module):
    def __init__(self, rng, cin, cout, k=3, stride=1, padding=None, gain=np.sqrt(2.0)):
        self.weight = Parameter(kaiming_uniform(rng, (k, k, cin, cout), k * k * cin, gain=gain))
        self.bias = Parameter(np.zeros(cout))
        self.stride = stride
        self.padding = k // 2 if padding is None else padding

    def __call__(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class MLP(Module):
    """linear(C -> hidden) + ReLU + linear(hidden -> C)."""

    def __init__(self, rng, dim, hidden):
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, dim)

    def __call__(self, x):
        return self.fc2(relu(self.fc1(x)))
