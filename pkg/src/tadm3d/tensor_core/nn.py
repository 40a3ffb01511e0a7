"""Parameter containers built on the ops."""

from __future__ import annotations

import hashlib

import numpy as np

from . import ops
from .tensor import Tensor


def parameter(data, name=None):
    return Tensor(np.asarray(data, dtype=np.float32), requires_grad=True, name=name)


class Module:
    """Owns named parameter tensors and child modules.

    Attributes that are ``Tensor`` with ``requires_grad`` set at assignment
    time, or ``Module``/list-of-``Module``, are discovered by
    :meth:`named_parameters` in attribute definition order.
    """

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and (val.requires_grad or val.frozen):
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self, prefix=""):
        return {name: p.data for name, p in self.named_parameters(prefix)}

    def load_state_dict(self, state, prefix="", strict=True):
        own = dict(self.named_parameters(prefix))
        missing = [n for n in own if n not in state]
        if strict and missing:
            raise KeyError(f"missing parameters: {missing[:5]}")
        for name, p in own.items():
            if name in state:
                arr = np.asarray(state[name], dtype=p.data.dtype)
                if arr.shape != p.shape:
                    raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
                p.data = arr.copy()

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False
            p.frozen = True
            p.grad = None

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv3d(Module):
    def __init__(self, cin, cout, k=3, stride=1, rng=None, zero=False):
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = cin * k ** 3
        if zero:
            w = np.zeros((cout, cin, k, k, k))
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, k, k, k))
        self.weight = parameter(w)
        self.bias = parameter(np.zeros(cout))
        self.stride = stride
        self.padding = k // 2

    def forward(self, x):
        return ops.conv3d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Linear(Module):
    def __init__(self, fin, fout, rng=None, zero=False):
        rng = rng if rng is not None else np.random.default_rng(0)
        if zero:
            w = np.zeros((fout, fin))
        else:
            w = rng.normal(0.0, np.sqrt(1.0 / fin), size=(fout, fin))
        self.weight = parameter(w)
        self.bias = parameter(np.zeros(fout))

    def forward(self, x):
        return ops.linear(x, self.weight, self.bias)


class GroupNorm(Module):
    def __init__(self, channels, groups=4):
        self.groups = groups
        self.gain = parameter(np.ones(channels))
        self.shift = parameter(np.zeros(channels))

    def forward(self, x):
        return ops.group_norm(x, self.groups, self.gain, self.shift)
