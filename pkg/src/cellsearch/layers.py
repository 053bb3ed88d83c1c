"""Parameterized layers registered against a shared parameter store.

Each layer receives the store and a dotted name prefix at construction and
registers its weights there, so parameter iteration order (lexicographic by
name) is stable across builds.
"""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import ops
from .tensor import Tensor

TRAIN = "train"
EVAL = "eval"


class ParamStore:
    """Named trainable parameters plus persistent (non-trainable) buffers.

    ``mode`` switches normalization layers between batch statistics and
    running averages.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self.mode = TRAIN

    def _check_name(self, name: str):
        if name in self._params or name in self._buffers:
            raise ValueError(f"duplicate parameter name: {name}")

    def param(self, name: str, array: np.ndarray) -> Tensor:
        self._check_name(name)
        t = Tensor(array, requires_grad=True)
        self._params[name] = t
        return t

    def buffer(self, name: str, array: np.ndarray) -> np.ndarray:
        self._check_name(name)
        arr = np.ascontiguousarray(array)
        self._buffers[name] = arr
        return arr

    def params(self) -> Iterator[tuple[str, Tensor]]:
        for name in sorted(self._params):
            yield name, self._params[name]

    def buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for name in sorted(self._buffers):
            yield name, self._buffers[name]

    def get_param(self, name: str) -> Tensor:
        return self._params[name]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def zero_grad(self):
        for p in self._params.values():
            p.grad = None

    def train(self):
        self.mode = TRAIN

    def eval(self):
        self.mode = EVAL

    @property
    def training(self) -> bool:
        return self.mode == TRAIN


def conv_init(rng: np.random.Generator, c_out: int, c_in_per_group: int, k: int, dtype):
    fan_in = c_in_per_group * k * k
    std = np.sqrt(2.0 / fan_in)
    return rng.normal(0.0, std, size=(c_out, c_in_per_group, k, k)).astype(dtype)


class Conv2d:
    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int, k: int,
                 rng: np.random.Generator, dtype, stride: int = 1, dilation: int = 1,
                 groups: int = 1, bias: bool = False):
        self.stride = stride
        self.dilation = dilation
        self.groups = groups
        self.weight = store.param(name + ".weight", conv_init(rng, c_out, c_in // groups, k, dtype))
        self.bias: Optional[Tensor] = None
        if bias:
            self.bias = store.param(name + ".bias", np.zeros(c_out, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride,
                          dilation=self.dilation, groups=self.groups)


class BatchNorm2d:
    def __init__(self, store: ParamStore, name: str, channels: int, dtype, affine: bool = True):
        self._store = store
        self.gamma: Optional[Tensor] = None
        self.beta: Optional[Tensor] = None
        if affine:
            self.gamma = store.param(name + ".gamma", np.ones(channels, dtype=dtype))
            self.beta = store.param(name + ".beta", np.zeros(channels, dtype=dtype))
        self.running_mean = store.buffer(name + ".running_mean", np.zeros(channels, dtype=dtype))
        self.running_var = store.buffer(name + ".running_var", np.ones(channels, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self.running_mean,
                              self.running_var, training=self._store.training)


class Linear:
    def __init__(self, store: ParamStore, name: str, f_in: int, f_out: int,
                 rng: np.random.Generator, dtype):
        std = np.sqrt(1.0 / f_in)
        self.weight = store.param(name + ".weight",
                                  rng.normal(0.0, std, size=(f_in, f_out)).astype(dtype))
        self.bias = store.param(name + ".bias", np.zeros(f_out, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class SeparableConv:
    """Depthwise k-by-k convolution followed by a pointwise channel mix."""

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int, k: int,
                 rng: np.random.Generator, dtype, stride: int = 1):
        self.depthwise = Conv2d(store, name + ".dw", c_in, c_in, k, rng, dtype,
                                stride=stride, groups=c_in)
        self.pointwise = Conv2d(store, name + ".pw", c_in, c_out, 1, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.pointwise(self.depthwise(x))


class DilatedConv:
    """Dense k-by-k convolution with spacing-2 taps (enlarged receptive field)."""

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int, k: int,
                 rng: np.random.Generator, dtype, stride: int = 1):
        self.conv = Conv2d(store, name + ".conv", c_in, c_out, k, rng, dtype,
                           stride=stride, dilation=2)

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv(x)


class Identity:
    def __call__(self, x: Tensor) -> Tensor:
        return x


class AvgPool:
    def __init__(self, stride: int = 1):
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return ops.avg_pool2d(x, 3, stride=self.stride)


class MaxPool:
    def __init__(self, stride: int = 1):
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return ops.max_pool2d(x, 3, stride=self.stride)


class StridedSkip:
    """Resolution-halving stand-in for identity: 1x1 stride-2 conv + norm."""

    def __init__(self, store: ParamStore, name: str, channels: int,
                 rng: np.random.Generator, dtype, affine: bool):
        self.conv = Conv2d(store, name + ".conv", channels, channels, 1, rng, dtype, stride=2)
        self.norm = BatchNorm2d(store, name + ".norm", channels, dtype, affine=affine)

    def __call__(self, x: Tensor) -> Tensor:
        return self.norm(self.conv(x))
