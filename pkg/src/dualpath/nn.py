"""Layer objects holding parameters on top of :mod:`dualpath.functional`."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import functional as F
from .autograd import Parameter, Tensor, no_grad
from .errors import ConfigError, ParameterError


class Module:
    """Minimal container: tracks parameters, buffers, children and train/eval mode."""

    training: bool = True

    def __init__(self):
        self.training = True

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in getattr(self, "_buffer_names", ()):
            yield prefix + name, getattr(self, name)
        for name, child in self.children():
            yield from child.named_buffers(prefix + name + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.children():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def freeze(self, frozen: bool = True) -> "Module":
        for p in self.parameters():
            p.frozen = frozen
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Module):
    def __init__(self, c_in, c_out, kernel, pad, stride=1, *, rng, dtype=np.float32, layout="NCHW"):
        super().__init__()
        kh, kw = kernel
        self.pad = pad
        self.stride = stride
        self.layout = layout
        self.weight = Parameter(he_normal(rng, (c_out, c_in, kh, kw), c_in * kh * kw, dtype))

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.pad, self.stride, self.layout)


class Linear(Module):
    def __init__(self, d_in, d_out, *, rng, bias=True, dtype=np.float32):
        super().__init__()
        self.weight = Parameter(he_normal(rng, (d_in, d_out), d_in, dtype))
        self.bias = Parameter(np.zeros(d_out, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class BatchNorm(Module):
    """Per-channel batch normalization state (gamma, beta and running statistics).

    ``momentum`` weights the newest batch in the running average; ``None``
    switches to a cumulative average, which :func:`calibrate_batchnorm` uses.
    """

    _buffer_names = ("running_mean", "running_var")

    def __init__(self, num_features: int, momentum: Optional[float] = 0.1, epsilon: float = 1e-5, dtype=np.float32,
                 channel_axis: int = 1):
        super().__init__()
        self.channel_axis = channel_axis
        if momentum is not None and not 0.0 < momentum < 1.0:
            raise ParameterError(f"batchnorm momentum must be in (0, 1), got {momentum}")
        self.num_features = num_features
        self.momentum = momentum
        self.epsilon = epsilon
        self.gamma = Parameter(np.ones(num_features, dtype=dtype))
        self.beta = Parameter(np.zeros(num_features, dtype=dtype))
        self.running_mean = np.zeros(num_features, dtype=np.float64)
        self.running_var = np.ones(num_features, dtype=np.float64)
        self.batches_tracked = 0

    @property
    def mode(self) -> str:
        return "train" if self.training else "eval"

    def update_running(self, batch_mean: np.ndarray, batch_var: np.ndarray) -> None:
        self.batches_tracked += 1
        m = self.momentum if self.momentum is not None else 1.0 / self.batches_tracked
        self.running_mean = (1.0 - m) * self.running_mean + m * batch_mean
        self.running_var = np.maximum((1.0 - m) * self.running_var + m * batch_var, 0.0)

    def forward(self, x: Tensor) -> Tensor:
        return F.batchnorm(x, self, self.channel_axis)


def calibrate_batchnorm(module: Module, forward, batches) -> None:
    """Re-estimate every BatchNorm running statistic inside ``module``.

    ``forward`` is called on each element of ``batches`` with the module's BN
    layers in train mode and a cumulative average in place of the moving
    average. Previous running statistics are discarded.
    """
    layers = [m for m in module.modules() if isinstance(m, BatchNorm)]
    saved = [(bn.momentum, bn.training) for bn in layers]
    for bn in layers:
        bn.momentum = None
        bn.batches_tracked = 0
        bn.running_mean = np.zeros_like(bn.running_mean)
        bn.running_var = np.ones_like(bn.running_var)
        bn.training = True
    try:
        with no_grad():
            for batch in batches:
                forward(batch)
    finally:
        for bn, (momentum, training) in zip(layers, saved):
            bn.momentum = momentum
            bn.training = training


class ResidualBlock(Module):
    """``relu(F(x) + shortcut(x))`` with ``F = conv-bn-relu-conv-bn``.

    ``kernel`` is (3, 3) for the image path and (1, 2) for the text path. The
    shortcut is the identity when input and output shapes agree, otherwise a
    1x1 projection (with the block stride) followed by batch normalization.
    Inputs and outputs are channels-last, [N, H, W, C].
    """

    def __init__(self, c_in, c_out, kernel, *, stride=1, rng, dtype=np.float32, bn_momentum=0.1, bn_eps=1e-5,
                 projection: Optional[bool] = None, even_pad: str = "after"):
        super().__init__()
        # same-size padding; even kernels put the extra cell after (bottom/right) or before
        if even_pad not in ("after", "before"):
            raise ConfigError(f"even_pad must be 'after' or 'before', got {even_pad!r}")
        lo = [(k - 1) // 2 for k in kernel]
        if even_pad == "before":
            lo = [k - 1 - (k - 1) // 2 for k in kernel]
        pad = tuple((a, k - 1 - a) for a, k in zip(lo, kernel))
        self.stride = stride
        self.conv1 = Conv2d(c_in, c_out, kernel, pad, stride, rng=rng, dtype=dtype, layout="NHWC")
        self.bn1 = BatchNorm(c_out, bn_momentum, bn_eps, dtype, channel_axis=-1)
        self.conv2 = Conv2d(c_out, c_out, kernel, pad, 1, rng=rng, dtype=dtype, layout="NHWC")
        self.bn2 = BatchNorm(c_out, bn_momentum, bn_eps, dtype, channel_axis=-1)
        needs_projection = c_in != c_out or stride != 1
        if projection is False and needs_projection:
            raise ConfigError(
                f"identity shortcut requested for incompatible block ({c_in}->{c_out} channels, stride {stride})"
            )
        if projection is None:
            projection = needs_projection
        if projection:
            self.proj = Conv2d(c_in, c_out, (1, 1), 0, stride, rng=rng, dtype=dtype, layout="NHWC")
            self.proj_bn = BatchNorm(c_out, bn_momentum, bn_eps, dtype, channel_axis=-1)
        else:
            self.proj = None
            self.proj_bn = None

    def forward(self, x: Tensor) -> Tensor:
        y = F.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        shortcut = x if self.proj is None else self.proj_bn(self.proj(x))
        return F.relu(y + shortcut)
