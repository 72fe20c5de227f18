"""SGD with momentum over :class:`~dualpath.autograd.Parameter` objects."""

from __future__ import annotations

from typing import Iterable

from .autograd import Parameter
from .errors import StateError


def sgd_momentum_step(params: Iterable[Parameter], lr: float, momentum: float) -> None:
    """One update ``v <- momentum * v + grad; p <- p - lr * v``.

    Frozen parameters are skipped. Every other parameter must carry a gradient.
    """
    params = [p for p in params if not p.frozen]
    missing = [p.name or repr(p) for p in params if p.grad is None]
    if missing:
        raise StateError(f"no gradient for {len(missing)} trainable parameter(s), first: {missing[0]}")
    for p in params:
        buf = p.momentum_buffer
        buf *= momentum
        buf += p.grad
        p.data -= lr * buf


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad = None
