"""Shared oracles for the test suite."""

from __future__ import annotations

import itertools

import numpy as np

from dualpath.autograd import Tensor, backward
from dualpath.evaluation import lower_median


def numeric_grad(f, arrays, index, h=1e-3):
    """Central difference of scalar ``f(*arrays)`` w.r.t. ``arrays[index]``."""
    x = arrays[index]
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f(*arrays)
        x[i] = old - h
        down = f(*arrays)
        x[i] = old
        grad[i] = (up - down) / (2 * h)
    return grad


def relative_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def gradcheck(fn, arrays, h=1e-3, wrt=None):
    """Largest relative error between analytic and central-difference gradients.

    ``fn`` maps Tensors to a scalar Tensor. Every array in ``arrays`` is
    float64; ``wrt`` lists the indices that get gradients (default: all).
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    wrt = range(len(arrays)) if wrt is None else wrt
    tensors = [Tensor(a.copy(), requires_grad=i in wrt) for i, a in enumerate(arrays)]
    out = fn(*tensors)
    backward(out)

    def scalar(*xs):
        return float(fn(*[Tensor(x) for x in xs]).data)

    worst = 0.0
    for i in wrt:
        num = numeric_grad(scalar, arrays, i, h)
        worst = max(worst, relative_error(tensors[i].grad, num))
    return worst


def brute_force_metrics(sim, caption_group, ks=(1, 5, 10)):
    """Recall@K and lower median rank by explicit pairwise comparison."""
    sim = np.asarray(sim)
    g, c = sim.shape
    out = {}
    for direction in ("i2t", "t2i"):
        ranks = []
        queries = range(g) if direction == "i2t" else range(c)
        for q in queries:
            if direction == "i2t":
                scores = sim[q]
                truth = [j for j in range(c) if caption_group[j] == q]
            else:
                scores = sim[:, q]
                truth = [caption_group[q]]
            best = None
            for t in truth:
                # items placed ahead of t: strictly higher score, or equal score with a lower index
                ahead = sum(1 for j in range(len(scores)) if scores[j] > scores[t] or (scores[j] == scores[t] and j < t))
                best = ahead + 1 if best is None else min(best, ahead + 1)
            ranks.append(best)
        out[direction] = ({k: sum(r <= k for r in ranks) / len(ranks) for k in ks}, lower_median(np.array(ranks)))
    return out


def naive_conv2d(x, k, pad):
    """Nested-loop cross-correlation of [C,H,W] with [O,C,kh,kw]; pad = (top, bottom, left, right)."""
    top, bottom, left, right = pad
    xp = np.pad(x, ((0, 0), (top, bottom), (left, right)))
    o, c, kh, kw = k.shape
    ho, wo = xp.shape[1] - kh + 1, xp.shape[2] - kw + 1
    out = np.zeros((o, ho, wo))
    for oc, i, j in itertools.product(range(o), range(ho), range(wo)):
        out[oc, i, j] = np.sum(xp[:, i : i + kh, j : j + kw] * k[oc])
    return out
