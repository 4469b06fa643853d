"""Shared builders for small hand-wired networks."""

import numpy as np

from neokd import network
from neokd import tensor as T
from neokd.network import NetworkSpec


def set_params(net, **arrays):
    for name, value in arrays.items():
        net.params[name].data[...] = np.asarray(value, dtype=np.float32)
    return net


def random_net(widths=((8,), (8,), (8,)), dim=6, classes=4, seed=0):
    return network.init(NetworkSpec(dim, widths, classes, seed=seed))


def random_batch(n, dim, classes, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(0, 1, (n, dim)).astype(np.float32), rng.integers(0, classes, n)


def random_logits(num_exits, n, classes, seed=0, requires_grad=False):
    rng = np.random.default_rng(seed)
    return [T.Tensor(rng.standard_normal((n, classes)), requires_grad=requires_grad) for _ in range(num_exits)]
