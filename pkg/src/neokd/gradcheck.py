"""Central finite-difference checks of every differentiable op.

All checks run in float64; non-scalar op outputs are contracted with a
fixed random weight tensor so every output entry influences the loss.
"""

import numpy as np

from . import network
from . import tensor as T

TOLERANCE = 1e-4


def numeric_grad(f, arrays, h=1e-6):
    """Central differences of scalar ``f(*arrays)`` w.r.t. each array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = a[idx]
            a[idx] = old + h
            up = f(*arrays)
            a[idx] = old - h
            down = f(*arrays)
            a[idx] = old
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def relative_error(analytic, numeric):
    num = np.linalg.norm(analytic - numeric)
    den = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
    return float(num / den)


def check(fn, arrays, h=1e-6):
    """Max relative error between backward and finite differences.

    ``fn`` maps Tensors to a scalar Tensor.
    """
    with T.default_dtype(np.float64):
        arrays = [np.array(a, dtype=np.float64) for a in arrays]
        leaves = [T.Tensor(a, requires_grad=True) for a in arrays]
        T.backward(fn(*leaves))
        analytic = [t.grad for t in leaves]

        def f(*xs):
            with T.no_grad():
                return float(fn(*[T.Tensor(x) for x in xs]).data)

        numeric = numeric_grad(f, arrays, h)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))


def _weighted(out, rng):
    w = T.Tensor(rng.standard_normal(out.shape))
    return T.sum(T.mul(out, w))


def op_cases(rng):
    """(name, fn, input arrays) for each differentiable op."""
    wsum = lambda out: _weighted(out, np.random.default_rng(7))
    away = lambda shape: rng.uniform(0.2, 1.0, shape) * rng.choice([-1, 1], shape)
    labels = rng.integers(0, 3, size=4)
    target = rng.dirichlet(np.ones(3), size=4)
    return [
        ("matmul", lambda a, b: wsum(T.matmul(a, b)), [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))]),
        ("add", lambda a, b: wsum(T.add(a, b)), [rng.standard_normal((3, 4)), rng.standard_normal((4,))]),
        ("sub", lambda a, b: wsum(T.sub(a, b)), [rng.standard_normal((3, 4)), rng.standard_normal((1, 4))]),
        ("mul", lambda a, b: wsum(T.mul(a, b)), [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))]),
        ("scalar_mul", lambda a: wsum(T.scalar_mul(a, -2.5)), [rng.standard_normal((3, 4))]),
        ("relu", lambda a: wsum(T.relu(a)), [away((3, 4))]),
        ("exp", lambda a: wsum(T.exp(a)), [rng.standard_normal((3, 4))]),
        ("log", lambda a: wsum(T.log(a)), [rng.uniform(0.5, 2.0, (3, 4))]),
        ("sum", lambda a: T.scalar_mul(T.sum(a), 1.5), [rng.standard_normal((3, 4))]),
        ("mean", lambda a: T.scalar_mul(T.mean(a), 1.5), [rng.standard_normal((3, 4))]),
        ("reshape", lambda a: wsum(T.reshape(a, (4, 3))), [rng.standard_normal((3, 4))]),
        ("softmax", lambda a: wsum(T.softmax(a)), [rng.standard_normal((3, 4))]),
        ("log_softmax", lambda a: wsum(T.log_softmax(a)), [rng.standard_normal((3, 4))]),
        ("cross_entropy", lambda a: T.cross_entropy(a, labels), [rng.standard_normal((4, 3))]),
        ("soft_cross_entropy", lambda a: T.soft_cross_entropy(a, target), [rng.standard_normal((4, 3))]),
    ]


def network_case(rng, num_exits=3):
    """Sum of per-exit cross-entropies of a random 3-exit net vs every parameter."""
    spec = network.NetworkSpec(6, ((5,), (4, 4), (3,))[:num_exits], 3, seed=int(rng.integers(1 << 31)))
    net = network.init(spec).astype(np.float64)
    names = [n for n, _ in net.named_parameters()]
    for n in names:
        if n.endswith(".bias"):
            net.params[n].data[...] = rng.standard_normal(net.params[n].shape) * 0.1
    x = rng.uniform(0, 1, (5, 6))
    y = rng.integers(0, 3, size=5)

    def fn(*params):
        sub = network.MultiExitNetwork(spec, dict(zip(names, params)))
        total = None
        for z in sub.forward(T.Tensor(x)):
            ce = T.cross_entropy(z, y)
            total = ce if total is None else T.add(total, ce)
        return total

    return "network(3 exits)", fn, [net.params[n].data.copy() for n in names]


def run_suite(seed=0):
    """Return ``[(name, max_rel_error)]`` for every op and the 3-exit net."""
    rng = np.random.default_rng(seed)
    rows = []
    for name, fn, arrays in op_cases(rng) + [network_case(rng)]:
        rows.append((name, check(fn, arrays)))
    return rows
