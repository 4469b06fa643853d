"""Dense tensors with define-by-run reverse-mode differentiation.

Each op that touches a tensor with ``requires_grad`` records a node
carrying a monotonically increasing sequence number.  ``backward`` gathers
the nodes reachable from the loss and replays their local rules in exact
reverse recording order, so gradients are bitwise reproducible.

The backward rules live at module level (``_matmul_backward`` etc.) so a
finite-difference harness can check, and a test can mutate, each one.
"""

import contextlib
import itertools
import os
import threading

import numpy as np

from .errors import ContractError, DimensionError, DomainError, NonFiniteError

_seq = itertools.count()
_local = threading.local()
_default_dtype = np.float32
_debug = bool(os.environ.get("NEOKD_DEBUG"))


def is_grad_enabled():
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


def get_default_dtype():
    return _default_dtype


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the dtype new tensors are created with.

    Process-global: intended for gradient checking, not concurrent use.
    """
    global _default_dtype
    prev = _default_dtype
    _default_dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _default_dtype = prev


def set_debug(flag):
    """Enable or disable the per-op finiteness assertion."""
    global _debug
    _debug = bool(flag)


class _Node:
    __slots__ = ("seq", "inputs", "rule", "out", "ctx")

    def __init__(self, inputs, rule, out, ctx):
        self.seq = next(_seq)
        self.inputs = inputs
        self.rule = rule
        self.out = out
        self.ctx = ctx


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None):
        dtype = dtype or _default_dtype
        self.data = np.array(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def item(self):
        return self.data.item()

    def numpy(self):
        return self.data

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self):
        return detach(self)

    def backward(self):
        backward(self)

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: scalar_mul(self, -1.0)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise DomainError("division is only defined by a scalar")
        return scalar_mul(self, 1.0 / other)


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _wrap(value, inputs, rule, **ctx):
    """Build an op output, recording a node when any input needs grad."""
    if _debug and not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite output from {rule.__name__}")
    out = Tensor.__new__(Tensor)
    out.data = value
    out.grad = None
    out._node = None
    need = is_grad_enabled() and any(t.requires_grad for t in inputs)
    out.requires_grad = need
    if need:
        out._node = _Node(inputs, rule, value, ctx)
    return out


def detach(x):
    """Copy that never participates in the tape."""
    x = as_tensor(x)
    out = Tensor.__new__(Tensor)
    out.data = x.data.copy()
    out.requires_grad = False
    out.grad = None
    out._node = None
    return out


# ---------------------------------------------------------------- shapes


def _check_broadcast(a, b):
    """Broadcasting is limited to leading axes where one side has extent 1."""
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    n = max(len(sa), len(sb))
    pa = (1,) * (n - len(sa)) + sa
    pb = (1,) * (n - len(sb)) + sb
    diff = [i for i in range(n) if pa[i] != pb[i]]
    if diff and any(1 not in (pa[i], pb[i]) for i in range(diff[-1] + 1)):
        raise DimensionError(f"shapes {sa} and {sb} are not broadcast-compatible")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    dt = g.dtype
    g = g.astype(np.float64)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.astype(dt)


def _mm(a, b):
    # 64-bit accumulation, rounded back to the operand dtype
    dt = np.result_type(a, b)
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(dt)


# ------------------------------------------------------------ elementwise


def _add_backward(g, a, b, out):
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _wrap(a.data + b.data, (a, b), _add_backward)


def _sub_backward(g, a, b, out):
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _wrap(a.data - b.data, (a, b), _sub_backward)


def _mul_backward(g, a, b, out):
    return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _wrap(a.data * b.data, (a, b), _mul_backward)


def _scalar_mul_backward(g, a, out, c):
    return (g * np.asarray(c, dtype=g.dtype),)


def scalar_mul(a, c):
    a = as_tensor(a)
    c = float(c)

    return _wrap(a.data * np.asarray(c, dtype=a.data.dtype), (a,), _scalar_mul_backward, c=c)


def _relu_backward(g, a, out):
    return (g * (a.data > 0),)


def relu(a):
    a = as_tensor(a)
    return _wrap(np.maximum(a.data, 0), (a,), _relu_backward)


def _exp_backward(g, a, out):
    return (g * out,)


def exp(a):
    a = as_tensor(a)
    return _wrap(np.exp(a.data), (a,), _exp_backward)


def _log_backward(g, a, out):
    return (g / a.data,)


def log(a):
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        value = np.log(a.data)
    return _wrap(value, (a,), _log_backward)


# ------------------------------------------------------------- reductions


def _sum_backward(g, a, out):
    return (np.broadcast_to(g, a.shape).astype(a.data.dtype),)


def sum(a):
    """Sum of all entries as a scalar tensor."""
    a = as_tensor(a)
    return _wrap(np.asarray(a.data.astype(np.float64).sum(), dtype=a.data.dtype), (a,), _sum_backward)


def _mean_backward(g, a, out):
    n = a.data.size
    return (np.broadcast_to(g / np.asarray(n, dtype=g.dtype), a.shape).astype(a.data.dtype),)


def mean(a):
    """Mean of all entries as a scalar tensor."""
    a = as_tensor(a)
    value = np.asarray(a.data.astype(np.float64).mean(), dtype=a.data.dtype)
    return _wrap(value, (a,), _mean_backward)


# ----------------------------------------------------------------- linear


def _matmul_backward(g, a, b, out):
    return _mm(g, b.data.T), _mm(a.data.T, g)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    return _wrap(_mm(a.data, b.data), (a, b), _matmul_backward)


def _reshape_backward(g, a, out):
    return (g.reshape(a.shape),)


def reshape(a, shape):
    a = as_tensor(a)
    return _wrap(a.data.reshape(shape), (a,), _reshape_backward)


# -------------------------------------------------------------- softmaxes


def _softmax_np(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax_np(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _softmax_backward(g, a, out):
    s = out
    return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)


def softmax(a):
    """Softmax over the last axis, max-subtracted."""
    a = as_tensor(a)
    return _wrap(_softmax_np(a.data), (a,), _softmax_backward)


def _log_softmax_backward(g, a, out):
    s = np.exp(out)
    return (g - s * g.sum(axis=-1, keepdims=True),)


def log_softmax(a):
    a = as_tensor(a)
    return _wrap(_log_softmax_np(a.data), (a,), _log_softmax_backward)


# ----------------------------------------------------------------- losses


def _check_logits(logits):
    if logits.ndim != 2:
        raise DimensionError(f"logits must be B x C, got {logits.shape}")


def _cross_entropy_backward(g, logits, out, labels):
    b = logits.shape[0]
    p = _softmax_np(logits.data)
    p[np.arange(b), labels] -= 1
    return (p * (g / np.asarray(b, dtype=p.dtype)),)


def cross_entropy(logits, labels):
    """Batch mean of -log softmax(logits)[label]."""
    logits = as_tensor(logits)
    _check_logits(logits)
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    if labels.shape != (b,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise DomainError(f"labels must lie in [0, {c})")
    logp = _log_softmax_np(logits.data)
    value = np.asarray(-logp[np.arange(b), labels].astype(np.float64).mean(), dtype=logits.data.dtype)
    return _wrap(value, (logits,), _cross_entropy_backward, labels=labels)


def _soft_cross_entropy_backward(g, logits, out, target):
    b = logits.shape[0]
    p = _softmax_np(logits.data)
    grad = p * target.sum(axis=-1, keepdims=True) - target
    return (grad * (g / np.asarray(b, dtype=grad.dtype)),)


def soft_cross_entropy(logits, target_probs):
    """Batch mean of -sum_c target_c log softmax(logits)_c.

    The target never receives gradient, whether or not it is a tensor.
    """
    logits = as_tensor(logits)
    _check_logits(logits)
    target = target_probs.data if isinstance(target_probs, Tensor) else np.asarray(target_probs)
    target = target.astype(logits.data.dtype, copy=False)
    if target.shape != logits.shape:
        raise DimensionError(f"target shape {target.shape} != logits shape {logits.shape}")
    rows = target.astype(np.float64).sum(axis=-1)
    if np.any(np.abs(rows - 1.0) > 1e-4) or np.any(target < 0):
        raise DomainError("target rows must be probability vectors")
    logp = _log_softmax_np(logits.data)
    per = -(target.astype(np.float64) * logp).sum(axis=-1)
    value = np.asarray(per.mean(), dtype=logits.data.dtype)
    return _wrap(value, (logits,), _soft_cross_entropy_backward, target=target)


# --------------------------------------------------------------- backward


def _reachable(root):
    nodes, seen, stack = [], set(), [root]
    while stack:
        t = stack.pop()
        node = t._node
        if node is None or id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append((node, t))
        stack.extend(node.inputs)
    nodes.sort(key=lambda pair: pair[0].seq, reverse=True)
    return nodes


def _backprop(loss):
    if not isinstance(loss, Tensor):
        raise ContractError("backward needs a Tensor")
    if loss.data.size != 1 or loss.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node, out in _reachable(loss):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        local = node.rule(g, *node.inputs, node.out, **node.ctx)
        for t, gi in zip(node.inputs, local):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if t._node is None:
                leaves[key] = t
    if loss._node is None and loss.requires_grad:
        leaves[id(loss)] = loss
    return grads, leaves


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    grads, leaves = _backprop(loss)
    for key, leaf in leaves.items():
        g = grads[key].astype(leaf.data.dtype, copy=False)
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
        leaf.grad += g


def grad(loss, inputs):
    """Return d(loss)/d(input) arrays without touching any ``.grad``."""
    grads, _ = _backprop(loss)
    out = []
    for t in inputs:
        g = grads.get(id(t))
        out.append(np.zeros_like(t.data) if g is None else g.astype(t.data.dtype, copy=False))
    return out
