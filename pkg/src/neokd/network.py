"""Fully-connected multi-exit network and its binary checkpoint format.

Block ``i`` is a stack of affine+relu layers; classifier ``i`` maps the
block-``i`` features to class logits.  Exit ``i`` (1-based) therefore
depends only on blocks 1..i and classifier i.
"""

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, FormatError
from .rng import substream

MAGIC = b"MXNN"
VERSION = 1


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    block_widths: tuple  # one tuple of layer widths per block
    num_classes: int
    seed: int = 0

    def __post_init__(self):
        widths = tuple(tuple(int(w) for w in b) for b in self.block_widths)
        object.__setattr__(self, "block_widths", widths)
        if self.input_dim < 1:
            raise ConfigError("input_dim must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if not widths:
            raise ConfigError("need at least one block")
        for b in widths:
            if not b or min(b) < 1:
                raise ConfigError(f"every block needs >= 1 layer of width >= 1, got {b}")

    @property
    def num_exits(self):
        return len(self.block_widths)

    def to_json(self):
        return json.dumps(
            {
                "input_dim": self.input_dim,
                "block_widths": [list(b) for b in self.block_widths],
                "num_classes": self.num_classes,
                "seed": self.seed,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(d["input_dim"], tuple(tuple(b) for b in d["block_widths"]), d["num_classes"], d["seed"])

    def layer_shapes(self):
        """Yield ``(name, fan_in, fan_out)`` for every affine layer, in order."""
        fan_in = self.input_dim
        for i, widths in enumerate(self.block_widths, start=1):
            for j, w in enumerate(widths, start=1):
                yield f"block{i}.layer{j}", fan_in, w
                fan_in = w
            yield f"exit{i}", fan_in, self.num_classes


@dataclass(frozen=True)
class FlopsProfile:
    """Cumulative cost of exiting at each exit (blocks 1..i + classifier i)."""

    cumulative: tuple
    block: tuple = field(default=())
    classifier: tuple = field(default=())

    def __post_init__(self):
        c = self.cumulative
        if any(b <= a for a, b in zip(c, c[1:])):
            raise ConfigError(f"exit costs must be strictly increasing, got {c}")

    def __getitem__(self, exit_number):
        return self.cumulative[exit_number - 1]

    def __len__(self):
        return len(self.cumulative)


def count_flops(spec):
    # 2 * fan_in * fan_out per affine layer, biases ignored
    block, classifier = [], []
    fan_in = spec.input_dim
    for widths in spec.block_widths:
        cost = 0
        for w in widths:
            cost += 2 * fan_in * w
            fan_in = w
        block.append(cost)
        classifier.append(2 * fan_in * spec.num_classes)
    cumulative = []
    trunk = 0
    for b, c in zip(block, classifier):
        trunk += b
        cumulative.append(trunk + c)
    return FlopsProfile(tuple(cumulative), tuple(block), tuple(classifier))


class MultiExitNetwork:
    def __init__(self, spec, params):
        self.spec = spec
        self.params = params  # dict name -> Tensor, in spec.layer_shapes() order
        self._layers = []
        for name, _, _ in spec.layer_shapes():
            self._layers.append((name, params[name + ".weight"], params[name + ".bias"]))

    @property
    def num_exits(self):
        return self.spec.num_exits

    @property
    def num_classes(self):
        return self.spec.num_classes

    def parameters(self):
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def forward(self, x, upto=None):
        """Return the logits of exits 1..upto (all exits by default)."""
        x = T.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.spec.input_dim:
            raise DimensionError(f"expected B x {self.spec.input_dim} input, got {x.shape}")
        upto = self.num_exits if upto is None else upto
        if not 1 <= upto <= self.num_exits:
            raise DimensionError(f"upto must lie in 1..{self.num_exits}")
        h = x
        exits = []
        for name, w, b in self._layers:
            if name.startswith("exit"):
                exits.append(T.add(T.matmul(h, w), b))
                if len(exits) == upto:
                    break
            else:
                h = T.relu(T.add(T.matmul(h, w), b))
        return exits

    __call__ = forward

    def frozen(self):
        """Gradient-free view sharing parameter storage (for attacks)."""
        params = {}
        for name, p in self.params.items():
            q = T.Tensor.__new__(T.Tensor)
            q.data, q.requires_grad, q.grad, q._node = p.data, False, None, None
            params[name] = q
        return MultiExitNetwork(self.spec, params)

    def copy(self):
        return MultiExitNetwork(
            self.spec, {n: T.Tensor(p.data.copy(), requires_grad=p.requires_grad, dtype=p.data.dtype) for n, p in self.params.items()}
        )

    def astype(self, dtype):
        return MultiExitNetwork(
            self.spec, {n: T.Tensor(p.data, requires_grad=p.requires_grad, dtype=dtype) for n, p in self.params.items()}
        )

    def state_arrays(self):
        return {n: p.data for n, p in self.params.items()}


def forward_all_exits(net, x):
    return net.forward(x)


def init(spec, seed=None):
    """Glorot-uniform weights, zero biases; deterministic in ``seed``."""
    rng = substream(spec.seed if seed is None else seed, "init")
    params = {}
    for name, fan_in, fan_out in spec.layer_shapes():
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(np.float32)
        params[name + ".weight"] = T.Tensor(w, requires_grad=True)
        params[name + ".bias"] = T.Tensor(np.zeros(fan_out, np.float32), requires_grad=True)
    return MultiExitNetwork(spec, params)


# ------------------------------------------------------------ persistence


def _pack_text(text):
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def pack_arrays(arrays):
    """Serialize ``{name: float32 array}`` as name-length-prefixed records."""
    out = []
    for name, a in arrays.items():
        a = np.ascontiguousarray(a, dtype="<f4")
        out.append(_pack_text(name))
        out.append(struct.pack("<B", a.ndim))
        out.append(struct.pack(f"<{a.ndim}I", *a.shape))
        out.append(a.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated while reading {what}", self.path, self.pos)
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def text(self, what):
        (n,) = self.unpack("<I", what + " length")
        start = self.pos
        raw = self.take(n, what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{what} is not UTF-8", self.path, start) from None

    def at_end(self):
        return self.pos == len(self.buf)


def read_arrays(reader, count):
    arrays = {}
    for _ in range(count):
        name = reader.text("parameter name")
        (rank,) = reader.unpack("<B", "rank")
        shape = reader.unpack(f"<{rank}I", "extents")
        n = int(np.prod(shape, dtype=np.int64))
        raw = reader.take(4 * n, f"data of {name}")
        arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    return arrays


def to_bytes(net):
    return (
        MAGIC
        + struct.pack("<H", VERSION)
        + _pack_text(net.spec.to_json())
        + pack_arrays(net.state_arrays())
    )


def from_reader(reader):
    start = reader.pos
    if reader.take(4, "magic") != MAGIC:
        raise FormatError("bad magic, not an MXNN checkpoint", reader.path, start)
    (version,) = reader.unpack("<H", "version")
    if version != VERSION:
        raise FormatError(f"unsupported MXNN version {version}", reader.path, reader.pos - 2)
    spec_at = reader.pos
    try:
        spec = NetworkSpec.from_json(reader.text("spec"))
    except (ValueError, KeyError, TypeError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"invalid spec record: {exc}", reader.path, spec_at) from None
    expected = [(n + s, shape) for n, fi, fo in spec.layer_shapes() for s, shape in ((".weight", (fi, fo)), (".bias", (fo,)))]
    params = {}
    for name, shape in expected:
        at = reader.pos
        arrays = read_arrays(reader, 1)
        (got_name, a), = arrays.items()
        if got_name != name or a.shape != shape:
            raise FormatError(f"expected parameter {name}{shape}, found {got_name}{a.shape}", reader.path, at)
        params[name] = T.Tensor(a, requires_grad=True)
    return MultiExitNetwork(spec, params)


def atomic_write(path, payload):
    path = os.fspath(path)
    tmp = path + ".tmp"
    mode = "wb" if isinstance(payload, bytes) else "w"
    kw = {} if mode == "wb" else {"encoding": "utf-8", "newline": "\n"}
    with open(tmp, mode, **kw) as f:
        f.write(payload)
    os.replace(tmp, path)


def save(net, path):
    atomic_write(path, to_bytes(net))


def load(path):
    with open(path, "rb") as f:
        buf = f.read()
    reader = _Reader(buf, os.fspath(path))
    net = from_reader(reader)
    if not reader.at_end():
        raise FormatError("trailing bytes after last parameter", reader.path, reader.pos)
    return net
