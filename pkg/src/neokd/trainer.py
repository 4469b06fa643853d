"""Adversarial training loop for multi-exit networks."""

import csv
import io
import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import attacks
from . import losses
from . import network
from . import tensor as T
from .data import BatchIterator
from .errors import ConfigError, ContractError, FormatError, NonFiniteError
from .losses import DistillConfig
from .rng import derive_seed

log = logging.getLogger(__name__)

LOSS_KINDS = ("baseline", "skd", "ard", "nkd", "eokd", "neokd")
STATE_MAGIC = b"MXTS"
STATE_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    lr: float = 0.01
    lr_decay_epochs: tuple = ()
    lr_decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    attack: attacks.AttackConfig = field(default_factory=lambda: attacks.AttackConfig("max_average", steps=7))
    loss: str = "neokd"
    distill: DistillConfig = field(default_factory=DistillConfig)
    distill_weight: float = 1.0  # SKD / ARD
    seed: int = 0
    checkpoint_every: int = 0
    probe_size: int = 256
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "lr_decay_epochs", tuple(int(e) for e in self.lr_decay_epochs))
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 0 < self.lr_decay_factor <= 1:
            raise ConfigError("lr_decay_factor must lie in (0, 1]")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    def lr_at(self, epoch):
        drops = sum(1 for e in self.lr_decay_epochs if epoch >= e)
        return self.lr * self.lr_decay_factor**drops

    def uses_eokd(self):
        return self.loss in ("eokd", "neokd") and self.effective_distill().beta > 0

    def effective_distill(self):
        d = self.distill
        if self.loss == "nkd":
            return replace(d, beta=0.0)
        if self.loss == "eokd":
            return replace(d, alpha=0.0)
        return d


# ------------------------------------------------------------- optimizer


@dataclass
class SGDState:
    velocity: list
    steps: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p.data) for p in params])


def sgd_step(params, grads, state, lr, momentum, weight_decay):
    """v <- momentum * v + (g + wd * p);  p <- p - lr * v  (in place)."""
    if len(params) != len(grads) or len(params) != len(state.velocity):
        raise ContractError("params, grads and velocity lists differ in length")
    lr, momentum, weight_decay = np.float32(lr), np.float32(momentum), np.float32(weight_decay)
    for p, g, v in zip(params, grads, state.velocity):
        if p.data.shape != g.shape or v.shape != p.data.shape:
            raise ContractError(f"shape mismatch: param {p.data.shape}, grad {g.shape}, velocity {v.shape}")
        v *= momentum
        v += g + weight_decay * p.data
        p.data -= lr * v
    state.steps += 1


# ------------------------------------------------------------------- log


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    total: float
    clean: list
    adv: list
    nkd: list
    eokd: list
    distill: list
    clean_acc: list
    adv_acc: list
    wall_time: float = 0.0


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def header(self, num_exits):
        cols = ["epoch", "lr", "loss"]
        for name in ("clean_loss", "adv_loss", "nkd", "eokd", "distill", "clean_acc", "adv_acc"):
            cols += [f"{name}_{i}" for i in range(1, num_exits + 1)]
        return cols

    def to_csv(self):
        """CSV without wall times, so reruns are byte-identical."""
        if not self.records:
            return ""
        num = len(self.records[0].clean)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header(num))
        for r in self.records:
            row = [r.epoch, repr(r.lr), repr(r.total)]
            for values in (r.clean, r.adv, r.nkd, r.eokd, r.distill, r.clean_acc, r.adv_acc):
                row += [repr(float(v)) for v in values]
            w.writerow(row)
        return buf.getvalue()

    def timing_csv(self):
        lines = ["epoch,wall_time"] + [f"{r.epoch},{r.wall_time:.3f}" for r in self.records]
        return "\n".join(lines) + "\n"

    def to_json(self):
        return json.dumps([asdict(r) for r in self.records])

    @classmethod
    def from_json(cls, text):
        return cls([EpochRecord(**d) for d in json.loads(text)])


# ----------------------------------------------------------------- train


def compute_loss(cfg, clean_logits, adv_logits, y, assignment):
    kind = cfg.loss
    if kind == "baseline":
        return losses.baseline_loss(clean_logits, adv_logits, y)
    if kind == "skd":
        return losses.skd_loss(clean_logits, adv_logits, y, cfg.distill_weight)
    if kind == "ard":
        return losses.ard_loss(clean_logits, adv_logits, y, cfg.distill_weight)
    return losses.neokd_total(clean_logits, adv_logits, y, assignment, cfg.effective_distill())


def _accuracies(net, x, y):
    with T.no_grad():
        logits = net.frozen().forward(x)
    return [float(np.mean(np.argmax(z.data, axis=1) == y)) for z in logits]


def _probe(net, probe, cfg, epoch):
    if probe is None:
        return [], []
    x, y = probe.inputs, probe.labels
    clean = _accuracies(net, x, y)
    acfg = replace(cfg.attack, seed=derive_seed(cfg.seed, "probe-attack", epoch))
    adv = attacks.run_attack(net, x, y, acfg, workers=cfg.workers).x_adv
    return clean, _accuracies(net, adv, y)


def _mean_lists(rows, num):
    if not rows:
        return [0.0] * num
    return [float(np.mean([r[i] for r in rows])) for i in range(num)]


def train_epoch(net, batches, cfg, state, epoch):
    """One pass over ``batches``; returns the per-batch loss breakdowns."""
    lr = cfg.lr_at(epoch)
    num = net.num_exits
    assignment = None
    if cfg.loss in ("eokd", "neokd"):
        assignment = losses.orthogonal_assignment(net.num_classes, num, epoch, cfg.seed)
    params = net.parameters()
    parts = []
    for b, (x, y) in enumerate(batches.batches(epoch)):
        acfg = replace(cfg.attack, seed=derive_seed(cfg.seed, "attack-start", epoch, b))
        x_adv = attacks.run_attack(net, x, y, acfg, workers=cfg.workers).x_adv
        clean_logits = net.forward(x)
        adv_logits = net.forward(x_adv)
        total, parts_b = compute_loss(cfg, clean_logits, adv_logits, y, assignment)
        if not np.isfinite(total.data):
            raise NonFiniteError(f"loss became {float(total.data)} at epoch {epoch}, batch {b}")
        net.zero_grad()
        T.backward(total)
        sgd_step(params, [p.grad for p in params], state, lr, cfg.momentum, cfg.weight_decay)
        parts.append(parts_b)
    return parts


def train(net, dataset, cfg, probe=None, state=None, start_epoch=0, log_=None, on_epoch=None):
    """Train ``net`` in place.  Returns ``(net, TrainLog, SGDState)``.

    Passing the ``state``/``start_epoch``/``log_`` restored from a training
    checkpoint continues the exact trajectory of an uninterrupted run.
    ``on_epoch(epoch, net, state, log)`` runs after each completed epoch.
    """
    num = net.num_exits
    cfg.attack.validate_for(num)
    if cfg.loss in ("nkd", "eokd", "neokd"):
        cfg.distill.validate_for(num)
    state = state or SGDState.zeros_like(net.parameters())
    log_ = log_ or TrainLog()
    batches = BatchIterator(dataset, cfg.batch_size, derive_seed(cfg.seed, "data-shuffle"))
    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.perf_counter()
        parts = train_epoch(net, batches, cfg, state, epoch)
        clean_acc, adv_acc = _probe(net, probe, cfg, epoch)
        rec = EpochRecord(
            epoch=epoch,
            lr=cfg.lr_at(epoch),
            total=float(np.mean([p.total for p in parts])),
            clean=_mean_lists([p.clean for p in parts], num),
            adv=_mean_lists([p.adv for p in parts], num),
            nkd=_mean_lists([p.nkd for p in parts if p.nkd], num),
            eokd=_mean_lists([p.eokd for p in parts if p.eokd], num),
            distill=_mean_lists([p.distill for p in parts if p.distill], num),
            clean_acc=clean_acc or [0.0] * num,
            adv_acc=adv_acc or [0.0] * num,
            wall_time=time.perf_counter() - t0,
        )
        log_.records.append(rec)
        log.info("epoch %d lr %.4g loss %.4f adv_acc %s", epoch, rec.lr, rec.total, rec.adv_acc)
        if on_epoch is not None:
            on_epoch(epoch, net, state, log_)
    return net, log_, state


# ------------------------------------------------------ training state


def checkpoint_bytes(net, state, epochs_completed, log_, config_text=""):
    meta = json.dumps(
        {"epochs_completed": epochs_completed, "sgd_steps": state.steps, "config": config_text},
        sort_keys=True,
    )
    blob = network.to_bytes(net)
    velocity = {f"velocity.{name}": v for (name, _), v in zip(net.named_parameters(), state.velocity)}
    return b"".join(
        [
            STATE_MAGIC,
            struct.pack("<H", STATE_VERSION),
            struct.pack("<Q", len(blob)),
            blob,
            network._pack_text(meta),
            network._pack_text(log_.to_json()),
            network.pack_arrays(velocity),
        ]
    )


def save_checkpoint(path, net, state, epochs_completed, log_, config_text=""):
    network.atomic_write(path, checkpoint_bytes(net, state, epochs_completed, log_, config_text))


def load_checkpoint(path):
    """Return ``(net, state, epochs_completed, log, config_text)``."""
    with open(path, "rb") as f:
        buf = f.read()
    r = network._Reader(buf, str(path))
    if r.take(4, "magic") != STATE_MAGIC:
        raise FormatError("bad magic, not a training checkpoint", r.path, 0)
    (version,) = r.unpack("<H", "version")
    if version != STATE_VERSION:
        raise FormatError(f"unsupported training checkpoint version {version}", r.path, 4)
    (n,) = r.unpack("<Q", "network length")
    at = r.pos
    inner = network._Reader(r.take(n, "network"), r.path)
    net = network.from_reader(inner)
    if not inner.at_end():
        raise FormatError("network section has trailing bytes", r.path, at + inner.pos)
    at = r.pos
    try:
        meta = json.loads(r.text("state"))
        log_ = TrainLog.from_json(r.text("log"))
    except (ValueError, TypeError, KeyError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"corrupt state section: {exc}", r.path, at) from None
    arrays = network.read_arrays(r, len(net.params))
    velocity = []
    for name, p in net.named_parameters():
        v = arrays.get(f"velocity.{name}")
        if v is None or v.shape != p.data.shape:
            raise FormatError(f"missing or misshapen velocity for {name}", r.path, r.pos)
        velocity.append(v)
    if not r.at_end():
        raise FormatError("trailing bytes after velocity records", r.path, r.pos)
    return net, SGDState(velocity, meta["sgd_steps"]), meta["epochs_completed"], log_, meta["config"]
