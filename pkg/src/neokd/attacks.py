"""L-infinity PGD and the single / max-average / average multi-exit attacks."""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DomainError
from .rng import substream

KINDS = ("single", "max_average", "average")


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "average"
    epsilon: float = 0.3
    step_size: float = 20 / 255
    steps: int = 7
    target_exit: int = None  # 1-based, single attacks only
    random_start: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"attack kind must be one of {KINDS}, got {self.kind!r}")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")
        if self.step_size <= 0:
            raise ConfigError("step_size must be > 0")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.kind == "single" and (self.target_exit is None or self.target_exit < 1):
            raise ConfigError("single attack needs target_exit >= 1")

    def validate_for(self, num_exits):
        if self.kind == "single" and self.target_exit > num_exits:
            raise ConfigError(f"target_exit {self.target_exit} exceeds exit count {num_exits}")


@dataclass(frozen=True, eq=False)
class AdversarialBatch:
    x_adv: np.ndarray
    indices: np.ndarray
    config: AttackConfig
    chosen_exit: np.ndarray = None  # max-average only: selected candidate per sample (1-based)


def _project(x, x0, eps):
    """Clip into the eps-ball around ``x0`` and into [0, 1].

    The float32 bounds are rounded inward, so containment holds exactly
    in real arithmetic, not merely up to float32 rounding.
    """
    x0_64 = x0.astype(np.float64)
    lo64 = np.maximum(x0_64 - eps, 0.0)
    hi64 = np.minimum(x0_64 + eps, 1.0)
    lo, hi = lo64.astype(x0.dtype), hi64.astype(x0.dtype)
    lo = np.where(lo < lo64, np.nextafter(lo, x0.dtype.type(np.inf)), lo)
    hi = np.where(hi > hi64, np.nextafter(hi, x0.dtype.type(-np.inf)), hi)
    return np.clip(x, lo, hi)


def pgd(net, x, y, loss_fn, cfg, upto=None, stream=()):
    """Sign-gradient ascent on ``loss_fn(logits_list, y)`` inside the eps-ball.

    ``upto`` limits the forward pass to exits 1..upto.  ``stream`` extends
    the random-start sub-stream key so distinct callers draw distinct noise.
    """
    x0 = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    frozen = net.frozen()
    xa = x0.copy()
    if cfg.random_start and cfg.epsilon > 0:
        rng = substream(cfg.seed, "attack-start", *stream)
        noise = rng.uniform(-cfg.epsilon, cfg.epsilon, size=x0.shape).astype(np.float32)
        xa = _project(x0 + noise, x0, cfg.epsilon)
    if cfg.epsilon == 0:
        return AdversarialBatch(x0.copy(), np.arange(len(x0)), cfg)
    step = np.float32(cfg.step_size)
    for _ in range(cfg.steps):
        xt = T.Tensor(xa, requires_grad=True)
        loss = loss_fn(frozen.forward(xt, upto=upto), y)
        if not isinstance(loss, T.Tensor) or loss.ndim != 0:
            raise ContractError("attack loss must be a scalar Tensor")
        (g,) = T.grad(loss, [xt])
        xa = _project(xa + step * np.sign(g), x0, cfg.epsilon)
    return AdversarialBatch(xa, np.arange(len(x0)), cfg)


def _exit_loss(i):
    def loss(logits, y):
        return T.cross_entropy(logits[i - 1], y)

    return loss


def _average_loss(logits, y):
    total = T.cross_entropy(logits[0], y)
    for z in logits[1:]:
        total = T.add(total, T.cross_entropy(z, y))
    return T.scalar_mul(total, 1.0 / len(logits))


def single_attack(net, x, y, target_exit, cfg):
    if not 1 <= target_exit <= net.num_exits:
        raise DomainError(f"target exit {target_exit} outside 1..{net.num_exits}")
    cfg = replace(cfg, kind="single", target_exit=target_exit)
    return pgd(net, x, y, _exit_loss(target_exit), cfg, upto=target_exit, stream=(target_exit,))


def per_sample_average_loss(net, x, y):
    """Mean over exits of each sample's cross-entropy, in float64."""
    y = np.asarray(y, dtype=np.int64)
    with T.no_grad():
        logits = net.frozen().forward(np.asarray(x, dtype=np.float32))
    rows = np.arange(len(y))
    total = np.zeros(len(y))
    for z in logits:
        total -= T._log_softmax_np(z.data.astype(np.float64))[rows, y]
    return total / len(logits)


def max_average_attack(net, x, y, cfg, workers=1):
    """Per sample, keep the single-exit candidate with the largest mean exit loss.

    Ties go to the smallest exit.  Candidates are independent PGD runs on a
    frozen view, so ``workers > 1`` only changes wall time, never results.
    """
    exits = range(1, net.num_exits + 1)
    run = lambda i: single_attack(net, x, y, i, cfg).x_adv
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            candidates = list(pool.map(run, exits))
    else:
        candidates = [run(i) for i in exits]
    scores = np.stack([per_sample_average_loss(net, c, y) for c in candidates])
    best = np.argmax(scores, axis=0)
    stack = np.stack(candidates)
    x_adv = stack[best, np.arange(len(best))]
    return AdversarialBatch(x_adv, np.arange(len(best)), replace(cfg, kind="max_average"), best + 1)


def average_attack(net, x, y, cfg):
    return pgd(net, x, y, _average_loss, replace(cfg, kind="average"), stream=(0,))


def run_attack(net, x, y, cfg, workers=1):
    """Dispatch on ``cfg.kind``."""
    cfg.validate_for(net.num_exits)
    if cfg.kind == "single":
        return single_attack(net, x, y, cfg.target_exit, cfg)
    if cfg.kind == "max_average":
        return max_average_attack(net, x, y, cfg, workers=workers)
    return average_attack(net, x, y, cfg)
