"""Training objectives for adversarial training of multi-exit networks.

Students enter every distillation term as logits (through their own
softmax inside ``soft_cross_entropy``); teachers are softmax rows built
from detached clean logits, so no gradient ever reaches a teacher.
Exit numbers in the public API are 1-based.
"""

from contextlib import nullcontext
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .rng import substream

ENSEMBLES = ("neighbors", "none", "all")


@dataclass(frozen=True)
class DistillConfig:
    alpha: float = 3.0  # NKD weight
    beta: float = 1.0  # EOKD weight
    gamma: tuple = (1.0, 1.0, 1.0)
    nkd_ensemble: str = "neighbors"

    def __post_init__(self):
        object.__setattr__(self, "gamma", tuple(float(g) for g in self.gamma))
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be >= 0")
        if any(g <= 0 for g in self.gamma):
            raise ConfigError("every gamma must be > 0")
        if self.nkd_ensemble not in ENSEMBLES:
            raise ConfigError(f"nkd_ensemble must be one of {ENSEMBLES}")

    def validate_for(self, num_exits):
        if len(self.gamma) != num_exits:
            raise ConfigError(f"gamma has {len(self.gamma)} entries but the network has {num_exits} exits")


@dataclass(frozen=True, eq=False)
class TeacherBatch:
    rows: list  # per exit, B x C probabilities
    kind: str  # "nkd", "eokd", "skd", "ard"


@dataclass
class LossBreakdown:
    """Per-exit batch-mean values of each loss component (floats)."""

    clean: list
    adv: list
    nkd: list = field(default_factory=list)
    eokd: list = field(default_factory=list)
    distill: list = field(default_factory=list)
    total: float = 0.0


def probs_of(logits):
    """Detached softmax rows of each logit tensor."""
    return [T._softmax_np(T.as_tensor(z).data) for z in logits]


# ---------------------------------------------------------------- NKD


def nkd_teacher(clean_probs, exit_number, ensemble="neighbors"):
    """Mean clean prediction over the neighbors of ``exit_number``."""
    num = len(clean_probs)
    i = exit_number - 1
    if ensemble == "none":
        members = [i]
    elif ensemble == "all":
        members = list(range(num))
    else:
        members = list(range(max(i - 1, 0), min(i + 2, num)))
    rows = np.zeros(np.shape(clean_probs[0]), dtype=np.float64)
    for k in members:
        rows += np.asarray(clean_probs[k], dtype=np.float64)
    return (rows / len(members)).astype(np.float32)


def nkd_teachers(clean_probs, ensemble="neighbors"):
    return TeacherBatch([nkd_teacher(clean_probs, i, ensemble) for i in range(1, len(clean_probs) + 1)], "nkd")


def nkd_loss(adv_logits, clean_probs, ensemble="neighbors"):
    teachers = nkd_teachers(clean_probs, ensemble)
    return [T.soft_cross_entropy(z, t) for z, t in zip(adv_logits, teachers.rows)]


# --------------------------------------------------------------- EOKD


@dataclass(frozen=True, eq=False)
class OrthogonalAssignment:
    """One class permutation per epoch, viewed per ground-truth label.

    For label ``y`` the permutation minus ``y`` is cut into consecutive
    chunks of ``(C - 1) // L`` classes, chunk ``i`` going to exit ``i``;
    the ``(C - 1) % L`` tail classes go to no exit.
    """

    epoch: int
    permutation: np.ndarray
    num_exits: int

    @property
    def num_classes(self):
        return len(self.permutation)

    @property
    def per_exit(self):
        return (self.num_classes - 1) // self.num_exits

    def subsets(self, y):
        rest = [int(c) for c in self.permutation if c != y]
        k = self.per_exit
        return [tuple(rest[i * k : (i + 1) * k]) for i in range(self.num_exits)]

    def unassigned(self, y):
        rest = [int(c) for c in self.permutation if c != y]
        return tuple(rest[self.num_exits * self.per_exit :])

    def keep_table(self):
        """Boolean C x L x C: keep[y, i, c] for class c at exit i+1 given label y."""
        c, l = self.num_classes, self.num_exits
        keep = np.zeros((c, l, c), dtype=bool)
        for y in range(c):
            keep[y, :, y] = True
            for i, s in enumerate(self.subsets(y)):
                keep[y, i, list(s)] = True
        return keep


def orthogonal_assignment(num_classes, num_exits, epoch, seed):
    if num_classes < 2 or num_exits < 1:
        raise ConfigError("need num_classes >= 2 and num_exits >= 1")
    perm = substream(seed, "assignment", epoch).permutation(num_classes)
    return OrthogonalAssignment(int(epoch), perm, int(num_exits))


def eokd_target(clean_probs_i, y, assignment, exit_number, keep=None):
    """Mask to {y} plus the exit's class subset, then renormalize."""
    p = np.asarray(clean_probs_i, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if keep is None:
        keep = assignment.keep_table()
    mask = keep[y, exit_number - 1]
    kept = np.where(mask, p, 0.0)
    mass = kept.sum(axis=1, keepdims=True)
    onehot = np.zeros_like(p)
    onehot[np.arange(len(y)), y] = 1.0
    safe = np.where(mass < 1e-12, 1.0, mass)
    target = np.where(mass < 1e-12, onehot, kept / safe)
    return target.astype(np.float32)


def eokd_teachers(clean_probs, y, assignment):
    keep = assignment.keep_table()
    return TeacherBatch(
        [eokd_target(p, y, assignment, i, keep) for i, p in enumerate(clean_probs, start=1)], "eokd"
    )


def eokd_loss(adv_logits, clean_probs, y, assignment):
    teachers = eokd_teachers(clean_probs, y, assignment)
    return [T.soft_cross_entropy(z, t) for z, t in zip(adv_logits, teachers.rows)]


# -------------------------------------------------------------- totals


def _sum(terms):
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return total


def _values(terms):
    return [float(t.data) for t in terms]


def _check_lengths(clean_logits, adv_logits):
    if len(clean_logits) != len(adv_logits):
        raise ConfigError("clean and adversarial logit lists differ in length")


def base_terms(clean_logits, adv_logits, y):
    _check_lengths(clean_logits, adv_logits)
    clean = [T.cross_entropy(z, y) for z in clean_logits]
    adv = [T.cross_entropy(z, y) for z in adv_logits]
    return clean, adv


def baseline_loss(clean_logits, adv_logits, y):
    """Sum over exits of clean plus adversarial cross-entropy."""
    clean, adv = base_terms(clean_logits, adv_logits, y)
    terms = [T.add(c, a) for c, a in zip(clean, adv)]
    total = _sum(terms)
    return total, LossBreakdown(_values(clean), _values(adv), total=float(total.data))


def neokd_total(clean_logits, adv_logits, y, assignment, dcfg):
    """Baseline plus gamma_i * (alpha * NKD_i + beta * EOKD_i) per exit.

    A zero weight drops its term from the graph (its value is still
    reported), so alpha = beta = 0 reproduces the baseline exactly.
    """
    _check_lengths(clean_logits, adv_logits)
    num = len(clean_logits)
    dcfg.validate_for(num)
    clean, adv = base_terms(clean_logits, adv_logits, y)
    probs = probs_of(clean_logits)
    with T.no_grad() if dcfg.alpha == 0 else nullcontext():
        nkd = nkd_loss(adv_logits, probs, dcfg.nkd_ensemble)
    if assignment is not None:
        with T.no_grad() if dcfg.beta == 0 else nullcontext():
            eokd = eokd_loss(adv_logits, probs, y, assignment)
    elif dcfg.beta == 0:
        eokd = None
    else:
        raise ConfigError("EOKD needs an orthogonal assignment")
    terms = []
    for i in range(num):
        term = T.add(clean[i], adv[i])
        kd = None
        if dcfg.alpha != 0:
            kd = T.scalar_mul(nkd[i], dcfg.alpha)
        if dcfg.beta != 0:
            e = T.scalar_mul(eokd[i], dcfg.beta)
            kd = e if kd is None else T.add(kd, e)
        if kd is not None:
            term = T.add(term, T.scalar_mul(kd, dcfg.gamma[i]))
        terms.append(term)
    total = _sum(terms)
    return total, LossBreakdown(
        _values(clean),
        _values(adv),
        _values(nkd),
        _values(eokd) if eokd is not None else [0.0] * num,
        total=float(total.data),
    )


def skd_loss(clean_logits, adv_logits, y, weight=1.0):
    """Baseline plus last-exit self-distillation within each stream."""
    clean, adv = base_terms(clean_logits, adv_logits, y)
    num = len(clean_logits)
    last_clean = probs_of([clean_logits[-1]])[0]
    last_adv = probs_of([adv_logits[-1]])[0]
    distill = []
    for i in range(num - 1):
        distill.append(
            T.add(T.soft_cross_entropy(clean_logits[i], last_clean), T.soft_cross_entropy(adv_logits[i], last_adv))
        )
    terms = [T.add(c, a) for c, a in zip(clean, adv)]
    for i, d in enumerate(distill):
        terms[i] = T.add(terms[i], T.scalar_mul(d, weight))
    total = _sum(terms)
    values = _values(distill) + [0.0]
    return total, LossBreakdown(_values(clean), _values(adv), distill=values, total=float(total.data))


def ard_loss(clean_logits, adv_logits, y, weight=1.0):
    """Baseline plus clean-last-exit to adversarial-last-exit distillation."""
    clean, adv = base_terms(clean_logits, adv_logits, y)
    num = len(clean_logits)
    teacher = probs_of([clean_logits[-1]])[0]
    d = T.soft_cross_entropy(adv_logits[-1], teacher)
    terms = [T.add(c, a) for c, a in zip(clean, adv)]
    terms[-1] = T.add(terms[-1], T.scalar_mul(d, weight))
    total = _sum(terms)
    values = [0.0] * (num - 1) + [float(d.data)]
    return total, LossBreakdown(_values(clean), _values(adv), distill=values, total=float(total.data))
