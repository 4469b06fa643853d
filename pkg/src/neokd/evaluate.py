"""Anytime accuracy, budgeted (early-exit) prediction and transferability maps.

Confidence is the maximum softmax probability, computed in float64 from
the network's float32 logits.
"""

import csv
import io
import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import attacks
from . import tensor as T
from .errors import ConfigError
from .network import count_flops


def exit_logits(net, x, batch_size=1000):
    """Per-exit float32 logits for ``x``, computed in batches without a tape."""
    frozen = net.frozen()
    chunks = [[] for _ in range(net.num_exits)]
    with T.no_grad():
        for s in range(0, len(x), batch_size):
            for i, z in enumerate(frozen.forward(np.asarray(x[s : s + batch_size], dtype=np.float32))):
                chunks[i].append(z.data)
    return [np.concatenate(c) for c in chunks]


def exit_probs(net, x, batch_size=1000):
    return [T._softmax_np(z.astype(np.float64)) for z in exit_logits(net, x, batch_size)]


def attacked_inputs(net, ds, cfg, batch_size=500, workers=1):
    if cfg is None:
        return ds.inputs
    out = []
    for s in range(0, len(ds), batch_size):
        bcfg = replace(cfg, seed=cfg.seed + s)
        out.append(attacks.run_attack(net, ds.inputs[s : s + batch_size], ds.labels[s : s + batch_size], bcfg, workers).x_adv)
    return np.concatenate(out)


def topk_correct(logits, y, k):
    # stable ordering: among equal logits the lower class index ranks first
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return np.any(order == np.asarray(y)[:, None], axis=1)


# --------------------------------------------------------------- anytime


@dataclass
class AnytimeReport:
    top1: dict  # attack name -> per-exit accuracy
    top5: dict = field(default_factory=dict)  # only when C > 5

    def average(self, attack, metric="top1"):
        return float(np.mean(getattr(self, metric)[attack]))

    def rows(self):
        for metric in ("top1", "top5"):
            for attack, values in getattr(self, metric).items():
                for i, v in enumerate(values, start=1):
                    yield i, metric, attack, v
                yield "avg", metric, attack, float(np.mean(values))

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["exit", "metric", "attack", "value"])
        for exit_, metric, attack, v in self.rows():
            w.writerow([exit_, metric, attack, repr(float(v))])
        return buf.getvalue()

    def summary(self):
        return {
            metric: {a: {"per_exit": v, "average": float(np.mean(v))} for a, v in getattr(self, metric).items()}
            for metric in ("top1", "top5")
            if getattr(self, metric)
        }


def eval_anytime(net, ds, attack_configs, batch_size=500, workers=1):
    """``attack_configs`` maps a report name to an AttackConfig (None = clean)."""
    report = AnytimeReport({}, {})
    for name, cfg in attack_configs.items():
        x = attacked_inputs(net, ds, cfg, batch_size, workers)
        logits = exit_logits(net, x)
        report.top1[name] = [float(np.mean(np.argmax(z, axis=1) == ds.labels)) for z in logits]
        if net.num_classes > 5:
            report.top5[name] = [float(np.mean(topk_correct(z, ds.labels, 5))) for z in logits]
    return report


# -------------------------------------------------------------- budgeted


@dataclass
class BudgetProfile:
    thresholds: list  # t_1..t_L, t_L = -inf
    allocation: tuple
    val_exit_counts: list
    accuracy: float = float("nan")
    mean_flops: float = float("nan")


def calibrate_from_probs(probs, labels, allocation):
    """Sequential threshold calibration on precomputed per-exit probabilities.

    At exit i the remaining samples are sorted by confidence (descending,
    stable); the n_i-th largest becomes t_i and those n_i samples leave.
    """
    num = len(probs)
    n_val = len(labels)
    allocation = tuple(int(a) for a in allocation)
    if len(allocation) != num or min(allocation) < 0 or sum(allocation) != n_val:
        raise ConfigError(f"allocation {allocation} must have {num} non-negative entries summing to {n_val}")
    remaining = np.arange(n_val)
    thresholds, counts = [], []
    exit_of = np.full(n_val, num, dtype=np.int64)
    for i in range(num - 1):
        n = allocation[i]
        conf = probs[i][remaining].max(axis=1)
        order = np.argsort(-conf, kind="stable")
        if n == 0:
            thresholds.append(float("inf"))
        else:
            thresholds.append(float(conf[order[n - 1]]))
        exit_of[remaining[order[:n]]] = i + 1
        counts.append(n)
        remaining = remaining[np.sort(order[n:])]
    thresholds.append(float("-inf"))
    counts.append(len(remaining))
    correct = np.zeros(n_val, dtype=bool)
    for i in range(num):
        sel = exit_of == i + 1
        correct[sel] = np.argmax(probs[i][sel], axis=1) == labels[sel]
    return BudgetProfile(thresholds, allocation, counts, float(np.mean(correct))), exit_of


def budgeted_predict(probs, labels, thresholds, flops, ensemble=False):
    """Walk exits 1..L; leave at the first exit whose confidence >= t_i.

    Returns ``(accuracy, mean_flops, exit_of)``.
    """
    num = len(probs)
    n = len(labels)
    exit_of = np.full(n, num, dtype=np.int64)
    undecided = np.ones(n, dtype=bool)
    for i in range(num - 1):
        leave = undecided & (probs[i].max(axis=1) >= thresholds[i])
        exit_of[leave] = i + 1
        undecided &= ~leave
    preds = np.empty(n, dtype=np.int64)
    running = np.zeros_like(probs[0])
    for i in range(num):
        running = running + probs[i]
        sel = exit_of == i + 1
        source = running / (i + 1) if ensemble else probs[i]
        preds[sel] = np.argmax(source[sel], axis=1)
    cost = np.asarray([flops[i] for i in range(1, num + 1)], dtype=np.float64)
    return float(np.mean(preds == labels)), float(np.mean(cost[exit_of - 1])), exit_of


def calibrate_thresholds(net, val, allocation):
    profile, exit_of = calibrate_from_probs(exit_probs(net, val.inputs), val.labels, allocation)
    flops = count_flops(net.spec)
    profile.mean_flops = float(np.mean([flops[int(e)] for e in exit_of]))
    return profile


@dataclass
class BudgetResult:
    accuracy: float
    mean_flops: float
    exit_counts: list


def eval_budgeted(net, ds, profile, attack=None, ensemble=False, workers=1):
    x = attacked_inputs(net, ds, attack, workers=workers)
    probs = exit_probs(net, x)
    acc, mf, exit_of = budgeted_predict(probs, ds.labels, profile.thresholds, count_flops(net.spec), ensemble)
    counts = [int(np.sum(exit_of == i)) for i in range(1, net.num_exits + 1)]
    return BudgetResult(acc, mf, counts)


def allocation_sweep(n_val, num_exits, count=100):
    """``count`` allocations with the exit distribution shifting monotonically later.

    Allocation k follows a truncated geometric distribution over exits
    whose log-ratio rises linearly; the first allocation sends every
    sample to exit 1 and the last every sample to exit L.  Cumulative
    counts are rounded, so every cumulative count is non-increasing along
    the sweep.
    """
    if count < 2:
        raise ConfigError("a sweep needs at least two allocations")
    if num_exits == 1:
        return [(n_val,)] * count
    out = []
    for k in range(count):
        if k == 0:
            cum = np.full(num_exits, n_val)
        elif k == count - 1:
            cum = np.concatenate([np.zeros(num_exits - 1, dtype=np.int64), [n_val]])
        else:
            r = np.exp(np.linspace(-6.0, 6.0, count)[k])
            w = r ** np.arange(num_exits)
            cum = np.rint(np.cumsum(w) / w.sum() * n_val).astype(np.int64)
            cum[-1] = n_val
        cum = np.asarray(cum, dtype=np.int64)
        out.append(tuple(int(v) for v in np.diff(np.concatenate([[0], cum]))))
    return out


def budget_frontier(net, val, test, allocations, attack=None, ensemble=False, workers=1):
    """One row per allocation: calibration on ``val``, evaluation on ``test``."""
    val_probs = exit_probs(net, val.inputs)
    x = attacked_inputs(net, test, attack, workers=workers)
    test_probs = exit_probs(net, x)
    flops = count_flops(net.spec)
    rows = []
    for alloc in allocations:
        profile, val_exit = calibrate_from_probs(val_probs, val.labels, alloc)
        profile.mean_flops = float(np.mean([flops[int(e)] for e in val_exit]))
        acc, mf, exit_of = budgeted_predict(test_probs, test.labels, profile.thresholds, flops, ensemble)
        rows.append(
            {
                "allocation": alloc,
                "thresholds": profile.thresholds,
                "val_exit_counts": profile.val_exit_counts,
                "val_accuracy": profile.accuracy,
                "val_mean_flops": profile.mean_flops,
                "test_accuracy": acc,
                "test_mean_flops": mf,
                "test_exit_counts": [int(np.sum(exit_of == i)) for i in range(1, net.num_exits + 1)],
            }
        )
    return rows


def frontier_csv(rows, num_exits):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["row"]
    header += [f"n_{i}" for i in range(1, num_exits + 1)]
    header += [f"t_{i}" for i in range(1, num_exits + 1)]
    header += ["val_accuracy", "val_mean_flops", "test_accuracy", "test_mean_flops"]
    header += [f"test_exits_{i}" for i in range(1, num_exits + 1)]
    w.writerow(header)
    for k, r in enumerate(rows):
        w.writerow(
            [k]
            + list(r["allocation"])
            + [repr(t) for t in r["thresholds"]]
            + [repr(r["val_accuracy"]), repr(r["val_mean_flops"]), repr(r["test_accuracy"]), repr(r["test_mean_flops"])]
            + r["test_exit_counts"]
        )
    return buf.getvalue()


# ------------------------------------------------------- transferability


@dataclass
class TransferabilityMap:
    matrix: np.ndarray  # L x L, row = target exit, column = measured exit; None if empty
    off_diagonal_mean: float
    eligible: int
    status: str = "ok"

    def to_csv(self):
        num = 0 if self.matrix is None else len(self.matrix)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["target\\measured"] + list(range(1, num + 1)))
        for i in range(num):
            w.writerow([i + 1] + [repr(float(v)) for v in self.matrix[i]])
        return buf.getvalue()

    def summary(self):
        return {
            "status": self.status,
            "eligible": self.eligible,
            "off_diagonal_mean": self.off_diagonal_mean,
            "matrix": None if self.matrix is None else self.matrix.tolist(),
        }


def transferability_map(net, ds, cfg, batch_size=500, workers=1):
    """Attack success rates of single-exit attacks on all-exit-correct samples."""
    num = net.num_exits
    logits = exit_logits(net, ds.inputs)
    ok = np.all([np.argmax(z, axis=1) == ds.labels for z in logits], axis=0)
    eligible = ds.subset(np.flatnonzero(ok)) if ok.any() else None
    if eligible is None:
        return TransferabilityMap(None, float("nan"), 0, "empty")
    matrix = np.zeros((num, num))
    for i in range(1, num + 1):
        x = attacked_inputs(net, eligible, replace(cfg, kind="single", target_exit=i), batch_size, workers)
        for j, z in enumerate(exit_logits(net, x)):
            matrix[i - 1, j] = float(np.mean(np.argmax(z, axis=1) != eligible.labels))
    off = matrix[~np.eye(num, dtype=bool)]
    return TransferabilityMap(matrix, float(off.mean()) if off.size else float("nan"), len(eligible))


def to_json(obj):
    return json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n"


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(type(o))
