"""``neokd`` command line: train, eval, budget, transfer, gradcheck.

Exit codes: 0 success, 1 failed check or runtime error, 2 bad usage,
missing file or invalid config.
"""

import argparse
import logging
import math
import os
import sys
from dataclasses import replace

from . import config as config_mod
from . import evaluate, gradcheck, network, trainer
from .errors import ConfigError, FormatError, NeoKDError

log = logging.getLogger("neokd")

MODEL_FILE = "model.mxnn"
STATE_FILE = "train_state.ckpt"
SNAPSHOT_FILE = "config.ini"


class UsageError(Exception):
    pass


def _strict(obj):
    """Replace non-finite floats by strings so the JSON stays strict."""
    if isinstance(obj, float) and not math.isfinite(obj):
        return "nan" if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    if isinstance(obj, dict):
        return {k: _strict(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_strict(v) for v in obj]
    return obj


def _write(out_dir, name, text):
    os.makedirs(out_dir, exist_ok=True)
    network.atomic_write(os.path.join(out_dir, name), text.encode("utf-8"))


def _load_config(args, checkpoint=None):
    path = args.config
    if path is None and checkpoint is not None:
        path = os.path.join(os.path.dirname(os.path.abspath(checkpoint)), SNAPSHOT_FILE)
    if path is None:
        raise UsageError("--config is required")
    try:
        cfg = config_mod.load(path)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    threads = args.threads if args.threads is not None else cfg.threads
    cfg = replace(cfg, threads=threads, train=replace(cfg.train, workers=threads))
    return cfg.validate()


def _out_dir(args, cfg, checkpoint=None):
    if args.out:
        return args.out
    if checkpoint is not None:
        return os.path.dirname(os.path.abspath(checkpoint))
    return cfg.out


def _load_model(args, cfg, input_dim):
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    if not os.path.exists(args.checkpoint):
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    net = network.load(args.checkpoint)
    want = cfg.network_spec(input_dim)
    got = net.spec
    if (got.input_dim, got.block_widths, got.num_classes) != (want.input_dim, want.block_widths, want.num_classes):
        raise ConfigError(
            f"checkpoint {args.checkpoint} holds a {got.input_dim}-{got.block_widths}-{got.num_classes} network "
            f"but the config describes {want.input_dim}-{want.block_widths}-{want.num_classes}"
        )
    return net


# --------------------------------------------------------------- commands


def cmd_train(args):
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    train_ds, val, _ = cfg.load_data()
    snapshot = cfg.to_ini()
    tc = cfg.train
    state, start, log_ = None, 0, None
    if args.resume:
        net, state, start, log_, _ = trainer.load_checkpoint(args.resume)
        log.info("resuming from %s after %d epochs", args.resume, start)
    else:
        net = network.init(cfg.network_spec(train_ds.dim))
    probe = val.head(tc.probe_size) if tc.probe_size else None
    state_path = os.path.join(out, STATE_FILE)
    os.makedirs(out, exist_ok=True)
    _write(out, SNAPSHOT_FILE, snapshot)

    def on_epoch(epoch, net_, state_, log_now):
        if tc.checkpoint_every and (epoch + 1) % tc.checkpoint_every == 0:
            trainer.save_checkpoint(state_path, net_, state_, epoch + 1, log_now, snapshot)

    net, log_, state = trainer.train(net, train_ds, tc, probe, state, start, log_, on_epoch)
    network.save(net, os.path.join(out, MODEL_FILE))
    _write(out, "train_log.csv", log_.to_csv())
    _write(out, "train_timing.csv", log_.timing_csv())
    print(f"wrote {os.path.join(out, MODEL_FILE)} after {tc.epochs} epochs")
    return 0


def cmd_eval(args):
    cfg = _load_config(args, args.checkpoint)
    _, _, test = cfg.load_data()
    net = _load_model(args, cfg, test.dim)
    out = _out_dir(args, cfg, args.checkpoint)
    report = evaluate.eval_anytime(net, test, cfg.eval_attacks(), workers=cfg.threads)
    _write(out, "anytime.csv", report.to_csv())
    _write(out, "anytime.json", evaluate.to_json(_strict(report.summary())))
    for name, values in report.top1.items():
        print(f"{name:12s} " + " ".join(f"{v:.4f}" for v in values) + f"  avg {sum(values) / len(values):.4f}")
    return 0


def cmd_budget(args):
    cfg = _load_config(args, args.checkpoint)
    _, val, test = cfg.load_data()
    net = _load_model(args, cfg, test.dim)
    out = _out_dir(args, cfg, args.checkpoint)
    attack = None
    if cfg.budget_attack != "none":
        attack = replace(cfg.eval_attack, kind=cfg.budget_attack, target_exit=None)
    allocations = evaluate.allocation_sweep(len(val), net.num_exits, cfg.budget_count)
    rows = evaluate.budget_frontier(net, val, test, allocations, attack, cfg.budget_ensemble, cfg.threads)
    flops = network.count_flops(net.spec)
    _write(out, "budget_frontier.csv", evaluate.frontier_csv(rows, net.num_exits))
    payload = {
        "attack": cfg.budget_attack,
        "ensemble": cfg.budget_ensemble,
        "flops": [flops[i] for i in range(1, net.num_exits + 1)],
        "rows": rows,
    }
    _write(out, "budget.json", evaluate.to_json(_strict(payload)))
    print(f"wrote {len(rows)} frontier rows to {os.path.join(out, 'budget_frontier.csv')}")
    return 0


def cmd_transfer(args):
    cfg = _load_config(args, args.checkpoint)
    _, _, test = cfg.load_data()
    net = _load_model(args, cfg, test.dim)
    out = _out_dir(args, cfg, args.checkpoint)
    tmap = evaluate.transferability_map(net, test, cfg.transfer_attack, workers=cfg.threads)
    _write(out, "transfer_map.csv", tmap.to_csv())
    _write(out, "transfer.json", evaluate.to_json(_strict(tmap.summary())))
    print(f"{tmap.status}: {tmap.eligible} eligible samples, off-diagonal mean {tmap.off_diagonal_mean:.4f}")
    return 0


def cmd_gradcheck(args):
    seed = 0 if args.seed is None else args.seed
    rows = gradcheck.run_suite(seed)
    worst = max(err for _, err in rows)
    for name, err in rows:
        flag = "ok" if err < gradcheck.TOLERANCE else "FAIL"
        print(f"{name:20s} {err:.3e} {flag}")
    print(f"max relative error {worst:.3e} (tolerance {gradcheck.TOLERANCE:g})")
    return 0 if worst < gradcheck.TOLERANCE else 1


# ------------------------------------------------------------------ main


def build_parser():
    p = argparse.ArgumentParser(prog="neokd", description="Adversarial training and evaluation of multi-exit networks.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint):
        sp.add_argument("--config", help="config file path or bundled preset name")
        if checkpoint:
            sp.add_argument("--checkpoint", required=True, help="trained model (.mxnn)")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--threads", type=int, help="attack worker threads")

    t = sub.add_parser("train", help="train a multi-exit network")
    common(t, False)
    t.add_argument("--resume", help="training checkpoint to continue from")
    t.set_defaults(func=cmd_train)
    for name, fn, text in (
        ("eval", cmd_eval, "anytime accuracy, clean and attacked"),
        ("budget", cmd_budget, "budgeted prediction frontier"),
        ("transfer", cmd_transfer, "adversarial transferability map"),
    ):
        sp = sub.add_parser(name, help=text)
        common(sp, True)
        sp.set_defaults(func=fn)
    g = sub.add_parser("gradcheck", help="finite-difference check of every op")
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"neokd: error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, NeoKDError, OSError) as exc:
        print(f"neokd: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
