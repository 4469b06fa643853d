"""Experiment configuration files (UTF-8 INI with bracketed sections).

Sections: [data] [model] [attack.train] [attack.eval] [attack.transfer]
[loss] [optim] [budget] [run].  Relative data paths resolve against the
config file's directory, then against the bundled dataset directory.
"""

import configparser
import os
from dataclasses import dataclass, field, replace
from fractions import Fraction
from importlib import resources

from .attacks import AttackConfig
from .data import load_idx, split, synthetic_gaussians
from .errors import ConfigError
from .losses import DistillConfig
from .network import NetworkSpec
from .trainer import TrainConfig

PRESET_DIR = resources.files("neokd") / "presets"
DATA_DIR = resources.files("neokd") / "datasets"


def _num(text):
    try:
        return float(Fraction(text.strip()))
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"not a number: {text!r}") from None


def _floats(text):
    return tuple(_num(t) for t in text.split(",") if t.strip())


def _ints(text):
    return tuple(int(t) for t in text.split(",") if t.strip())


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(_fmt(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


@dataclass
class DataSource:
    source: str = "idx"
    images: str = "mnist5k-images-idx3-ubyte.gz"
    labels: str = "mnist5k-labels-idx1-ubyte.gz"
    test_images: str = ""
    test_labels: str = ""
    classes: int = 10
    split: tuple = (0.4, 0.2, 0.4)
    split_seed: int = 0
    train_limit: int = 0
    dim: int = 20
    per_class: int = 100
    sigma: float = 0.1


@dataclass
class ExperimentConfig:
    data: DataSource = field(default_factory=DataSource)
    blocks: tuple = ((128,), (64,), (64,))
    init_seed: int = None
    train: TrainConfig = field(default_factory=TrainConfig)
    eval_kinds: tuple = ("max_average", "average")
    eval_attack: AttackConfig = field(default_factory=lambda: AttackConfig("average", 0.3, 20 / 255, 50))
    transfer_attack: AttackConfig = field(default_factory=lambda: AttackConfig("single", 0.3, 20 / 255, 50, target_exit=1))
    budget_count: int = 100
    budget_ensemble: bool = True
    budget_attack: str = "none"
    seed: int = 0
    out: str = "out"
    threads: int = 1
    base_dir: str = "."

    # --------------------------------------------------------- derived

    @property
    def num_exits(self):
        return len(self.blocks)

    def network_spec(self, input_dim):
        seed = self.seed if self.init_seed is None else self.init_seed
        return NetworkSpec(input_dim, self.blocks, self.data.classes, seed)

    def eval_attacks(self):
        out = {"clean": None}
        for kind in self.eval_kinds:
            out[kind] = replace(self.eval_attack, kind=kind, target_exit=None)
        return out

    def validate(self):
        num = self.num_exits
        if num < 1:
            raise ConfigError("[model] blocks: need at least one block")
        self.train.attack.validate_for(num)
        if self.train.loss in ("nkd", "eokd", "neokd"):
            try:
                self.train.distill.validate_for(num)
            except ConfigError as exc:
                raise ConfigError(f"[loss] gamma: {exc}") from None
        for kind in self.eval_kinds:
            if kind not in ("single", "max_average", "average"):
                raise ConfigError(f"[attack.eval] kinds: unknown attack {kind!r}")
            if kind == "single":
                raise ConfigError("[attack.eval] kinds: single attacks belong in [attack.transfer]")
        if self.budget_attack not in ("none", "max_average", "average"):
            raise ConfigError(f"[budget] attack: unknown attack {self.budget_attack!r}")
        if self.threads < 1:
            raise ConfigError("[run] threads must be >= 1")
        return self

    def with_seed(self, seed):
        return replace(self, seed=seed, train=replace(self.train, seed=seed))

    def resolve(self, name):
        if not name:
            return name
        if os.path.isabs(name):
            return name
        local = os.path.join(self.base_dir, name)
        if os.path.exists(local):
            return os.path.abspath(local)
        bundled = DATA_DIR / name
        if bundled.is_file():
            return str(bundled)
        return os.path.abspath(local)

    def load_data(self):
        """Return ``(train, val, test)`` datasets."""
        d = self.data
        if d.source == "synthetic":
            ds = synthetic_gaussians(d.classes, d.dim, d.per_class, d.split_seed, d.sigma)
            parts = split(ds, d.split, d.split_seed)
        elif d.source == "idx":
            for key in ("images", "labels"):
                path = self.resolve(getattr(d, key))
                if not os.path.exists(path):
                    raise ConfigError(f"[data] {key}: file not found: {path}")
            ds = load_idx(self.resolve(d.images), self.resolve(d.labels), d.classes)
            if d.test_images:
                test = load_idx(self.resolve(d.test_images), self.resolve(d.test_labels), d.classes, "test")
                parts = split(ds, d.split, d.split_seed) + (test,)
            else:
                parts = split(ds, d.split, d.split_seed)
        else:
            raise ConfigError(f"[data] source must be idx or synthetic, got {d.source!r}")
        if len(parts) != 3:
            raise ConfigError("[data] split must yield train, val and test parts")
        train, val, test = parts
        if d.train_limit:
            train = train.head(d.train_limit)
        return train, val, test

    # ------------------------------------------------------------- I/O

    def to_ini(self):
        t, a, dcfg = self.train, self.train.attack, self.train.distill
        sections = {
            "data": {
                "source": self.data.source,
                "images": self.resolve(self.data.images) if self.data.source == "idx" else self.data.images,
                "labels": self.resolve(self.data.labels) if self.data.source == "idx" else self.data.labels,
                "test_images": self.resolve(self.data.test_images),
                "test_labels": self.resolve(self.data.test_labels),
                "classes": self.data.classes,
                "split": self.data.split,
                "split_seed": self.data.split_seed,
                "train_limit": self.data.train_limit,
                "dim": self.data.dim,
                "per_class": self.data.per_class,
                "sigma": self.data.sigma,
            },
            "model": {
                "blocks": "; ".join(", ".join(str(w) for w in b) for b in self.blocks),
                "init_seed": "" if self.init_seed is None else self.init_seed,
            },
            "attack.train": {
                "kind": a.kind,
                "epsilon": a.epsilon,
                "step_size": a.step_size,
                "steps": a.steps,
                "random_start": a.random_start,
            },
            "attack.eval": {
                "kinds": self.eval_kinds,
                "epsilon": self.eval_attack.epsilon,
                "step_size": self.eval_attack.step_size,
                "steps": self.eval_attack.steps,
                "random_start": self.eval_attack.random_start,
            },
            "attack.transfer": {
                "epsilon": self.transfer_attack.epsilon,
                "step_size": self.transfer_attack.step_size,
                "steps": self.transfer_attack.steps,
                "random_start": self.transfer_attack.random_start,
            },
            "loss": {
                "kind": t.loss,
                "alpha": dcfg.alpha,
                "beta": dcfg.beta,
                "gamma": dcfg.gamma,
                "nkd_ensemble": dcfg.nkd_ensemble,
                "distill_weight": t.distill_weight,
            },
            "optim": {
                "epochs": t.epochs,
                "batch_size": t.batch_size,
                "lr": t.lr,
                "lr_decay_epochs": t.lr_decay_epochs,
                "lr_decay_factor": t.lr_decay_factor,
                "momentum": t.momentum,
                "weight_decay": t.weight_decay,
                "probe_size": t.probe_size,
            },
            "budget": {
                "allocations": self.budget_count,
                "ensemble": self.budget_ensemble,
                "attack": self.budget_attack,
            },
            "run": {
                "seed": self.seed,
                "out": self.out,
                "checkpoint_every": t.checkpoint_every,
                "threads": self.threads,
            },
        }
        lines = []
        for name, values in sections.items():
            lines.append(f"[{name}]")
            lines += [f"{k} = {_fmt(v)}".rstrip() for k, v in values.items()]
            lines.append("")
        return "\n".join(lines)


def _section(cp, name):
    return cp[name] if cp.has_section(name) else {}


def _attack(sec, default, kind):
    try:
        return AttackConfig(
            kind=kind,
            epsilon=_num(sec.get("epsilon", str(default.epsilon))),
            step_size=_num(sec.get("step_size", str(default.step_size))),
            steps=int(sec.get("steps", default.steps)),
            target_exit=1 if kind == "single" else None,
            random_start=_bool(sec.get("random_start", str(default.random_start))),
        )
    except ValueError as exc:
        raise ConfigError(f"attack settings: {exc}") from None


def parse(text, base_dir="."):
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    cfg = ExperimentConfig(base_dir=os.path.abspath(base_dir))
    try:
        d = _section(cp, "data")
        dd = DataSource()
        data = DataSource(
            source=d.get("source", dd.source).strip(),
            images=d.get("images", dd.images).strip(),
            labels=d.get("labels", dd.labels).strip(),
            test_images=d.get("test_images", "").strip(),
            test_labels=d.get("test_labels", "").strip(),
            classes=int(d.get("classes", dd.classes)),
            split=_floats(d.get("split", _fmt(dd.split))),
            split_seed=int(d.get("split_seed", dd.split_seed)),
            train_limit=int(d.get("train_limit", dd.train_limit)),
            dim=int(d.get("dim", dd.dim)),
            per_class=int(d.get("per_class", dd.per_class)),
            sigma=_num(d.get("sigma", str(dd.sigma))),
        )
        m = _section(cp, "model")
        blocks = cfg.blocks
        if "blocks" in m:
            blocks = tuple(_ints(b) for b in m["blocks"].split(";") if b.strip())
        init_seed = m.get("init_seed", "").strip()
        r = _section(cp, "run")
        seed = int(r.get("seed", 0))
        lo = _section(cp, "loss")
        ddef = DistillConfig()
        gamma = _floats(lo["gamma"]) if "gamma" in lo else (1.0,) * len(blocks)
        distill = DistillConfig(
            alpha=_num(lo.get("alpha", str(ddef.alpha))),
            beta=_num(lo.get("beta", str(ddef.beta))),
            gamma=gamma,
            nkd_ensemble=lo.get("nkd_ensemble", ddef.nkd_ensemble).strip(),
        )
        at = _section(cp, "attack.train")
        tdef = AttackConfig("max_average", 0.3, 20 / 255, 7)
        train_attack = _attack(at, tdef, at.get("kind", "max_average").strip())
        o = _section(cp, "optim")
        tc = TrainConfig()
        train = TrainConfig(
            epochs=int(o.get("epochs", tc.epochs)),
            batch_size=int(o.get("batch_size", tc.batch_size)),
            lr=_num(o.get("lr", str(tc.lr))),
            lr_decay_epochs=_ints(o.get("lr_decay_epochs", "")),
            lr_decay_factor=_num(o.get("lr_decay_factor", str(tc.lr_decay_factor))),
            momentum=_num(o.get("momentum", str(tc.momentum))),
            weight_decay=_num(o.get("weight_decay", str(tc.weight_decay))),
            attack=train_attack,
            loss=lo.get("kind", "neokd").strip(),
            distill=distill,
            distill_weight=_num(lo.get("distill_weight", "1")),
            seed=seed,
            checkpoint_every=int(r.get("checkpoint_every", 0)),
            probe_size=int(o.get("probe_size", tc.probe_size)),
            workers=int(r.get("threads", 1)),
        )
        ae = _section(cp, "attack.eval")
        kinds = tuple(k.strip() for k in ae.get("kinds", "max_average, average").split(",") if k.strip())
        eval_attack = _attack(ae, cfg.eval_attack, "average")
        transfer_attack = _attack(_section(cp, "attack.transfer"), cfg.transfer_attack, "single")
        b = _section(cp, "budget")
        cfg = replace(
            cfg,
            data=data,
            blocks=blocks,
            init_seed=int(init_seed) if init_seed else None,
            train=train,
            eval_kinds=kinds,
            eval_attack=eval_attack,
            transfer_attack=transfer_attack,
            budget_count=int(b.get("allocations", 100)),
            budget_ensemble=_bool(b.get("ensemble", "true")),
            budget_attack=b.get("attack", "none").strip(),
            seed=seed,
            out=r.get("out", "out").strip(),
            threads=int(r.get("threads", 1)),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
    return cfg.validate()


def preset_names():
    return sorted(p.name[:-4] for p in PRESET_DIR.iterdir() if p.name.endswith(".ini"))


def load(path_or_preset):
    """Load a config file, or a bundled preset by name."""
    if os.path.exists(path_or_preset):
        with open(path_or_preset, encoding="utf-8") as f:
            return parse(f.read(), os.path.dirname(os.path.abspath(path_or_preset)))
    preset = PRESET_DIR / f"{path_or_preset}.ini"
    if preset.is_file():
        return parse(preset.read_text(encoding="utf-8"), os.getcwd())
    raise FileNotFoundError(path_or_preset)
