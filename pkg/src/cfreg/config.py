"""Run specification and its line-oriented ``section.key = value`` file format.

Unknown keys are hard errors: a typo in a sweep file would otherwise silently
run the defaults. ``serialize`` writes every key, so parse -> serialize ->
parse is the identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from .consistent import CFConfig
from .nn import ArchConfig, ConfigError, format_layers, parse_layers
from .trainer import TrainConfig

KINDS = ("train", "memtest", "sweep", "compare", "gradcheck")
METHODS = ("baseline", "cf", "dropout", "weight_decay", "label_smoothing")
SWEEP_KEYS = ("p", "weight", "history_len", "desc_channel", "warm_up")


@dataclass(frozen=True)
class DatasetSpec:
    generator: str = "gaussian"
    classes: int = 4
    dim: int = 32
    n_train: int = 500
    n_val: int = 500
    sep: float = 3.0
    hw: int = 8
    pixel_noise: float = 0.3
    label_noise: float = 0.0
    randomize_labels: bool = False
    path: str = ""
    val_path: str = ""

    def __post_init__(self):
        if self.generator not in ("gaussian", "patterns", "csv"):
            raise ConfigError(f"dataset.generator must be gaussian, patterns or csv, got {self.generator!r}")
        if self.generator == "csv" and not (self.path and self.val_path):
            raise ConfigError("csv datasets need dataset.path and dataset.val_path")


@dataclass(frozen=True)
class SweepSpec:
    """Values per CF hyperparameter; empty tuple means the key is not swept."""

    p: Tuple[float, ...] = ()
    weight: Tuple[float, ...] = ()
    history_len: Tuple[int, ...] = ()
    desc_channel: Tuple[int, ...] = ()
    warm_up: Tuple[int, ...] = ()
    mode: str = "one_at_a_time"
    include_baseline: bool = False

    def __post_init__(self):
        if self.mode not in ("one_at_a_time", "grid"):
            raise ConfigError(f"sweep.mode must be one_at_a_time or grid, got {self.mode!r}")


@dataclass(frozen=True)
class CompareSpec:
    methods: Tuple[str, ...] = ("baseline", "cf")
    dropout: float = 0.5
    weight_decay: float = 1e-4
    label_smoothing: float = 0.1

    def __post_init__(self):
        if not self.methods:
            raise ConfigError("compare.methods is empty")
        for m in self.methods:
            for part in m.split("+"):
                if part not in METHODS:
                    raise ConfigError(f"unknown method {part!r} in compare.methods; known: {METHODS}")


@dataclass(frozen=True)
class RunSpec:
    kind: str = "train"
    seeds: Tuple[int, ...] = (0,)
    out: str = "runs"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    cf_enabled: bool = False
    cf: CFConfig = field(default_factory=CFConfig)
    cf_warm_up_epochs: Optional[int] = None
    cf_shut_off_epochs: Optional[int] = None
    sweep: SweepSpec = field(default_factory=SweepSpec)
    compare: CompareSpec = field(default_factory=CompareSpec)
    export_features: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"run.kind must be one of {KINDS}, got {self.kind!r}")
        if not self.seeds:
            raise ConfigError("run.seeds must list at least one seed")

    def steps_per_epoch(self) -> int:
        return -(-self.dataset.n_train // self.train.batch_size)

    def cf_config(self) -> CFConfig:
        """CF settings with epoch-denominated schedule fields converted to optimizer steps."""
        cf = self.cf
        spe = self.steps_per_epoch()
        if self.cf_warm_up_epochs is not None:
            cf = replace(cf, warm_up=self.cf_warm_up_epochs * spe)
        if self.cf_shut_off_epochs is not None:
            cf = replace(cf, shut_off=self.cf_shut_off_epochs * spe)
        return cf

    def train_config(self, seed: int, method: Optional[str] = None) -> TrainConfig:
        """TrainConfig for one replicate; ``method`` swaps in a compare-mode regularizer set."""
        cfg = replace(self.train, seed=seed)
        if method is None:
            return replace(cfg, cf=self.cf_config() if self.cf_enabled else None)
        parts = set(method.split("+"))
        c = self.compare
        return replace(
            cfg,
            cf=self.cf_config() if "cf" in parts else None,
            dropout=c.dropout if "dropout" in parts else 0.0,
            weight_decay=c.weight_decay if "weight_decay" in parts else 0.0,
            label_smoothing=c.label_smoothing if "label_smoothing" in parts else 0.0,
        )


# ---------------------------------------------------------------------------
# key table: name -> (getter, setter-kwargs builder, formatter, parser)


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("true", "yes", "1", "on"):
        return True
    if v in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_int(s: str) -> Optional[int]:
    return None if s.strip().lower() in ("", "none") else int(s)


def _fmt_opt(v) -> str:
    return "none" if v is None else str(v)


def _list(conv):
    def parse(s: str):
        return tuple(conv(x.strip()) for x in s.split(",") if x.strip())
    return parse


def _fmt_list(v) -> str:
    return ",".join(str(x) for x in v)


def _fmt_bool(v) -> str:
    return "true" if v else "false"


def _layers_or_default(s: str):
    return None if s.strip().lower() in ("", "default") else parse_layers(s)


def _fmt_layers(v) -> str:
    return "default" if v is None else format_layers(v)


# (section, key) -> (object attribute path, parser, formatter)
_KEYS: Dict[str, Tuple[Tuple[str, ...], callable, callable]] = {
    "run.kind": (("kind",), str, str),
    "run.seeds": (("seeds",), _list(int), _fmt_list),
    "run.out": (("out",), str, str),
    "run.export_features": (("export_features",), _bool, _fmt_bool),
    "dataset.generator": (("dataset", "generator"), str, str),
    "dataset.classes": (("dataset", "classes"), int, str),
    "dataset.dim": (("dataset", "dim"), int, str),
    "dataset.n_train": (("dataset", "n_train"), int, str),
    "dataset.n_val": (("dataset", "n_val"), int, str),
    "dataset.sep": (("dataset", "sep"), float, repr),
    "dataset.hw": (("dataset", "hw"), int, str),
    "dataset.pixel_noise": (("dataset", "pixel_noise"), float, repr),
    "dataset.label_noise": (("dataset", "label_noise"), float, repr),
    "dataset.randomize_labels": (("dataset", "randomize_labels"), _bool, _fmt_bool),
    "dataset.path": (("dataset", "path"), str, str),
    "dataset.val_path": (("dataset", "val_path"), str, str),
    "arch.backbone": (("arch", "backbone"), _layers_or_default, _fmt_layers),
    "arch.task_head": (("arch", "task_head"), _layers_or_default, _fmt_layers),
    "arch.hidden": (("arch", "hidden"), _list(int), _fmt_list),
    "train.epochs": (("train", "epochs"), int, str),
    "train.batch_size": (("train", "batch_size"), int, str),
    "train.eval_every": (("train", "eval_every"), int, str),
    "train.weight_decay": (("train", "weight_decay"), float, repr),
    "train.label_smoothing": (("train", "label_smoothing"), float, repr),
    "train.dropout": (("train", "dropout"), float, repr),
    "optim.lr": (("train", "optim", "lr"), float, repr),
    "optim.beta1": (("train", "optim", "beta1"), float, repr),
    "optim.beta2": (("train", "optim", "beta2"), float, repr),
    "optim.eps": (("train", "optim", "eps"), float, repr),
    "cf.enabled": (("cf_enabled",), _bool, _fmt_bool),
    "cf.p": (("cf", "p"), float, repr),
    "cf.weight": (("cf", "weight"), float, repr),
    "cf.history_len": (("cf", "history_len"), int, str),
    "cf.desc_channel": (("cf", "desc_channel"), int, str),
    "cf.warm_up": (("cf", "warm_up"), int, str),
    "cf.shut_off": (("cf", "shut_off"), _opt_int, _fmt_opt),
    "cf.literal_penalty_sign": (("cf", "literal_penalty_sign"), _bool, _fmt_bool),
    "cf.warm_up_epochs": (("cf_warm_up_epochs",), _opt_int, _fmt_opt),
    "cf.shut_off_epochs": (("cf_shut_off_epochs",), _opt_int, _fmt_opt),
    "sweep.p": (("sweep", "p"), _list(float), _fmt_list),
    "sweep.weight": (("sweep", "weight"), _list(float), _fmt_list),
    "sweep.history_len": (("sweep", "history_len"), _list(int), _fmt_list),
    "sweep.desc_channel": (("sweep", "desc_channel"), _list(int), _fmt_list),
    "sweep.warm_up": (("sweep", "warm_up"), _list(int), _fmt_list),
    "sweep.mode": (("sweep", "mode"), str, str),
    "sweep.include_baseline": (("sweep", "include_baseline"), _bool, _fmt_bool),
    "compare.methods": (("compare", "methods"), _list(str), _fmt_list),
    "compare.dropout": (("compare", "dropout"), float, repr),
    "compare.weight_decay": (("compare", "weight_decay"), float, repr),
    "compare.label_smoothing": (("compare", "label_smoothing"), float, repr),
}


def _get(obj, path):
    for name in path:
        obj = getattr(obj, name)
    return obj


def _nested_update(values: Dict[Tuple[str, ...], object]) -> RunSpec:
    """Build a RunSpec from attribute-path assignments, validating each dataclass once."""
    def build(cls, prefix):
        kwargs = {}
        for f in fields(cls):
            path = prefix + (f.name,)
            if path in values:
                kwargs[f.name] = values[path]
            elif any(k[:len(path)] == path and len(k) > len(path) for k in values):
                kwargs[f.name] = build(type(getattr(cls(), f.name)), path)
        return cls(**kwargs)
    return build(RunSpec, ())


def parse_config(text: str, source: str = "<config>") -> RunSpec:
    values: Dict[Tuple[str, ...], object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        path, parse, _ = _KEYS[key]
        try:
            values[path] = parse(value)
        except (ValueError, ConfigError) as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    try:
        return _nested_update(values)
    except (ConfigError, TypeError) as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path) -> RunSpec:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), str(path))


def serialize_config(spec: RunSpec) -> str:
    lines = []
    section = None
    for key, (path, _, fmt) in _KEYS.items():
        sec = key.split(".", 1)[0]
        if sec != section:
            if section is not None:
                lines.append("")
            section = sec
        lines.append(f"{key} = {fmt(_get(spec, path))}")
    return "\n".join(lines) + "\n"


def config_keys() -> List[str]:
    return list(_KEYS)
