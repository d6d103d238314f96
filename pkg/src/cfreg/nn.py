"""Layer stacks for the backbone, task head and discriminator head.

Parameters live in two disjoint groups: ``"G"`` (backbone and task head) and
``"D"`` (discriminator head). Each forward pass binds parameters to a fresh
tape through :meth:`Model.bind`, choosing which groups are differentiable.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

GROUPS = ("G", "D")
_SECTIONS = {"backbone": 0, "task_head": 1, "desc_head": 2}


class ConfigError(ValueError):
    """Invalid configuration: widths, layer specs, keys or values."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    args: Tuple = ()
    init_seed_offset: int = 0

    def __post_init__(self):
        n_args = {"dense": 2, "conv": 5, "relu": 0, "flatten": 0, "dropout": 1}
        if self.kind not in n_args:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if len(self.args) != n_args[self.kind]:
            raise ConfigError(f"{self.kind} takes {n_args[self.kind]} arguments, got {self.args}")
        if self.kind == "dense" and min(self.args) < 1:
            raise ConfigError(f"dense extents must be positive: {self.args}")
        if self.kind == "conv":
            in_ch, out_ch, k, stride, pad = self.args
            if min(in_ch, out_ch, k, stride) < 1 or pad < 0:
                raise ConfigError(f"bad conv arguments {self.args}")
        if self.kind == "dropout" and not 0 <= self.args[0] < 1:
            raise ConfigError(f"dropout rate must lie in [0, 1): {self.args[0]}")

    def __str__(self) -> str:
        if not self.args:
            return self.kind
        return f"{self.kind}({','.join(_fmt_arg(a) for a in self.args)})"


def _fmt_arg(a) -> str:
    return repr(a) if isinstance(a, float) else str(a)


def dense(n_in: int, n_out: int) -> LayerSpec:
    return LayerSpec("dense", (n_in, n_out))


def conv(in_ch: int, out_ch: int, k: int, stride: int = 1, pad: int = 0) -> LayerSpec:
    return LayerSpec("conv", (in_ch, out_ch, k, stride, pad))


def relu() -> LayerSpec:
    return LayerSpec("relu")


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def dropout(rate: float) -> LayerSpec:
    return LayerSpec("dropout", (float(rate),))


_LAYER_RE = re.compile(r"([a-z]+)(?:\(([^)]*)\))?")


def parse_layers(text: str) -> List[LayerSpec]:
    """Parse ``"dense(32,128) relu dropout(0.5)"`` (commas/spaces between layers)."""
    layers = []
    pos = 0
    text = text.strip()
    while pos < len(text):
        if text[pos] in " ,\t":
            pos += 1
            continue
        m = _LAYER_RE.match(text, pos)
        if not m:
            raise ConfigError(f"cannot parse layer list at {text[pos:]!r}")
        kind, raw = m.group(1), m.group(2)
        args: Tuple = ()
        if raw is not None and raw.strip():
            parts = [p.strip() for p in raw.split(",")]
            try:
                args = tuple(float(p) if kind == "dropout" else int(p) for p in parts)
            except ValueError:
                raise ConfigError(f"bad arguments for {kind}: {raw!r}") from None
        layers.append(LayerSpec(kind, args))
        pos = m.end()
    return layers


def format_layers(layers: Sequence[LayerSpec]) -> str:
    return " ".join(str(layer) for layer in layers)


@dataclass
class ArchConfig:
    """Architecture description; ``backbone=None`` means the default MLP."""

    backbone: Optional[List[LayerSpec]] = None
    task_head: Optional[List[LayerSpec]] = None
    hidden: Tuple[int, ...] = (128, 64)
    desc_channel: int = 64
    dropout: float = 0.0


class Param:
    __slots__ = ("value", "grad", "group")

    def __init__(self, value: np.ndarray, group: str):
        self.value = value
        self.grad: Optional[np.ndarray] = None
        self.group = group


@dataclass
class Model:
    backbone: List[LayerSpec]
    task_head: List[LayerSpec]
    desc_head: List[LayerSpec]
    input_shape: Tuple[int, ...]
    feature_dim: int
    num_classes: int
    params: Dict[str, Param] = field(default_factory=dict)

    def group(self, name: str) -> Dict[str, Param]:
        if name not in GROUPS:
            raise ConfigError(f"unknown parameter group {name!r}; expected one of {GROUPS}")
        return {k: p for k, p in self.params.items() if p.group == name}

    def bind(self, tape: Optional[ad.Tape] = None, groups: Sequence[str] = GROUPS) -> Dict[str, Tensor]:
        """Wrap every parameter as a tensor; those in ``groups`` are watched on ``tape``."""
        for g in groups:
            if g not in GROUPS:
                raise ConfigError(f"unknown parameter group {g!r}")
        out = {}
        for name, p in self.params.items():
            if tape is not None and p.group in groups:
                out[name] = tape.watch(p.value)
            else:
                out[name] = Tensor(p.value)
        return out

    def zero_grads(self, group: str) -> None:
        for p in self.group(group).values():
            p.grad = np.zeros_like(p.value)

    def accumulate(self, grads: Dict[int, np.ndarray], bound: Dict[str, Tensor], group: str) -> None:
        """Add tape gradients for the bound parameters of ``group`` into their accumulators."""
        for name, p in self.group(group).items():
            t = bound[name]
            if not t.tracked:
                continue
            g = grads[t.node_id]
            p.grad = g.copy() if p.grad is None else p.grad + g

    def apply_grads(self, group: str, optimizer) -> None:
        optimizer.step(self.group(group))

    def snapshot(self, group: Optional[str] = None) -> Dict[str, np.ndarray]:
        items = self.params.items() if group is None else self.group(group).items()
        return {k: p.value.copy() for k, p in items}

    def num_params(self, group: Optional[str] = None) -> int:
        items = self.params.values() if group is None else self.group(group).values()
        return sum(p.value.size for p in items)


def default_backbone(input_dim: int, hidden: Sequence[int] = (128, 64)) -> List[LayerSpec]:
    layers: List[LayerSpec] = []
    width = input_dim
    for h in hidden:
        layers += [dense(width, h), relu()]
        width = h
    return layers


def _trace_shape(layers: Sequence[LayerSpec], shape: Tuple[int, ...], where: str) -> Tuple[int, ...]:
    """Per-sample output shape after ``layers``; raises on width mismatches."""
    for i, layer in enumerate(layers):
        if layer.kind == "dense":
            if len(shape) != 1 or shape[0] != layer.args[0]:
                raise ConfigError(f"{where}[{i}] {layer}: expects width {layer.args[0]}, receives {shape}")
            shape = (layer.args[1],)
        elif layer.kind == "conv":
            in_ch, out_ch, k, stride, pad = layer.args
            if len(shape) != 3 or shape[0] != in_ch:
                raise ConfigError(f"{where}[{i}] {layer}: expects {in_ch} channels, receives {shape}")
            h, w = shape[1] + 2 * pad, shape[2] + 2 * pad
            if k > h or k > w:
                raise ConfigError(f"{where}[{i}] {layer}: kernel larger than padded input {shape}")
            shape = (out_ch, (h - k) // stride + 1, (w - k) // stride + 1)
        elif layer.kind == "flatten":
            shape = (int(np.prod(shape)),)
    return shape


def _init_layer(layer: LayerSpec, seed: int, section: str, index: int) -> Dict[str, np.ndarray]:
    rng = np.random.default_rng([seed, _SECTIONS[section], index + layer.init_seed_offset])
    if layer.kind == "dense":
        n_in, n_out = layer.args
        s = math.sqrt(6.0 / (n_in + n_out))
        return {"weight": rng.uniform(-s, s, size=(n_in, n_out)), "bias": np.zeros(n_out)}
    if layer.kind == "conv":
        in_ch, out_ch, k, _, _ = layer.args
        fan_in, fan_out = in_ch * k * k, out_ch * k * k
        s = math.sqrt(6.0 / (fan_in + fan_out))
        return {"weight": rng.uniform(-s, s, size=(out_ch, in_ch, k, k)), "bias": np.zeros((1, out_ch, 1, 1))}
    return {}


def build_model(arch: ArchConfig, input_shape: Sequence[int], num_classes: int, seed: int) -> Model:
    input_shape = tuple(int(s) for s in input_shape)
    if arch.backbone is None:
        if len(input_shape) != 1:
            raise ConfigError(f"default MLP backbone needs flat inputs, got per-sample shape {input_shape}")
        backbone = default_backbone(input_shape[0], arch.hidden)
    else:
        backbone = list(arch.backbone)
    feat_shape = _trace_shape(backbone, input_shape, "backbone")
    if len(feat_shape) != 1:
        raise ConfigError(f"backbone must end in a flat feature vector, ends with shape {feat_shape}")
    F = feat_shape[0]

    if arch.task_head is None:
        task_head = [dense(F, num_classes)]
    else:
        task_head = list(arch.task_head)
    if arch.dropout > 0:
        task_head = [dropout(arch.dropout)] + task_head
    out = _trace_shape(task_head, (F,), "task_head")
    if out != (num_classes,):
        raise ConfigError(f"task_head must produce {num_classes} logits, produces {out}")

    if arch.desc_channel < 1:
        raise ConfigError(f"desc_channel must be >= 1, got {arch.desc_channel}")
    desc_head = [dense(F, arch.desc_channel), relu(), dense(arch.desc_channel, 1)]

    model = Model(backbone, task_head, desc_head, input_shape, F, num_classes)
    for section, layers, group in (("backbone", backbone, "G"), ("task_head", task_head, "G"),
                                   ("desc_head", desc_head, "D")):
        for i, layer in enumerate(layers):
            for pname, value in _init_layer(layer, seed, section, i).items():
                model.params[f"{section}.{i}.{pname}"] = Param(value, group)
    return model


def _run_layers(model: Model, section: str, layers, x: Tensor, params, train: bool, rng) -> Tensor:
    for i, layer in enumerate(layers):
        if layer.kind == "dense":
            x = ad.add(ad.matmul(x, params[f"{section}.{i}.weight"]), params[f"{section}.{i}.bias"])
        elif layer.kind == "conv":
            _, _, _, stride, pad = layer.args
            x = ad.add(ad.conv2d(x, params[f"{section}.{i}.weight"], stride, pad), params[f"{section}.{i}.bias"])
        elif layer.kind == "relu":
            x = ad.relu(x)
        elif layer.kind == "flatten":
            x = ad.flatten(x)
        elif layer.kind == "dropout":
            rate = layer.args[0]
            if train and rate > 0:
                if rng is None:
                    raise ad.ContractError("train-mode dropout needs an rng")
                keep = rng.random(x.shape) >= rate
                x = ad.mul(x, Tensor(keep / (1.0 - rate)))
    return x


def forward(model: Model, x, mode: str = "eval", rng: Optional[np.random.Generator] = None,
            params: Optional[Dict[str, Tensor]] = None) -> Tuple[Tensor, Tensor]:
    """Return ``(features, logits)``; dropout is active only when ``mode == "train"``."""
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape[1:] != model.input_shape:
        raise ad.DimensionError(f"input per-sample shape {x.shape[1:]} != model input {model.input_shape}")
    if params is None:
        params = model.bind()
    train = mode == "train"
    feats = _run_layers(model, "backbone", model.backbone, x, params, train, rng)
    logits = _run_layers(model, "task_head", model.task_head, feats, params, train, rng)
    return feats, logits


def discriminate(model: Model, features: Tensor, params: Optional[Dict[str, Tensor]] = None) -> Tensor:
    """Raw, unbounded discriminator score per sample, shape ``(n, 1)``."""
    if features.data.ndim != 2 or features.shape[1] != model.feature_dim:
        raise ad.DimensionError(f"features {features.shape} do not match width {model.feature_dim}")
    if params is None:
        params = model.bind()
    return _run_layers(model, "desc_head", model.desc_head, features, params, False, None)
