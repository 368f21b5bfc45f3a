"""Run configuration and its flat ``key = value`` file format.

Blank lines and ``#`` comments are ignored. Every key must be a field of
:class:`RunConfig`; tuples are written comma-separated.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields

from .model import NetConfig, scale_config


@dataclass(frozen=True)
class RunConfig:
    # network
    input_size: int = 608
    width: float = 1.0
    head_mode: str = "obb"
    neck: str = "csa_drf"
    dilation_mode: str = "learned"
    experts: int = 4
    dilations: tuple[int, ...] = (1, 2, 3)
    backbone_taps: tuple[int, ...] = (32, 64, 128)
    backbone_expansion: int = 4
    # optimisation
    epochs: int = 100
    batch_size: int = 4
    optimizer: str = "sgd"
    momentum: float = 0.9
    weight_decay: float = 0.0
    lr_initial: float = 1.5e-4
    lr_final: float = 1e-6
    max_steps: int = 0
    grad_clip: float = 0.0
    hflip: bool = False  # mirroring turns tilted representable quads unrepresentable
    # loss
    train_activation: str = "approx"
    eval_activation: str = "approx"  # decode with the mapping the logits were trained through
    derived_alpha: bool = True
    revive_floor: bool = True
    w_conf: float = 1.0
    w_hbb: float = 1.0
    w_obb: float = 1.0
    w_cls: float = 1.0
    # inference
    nms_thresh: float = 0.45
    score_thresh: float = 0.05
    # run
    seed: int = 0
    data_dir: str = "data"
    out_dir: str = "runs"
    checkpoint_every: int = 1
    log_every: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr_initial > self.lr_final > 0:
            raise ValueError("learning rates must satisfy initial > final > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not 0 < self.nms_thresh < 1:
            raise ValueError("nms_thresh must lie in (0, 1)")
        if not 0 <= self.score_thresh < 1:
            raise ValueError("score_thresh must lie in [0, 1)")
        if self.width <= 0:
            raise ValueError("width must be positive")

    def net(self, num_classes: int) -> NetConfig:
        base = NetConfig(input_size=self.input_size, num_classes=num_classes, head_mode=self.head_mode,
                         neck=self.neck, dilation_mode=self.dilation_mode, experts=self.experts,
                         dilations=tuple(self.dilations), taps=tuple(self.backbone_taps),
                         expansion=self.backbone_expansion)
        return scale_config(base, self.width, self.input_size)

    def loss_weights(self) -> dict[str, float]:
        return dict(conf=self.w_conf, hbb=self.w_hbb, obb=self.w_obb, cls=self.w_cls)

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


def lr_at(epoch: int, cfg: RunConfig) -> float:
    """Cosine annealing from ``lr_initial`` at epoch 0 to ``lr_final`` at the last epoch."""
    if cfg.epochs == 1:
        return cfg.lr_initial
    frac = epoch / (cfg.epochs - 1)
    return cfg.lr_final + (cfg.lr_initial - cfg.lr_final) * (1 + math.cos(math.pi * frac)) / 2


def _convert(field_type, text: str, key: str):
    t = str(field_type)
    try:
        if t.startswith("tuple"):
            return tuple(int(v) for v in text.split(",") if v.strip())
        if t == "bool":
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if t == "int":
            return int(text)
        if t == "float":
            return float(text)
        return text
    except ValueError:
        raise ValueError(f"config key {key!r}: cannot parse {text!r} as {t}") from None


def parse_config(text: str, base: RunConfig | None = None, source: str = "<config>") -> RunConfig:
    types = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{no}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"{source}:{no}: unknown config key {key!r}")
        values[key] = _convert(types[key], val, key)
    return dataclasses.replace(base or RunConfig(), **values)


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    with open(path, encoding="utf-8") as f:
        return parse_config(f.read(), base, str(path))


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
