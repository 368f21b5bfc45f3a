"""Detector assembly: tiny inverted-residual backbone, three-branch neck, 1x1 heads.

Wiring (C32, C16, C8 are the neck widths, deepest first):

* backbone taps at strides 8, 16, 32
* deepest branch: ``concat(tap32, pool(tap16))`` -> 1x1 to C32 -> CSA-DRF
* middle branch: shallow input ``concat(tap16, pool(tap8))``, lateral
  ``upsample(1x1 C32->C16 of the deepest output)``
* shallow branch: shallow input ``tap8``, lateral ``upsample(1x1 C16->C8)``
* each branch output feeds a 1x1 prediction conv with ``A * L`` channels

The baseline variant keeps this skeleton and swaps each branch body for
the project/add/two-SConv-block form.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction

import numpy as np

from . import blocks
from .dsc_head import vector_length
from .engine import Tensor
from .graph import GraphBuilder, ModuleGraph, init_params, run_graph

BASE_NECK = (1024, 512, 256)
STRIDES = (8, 16, 32)
# YOLOv3 priors at 416 input, per stride 8 / 16 / 32
BASE_ANCHORS = (((10, 13), (16, 30), (33, 23)),
                ((30, 61), (62, 45), (59, 119)),
                ((116, 90), (156, 198), (373, 326)))
OBJ_BIAS = -4.0
CKPT_MAGIC = b"LODETCKP"
CKPT_VERSION = 1


def even_round(x) -> int:
    return 2 * int(round(Fraction(x) / 2))


@dataclass(frozen=True)
class NetConfig:
    input_size: int = 608
    width_multiplier: float = 1.0
    neck_widths: tuple[int, int, int] = BASE_NECK
    # backbone: stem width, stride-4 width, tap widths at strides 8/16/32, blocks per stage, expansion
    stem: int = 16
    stage4: int = 24
    taps: tuple[int, int, int] = (32, 64, 128)
    blocks: tuple[int, int, int] = (3, 6, 4)
    expansion: int = 4
    anchors: tuple | None = None
    num_classes: int = 15
    dilations: tuple[int, ...] = (1, 2, 3)
    dilation_mode: str = "learned"
    experts: int = 4
    head_mode: str = "obb"
    neck: str = "csa_drf"
    merge: str = "concat"

    def __post_init__(self):
        if self.input_size % 32 or self.input_size <= 0:
            raise ValueError(f"input size {self.input_size} is not a positive multiple of 32")
        if len(self.neck_widths) != 3 or any(c < 8 or c % 2 for c in self.neck_widths):
            raise ValueError(f"neck widths must be three even counts >= 8, got {self.neck_widths}")
        if self.neck not in ("csa_drf", "baseline"):
            raise ValueError(f"unknown neck variant {self.neck!r}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        vector_length(self.num_classes, self.head_mode)

    @property
    def anchor_sets(self) -> list[np.ndarray]:
        """Per-branch (A, 2) anchors in pixels, ordered by stride 8, 16, 32."""
        if self.anchors is not None:
            return [np.asarray(a, dtype=np.float64).reshape(-1, 2) for a in self.anchors]
        s = self.input_size / 416.0
        return [np.asarray(a, dtype=np.float64) * s for a in BASE_ANCHORS]

    @property
    def num_anchors(self) -> int:
        counts = {len(a) for a in self.anchor_sets}
        if len(counts) != 1:
            raise ValueError("every branch needs the same anchor count")
        return counts.pop()

    @property
    def grids(self) -> list[tuple[int, int]]:
        return [(self.input_size // s, self.input_size // s) for s in STRIDES]

    @property
    def vector_length(self) -> int:
        return vector_length(self.num_classes, self.head_mode)

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["anchors"] is not None:
            d["anchors"] = [[list(map(float, p)) for p in a] for a in d["anchors"]]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        d = dict(d)
        for k in ("neck_widths", "taps", "blocks", "dilations"):
            if k in d:
                d[k] = tuple(d[k])
        if d.get("anchors") is not None:
            d["anchors"] = tuple(tuple(tuple(p) for p in a) for a in d["anchors"])
        return cls(**d)


def scale_config(config: NetConfig, width_factor, input_size: int | None = None) -> NetConfig:
    """Scale the neck widths from the x1.0 base (rounded to even) and optionally the input size."""
    if Fraction(width_factor) <= 0:
        raise ValueError(f"width factor must be positive, got {width_factor}")
    widths = tuple(even_round(Fraction(c) * Fraction(width_factor)) for c in BASE_NECK)
    if min(widths) < 8:
        raise ValueError(f"width factor {width_factor} gives widths {widths} below 8")
    return replace(config, width_multiplier=float(width_factor), neck_widths=widths,
                   input_size=input_size or config.input_size)


# ----------------------------------------------------------------- graph

def _inverted_residual(b: GraphBuilder, x: str, c_out: int, stride: int, expansion: int, name: str) -> str:
    c = b.channels(x)
    with b.scope(name):
        hidden = c * expansion
        y = b.conv(x, hidden, k=1, name="expand") if expansion != 1 else x
        y = b.conv(y, hidden, k=3, stride=stride, groups=hidden, name="dw")
        y = b.conv(y, c_out, k=1, act=None, name="project")
        if stride == 1 and c == c_out:
            y = b.add([x, y], name="residual")
    return y


def _backbone(b: GraphBuilder, x: str, cfg: NetConfig):
    with b.scope("backbone"):
        y = b.conv(x, cfg.stem, k=3, stride=2, name="stem")
        y = _inverted_residual(b, y, cfg.stage4, 2, 1, "s4")
        taps = []
        for stage, (width, n) in enumerate(zip(cfg.taps, cfg.blocks)):
            for i in range(n):
                y = _inverted_residual(b, y, width, 2 if i == 0 else 1, cfg.expansion, f"s{8 << stage}_{i}")
            taps.append(y)
    return taps


def _deep_body(b: GraphBuilder, x: str, cfg: NetConfig) -> str:
    if cfg.neck == "csa_drf":
        return blocks.csa_drf(b, x, experts=cfg.experts, dilations=cfg.dilations, mode=cfg.dilation_mode)
    y = blocks.sconv_block2(b, x, name="s1")
    return blocks.sconv_block2(b, y, name="s2")


def _branch(b: GraphBuilder, shallow: str, lateral: str, c: int, cfg: NetConfig) -> str:
    if cfg.neck == "csa_drf":
        return blocks.new_neck_branch(b, shallow, lateral, c, experts=cfg.experts, dilations=cfg.dilations,
                                      mode=cfg.dilation_mode)
    return blocks.base_neck_branch(b, shallow, lateral, c)


def build_model(cfg: NetConfig) -> ModuleGraph:
    """Detector graph with input ``image`` (3, S, S) and outputs ``p8``, ``p16``, ``p32``."""
    b = GraphBuilder()
    s = cfg.input_size
    img = b.input("image", 3, s, s)
    t8, t16, t32 = _backbone(b, img, cfg)
    c32, c16, c8 = cfg.neck_widths
    with b.scope("neck"):
        with b.scope("b32"):
            deep_in = b.concat([t32, b.pool(t16)], name="link")
            y = b.conv(deep_in, c32, k=1, name="in")
            o32 = _deep_body(b, y, cfg)
        with b.scope("b16"):
            lat = b.upsample(b.conv(o32, c16, k=1, name="lateral"))
            o16 = _branch(b, b.concat([t16, b.pool(t8)], name="link"), lat, c16, cfg)
        with b.scope("b8"):
            lat = b.upsample(b.conv(o16, c8, k=1, name="lateral"))
            o8 = _branch(b, t8, lat, c8, cfg)
    na, length = cfg.num_anchors, cfg.vector_length
    bias = np.zeros((na, length))
    bias[:, 4] = OBJ_BIAS
    outs = {}
    with b.scope("head"):
        for key, o in (("p8", o8), ("p16", o16), ("p32", o32)):
            outs[key] = b.conv(o, na * length, k=1, act=None, name=key,
                               init=("const", bias.reshape(-1).tolist()))
    meta = {"config": cfg.to_dict(), "merge": cfg.merge}
    return b.build(outs, meta)


@dataclass
class Detector:
    config: NetConfig
    graph: ModuleGraph
    params: dict[str, Tensor] = field(repr=False)

    @property
    def anchors(self) -> list[np.ndarray]:
        return self.config.anchor_sets


def create_detector(cfg: NetConfig, seed: int = 0, dtype=np.float32) -> Detector:
    g = build_model(cfg)
    return Detector(cfg, g, init_params(g, seed, dtype))


def forward(model: Detector, image: Tensor) -> list[Tensor]:
    """Raw prediction grids (N, A*L, S/s, S/s) for strides 8, 16, 32."""
    s = model.config.input_size
    if image.ndim != 4 or image.shape[1:] != (3, s, s):
        raise ValueError(f"image shape {image.shape} does not match (N, 3, {s}, {s})")
    out = run_graph(model.graph, model.params, {"image": image})
    return [out["p8"], out["p16"], out["p32"]]


# ------------------------------------------------------------ checkpoints

def save_checkpoint(path, model: Detector, extra: dict | None = None):
    """Container: magic, u32 version, u64 header length, JSON header, float32 LE data."""
    names = list(model.graph.param_shapes)
    header = {"config": model.config.to_dict(), "params": [[n, list(model.params[n].shape)] for n in names],
              "extra": extra or {}}
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<IQ", CKPT_VERSION, len(blob)))
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(model.params[n].data, dtype="<f4").tobytes())


def read_checkpoint(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a detector checkpoint")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: checkpoint format version {version}, expected {CKPT_VERSION}")
    header = json.loads(raw[20:20 + hlen])
    data = raw[20 + hlen:]
    return header, data


def load_checkpoint(path, config: NetConfig | None = None) -> tuple[Detector, dict]:
    """Rebuild the detector from a checkpoint; ``config`` (if given) must match the stored one."""
    header, data = read_checkpoint(path)
    stored = NetConfig.from_dict(header["config"])
    if config is not None and config != stored:
        raise ValueError("checkpoint was written for a different network configuration")
    g = build_model(stored)
    expected = [[n, list(s)] for n, s in g.param_shapes.items()]
    if header["params"] != expected:
        raise ValueError("checkpoint parameters do not match the rebuilt graph")
    count = sum(int(np.prod(s)) for _, s in expected)
    if len(data) != 4 * count:
        raise ValueError(f"checkpoint data holds {len(data)} bytes, expected {4 * count}")
    flat = np.frombuffer(data, dtype="<f4")
    params, off = {}, 0
    for n, s in expected:
        k = int(np.prod(s))
        params[n] = Tensor(flat[off:off + k].reshape(s).astype(np.float32), name=n)
        off += k
    return Detector(stored, g, params), header.get("extra", {})
