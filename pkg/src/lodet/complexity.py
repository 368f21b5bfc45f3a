"""FLOPs and parameter accounting.

Convention: a convolution costs ``2 * W_out * H_out * (k*k*C_in/g + bias) * C_out``,
i.e. 2 units per multiply-accumulate and 2 per bias add. Concatenation,
splitting, addition of branch outputs, up/down-sampling and channel shuffles
cost 0 FLOPs; shuffles are reported separately as element moves.

Closed forms (all multiples of ``W*H*C``):

==============  =======================  ==========================================
tag             coefficient of W*H*C     wiring
==============  =======================  ==========================================
2SConv          46 + 8C                  DW(C), 1x1 C->2C, DW on C of the 2C, 1x1 2C->C
2CSA            22 + C                   two CSA blocks, each an SConv on C/2 channels
CSA-DRF         33 + 3C/2                three C/2->C/2 SConv-shaped paths
FeatureBalance  13 + 2C_in + C/2         1x1 C_in->C, then one CSA block
NewNeckBranch   48 + 6C + 2C_in          feature balance, 1x1 2C->C fuse, CSA-DRF
BaseNeckBranch  94 + 16C + 2C_in         1x1 C_in->C, two 2SConv blocks
==============  =======================  ==========================================

The conditional depthwise conv inside CSA-DRF is charged like a plain 3x3
depthwise conv with bias. Its routing, kernel mixing and extra dilation
rates are itemized in a separate surcharge that the closed forms exclude.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction

from .graph import CONV_KINDS, GraphBuilder, LayerSpec, ModuleGraph

MODULES = ("2SConv", "2CSA", "CSA-DRF", "FeatureBalance", "NewNeckBranch", "BaseNeckBranch")
BYTES_PER_PARAM = 4


def coefficient(module: str, C: int, C_in: int | None = None) -> Fraction:
    """Coefficient of ``W*H*C`` in the closed form."""
    C = Fraction(C)
    if module == "2SConv":
        return 46 + 8 * C
    if module == "2CSA":
        return 22 + C
    if module == "CSA-DRF":
        return 33 + 3 * C / 2
    if module in ("FeatureBalance", "NewNeckBranch", "BaseNeckBranch"):
        if C_in is None:
            raise ValueError(f"{module} needs C_in")
        if module == "FeatureBalance":
            return 13 + 2 * C_in + C / 2
        if module == "NewNeckBranch":
            return 48 + 6 * C + 2 * C_in
        return 94 + 16 * C + 2 * C_in
    raise ValueError(f"unknown module tag {module!r}")


def closed_form(module: str, W: int, H: int, C: int, C_in: int | None = None) -> int:
    if min(W, H, C) < 1 or (C_in is not None and C_in < 1):
        raise ValueError("closed_form arguments must be positive integers")
    if module in ("2CSA", "CSA-DRF", "FeatureBalance", "NewNeckBranch") and C % 2:
        raise ValueError(f"{module} splits channels in half; C={C} is odd")
    total = coefficient(module, C, C_in) * W * H * C
    assert total.denominator == 1
    return int(total)


def layer_flops(spec: LayerSpec) -> int:
    """Convolution FLOPs of one layer; non-conv kinds cost 0."""
    if spec.kind not in CONV_KINDS:
        return 0
    if spec.C_in % spec.g:
        raise ValueError(f"invalid spec: C_in={spec.C_in} not divisible by g={spec.g}")
    return 2 * spec.W * spec.H * (spec.k * spec.k * spec.C_in // spec.g + int(spec.has_bias)) * spec.C_out


def layer_moves(spec: LayerSpec) -> int:
    """Element moves of a channel shuffle (0 for other kinds)."""
    return spec.W * spec.H * spec.C_out if spec.kind == "shuffle" else 0


# ------------------------------------------------------------- shadow pass

@dataclass
class NodeCount:
    name: str
    module: str
    kind: str
    flops: int
    surcharge: dict[str, int]
    moves: int
    params: int


def _out_extent(n: int, k: int, stride: int, dilation: int) -> int:
    pad = dilation * (k - 1) // 2
    return (n + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def cond_surcharge(C: int, H: int, W: int, experts: int, dilations, mode: str) -> dict[str, int]:
    """Cost of a conditional depthwise conv beyond one plain 3x3 depthwise conv with bias."""
    d = len(dilations) if mode == "learned" else 1
    items = {
        "pool": H * W * C,
        "route": 2 * (C * experts + experts),
        "mix": 2 * experts * 9 * C,
    }
    if mode == "learned":
        items["dilation_route"] = 2 * (C * d + d)
        items["extra_dilations"] = (d - 1) * 2 * H * W * 9 * C
        items["combine"] = 2 * d * H * W * C
    return items


def shadow_pass(graph: ModuleGraph) -> list[NodeCount]:
    """Count operations node by node, propagating shapes independently of the specs.

    Convolution work is derived from the actual weight shapes and the
    propagated input extents; a mismatch with the declared spec is an error.
    """
    shapes = dict(graph.inputs)
    out = []
    for node in graph.nodes.values():
        s = node.spec
        try:
            ins = [shapes[i] for i in node.inputs]
        except KeyError as e:
            raise ValueError(f"shape propagation failed at {node.name}: missing {e}") from e
        flops, moves, sur = 0, 0, {}
        if s.kind == "conv":
            c, h, w = ins[0]
            co, cg, kh, kw = graph.param_shapes[f"{node.name}.weight"]
            if c % cg:
                raise ValueError(f"shape propagation failed at {node.name}: {c} channels vs group width {cg}")
            ho = _out_extent(h, kh, s.stride, s.dilation)
            wo = _out_extent(w, kw, s.stride, s.dilation)
            macs = ho * wo * co * cg * kh * kw
            adds = ho * wo * co if f"{node.name}.bias" in graph.param_shapes else 0
            flops = 2 * macs + 2 * adds
            shape = (co, ho, wo)
        elif s.kind == "cond_dwconv":
            c, h, w = ins[0]
            k, ce, _, kh, kw = graph.param_shapes[f"{node.name}.experts"]
            if ce != c:
                raise ValueError(f"shape propagation failed at {node.name}: experts sized for {ce} channels")
            macs = h * w * c * kh * kw
            adds = h * w * c if f"{node.name}.bias" in graph.param_shapes else 0
            flops = 2 * macs + 2 * adds
            sur = cond_surcharge(c, h, w, k, s.option("dilations"), s.option("mode"))
            shape = (c, h, w)
        elif s.kind == "concat":
            if len({x[1:] for x in ins}) != 1:
                raise ValueError(f"shape propagation failed at {node.name}: concat of {ins}")
            shape = (sum(x[0] for x in ins),) + ins[0][1:]
        elif s.kind == "add":
            if len(set(ins)) != 1:
                raise ValueError(f"shape propagation failed at {node.name}: add of {ins}")
            shape = ins[0]
        elif s.kind == "split":
            shape = (s.option("hi") - s.option("lo"),) + ins[0][1:]
        elif s.kind == "shuffle":
            shape = ins[0]
            moves = shape[0] * shape[1] * shape[2]
        elif s.kind == "upsample":
            c, h, w = ins[0]
            shape = (c, 2 * h, 2 * w)
        elif s.kind == "pool":
            c, h, w = ins[0]
            shape = (c, h // 2, w // 2)
        else:
            raise ValueError(f"shape propagation failed at {node.name}: unknown kind {s.kind}")
        if shape != (s.C_out, s.H, s.W):
            raise ValueError(f"shape propagation failed at {node.name}: got {shape}, spec says "
                             f"{(s.C_out, s.H, s.W)}")
        shapes[node.name] = shape
        params = graph.param_count(f"{node.name}.")
        out.append(NodeCount(node.name, node.module, s.kind, flops, sur, moves, params))
    return out


# ----------------------------------------------------------------- reports

@dataclass
class ModuleRow:
    name: str
    closed_form: int | None
    counted: int
    params: int
    shuffle_moves: int
    surcharge: dict[str, int] = field(default_factory=dict)

    @property
    def params_mb(self) -> float:
        return self.params * BYTES_PER_PARAM / 2 ** 20

    @property
    def surcharge_total(self) -> int:
        return sum(self.surcharge.values())


@dataclass
class FlopsReport:
    rows: list[ModuleRow]
    nodes: list[NodeCount]
    meta: dict = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(r.counted for r in self.rows)

    @property
    def total_surcharge(self) -> int:
        return sum(r.surcharge_total for r in self.rows)

    @property
    def params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def params_mb(self) -> float:
        return self.params * BYTES_PER_PARAM / 2 ** 20

    def row(self, name: str) -> ModuleRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def records(self) -> list[dict]:
        return [{"name": r.name, "closed_form": r.closed_form, "counted": r.counted, "params": r.params,
                 "shuffle_moves": r.shuffle_moves, "surcharge": dict(r.surcharge)} for r in self.rows]

    def write(self, path):
        doc = {"meta": self.meta, "modules": self.records(),
               "total": self.total, "total_surcharge": self.total_surcharge,
               "params": self.params, "params_mb": self.params_mb}
        with open(path, "w") as f:
            json.dump(doc, f, indent=1)
            f.write("\n")

    def table(self) -> str:
        head = f"{'component':<12}{'GFLOPs':>12}{'closed form':>16}{'extra (beyond)':>16}{'shuffle moves':>15}" \
               f"{'params':>12}{'MB':>9}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            cf = "-" if r.closed_form is None else f"{r.closed_form / 1e9:.6f}"
            lines.append(f"{r.name:<12}{r.counted / 1e9:>12.6f}{cf:>16}{r.surcharge_total / 1e9:>16.6f}"
                         f"{r.shuffle_moves:>15d}{r.params:>12d}{r.params_mb:>9.3f}")
        lines.append("-" * len(head))
        lines.append(f"{'total':<12}{self.total / 1e9:>12.6f}{'':>16}{self.total_surcharge / 1e9:>16.6f}"
                     f"{sum(r.shuffle_moves for r in self.rows):>15d}{self.params:>12d}{self.params_mb:>9.3f}")
        return "\n".join(lines)


def brute_force_count(graph: ModuleGraph, depth: int = 1, closed: dict[str, int] | None = None) -> FlopsReport:
    """Aggregate the shadow-pass counts by the first ``depth`` scope components."""
    nodes = shadow_pass(graph)
    rows: dict[str, ModuleRow] = {}
    for n in nodes:
        key = ".".join(n.module.split(".")[:depth]) or "(root)"
        r = rows.setdefault(key, ModuleRow(key, None, 0, 0, 0))
        r.counted += n.flops
        r.params += n.params
        r.shuffle_moves += n.moves
        for k, v in n.surcharge.items():
            r.surcharge[k] = r.surcharge.get(k, 0) + v
    for key, v in (closed or {}).items():
        rows[key].closed_form = v
    return FlopsReport(list(rows.values()), nodes, dict(graph.meta))


# ---------------------------------------------------- single-module graphs

def module_graph(module: str, W: int, H: int, C: int, C_in: int | None = None, **drf_kw) -> ModuleGraph:
    """The implemented block wiring for a closed-form tag, on a (C, H, W) input."""
    from . import blocks

    b = GraphBuilder()
    if module == "2SConv":
        x = b.input("x", C, H, W)
        out = blocks.sconv_block2(b, x)
    elif module == "2CSA":
        x = b.input("x", C, H, W)
        out = blocks.csa(b, blocks.csa(b, x, name="csa1"), name="csa2")
    elif module == "CSA-DRF":
        x = b.input("x", C, H, W)
        out = blocks.csa_drf(b, x, **drf_kw)
    elif module == "FeatureBalance":
        x = b.input("x", C_in, H, W)
        out = blocks.feature_balance(b, x, C)
    elif module in ("NewNeckBranch", "BaseNeckBranch"):
        x = b.input("x", C_in, H, W)
        lat = b.input("lateral", C, H, W)
        if module == "NewNeckBranch":
            out = blocks.new_neck_branch(b, x, lat, C, **drf_kw)
        else:
            out = blocks.base_neck_branch(b, x, lat, C)
    else:
        raise ValueError(f"unknown module tag {module!r}")
    return b.build({"out": out}, {"module": module})


def count_module(module: str, W: int, H: int, C: int, C_in: int | None = None) -> ModuleRow:
    g = module_graph(module, W, H, C, C_in)
    rep = brute_force_count(g, depth=0)
    row = rep.rows[0]
    return ModuleRow(module, closed_form(module, W, H, C, C_in), row.counted, row.params, row.shuffle_moves,
                     row.surcharge)


# ------------------------------------------------------------- inequalities

@dataclass
class InequalityRow:
    C: int
    C_in: int
    csa2: Fraction
    csa_drf: Fraction
    sconv2: Fraction
    bound: Fraction
    new_branch: Fraction
    base_branch: Fraction
    shuffle_vs_pw: bool

    @property
    def ok(self) -> bool:
        return (self.csa2 < self.csa_drf < self.sconv2 and self.csa2 < self.bound
                and self.new_branch < self.base_branch and self.shuffle_vs_pw)


def verify_inequalities(c_values, c_in_divisors=(8, 4, 2)) -> list[InequalityRow]:
    """Check the complexity ordering at each even ``C`` and each ``C_in = C / d``.

    Checked per point: 2CSA < CSA-DRF < 2SConv, 2CSA < (26 + 5C), new neck
    branch < baseline branch, and shuffle element moves (C per pixel) below the
    FLOPs of the CSA block's 1x1 conv. ``C_in`` is floored at 1.
    """
    rows = []
    for C in c_values:
        if C < 2 or C % 2:
            raise ValueError(f"C must be an even integer >= 2, got {C}")
        for d in c_in_divisors:
            c_in = max(1, C // d)
            half = C // 2
            pw_flops = 2 * (half + 1) * half  # per pixel
            rows.append(InequalityRow(
                C, c_in, coefficient("2CSA", C), coefficient("CSA-DRF", C), coefficient("2SConv", C),
                Fraction(26 + 5 * C), coefficient("NewNeckBranch", C, c_in), coefficient("BaseNeckBranch", C, c_in),
                C < pw_flops))
    return rows
