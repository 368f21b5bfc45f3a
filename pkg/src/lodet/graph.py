"""Declarative layer graphs shared by the executor and the complexity analyzer.

A :class:`ModuleGraph` is an ordered list of nodes, each a :class:`LayerSpec`
plus the names of the nodes feeding it. Nodes are appended in execution order
by :class:`GraphBuilder`, so the node list is a topological order by
construction. Parameters live outside the graph in a flat ``{name: Tensor}``
dict keyed ``"<node>.<param>"``.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from .engine import Tensor

CONV_KINDS = ("conv", "cond_dwconv")
KINDS = CONV_KINDS + ("input", "concat", "add", "split", "shuffle", "upsample", "pool")


@dataclass(frozen=True)
class LayerSpec:
    """One layer. ``W``/``H`` are output extents; ``extra`` holds kind-specific options."""

    kind: str
    W: int
    H: int
    C_in: int
    C_out: int
    k: int = 1
    g: int = 1
    dilation: int = 1
    stride: int = 1
    has_bias: bool = False
    act: str | None = None
    extra: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if min(self.W, self.H, self.C_in, self.C_out, self.k, self.g, self.dilation, self.stride) < 1:
            raise ValueError(f"non-positive extent in {self}")
        if self.C_in % self.g:
            raise ValueError(f"C_in={self.C_in} not divisible by g={self.g}")

    def option(self, key, default=None):
        return dict(self.extra).get(key, default)


@dataclass(frozen=True)
class Node:
    name: str
    spec: LayerSpec
    inputs: tuple[str, ...]
    module: str


@dataclass
class ModuleGraph:
    nodes: dict[str, Node]
    inputs: dict[str, tuple[int, int, int]]
    outputs: dict[str, str]
    param_shapes: dict[str, tuple[int, ...]]
    param_init: dict[str, tuple]
    meta: dict = field(default_factory=dict)

    def check(self):
        """Verify acyclic ordering and that every consumer's channels match its producers."""
        seen = set(self.inputs)
        for node in self.nodes.values():
            if node.spec.kind == "input":
                continue
            for src in node.inputs:
                if src not in seen:
                    raise ValueError(f"node {node.name} consumes {src} before it is produced")
            seen.add(node.name)
            c_in = [self.channels(s) for s in node.inputs]
            kind = node.spec.kind
            expect = sum(c_in) if kind == "concat" else c_in[0]
            if kind == "add" and len(set(c_in)) != 1:
                raise ValueError(f"add node {node.name} has mismatched inputs {c_in}")
            if node.spec.C_in != expect:
                raise ValueError(f"node {node.name} expects {node.spec.C_in} channels, producers give {expect}")
        for out, src in self.outputs.items():
            if src not in seen:
                raise ValueError(f"output {out} refers to unknown node {src}")
        return self

    def channels(self, name: str) -> int:
        if name in self.inputs:
            return self.inputs[name][0]
        return self.nodes[name].spec.C_out

    def conv_nodes(self):
        return [n for n in self.nodes.values() if n.spec.kind in CONV_KINDS]

    def param_count(self, prefix: str = "") -> int:
        return sum(int(np.prod(s)) for k, s in self.param_shapes.items() if k.startswith(prefix))

    def node_params(self, node: str) -> list[str]:
        return [k for k in self.param_shapes if k.rsplit(".", 1)[0] == node or k.startswith(node + ".")]


class GraphBuilder:
    """Append-only graph construction with shape tracking."""

    def __init__(self, norm: bool = False):
        self.norm = norm
        self._nodes: dict[str, Node] = {}
        self._inputs: dict[str, tuple[int, int, int]] = {}
        self._shape: dict[str, tuple[int, int, int]] = {}
        self._params: dict[str, tuple[int, ...]] = {}
        self._init: dict[str, tuple] = {}
        self._scope: list[str] = []

    @contextlib.contextmanager
    def scope(self, name: str):
        self._scope.append(name)
        try:
            yield
        finally:
            self._scope.pop()

    @property
    def module(self) -> str:
        return ".".join(self._scope)

    def _name(self, base: str) -> str:
        name = ".".join(self._scope + [base])
        if name in self._nodes or name in self._inputs:
            k = 1
            while f"{name}_{k}" in self._nodes:
                k += 1
            name = f"{name}_{k}"
        return name

    def shape(self, x: str) -> tuple[int, int, int]:
        """(C, H, W) of a node's output."""
        return self._shape[x]

    def channels(self, x: str) -> int:
        return self._shape[x][0]

    def input(self, name: str, c: int, h: int, w: int) -> str:
        self._inputs[name] = (c, h, w)
        self._shape[name] = (c, h, w)
        return name

    def _add(self, base, spec, inputs, out_shape):
        name = self._name(base)
        self._nodes[name] = Node(name, spec, tuple(inputs), self.module)
        self._shape[name] = out_shape
        return name

    def _param(self, name, shape, init):
        self._params[name] = tuple(int(s) for s in shape)
        self._init[name] = init

    def conv(self, x: str, c_out: int, k: int = 1, stride: int = 1, dilation: int = 1, groups: int = 1,
             act: str | None = "relu6", name: str = "conv", init: tuple | None = None) -> str:
        c, h, w = self.shape(x)
        if c % groups or c_out % groups:
            raise ValueError(f"conv {name}: channels {c}->{c_out} not divisible by groups {groups}")
        pad = dilation * (k - 1) // 2
        ho = (h + 2 * pad - dilation * (k - 1) - 1) // stride + 1
        wo = (w + 2 * pad - dilation * (k - 1) - 1) // stride + 1
        extra = (("norm", True),) if self.norm else ()
        spec = LayerSpec("conv", wo, ho, c, c_out, k, groups, dilation, stride, True, act, extra)
        node = self._add(name, spec, [x], (c_out, ho, wo))
        self._param(f"{node}.weight", (c_out, c // groups, k, k), ("kaiming", (c // groups) * k * k))
        self._param(f"{node}.bias", (c_out,), init or ("zeros",))
        return node

    def cond_dwconv(self, x: str, experts: int = 4, dilations=(1, 2, 3), mode: str = "learned",
                    static_d: int = 2, name: str = "cdw") -> str:
        c, h, w = self.shape(x)
        dilations = tuple(int(d) for d in dilations)
        if experts < 1:
            raise ValueError("conditional conv needs at least one expert")
        if not dilations or min(dilations) < 1:
            raise ValueError(f"dilation set must be non-empty positive integers, got {dilations}")
        if mode not in ("learned", "static"):
            raise ValueError(f"dilation mode must be 'learned' or 'static', got {mode!r}")
        if mode == "static" and static_d < 1:
            raise ValueError("static dilation must be >= 1")
        extra = (("experts", experts), ("dilations", dilations), ("mode", mode), ("static_d", static_d))
        d_spec = static_d if mode == "static" else max(dilations)
        spec = LayerSpec("cond_dwconv", w, h, c, c, 3, c, d_spec, 1, True, None, extra)
        node = self._add(name, spec, [x], (c, h, w))
        self._param(f"{node}.experts", (experts, c, 1, 3, 3), ("kaiming", 9))
        self._param(f"{node}.bias", (c,), ("zeros",))
        self._param(f"{node}.route.weight", (experts, c), ("kaiming_linear", c))
        self._param(f"{node}.route.bias", (experts,), ("zeros",))
        if mode == "learned":
            self._param(f"{node}.dil.weight", (len(dilations), c), ("kaiming_linear", c))
            self._param(f"{node}.dil.bias", (len(dilations),), ("zeros",))
        return node

    def concat(self, xs, name: str = "cat") -> str:
        shapes = [self.shape(x) for x in xs]
        if len({s[1:] for s in shapes}) != 1:
            raise ValueError(f"concat {name}: spatial mismatch {shapes}")
        c = sum(s[0] for s in shapes)
        _, h, w = shapes[0]
        return self._add(name, LayerSpec("concat", w, h, c, c), xs, (c, h, w))

    def add(self, xs, name: str = "add") -> str:
        shapes = {self.shape(x) for x in xs}
        if len(shapes) != 1:
            raise ValueError(f"add {name}: shape mismatch {shapes}")
        c, h, w = shapes.pop()
        return self._add(name, LayerSpec("add", w, h, c, c), xs, (c, h, w))

    def split(self, x: str, lo: int, hi: int, name: str = "split") -> str:
        c, h, w = self.shape(x)
        if not 0 <= lo < hi <= c:
            raise ValueError(f"split {name}: range [{lo},{hi}) outside {c} channels")
        spec = LayerSpec("split", w, h, c, hi - lo, extra=(("lo", lo), ("hi", hi)))
        return self._add(name, spec, [x], (hi - lo, h, w))

    def shuffle(self, x: str, groups: int = 2, name: str = "shuffle") -> str:
        c, h, w = self.shape(x)
        if c % groups:
            raise ValueError(f"shuffle {name}: {c} channels not divisible by {groups} groups")
        return self._add(name, LayerSpec("shuffle", w, h, c, c, extra=(("groups", groups),)), [x], (c, h, w))

    def upsample(self, x: str, name: str = "up") -> str:
        c, h, w = self.shape(x)
        return self._add(name, LayerSpec("upsample", 2 * w, 2 * h, c, c, stride=1), [x], (c, 2 * h, 2 * w))

    def pool(self, x: str, name: str = "down") -> str:
        c, h, w = self.shape(x)
        if h % 2 or w % 2:
            raise ValueError(f"pool {name}: odd extents {h}x{w}")
        return self._add(name, LayerSpec("pool", w // 2, h // 2, c, c, k=2, stride=2), [x], (c, h // 2, w // 2))

    def build(self, outputs: dict[str, str], meta: dict | None = None) -> ModuleGraph:
        g = ModuleGraph(dict(self._nodes), dict(self._inputs), dict(outputs), dict(self._params),
                        dict(self._init), dict(meta or {}))
        return g.check()


def init_params(graph: ModuleGraph, seed: int = 0, dtype=np.float64) -> dict[str, Tensor]:
    """Kaiming-uniform (fan-in) weights; biases from each parameter's init rule."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in graph.param_shapes.items():
        rule = graph.param_init[name]
        if rule[0] == "kaiming":
            bound = math.sqrt(6.0 / rule[1])
            arr = rng.uniform(-bound, bound, size=shape)
        elif rule[0] == "kaiming_linear":
            bound = 1.0 / math.sqrt(rule[1])
            arr = rng.uniform(-bound, bound, size=shape)
        elif rule[0] == "zeros":
            arr = np.zeros(shape)
        elif rule[0] == "const":
            arr = np.asarray(rule[1], dtype=np.float64).reshape(shape)
        else:
            raise ValueError(f"unknown init rule {rule!r} for {name}")
        params[name] = Tensor(arr.astype(dtype), name=name)
    return params


def run_graph(graph: ModuleGraph, params: dict[str, Tensor], inputs: dict[str, Tensor],
              keep: bool = False) -> dict[str, Tensor]:
    """Execute the graph. Returns named outputs, or every node value when ``keep``."""
    from . import blocks

    vals: dict[str, Tensor] = {}
    for name, (c, h, w) in graph.inputs.items():
        if name not in inputs:
            raise KeyError(f"missing graph input {name!r}")
        x = inputs[name]
        if x.ndim != 4 or x.shape[1:] != (c, h, w):
            raise ValueError(f"input {name!r} has shape {x.shape}, graph expects (N, {c}, {h}, {w})")
        vals[name] = x
    for node in graph.nodes.values():
        s = node.spec
        xs = [vals[i] for i in node.inputs]
        p = node.name
        if s.kind == "conv":
            y = E.conv2d(xs[0], params[f"{p}.weight"], params[f"{p}.bias"], stride=s.stride,
                         dilation=s.dilation, groups=s.g, padding=s.dilation * (s.k - 1) // 2)
            if s.option("norm"):
                y = E.channel_norm(y)
            if s.act == "relu6":
                y = E.relu6(y)
        elif s.kind == "cond_dwconv":
            y = blocks.dynamic_dilation_forward(
                xs[0], blocks.cond_params(params, p), s.option("dilations"), s.option("mode"),
                static_d=s.option("static_d"))
        elif s.kind == "concat":
            y = E.concat(xs, axis=1)
        elif s.kind == "add":
            y = xs[0]
            for t in xs[1:]:
                y = y + t
        elif s.kind == "split":
            y = E.channels(xs[0], s.option("lo"), s.option("hi"))
        elif s.kind == "shuffle":
            y = blocks.channel_shuffle(xs[0], s.option("groups"))
        elif s.kind == "upsample":
            y = E.upsample2x(xs[0])
        elif s.kind == "pool":
            y = E.max_pool2x(xs[0])
        else:
            raise ValueError(f"cannot execute node kind {s.kind!r}")
        vals[node.name] = y
    if keep:
        return vals
    return {out: vals[src] for out, src in graph.outputs.items()}
