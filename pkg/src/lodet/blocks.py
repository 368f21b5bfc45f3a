"""Neck building blocks.

Functional primitives (``channel_shuffle``, ``cond_dwconv_forward``,
``dynamic_dilation_forward``) operate on tensors directly. Composite blocks
are written once, as graph fragments that append nodes to a
:class:`~lodet.graph.GraphBuilder`; the ``*_forward`` helpers build a
one-block graph around an input and execute it, so the executed network and
the FLOPs analyzer always see the same wiring.

Channel layout conventions:

* CSA: ``shuffle(concat(sconv(x[:C/2]), x[C/2:]))``
* DRF: ``concat(sconv(x[:C/2]), pw(cdw(x[C/2:])))``, no shuffle
* CSA-DRF: ``s = sconv(x[:C/2]) + pw(cdw(x[C/2:]))``, then
  ``shuffle(concat(s, sconv(s)))``
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as E
from .engine import Tensor
from .graph import GraphBuilder, ModuleGraph, run_graph


def channel_shuffle(x: Tensor, groups: int) -> Tensor:
    n, c, h, w = x.shape
    if c % groups:
        raise ValueError(f"channel_shuffle: {c} channels not divisible by {groups} groups")
    if groups == 1:
        return x
    y = x.reshape(n, groups, c // groups, h, w).transpose(0, 2, 1, 3, 4)
    return y.reshape(n, c, h, w)


def shuffle_permutation(c: int, groups: int) -> np.ndarray:
    """Source channel for each output position of ``channel_shuffle``."""
    return np.arange(c).reshape(groups, c // groups).T.reshape(-1)


# ----------------------------------------------------- conditional depthwise

@dataclass
class CondParams:
    experts: Tensor            # (K, C, 1, 3, 3)
    route_w: Tensor            # (K, C)
    route_b: Tensor            # (K,)
    bias: Tensor | None = None  # (C,)
    dil_w: Tensor | None = None  # (|D|, C)
    dil_b: Tensor | None = None  # (|D|,)


def cond_params(params: dict[str, Tensor], node: str) -> CondParams:
    return CondParams(params[f"{node}.experts"], params[f"{node}.route.weight"], params[f"{node}.route.bias"],
                      params.get(f"{node}.bias"), params.get(f"{node}.dil.weight"), params.get(f"{node}.dil.bias"))


def routing_weights(x: Tensor, p: CondParams) -> Tensor:
    """Expert weights in (0, 1): sigmoid(linear(global-average-pool(x))), shape (N, K)."""
    k, c = p.route_w.shape
    if p.experts.shape[0] != k:
        raise ValueError(f"routing emits {k} weights for {p.experts.shape[0]} experts")
    if x.shape[1] != c:
        raise ValueError(f"routing expects {c} channels, input has {x.shape[1]}")
    return E.sigmoid(E.linear(E.global_avg_pool(x), p.route_w, p.route_b))


def mixed_kernels(p: CondParams, r: Tensor) -> list[Tensor]:
    """Per-sample depthwise kernels ``sum_k r[n, k] * expert_k``."""
    k = p.experts.shape[0]
    if k == 0:
        raise ValueError("conditional conv needs at least one expert")
    out = []
    for n in range(r.shape[0]):
        rn = r[n].reshape(k, 1, 1, 1, 1)
        out.append((rn * p.experts).sum(axis=0))
    return out


def cond_dwconv_forward(x: Tensor, experts: Tensor, routing_params, dilation: int,
                        bias: Tensor | None = None) -> Tensor:
    """Input-conditioned depthwise 3x3 conv at one dilation rate.

    ``routing_params`` is ``(weight (K, C), bias (K,))``.
    """
    if experts.shape[0] == 0:
        raise ValueError("conditional conv needs at least one expert")
    p = CondParams(experts, routing_params[0], routing_params[1], bias)
    return dynamic_dilation_forward(x, p, (dilation,), "static", static_d=dilation)


def dynamic_dilation_forward(x: Tensor, p: CondParams, dilations, mode: str = "learned",
                             static_d: int | None = None, forced: np.ndarray | None = None) -> Tensor:
    """Conditional depthwise conv with a learned (soft) or fixed dilation rate.

    Learned mode runs the mixed kernel at every rate in ``dilations`` and
    combines the results with softmax weights from the pooled input. ``forced``
    overrides those weights (shape (|D|,) or (N, |D|)).
    """
    dilations = tuple(dilations)
    if not dilations:
        raise ValueError("dilation set is empty")
    if min(dilations) < 1 or (static_d is not None and static_d < 1):
        raise ValueError("dilation rates must be >= 1")
    n, c = x.shape[:2]
    r = routing_weights(x, p)
    kernels = mixed_kernels(p, r)
    if mode == "static":
        d = static_d if static_d is not None else dilations[0]
        outs = [E.conv2d(x[i:i + 1], kernels[i], groups=c, dilation=d, padding=d) for i in range(n)]
    elif mode == "learned":
        if forced is not None:
            s = Tensor(np.broadcast_to(np.asarray(forced, dtype=x.dtype), (n, len(dilations))).copy())
        else:
            if p.dil_w is None or p.dil_w.shape[0] != len(dilations):
                raise ValueError(f"dilation routing must emit {len(dilations)} weights")
            s = E.softmax(E.linear(E.global_avg_pool(x), p.dil_w, p.dil_b), axis=1)
        outs = []
        for i in range(n):
            xi = x[i:i + 1]
            acc = None
            for j, d in enumerate(dilations):
                y = E.conv2d(xi, kernels[i], groups=c, dilation=d, padding=d) * s[i, j]
                acc = y if acc is None else acc + y
            outs.append(acc)
    else:
        raise ValueError(f"unknown dilation mode {mode!r}")
    out = outs[0] if n == 1 else E.concat(outs, axis=0)
    if p.bias is not None:
        out = out + p.bias.reshape(1, c, 1, 1)
    return out


# ------------------------------------------------------------ graph fragments

def sconv(b: GraphBuilder, x: str, c_out: int, name: str = "sconv") -> str:
    """3x3 depthwise conv then 1x1 conv with ReLU6."""
    c = b.channels(x)
    with b.scope(name):
        y = b.conv(x, c, k=3, groups=c, act=None, name="dw")
        return b.conv(y, c_out, k=1, name="pw")


def _halves(b: GraphBuilder, x: str, block: str):
    c = b.channels(x)
    if c % 2:
        raise ValueError(f"{block} needs an even channel count, got {c}")
    return b.split(x, 0, c // 2, name="lo"), b.split(x, c // 2, c, name="hi"), c // 2


def csa(b: GraphBuilder, x: str, name: str = "csa") -> str:
    with b.scope(name):
        lo, hi, half = _halves(b, x, "CSA block")
        y = sconv(b, lo, half)
        return b.shuffle(b.concat([y, hi]), 2)


def drf_branch(b: GraphBuilder, x: str, c_out: int, experts: int = 4, dilations=(1, 2, 3),
               mode: str = "learned", static_d: int = 2, name: str = "drf") -> str:
    """Conditional dilated depthwise conv followed by a 1x1 conv."""
    with b.scope(name):
        y = b.cond_dwconv(x, experts, dilations, mode, static_d, name="cdw")
        return b.conv(y, c_out, k=1, name="pw")


def drf(b: GraphBuilder, x: str, name: str = "drf", **drf_kw) -> str:
    with b.scope(name):
        lo, hi, half = _halves(b, x, "DRF block")
        ya = sconv(b, lo, half, name="a")
        yb = drf_branch(b, hi, half, name="b", **drf_kw)
        return b.concat([ya, yb])


def csa_drf(b: GraphBuilder, x: str, name: str = "csa_drf", **drf_kw) -> str:
    with b.scope(name):
        lo, hi, half = _halves(b, x, "CSA-DRF")
        ya = sconv(b, lo, half, name="a")
        yb = drf_branch(b, hi, half, name="b", **drf_kw)
        s = b.add([ya, yb], name="sum")
        t = sconv(b, s, half, name="c")
        return b.shuffle(b.concat([s, t]), 2)


def feature_balance(b: GraphBuilder, x: str, c_target: int, name: str = "fb") -> str:
    with b.scope(name):
        y = b.conv(x, c_target, k=1, name="proj")
        return csa(b, y)


def sconv_block2(b: GraphBuilder, x: str, name: str = "sconv2") -> str:
    """Baseline pair of separable convs: DW(C), 1x1 C->2C, DW on C of the 2C, 1x1 2C->C."""
    c = b.channels(x)
    with b.scope(name):
        y = b.conv(x, c, k=3, groups=c, act=None, name="dw1")
        y = b.conv(y, 2 * c, k=1, name="pw1")
        lo = b.split(y, 0, c, name="lo")
        hi = b.split(y, c, 2 * c, name="hi")
        z = b.conv(lo, c, k=3, groups=c, act=None, name="dw2")
        return b.conv(b.concat([z, hi]), c, k=1, name="pw2")


def new_neck_branch(b: GraphBuilder, shallow: str, lateral: str, c: int, name: str = "branch",
                    **drf_kw) -> str:
    """Feature balance on the shallow tap, concat with the lateral path, fuse 2C->C, CSA-DRF."""
    with b.scope(name):
        fb = feature_balance(b, shallow, c)
        if b.channels(lateral) != c:
            raise ValueError(f"lateral input has {b.channels(lateral)} channels, branch width is {c}")
        y = b.conv(b.concat([fb, lateral]), c, k=1, name="fuse")
        return csa_drf(b, y, **drf_kw)


def base_neck_branch(b: GraphBuilder, shallow: str, lateral: str, c: int, name: str = "branch") -> str:
    """Baseline branch: project the shallow tap to C, add the lateral path, two SConv blocks."""
    with b.scope(name):
        y = b.conv(shallow, c, k=1, name="proj")
        if b.channels(lateral) != c:
            raise ValueError(f"lateral input has {b.channels(lateral)} channels, branch width is {c}")
        y = b.add([y, lateral], name="merge")
        y = sconv_block2(b, y, name="s1")
        return sconv_block2(b, y, name="s2")


# ------------------------------------------------------------ block wrappers

def block_graph(fragment, c: int, h: int, w: int, *args, extra_inputs=(), norm=False, **kw) -> ModuleGraph:
    """Single-block graph with input ``x`` of shape (c, h, w)."""
    b = GraphBuilder(norm=norm)
    x = b.input("x", c, h, w)
    more = [b.input(name, *shape) for name, shape in extra_inputs]
    out = fragment(b, x, *more, *args, **kw)
    return b.build({"out": out})


def _run_block(fragment, x: Tensor, params, *args, **kw) -> Tensor:
    g = block_graph(fragment, *x.shape[1:], *args, **kw)
    return run_graph(g, params, {"x": x})["out"]


def sconv_forward(x: Tensor, params: dict[str, Tensor], c_out: int) -> Tensor:
    """Params: ``sconv.dw.weight``, ``sconv.dw.bias``, ``sconv.pw.weight``, ``sconv.pw.bias``."""
    if params["sconv.dw.weight"].shape[0] != x.shape[1]:
        raise ValueError(f"SConv weights sized for {params['sconv.dw.weight'].shape[0]} channels, "
                         f"input has {x.shape[1]}")
    return _run_block(sconv, x, params, c_out)


def csa_block_forward(x: Tensor, params: dict[str, Tensor]) -> Tensor:
    return _run_block(csa, x, params)


def drf_block_forward(x: Tensor, params: dict[str, Tensor], **drf_kw) -> Tensor:
    return _run_block(drf, x, params, **drf_kw)


def csa_drf_forward(x: Tensor, params: dict[str, Tensor], **drf_kw) -> Tensor:
    return _run_block(csa_drf, x, params, **drf_kw)


def feature_balance_forward(shallow: Tensor, params: dict[str, Tensor], c_target: int) -> Tensor:
    if params["fb.proj.weight"].shape[1] != shallow.shape[1]:
        raise ValueError(f"feature balance expects {params['fb.proj.weight'].shape[1]} input channels, "
                         f"got {shallow.shape[1]}")
    return _run_block(feature_balance, shallow, params, c_target)
