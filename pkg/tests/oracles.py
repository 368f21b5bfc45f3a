"""Straight-line numpy oracles, independent of the graph executor."""

import numpy as np

from lodet.engine import conv2d_reference


def relu6(x):
    return np.clip(x, 0.0, 6.0)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def shuffle(x, groups):
    """Input channel c lands at output position g*(c mod C/g) + c // (C/g)."""
    c = x.shape[1]
    per = c // groups
    out = np.empty_like(x)
    for src in range(c):
        out[:, groups * (src % per) + src // per] = x[:, src]
    return out


def dw(x, w, b, dilation=1):
    return conv2d_reference(x, w, b, 1, dilation, x.shape[1], dilation)


def pw(x, w, b):
    return np.einsum("oc,nchw->nohw", w[:, :, 0, 0], x) + b[None, :, None, None]


def sconv(x, p, prefix):
    y = dw(x, p[f"{prefix}.dw.weight"], p[f"{prefix}.dw.bias"])
    return relu6(pw(y, p[f"{prefix}.pw.weight"], p[f"{prefix}.pw.bias"]))


def cond_dw(x, p, prefix, dilations, mode="learned", static_d=2):
    ex = p[f"{prefix}.experts"]
    out = []
    for n in range(x.shape[0]):
        xn = x[n:n + 1]
        pooled = xn.mean(axis=(2, 3))[0]
        r = sigmoid(p[f"{prefix}.route.weight"] @ pooled + p[f"{prefix}.route.bias"])
        kern = np.tensordot(r, ex, axes=(0, 0))
        zero = np.zeros(x.shape[1])
        if mode == "static":
            y = dw(xn, kern, zero, static_d)
        else:
            s = softmax(p[f"{prefix}.dil.weight"] @ pooled + p[f"{prefix}.dil.bias"])
            y = sum(s[j] * dw(xn, kern, zero, d) for j, d in enumerate(dilations))
        out.append(y + p[f"{prefix}.bias"][None, :, None, None])
    return np.concatenate(out)


def csa(x, p, prefix):
    half = x.shape[1] // 2
    y = sconv(x[:, :half], p, f"{prefix}.sconv")
    return shuffle(np.concatenate([y, x[:, half:]], axis=1), 2)


def drf_branch(x, p, prefix, dilations=(1, 2, 3)):
    y = cond_dw(x, p, f"{prefix}.cdw", dilations)
    return relu6(pw(y, p[f"{prefix}.pw.weight"], p[f"{prefix}.pw.bias"]))


def drf(x, p, prefix="drf"):
    half = x.shape[1] // 2
    return np.concatenate([sconv(x[:, :half], p, f"{prefix}.a"), drf_branch(x[:, half:], p, f"{prefix}.b")], axis=1)


def csa_drf(x, p, prefix="csa_drf"):
    half = x.shape[1] // 2
    s = sconv(x[:, :half], p, f"{prefix}.a") + drf_branch(x[:, half:], p, f"{prefix}.b")
    t = sconv(s, p, f"{prefix}.c")
    return shuffle(np.concatenate([s, t], axis=1), 2)


def feature_balance(x, p, prefix="fb"):
    y = relu6(pw(x, p[f"{prefix}.proj.weight"], p[f"{prefix}.proj.bias"]))
    return csa(y, p, f"{prefix}.csa")
