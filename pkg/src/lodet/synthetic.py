"""Synthetic oriented-object scenes with exact quadrilateral labels.

Each scene is a flat background with a few filled, anti-aliased convex
shapes. Shape families:

* ``rect``: a rotated rectangle
* ``kite``: a quadrilateral built directly from a random box code

Only shapes the box code can represent exactly are emitted (rejection
sampling), so labels decode back to themselves.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import dota
from .dsc_head import decode_obb, encode_obb, unrepresentable

PALETTE = ((220, 60, 40), (40, 170, 230), (240, 200, 40), (90, 200, 90), (180, 80, 200))
SHAPES = ("rect", "kite")


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 320
    objects: tuple[int, int] = (1, 3)
    classes: tuple[str, ...] = SHAPES
    rotation: tuple[float, float] = (0.0, 90.0)
    scale: tuple[float, float] = (40.0, 110.0)
    aspect: tuple[float, float] = (1.0, 2.0)
    supersample: int = 4
    margin: int = 4
    max_overlap: float = 0.0
    num_train: int = 16
    num_val: int = 0
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.objects[0] <= self.objects[1]:
            raise ValueError(f"invalid object count range {self.objects}")
        if not set(self.classes) <= set(SHAPES):
            raise ValueError(f"unknown shape classes {set(self.classes) - set(SHAPES)}")
        if self.scale[0] <= 0 or self.scale[1] < self.scale[0] or self.scale[1] > self.image_size - 2 * self.margin:
            raise ValueError(f"invalid scale range {self.scale}")


@dataclass
class Scene:
    image: np.ndarray                      # (S, S, 3) uint8
    objects: list[dota.LabeledObject] = field(default_factory=list)


def rotated_rect(cx, cy, l1, l2, theta_deg) -> np.ndarray:
    t = math.radians(theta_deg)
    u = np.array([math.cos(t), math.sin(t)])
    v = np.array([-math.sin(t), math.cos(t)])
    c = np.array([cx, cy])
    return np.array([c - l1 / 2 * u - l2 / 2 * v, c + l1 / 2 * u - l2 / 2 * v,
                     c + l1 / 2 * u + l2 / 2 * v, c - l1 / 2 * u + l2 / 2 * v])


def _sample_shape(spec: SceneSpec, kind: str, rng: np.random.Generator) -> np.ndarray:
    s = spec.image_size
    for _ in range(1000):
        size = rng.uniform(*spec.scale)
        if kind == "rect":
            ar = rng.uniform(*spec.aspect)
            l1, l2 = size, size / ar
            theta = rng.uniform(*spec.rotation)
            quad = rotated_rect(0.0, 0.0, l1, l2, theta)
        else:
            w, h = size, size / rng.uniform(*spec.aspect)
            if rng.uniform() < 0.5:
                w, h = h, w
            a1, a2 = rng.uniform(0.1, 0.5, 2)
            b1 = rng.uniform(0.2, 1.0) * (1 - a1)
            b2 = rng.uniform(0.2, 1.0) * (1 - a2)
            quad = decode_obb([-w / 2, -h / 2, w / 2, h / 2], [a1, a2, b1, b2])
        lo, hi = quad.min(0), quad.max(0)
        span = hi - lo
        if np.any(span > s - 2 * spec.margin) or np.any(span < 4):
            continue
        off = rng.uniform(spec.margin - lo, s - spec.margin - hi)
        quad = quad + off
        _, code = encode_obb(quad)
        if not unrepresentable(code):
            return quad
    raise RuntimeError("could not sample a representable shape; widen the rotation or scale range")


def _coverage(quad: np.ndarray, size: int, ss: int):
    """Anti-aliased coverage of a convex quad on its pixel bounding box."""
    x0 = max(0, int(math.floor(quad[:, 0].min())))
    y0 = max(0, int(math.floor(quad[:, 1].min())))
    x1 = min(size, int(math.ceil(quad[:, 0].max())))
    y1 = min(size, int(math.ceil(quad[:, 1].max())))
    xs = x0 + (np.arange((x1 - x0) * ss) + 0.5) / ss
    ys = y0 + (np.arange((y1 - y0) * ss) + 0.5) / ss
    px, py = np.meshgrid(xs, ys)
    inside = np.ones(px.shape, dtype=bool)
    for i in range(4):
        a, b = quad[i], quad[(i + 1) % 4]
        # clockwise in y-down coordinates: interior is on the right of each edge
        inside &= (b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0]) >= 0
    cov = inside.reshape(y1 - y0, ss, x1 - x0, ss).mean(axis=(1, 3))
    return cov, (y0, y1, x0, x1)


def generate_scene(spec: SceneSpec, rng: np.random.Generator) -> Scene:
    s = spec.image_size
    bg = rng.integers(20, 90, 3)
    img = np.broadcast_to(bg.astype(np.float64), (s, s, 3)).copy()
    objs = []
    n = int(rng.integers(spec.objects[0], spec.objects[1] + 1))
    occupied = []
    for _ in range(n):
        cls = int(rng.integers(len(spec.classes)))
        kind = spec.classes[cls]
        for _attempt in range(50):
            quad = _sample_shape(spec, kind, rng)
            box = np.concatenate([quad.min(0), quad.max(0)])
            if all(_box_overlap(box, o) <= spec.max_overlap for o in occupied):
                break
        else:
            continue
        occupied.append(box)
        color = np.array(PALETTE[cls % len(PALETTE)], dtype=np.float64) + rng.uniform(-15, 15, 3)
        cov, (y0, y1, x0, x1) = _coverage(quad, s, spec.supersample)
        region = img[y0:y1, x0:x1]
        img[y0:y1, x0:x1] = region * (1 - cov[..., None]) + color * cov[..., None]
        objs.append(dota.LabeledObject(quad, kind, False))
    return Scene(np.clip(np.round(img), 0, 255).astype(np.uint8), objs)


def _box_overlap(a, b) -> float:
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    smaller = min((a[2] - a[0]) * (a[3] - a[1]), (b[2] - b[0]) * (b[3] - b[1]))
    return inter / smaller if smaller > 0 else 0.0


def generate_synthetic_dataset(spec: SceneSpec, out_dir=None) -> dict[str, list[tuple[str, Scene]]]:
    """Deterministic train/val scenes; written as PNG + DOTA labels when ``out_dir`` is set.

    Layout: ``images/<id>.png``, ``labels/<id>.txt``, ``train.txt``,
    ``val.txt`` and ``classes.txt``.
    """
    rng = np.random.default_rng(spec.seed)
    total = spec.num_train + spec.num_val
    scenes = [(f"{i:05d}", generate_scene(spec, rng)) for i in range(total)]
    order = rng.permutation(total)
    train = [scenes[i] for i in sorted(order[:spec.num_train])]
    val = [scenes[i] for i in sorted(order[spec.num_train:])]
    if out_dir is not None:
        root = dota.ensure_dir(out_dir)
        dota.ensure_dir(root / "images")
        dota.ensure_dir(root / "labels")
        for sid, sc in scenes:
            Image.fromarray(sc.image).save(root / "images" / f"{sid}.png", optimize=False)
            dota.write_labels(root / "labels" / f"{sid}.txt", sc.objects)
        (root / "train.txt").write_text("".join(f"{sid}\n" for sid, _ in train))
        (root / "val.txt").write_text("".join(f"{sid}\n" for sid, _ in val))
        (root / "classes.txt").write_text("".join(f"{c}\n" for c in spec.classes))
    return {"train": train, "val": val}


def load_image(path, size: int | None = None) -> tuple[np.ndarray, tuple[int, int]]:
    """RGB image as float (3, S, S) in [0, 1], resized to ``size`` if given; also the original (h, w)."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        orig = (im.height, im.width)
        if size is not None and (im.width, im.height) != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float64)
    return arr.transpose(2, 0, 1) / 255.0, orig


def to_input(image_u8: np.ndarray) -> np.ndarray:
    return image_u8.astype(np.float64).transpose(2, 0, 1) / 255.0
