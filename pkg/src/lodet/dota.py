"""DOTA-style text files: ground-truth labels and detection records.

Label line: ``x1 y1 x2 y2 x3 y3 x4 y4 category difficult``.
Detection line: ``category score x1 y1 x2 y2 x3 y3 x4 y4``.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

HEADER_PREFIXES = ("imagesource", "gsd")


@dataclass
class LabeledObject:
    quad: np.ndarray
    category: str
    difficult: bool = False


@dataclass
class Diagnostic:
    path: str
    line: int
    message: str

    def __str__(self):
        return f"{self.path}:{self.line}: {self.message}"


def _parse_label_line(text: str):
    parts = text.split()
    if len(parts) not in (9, 10):
        raise ValueError(f"expected 9 or 10 fields, found {len(parts)}")
    try:
        coords = [float(v) for v in parts[:8]]
    except ValueError as e:
        raise ValueError(f"malformed coordinate ({e})") from None
    if not all(math.isfinite(v) for v in coords):
        raise ValueError("non-finite coordinate")
    difficult = False
    if len(parts) == 10:
        if parts[9] not in ("0", "1"):
            raise ValueError(f"difficult flag must be 0 or 1, got {parts[9]!r}")
        difficult = parts[9] == "1"
    return LabeledObject(np.array(coords).reshape(4, 2), parts[8], difficult)


def parse_dota_annotations(path, strict: bool = False) -> tuple[list[LabeledObject], list[Diagnostic]]:
    """Read one label file. Metadata headers and blank lines are skipped.

    Malformed lines are reported as diagnostics (1-based line numbers) and
    skipped, or raise ``ValueError`` when ``strict``.
    """
    try:
        with open(path, encoding="utf-8") as f:
            lines = f.read().splitlines()
    except OSError as e:
        raise OSError(f"cannot read annotation file {path}: {e}") from e
    objs, diags = [], []
    for no, raw in enumerate(lines, 1):
        text = raw.strip()
        if not text or text.split(":", 1)[0].strip().lower() in HEADER_PREFIXES:
            continue
        try:
            objs.append(_parse_label_line(text))
        except ValueError as e:
            d = Diagnostic(str(path), no, str(e))
            if strict:
                raise ValueError(str(d)) from None
            log.warning("%s", d)
            diags.append(d)
    return objs, diags


def format_quad(quad) -> str:
    return " ".join(f"{v:.6f}" for v in np.asarray(quad, dtype=np.float64).reshape(-1))


def write_labels(path, objs: list[LabeledObject]):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for o in objs:
            f.write(f"{format_quad(o.quad)} {o.category} {int(o.difficult)}\n")


def write_detections(path, dets, class_names):
    """``dets``: iterable of records with ``class_id``, ``score`` and ``quad``."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for d in dets:
            f.write(f"{class_names[d.class_id]} {d.score:.6f} {format_quad(d.quad)}\n")


def read_detections(path, class_names) -> list[tuple[int, float, np.ndarray]]:
    index = {n: i for i, n in enumerate(class_names)}
    out = []
    with open(path, encoding="utf-8") as f:
        for no, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 10 or parts[0] not in index:
                raise ValueError(f"{path}:{no}: malformed detection line")
            out.append((index[parts[0]], float(parts[1]), np.array(parts[2:], dtype=np.float64).reshape(4, 2)))
    return out


def load_label_dir(label_dir, ids=None) -> dict[str, list[LabeledObject]]:
    label_dir = Path(label_dir)
    if ids is None:
        ids = sorted(p.stem for p in label_dir.glob("*.txt"))
    out = {}
    for i in ids:
        objs, _ = parse_dota_annotations(label_dir / f"{i}.txt")
        out[i] = objs
    return out


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
