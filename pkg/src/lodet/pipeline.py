"""Training, inference, evaluation and complexity profiling."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dota
from .complexity import FlopsReport, brute_force_count
from .config import RunConfig, dump_config, lr_at
from .dsc_head import LossConfig, assign_targets, decode_predictions, total_loss
from .engine import NonFiniteError, Tape, Tensor, no_grad
from .geometry import DetectionRecord, GroundTruth, MapResult, evaluate_map, obb_nms
from .model import STRIDES, Detector, build_model, create_detector, forward, load_checkpoint, save_checkpoint
from .optim import make_optimizer
from .synthetic import load_image

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


# ------------------------------------------------------------------ data

@dataclass
class Dataset:
    """Images resized to the network input, with labels in input pixels."""
    ids: list[str]
    images: np.ndarray                       # (N, 3, S, S) float32
    objects: list[list[dota.LabeledObject]]
    class_names: list[str]
    orig_sizes: list[tuple[int, int]] = field(default_factory=list)

    def __len__(self):
        return len(self.ids)

    def class_id(self, name: str) -> int:
        try:
            return self.class_names.index(name)
        except ValueError:
            raise ValueError(f"unknown category {name!r}; known: {self.class_names}") from None

    def targets(self, idx) -> list[list[tuple[np.ndarray, int]]]:
        return [[(o.quad, self.class_id(o.category)) for o in self.objects[i]] for i in idx]

    def ground_truth(self) -> dict[str, list[GroundTruth]]:
        return {sid: [GroundTruth(self.class_id(o.category), o.quad, o.difficult) for o in objs]
                for sid, objs in zip(self.ids, self.objects)}


def read_class_names(data_dir) -> list[str]:
    path = Path(data_dir) / "classes.txt"
    names = [ln.strip() for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not names:
        raise ValueError(f"{path} lists no classes")
    return names


def load_dataset(data_dir, split: str, input_size: int) -> Dataset:
    """Load ``<split>.txt`` ids with ``images/<id>.png`` and ``labels/<id>.txt``."""
    root = Path(data_dir)
    names = read_class_names(root)
    ids = [ln.strip() for ln in (root / f"{split}.txt").read_text().splitlines() if ln.strip()]
    if not ids:
        raise ValueError(f"split {split!r} in {root} is empty")
    images, objects, sizes = [], [], []
    for sid in ids:
        img, (h, w) = load_image(root / "images" / f"{sid}.png", input_size)
        objs, _ = dota.parse_dota_annotations(root / "labels" / f"{sid}.txt")
        scale = np.array([input_size / w, input_size / h])
        for o in objs:
            o.quad = o.quad * scale
        images.append(img.astype(np.float32))
        objects.append(objs)
        sizes.append((h, w))
    ds = Dataset(ids, np.stack(images), objects, names, sizes)
    for objs in objects:
        for o in objs:
            ds.class_id(o.category)
    return ds


def hflip_batch(images: np.ndarray, gts):
    s = images.shape[-1]
    flipped = [[(np.stack([s - q[:, 0], q[:, 1]], 1)[::-1], c) for q, c in items] for items in gts]
    return images[..., ::-1].copy(), flipped


# -------------------------------------------------------------- training

@dataclass
class EpochLog:
    epoch: int
    lr: float
    steps: int
    loss: float
    parts: dict[str, float]
    seconds: float


@dataclass
class TrainResult:
    model: Detector
    history: list[EpochLog]
    checkpoint: Path


def _loss_config(cfg: RunConfig) -> LossConfig:
    return LossConfig(head_mode=cfg.head_mode, activation=cfg.train_activation,
                      derived_alpha=cfg.derived_alpha, revive=cfg.revive_floor,
                      weights=cfg.loss_weights())


def train_step(model: Detector, optimizer, images: np.ndarray, gts, lr: float, loss_cfg: LossConfig,
               grad_clip: float = 0.0):
    """One forward/backward/update. Returns ``(total, parts)`` as floats.

    With ``grad_clip > 0`` the global gradient norm is scaled down to at most that value.
    """
    cfg = model.config
    targets = assign_targets(model.anchors, gts, cfg.grids, STRIDES, cfg.num_classes)
    for p in model.params.values():
        p.grad = None
    with Tape() as tape:
        preds = forward(model, Tensor(images))
        total, parts = total_loss(preds, targets, loss_cfg)
    value = total.item()
    if not math.isfinite(value):
        raise NonFiniteError(f"loss became {value}")
    tape.backward(total)
    for p in model.params.values():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient for {p.name}")
    if grad_clip > 0:
        norm = math.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64)))
                             for p in model.params.values() if p.grad is not None))
        if norm > grad_clip:
            for p in model.params.values():
                if p.grad is not None:
                    p.grad *= grad_clip / norm
    optimizer.step(lr)
    return value, {k: v.item() for k, v in parts.items()}


def train(cfg: RunConfig, data: Dataset | None = None, out_dir=None) -> TrainResult:
    """Train from scratch; writes ``config.txt``, ``metrics.jsonl`` and checkpoints to ``out_dir``."""
    data = data if data is not None else load_dataset(cfg.data_dir, "train", cfg.input_size)
    out = dota.ensure_dir(out_dir or cfg.out_dir)
    (out / "config.txt").write_text(dump_config(cfg))
    model = create_detector(cfg.net(len(data.class_names)), seed=cfg.seed, dtype=np.float32)
    for p in model.params.values():
        p.requires_grad = True
    optimizer = make_optimizer(cfg.optimizer, model.params, cfg.momentum, cfg.weight_decay)
    loss_cfg = _loss_config(cfg)
    rng = np.random.default_rng(cfg.seed)
    extra = {"class_names": data.class_names}
    history: list[EpochLog] = []
    last = out / "last.ckpt"
    step = 0
    metrics = open(out / "metrics.jsonl", "w", encoding="utf-8")
    try:
        for epoch in range(cfg.epochs):
            lr = lr_at(epoch, cfg)
            t0 = time.perf_counter()
            order = rng.permutation(len(data))
            sums: dict[str, float] = {}
            total_sum, n_steps = 0.0, 0
            for start in range(0, len(order), cfg.batch_size):
                if cfg.max_steps and step >= cfg.max_steps:
                    break
                idx = order[start:start + cfg.batch_size]
                images, gts = data.images[idx], data.targets(idx)
                if cfg.hflip:
                    flip = rng.uniform() < 0.5
                    if flip:
                        images, gts = hflip_batch(images, gts)
                try:
                    value, parts = train_step(model, optimizer, images, gts, lr, loss_cfg, cfg.grad_clip)
                except NonFiniteError as e:
                    raise TrainingError(f"epoch {epoch} step {step}: {e}; last good checkpoint: "
                                        f"{last if last.exists() else 'none'}") from e
                step += 1
                n_steps += 1
                total_sum += value
                for k, v in parts.items():
                    sums[k] = sums.get(k, 0.0) + v
                if cfg.log_every and step % cfg.log_every == 0:
                    log.info("step %d loss %.5f %s", step, value, _fmt(parts))
            if n_steps == 0:
                break
            entry = EpochLog(epoch, lr, n_steps, total_sum / n_steps, {k: v / n_steps for k, v in sums.items()},
                             time.perf_counter() - t0)
            history.append(entry)
            metrics.write(json.dumps(entry.__dict__) + "\n")
            metrics.flush()
            log.info("epoch %d lr %.3g loss %.5f %s (%.1fs)", epoch, lr, entry.loss, _fmt(entry.parts), entry.seconds)
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(last, model, dict(extra, epoch=epoch, step=step))
    finally:
        metrics.close()
    final = out / "final.ckpt"
    save_checkpoint(final, model, dict(extra, epoch=len(history) - 1, step=step))
    return TrainResult(model, history, final)


def _fmt(parts: dict[str, float]) -> str:
    return " ".join(f"{k}={v:.4f}" for k, v in parts.items())


# ------------------------------------------------------------- inference

def predict(model: Detector, images: np.ndarray, score_thresh: float = 0.05, nms_thresh: float = 0.45,
            activation: str = "approx", batch_size: int = 4) -> list[list[DetectionRecord]]:
    """Decode, threshold and per-class NMS; quads are in network-input pixels."""
    cfg = model.config
    out: list[list[DetectionRecord]] = []
    for start in range(0, len(images), batch_size):
        chunk = np.asarray(images[start:start + batch_size], dtype=model.params[next(iter(model.params))].dtype)
        with no_grad():
            preds = forward(model, Tensor(chunk))
        dets = decode_predictions(preds, model.anchors, STRIDES, cfg.head_mode, score_thresh, activation)
        for i, items in enumerate(dets):
            recs = [DetectionRecord(str(start + i), d.cls, d.score, d.quad) for d in items]
            out.append(obb_nms(recs, nms_thresh))
    return out


def rescale(dets: list[DetectionRecord], input_size: int, orig: tuple[int, int]) -> list[DetectionRecord]:
    h, w = orig
    s = np.array([w / input_size, h / input_size])
    return [DetectionRecord(d.image_id, d.class_id, d.score, d.quad * s) for d in dets]


def infer(checkpoint, image_paths, out_dir, cfg: RunConfig | None = None, overlay: bool = False) -> dict[str, list]:
    """Write ``<stem>.txt`` detections (original image pixels) for each image."""
    cfg = cfg or RunConfig()
    model, extra = load_checkpoint(checkpoint)
    names = extra.get("class_names") or [str(i) for i in range(model.config.num_classes)]
    out = dota.ensure_dir(out_dir)
    size = model.config.input_size
    results = {}
    for path in map(Path, image_paths):
        img, orig = load_image(path, size)
        dets = predict(model, img[None], cfg.score_thresh, cfg.nms_thresh, cfg.eval_activation)[0]
        dets = rescale(dets, size, orig)
        dota.write_detections(out / f"{path.stem}.txt", dets, names)
        if overlay:
            draw_overlay(path, dets, names, out / f"{path.stem}_det.png")
        results[path.stem] = dets
    return results


def draw_overlay(image_path, dets, names, out_path):
    from PIL import Image, ImageDraw

    with Image.open(image_path) as im:
        im = im.convert("RGB")
        draw = ImageDraw.Draw(im)
        for d in dets:
            pts = [tuple(map(float, p)) for p in d.quad]
            draw.line(pts + [pts[0]], fill=(255, 255, 255), width=2)
            draw.text(pts[0], f"{names[d.class_id]} {d.score:.2f}", fill=(255, 255, 255))
        im.save(out_path)


def evaluate(model: Detector, data: Dataset, cfg: RunConfig | None = None, iou_threshold: float = 0.5,
             method: str = "all") -> MapResult:
    cfg = cfg or RunConfig()
    preds = predict(model, data.images, cfg.score_thresh, cfg.nms_thresh, cfg.eval_activation, cfg.batch_size)
    dets = [DetectionRecord(sid, d.class_id, d.score, d.quad) for sid, items in zip(data.ids, preds) for d in items]
    return evaluate_map(dets, data.ground_truth(), iou_threshold, classes=range(len(data.class_names)),
                        method=method)


def dataset_loss(model: Detector, data: Dataset, cfg: RunConfig | None = None) -> tuple[float, dict[str, float]]:
    """Training loss of the current weights over the whole dataset (one batch per ``batch_size``).

    Parts are averaged over batches, matching the per-step logging.
    """
    cfg = cfg or RunConfig()
    net = model.config
    loss_cfg = _loss_config(cfg)
    totals, sums, n = 0.0, {}, 0
    for start in range(0, len(data), cfg.batch_size):
        idx = np.arange(start, min(start + cfg.batch_size, len(data)))
        targets = assign_targets(model.anchors, data.targets(idx), net.grids, STRIDES, net.num_classes)
        with no_grad():
            total, parts = total_loss(forward(model, Tensor(data.images[idx])), targets, loss_cfg)
        totals += total.item()
        for k, v in parts.items():
            sums[k] = sums.get(k, 0.0) + v.item()
        n += 1
    return totals / n, {k: v / n for k, v in sums.items()}


# ---------------------------------------------------------------- profile

def profile(cfg: RunConfig, widths, input_sizes, num_classes: int = 15, out_dir=None) -> list[dict]:
    """FLOPs and parameter counts of the whole detector over a width x input-size sweep."""
    rows = []
    out = dota.ensure_dir(out_dir) if out_dir else None
    for w in widths:
        for s in input_sizes:
            net = cfg.replace(width=w, input_size=s).net(num_classes)
            report: FlopsReport = brute_force_count(build_model(net), depth=2)
            rows.append({"width": w, "input_size": s, "flops": report.total, "gflops": report.total / 1e9,
                         "surcharge": report.total_surcharge, "params": report.params,
                         "params_mb": report.params_mb,
                         "modules": report.records()})
            if out:
                report.write(out / f"flops_w{w}_s{s}.json")
    if out:
        (out / "profile.json").write_text(json.dumps(rows, indent=2))
    return rows
