"""Miniature residual + BatchNorm detector for desk-scale experiments.

Three residual stages, each opening with a projection shortcut conv + BN,
feed a dense single-stage head on a stride-8 grid. Every grid cell predicts
an objectness logit, a box (cell offset + log size relative to an anchor) and
class logits.

Layer ids equal module paths, so ``backbone.capture`` can hook any of them.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torchvision.ops import batched_nms, box_iou

from .backbone import to_batch
from .roi import BoundingBox

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SAFEDET1"


class TrainingFailure(RuntimeError):
    def __init__(self, message: str, history: list[dict]):
        super().__init__(message)
        self.history = history


class NumericalError(ArithmeticError):
    pass


@dataclass
class ToyBackboneConfig:
    num_classes: int = 3
    stage_channels: tuple[int, ...] = (16, 32, 64)
    blocks_per_stage: int = 2
    head_channels: int = 64
    input_size: int = 64
    anchor: float = 16.0

    @property
    def stages(self) -> int:
        return len(self.stage_channels)

    @property
    def grid_stride(self) -> int:
        return 2 ** self.stages

    @property
    def grid_size(self) -> int:
        return math.ceil(self.input_size / self.grid_stride)


@dataclass
class Detection:
    box: BoundingBox
    class_id: int
    confidence: float
    class_probs: np.ndarray | None = field(default=None, repr=False)


@dataclass
class DetectionSet:
    """Detections of one image as parallel arrays."""
    boxes: np.ndarray  # (D, 4) x1, y1, x2, y2
    scores: np.ndarray  # (D,)
    labels: np.ndarray  # (D,)
    class_probs: np.ndarray  # (D, K)

    def __len__(self) -> int:
        return len(self.scores)

    def to_detections(self) -> list[Detection]:
        return [
            Detection(BoundingBox(*map(float, b)), int(c), float(s), p)
            for b, s, c, p in zip(self.boxes, self.scores, self.labels, self.class_probs)
        ]


class ConvBN(nn.Module):
    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, bn: bool = True):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, k, stride, padding=k // 2, bias=not bn)
        self.bn = nn.BatchNorm2d(cout) if bn else None

    def forward(self, x):
        x = self.conv(x)
        return self.bn(x) if self.bn is not None else x


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1 = ConvBN(cin, cout, 3, stride)
        self.conv2 = ConvBN(cout, cout, 3)
        self.shortcut = ConvBN(cin, cout, 1, stride) if stride != 1 or cin != cout else None

    def forward(self, x):
        y = self.conv2(F.relu(self.conv1(x)))
        s = self.shortcut(x) if self.shortcut is not None else x
        return F.relu(y + s)


class Stage(nn.Module):
    def __init__(self, cin: int, cout: int, blocks: int):
        super().__init__()
        for i in range(blocks):
            self.add_module(f"b{i + 1}", ResBlock(cin if i == 0 else cout, cout, 2 if i == 0 else 1))

    def forward(self, x):
        for block in self.children():
            x = block(x)
        return x


class Neck(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.lateral = ConvBN(cin, cout, 1, bn=False)


class Head(nn.Module):
    def __init__(self, cin: int, hidden: int, cout: int):
        super().__init__()
        self.conv = ConvBN(cin, hidden, 3, bn=False)
        self.pred = ConvBN(hidden, cout, 1, bn=False)


class ToyDetector(nn.Module):
    def __init__(self, config: ToyBackboneConfig | None = None):
        super().__init__()
        self.config = config or ToyBackboneConfig()
        c = self.config.stage_channels
        self.stem = ConvBN(3, c[0], 3, 2)
        for i, cout in enumerate(c):
            cin = c[0] if i == 0 else c[i - 1]
            self.add_module(f"s{i + 1}", Stage(cin, cout, self.config.blocks_per_stage))
        self.neck = Neck(c[-1], c[-2])
        self.head = Head(c[-2], self.config.head_channels, 5 + self.config.num_classes)
        self.frozen = False

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.stem(x))
        feats = []
        for i in range(self.config.stages):
            x = getattr(self, f"s{i + 1}")(x)
            feats.append(x)
        top = self.neck.lateral(feats[-1])
        top = F.interpolate(top, size=feats[-2].shape[-2:], mode="nearest")
        y = F.relu(self.head.conv(feats[-2] + top))
        return self.head.pred(y)

    def train(self, mode: bool = True):
        # a frozen detector keeps BatchNorm statistics fixed
        return super().train(mode and not self.frozen)

    def freeze(self) -> "ToyDetector":
        self.frozen = True
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    def loss(self, x: torch.Tensor, targets: Sequence[dict]) -> torch.Tensor:
        """Detection loss of a batch against ground-truth ``targets`` (one dict per image)."""
        return detection_loss_raw(self(x), targets, self.config)


# ---------------------------------------------------------------------------
# Box coding


def encode_box(box: Sequence[float], config: ToyBackboneConfig) -> tuple[int, int, float, float, float, float]:
    """Ground-truth box -> (row, col, x offset, y offset, log w, log h) of its centre cell."""
    x1, y1, x2, y2 = map(float, box)
    s, g = config.grid_stride, config.grid_size
    cx, cy = 0.5 * (x1 + x2) / s, 0.5 * (y1 + y2) / s
    col = min(max(int(math.floor(cx)), 0), g - 1)
    row = min(max(int(math.floor(cy)), 0), g - 1)
    return (row, col, cx - col, cy - row,
            math.log(max(x2 - x1, 1e-3) / config.anchor), math.log(max(y2 - y1, 1e-3) / config.anchor))


def decode_cell(row: int, col: int, fx: float, fy: float, lw: float, lh: float,
                config: ToyBackboneConfig) -> np.ndarray:
    s = config.grid_stride
    cx, cy = (col + fx) * s, (row + fy) * s
    w, h = config.anchor * math.exp(lw), config.anchor * math.exp(lh)
    return np.array([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2])


def build_targets(targets: Sequence[dict], config: ToyBackboneConfig):
    n, g = len(targets), config.grid_size
    obj = torch.zeros(n, g, g)
    box = torch.zeros(n, 4, g, g)
    cls = torch.zeros(n, g, g, dtype=torch.long)
    for k, t in enumerate(targets):
        boxes = np.asarray(t["boxes"], dtype=np.float64).reshape(-1, 4)
        labels = np.asarray(t["labels"]).reshape(-1)
        # larger objects win a shared cell
        order = np.argsort((boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1]), kind="stable")
        for i in order:
            r, c, fx, fy, lw, lh = encode_box(boxes[i], config)
            obj[k, r, c] = 1.0
            box[k, :, r, c] = torch.tensor([fx, fy, lw, lh])
            cls[k, r, c] = int(labels[i])
    return obj, box, cls


def detection_loss_raw(raw: torch.Tensor, targets: Sequence[dict], config: ToyBackboneConfig,
                       box_weight: float = 2.0) -> torch.Tensor:
    """Objectness BCE over all cells + class CE and box L1 over matched cells, per image."""
    obj_t, box_t, cls_t = build_targets(targets, config)
    n = raw.shape[0]
    obj_loss = F.binary_cross_entropy_with_logits(raw[:, 0], obj_t, reduction="sum")
    pos = obj_t > 0
    if pos.any():
        pred_box = torch.cat([torch.sigmoid(raw[:, 1:3]), raw[:, 3:5]], dim=1)
        pb = pred_box.permute(0, 2, 3, 1)[pos]
        tb = box_t.permute(0, 2, 3, 1)[pos]
        box_loss = F.l1_loss(pb, tb, reduction="sum")
        logits = raw[:, 5:].permute(0, 2, 3, 1)[pos]
        cls_loss = F.cross_entropy(logits, cls_t[pos], reduction="sum")
    else:
        box_loss = cls_loss = raw.sum() * 0.0
    total = (obj_loss + box_weight * box_loss + cls_loss) / n
    if not torch.isfinite(total):
        raise NumericalError("non-finite detection loss")
    return total


def decode(raw: torch.Tensor, config: ToyBackboneConfig, confidence_threshold: float = 0.5,
           iou_threshold: float = 0.5) -> list[DetectionSet]:
    """Decode raw head output to per-image detections (threshold, then class-wise NMS).

    A detection survives if its confidence is strictly above the threshold; a
    threshold of 0 keeps every cell.
    """
    raw = raw.detach()
    n, _, g, _ = raw.shape
    s = config.grid_stride
    rows, cols = torch.meshgrid(torch.arange(g), torch.arange(g), indexing="ij")
    conf = torch.sigmoid(raw[:, 0])
    cx = (cols + torch.sigmoid(raw[:, 1])) * s
    cy = (rows + torch.sigmoid(raw[:, 2])) * s
    w = config.anchor * torch.exp(raw[:, 3].clamp(max=10))
    h = config.anchor * torch.exp(raw[:, 4].clamp(max=10))
    boxes = torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1)
    probs = torch.softmax(raw[:, 5:], dim=1).permute(0, 2, 3, 1)
    out = []
    for k in range(n):
        b = boxes[k].reshape(-1, 4)
        c = conf[k].reshape(-1)
        p = probs[k].reshape(-1, probs.shape[-1])
        keep = c > confidence_threshold if confidence_threshold > 0 else torch.ones_like(c, dtype=torch.bool)
        b, c, p = b[keep], c[keep], p[keep]
        labels = p.argmax(dim=1)
        order = batched_nms(b.double(), c.double(), labels, iou_threshold)
        out.append(DetectionSet(
            b[order].numpy().astype(np.float64), c[order].numpy().astype(np.float64),
            labels[order].numpy().astype(np.int64), p[order].numpy().astype(np.float64),
        ))
    return out


def nms(boxes: np.ndarray, scores: np.ndarray, labels: np.ndarray, iou_threshold: float = 0.5) -> np.ndarray:
    """Indices kept by class-wise NMS, highest score first."""
    if len(scores) == 0:
        return np.zeros(0, dtype=np.int64)
    keep = batched_nms(torch.as_tensor(boxes, dtype=torch.float64), torch.as_tensor(scores, dtype=torch.float64),
                       torch.as_tensor(labels), iou_threshold)
    return keep.numpy()


def detect(detector: ToyDetector, image, confidence_threshold: float = 0.5) -> list[Detection]:
    if not 0.0 <= confidence_threshold <= 1.0:
        raise ValueError("confidence_threshold must lie in [0, 1]")
    return detect_batch(detector, [image], confidence_threshold)[0].to_detections()


def detect_batch(detector: ToyDetector, images, confidence_threshold: float = 0.5,
                 batch_size: int = 64) -> list[DetectionSet]:
    was_training = detector.training
    detector.eval()
    out = []
    try:
        with torch.no_grad():
            for start in range(0, len(images), batch_size):
                x = to_batch(np.stack(images[start:start + batch_size]))
                out.extend(decode(detector(x), detector.config, confidence_threshold))
    finally:
        detector.train(was_training)
    return out


def detection_loss(detector: ToyDetector, image, annotations: dict) -> tuple[float, torch.Tensor]:
    """Loss of one image against its annotations, with the gradient w.r.t. the pixels (C x H x W)."""
    was_training = detector.training
    detector.eval()
    try:
        x = to_batch(image).clone().requires_grad_(True)
        loss = detector.loss(x, [annotations])
        (grad,) = torch.autograd.grad(loss, x)
    finally:
        detector.train(was_training)
    return loss.item(), grad[0]


# ---------------------------------------------------------------------------
# Training


def recall_at_iou(detections: Sequence[DetectionSet], targets: Sequence[dict], iou: float = 0.5) -> float:
    """Fraction of ground-truth boxes matched (greedy, one-to-one) by a detection at IoU >= ``iou``."""
    hit = total = 0
    for det, t in zip(detections, targets):
        gt = np.asarray(t["boxes"], dtype=np.float64).reshape(-1, 4)
        total += len(gt)
        if len(gt) == 0 or len(det) == 0:
            continue
        m = box_iou(torch.as_tensor(gt), torch.as_tensor(det.boxes)).numpy()
        used = set()
        for i in range(len(gt)):
            for j in np.argsort(-m[i]):
                if m[i, j] < iou:
                    break
                if j not in used:
                    used.add(j)
                    hit += 1
                    break
    return hit / total if total else 1.0


def _flip_target(t: dict, width: int) -> dict:
    b = np.asarray(t["boxes"], dtype=np.float64).reshape(-1, 4).copy()
    b[:, [0, 2]] = width - b[:, [2, 0]]
    return {"boxes": b, "labels": t["labels"]}


def train_detector(
    dataset: Sequence[tuple[np.ndarray, dict]],
    epochs: int = 20,
    seed: int = 0,
    val_dataset: Sequence[tuple[np.ndarray, dict]] | None = None,
    config: ToyBackboneConfig | None = None,
    batch_size: int = 32,
    lr: float = 3e-3,
    recall_gate: float | None = 0.7,
    confidence_threshold: float = 0.5,
    min_images: int = 200,
) -> tuple[ToyDetector, list[dict]]:
    """Train a ToyDetector on ``(image, {"boxes", "labels"})`` pairs and freeze it.

    With ``val_dataset`` the final validation recall at IoU 0.5 must reach
    ``recall_gate``, otherwise TrainingFailure is raised.
    """
    if len(dataset) < min_images:
        raise ValueError(f"train_detector needs at least {min_images} images, got {len(dataset)}")
    images = np.stack([img for img, _ in dataset]).astype(np.float32)
    targets = [t for _, t in dataset]
    n_classes = int(max((int(np.max(t["labels"])) for t in targets if len(t["labels"])), default=0)) + 1
    config = config or ToyBackboneConfig(num_classes=max(n_classes, 1), input_size=images.shape[1])
    if n_classes < 2:
        log.warning("training on a single-class dataset")

    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = ToyDetector(config)
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=1e-4)
    steps = epochs * math.ceil(len(images) / batch_size)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=lr, total_steps=max(steps, 1), pct_start=0.15)
    width = images.shape[2]
    history = []
    for epoch in range(epochs):
        model.train()
        order = rng.permutation(len(images))
        flips = rng.random(len(images)) < 0.5
        total, count = 0.0, 0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            batch = images[idx].copy()
            tb = []
            for k, i in enumerate(idx):
                if flips[i]:
                    batch[k] = batch[k][:, ::-1]
                    tb.append(_flip_target(targets[i], width))
                else:
                    tb.append(targets[i])
            loss = model.loss(to_batch(batch), tb)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            total += loss.item() * len(idx)
            count += len(idx)
        entry = {"epoch": epoch + 1, "loss": total / count, "val_recall": float("nan")}
        if val_dataset is not None and (epoch == epochs - 1 or (epoch + 1) % 5 == 0):
            entry["val_recall"] = evaluate_recall(model, val_dataset, confidence_threshold)
        history.append(entry)
        log.info("detector epoch %d loss %.4f val_recall %.3f", entry["epoch"], entry["loss"], entry["val_recall"])
    model.freeze()
    if val_dataset is not None and recall_gate is not None and history[-1]["val_recall"] < recall_gate:
        raise TrainingFailure(
            f"validation recall {history[-1]['val_recall']:.3f} below gate {recall_gate}", history
        )
    return model, history


def evaluate_recall(model: ToyDetector, dataset, confidence_threshold: float = 0.5) -> float:
    images = [img for img, _ in dataset]
    return recall_at_iou(detect_batch(model, images, confidence_threshold), [t for _, t in dataset])


def write_training_log(history: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["epoch", "loss", "val_recall"])
        w.writeheader()
        for row in history:
            w.writerow(row)


# ---------------------------------------------------------------------------
# Checkpoints


def save_detector(model: ToyDetector, path: str | Path) -> None:
    """Magic, u32 header length, JSON header (config + tensor table), float32 tensors."""
    state = model.state_dict()
    cfg = asdict(model.config)
    header = {
        "config": cfg,
        "tensors": [[k, list(v.shape), str(v.dtype).replace("torch.", "")] for k, v in state.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for v in state.values():
            f.write(v.detach().cpu().numpy().astype("<f4").tobytes())


def load_detector(path: str | Path) -> ToyDetector:
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a detector checkpoint")
    (n,) = struct.unpack_from("<I", data, 8)
    header = json.loads(data[12:12 + n])
    cfg = header["config"]
    cfg["stage_channels"] = tuple(cfg["stage_channels"])
    model = ToyDetector(ToyBackboneConfig(**cfg))
    offset = 12 + n
    state = {}
    for name, shape, dtype in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape)
        offset += 4 * count
        state[name] = torch.from_numpy(arr.copy()).to(getattr(torch, dtype))
    model.load_state_dict(state)
    return model.freeze()
