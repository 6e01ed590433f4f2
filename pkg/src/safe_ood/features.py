"""Batched detection + object-specific feature pooling over a hooked detector."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .backbone import capture, inference_mode, to_batch
from .detector import DetectionSet, ToyDetector, decode
from .roi import clip_boxes, pool_boxes, valid_box_mask


@dataclass
class PoolStats:
    images: int = 0
    images_without_boxes: int = 0
    degenerate_boxes: int = 0


@dataclass
class ImageFeatures:
    """Detections of one image and the pooled vector of every kept box."""
    detections: DetectionSet
    vectors: np.ndarray  # (D, sum of channels)
    layer_offsets: list[tuple[str, int, int]] = field(default_factory=list)


def _pool_all(store: dict, k: int, boxes: np.ndarray, layer_ids: Sequence[str], image_hw, sampling_ratio):
    parts = []
    for lid in layer_ids:
        fmap = store[lid][k].detach().cpu().numpy()
        stride = max(1, int(round(image_hw[0] / fmap.shape[-2])))
        parts.append(pool_boxes(fmap, boxes, stride, image_hw, sampling_ratio))
    return np.concatenate(parts, axis=1) if parts else np.zeros((len(boxes), 0), np.float32)


def layer_offsets(detector: torch.nn.Module, layer_ids: Sequence[str], image_hw=(64, 64)) -> list[tuple[str, int, int]]:
    with inference_mode(detector), capture(detector, layer_ids) as store:
        detector(torch.zeros(1, 3, *image_hw))
    out, start = [], 0
    for lid in layer_ids:
        c = store[lid].shape[1]
        out.append((lid, start, c))
        start += c
    return out


def _keep_valid(det: DetectionSet, image_hw, stats: PoolStats | None) -> DetectionSet:
    boxes = clip_boxes(det.boxes, image_hw)
    ok = valid_box_mask(boxes)
    if stats is not None:
        stats.degenerate_boxes += int((~ok).sum())
    if not ok.all():
        warnings.warn(f"skipping {int((~ok).sum())} degenerate box(es)", stacklevel=3)
    return DetectionSet(boxes[ok], det.scores[ok], det.labels[ok], det.class_probs[ok])


def detect_and_pool(
    detector: ToyDetector,
    images: Sequence[np.ndarray],
    layer_ids: Sequence[str],
    confidence_threshold: float = 0.5,
    batch_size: int = 64,
    sampling_ratio: int | None = None,
    stats: PoolStats | None = None,
) -> list[ImageFeatures]:
    """Detect on each image and pool SAFE vectors at the detections, in one forward pass per batch."""
    out = []
    offsets = layer_offsets(detector, layer_ids, images[0].shape[:2]) if len(images) else []
    for start in range(0, len(images), batch_size):
        x = to_batch(np.stack(images[start:start + batch_size]))
        hw = tuple(x.shape[-2:])
        with inference_mode(detector), capture(detector, layer_ids) as store:
            raw = detector(x)
            dets = decode(raw, detector.config, confidence_threshold)
            for k, det in enumerate(dets):
                det = _keep_valid(det, hw, stats)
                if stats is not None:
                    stats.images += 1
                    stats.images_without_boxes += int(len(det) == 0)
                out.append(ImageFeatures(det, _pool_all(store, k, det.boxes, layer_ids, hw, sampling_ratio), offsets))
    return out


def pool_at_boxes(
    detector: torch.nn.Module,
    images: Sequence[np.ndarray],
    boxes: Sequence[np.ndarray],
    layer_ids: Sequence[str],
    batch_size: int = 64,
    sampling_ratio: int | None = None,
) -> list[np.ndarray]:
    """Pool vectors at given boxes (no detection); one (D_i, d) array per image."""
    out = []
    for start in range(0, len(images), batch_size):
        x = to_batch(np.stack(images[start:start + batch_size]))
        hw = tuple(x.shape[-2:])
        with inference_mode(detector), capture(detector, layer_ids) as store:
            detector(x)
            for k in range(x.shape[0]):
                out.append(_pool_all(store, k, np.asarray(boxes[start + k]).reshape(-1, 4), layer_ids, hw, sampling_ratio))
    return out
