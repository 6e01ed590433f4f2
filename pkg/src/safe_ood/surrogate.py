"""Surrogate outliers: FGSM-perturbed training images and labelled SAFE vectors.

Boxes are always predicted on the clean image; the perturbed image is only
used to re-pool features at those same boxes.
"""
from __future__ import annotations

import enum
import hashlib
import os
import struct
import tempfile
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
import torch

from .backbone import to_batch
from .detector import NumericalError
from .features import PoolStats, detect_and_pool, pool_at_boxes
from .roi import SafeVector

CACHE_MAGIC = b"SAFEVEC1"
CACHE_ENV = "SAFE_OOD_CACHE"
_RECORD = struct.Struct("<IIBfQI")  # image_id, box_index, label, epsilon_255, layer hash, length


class LossKind(str, enum.Enum):
    FULL_DETECTION_LOSS = "full_detection_loss"


@dataclass
class PerturbConfig:
    epsilon_255: float = 8.0
    loss_kind: LossKind = LossKind.FULL_DETECTION_LOSS
    clip: bool = True

    def __post_init__(self):
        if self.epsilon_255 < 0:
            raise ValueError("epsilon_255 must be non-negative")


@dataclass
class LabeledSafeVector:
    vector: SafeVector
    label: int  # 0 clean, 1 perturbed
    image_index: int
    box_index: int


@dataclass
class PairStats(PoolStats):
    pairs: int = 0


def _input_loss(model, x: torch.Tensor, targets) -> torch.Tensor:
    if hasattr(model, "loss"):
        return model.loss(x, targets)
    return model(x, targets)


def gradient_sign(model, images, targets: Sequence) -> np.ndarray:
    """sign(d loss / d pixels) for a batch of HxWxC images; returns N x H x W x C.

    ``model.loss(x, targets)`` (or ``model(x, targets)``) must give a scalar
    that sums or averages independent per-image losses. Parameters are left
    untouched and BatchNorm runs on its stored statistics.
    """
    was_training = getattr(model, "training", False)
    model.eval()
    try:
        x = to_batch(images).clone().requires_grad_(True)
        loss = _input_loss(model, x, targets)
        (grad,) = torch.autograd.grad(loss, x)
    finally:
        model.train(was_training)
    if not torch.isfinite(grad).all():
        bad = int((~torch.isfinite(grad)).sum())
        raise NumericalError(f"non-finite input gradient ({bad} entries); loss = {float(loss.detach())}")
    return grad.sign().permute(0, 2, 3, 1).numpy()


def apply_perturbation(images: np.ndarray, signs: np.ndarray, epsilon_255: float, clip: bool = True) -> np.ndarray:
    if epsilon_255 < 0:
        raise ValueError("epsilon_255 must be non-negative")
    images = np.asarray(images, dtype=np.float32)
    if epsilon_255 == 0:
        return images.copy()
    out = images + np.float32(epsilon_255 / 255.0) * signs.astype(np.float32)
    return np.clip(out, 0.0, 1.0) if clip else out


def fgsm_perturb(image: np.ndarray, model, targets, config: PerturbConfig) -> np.ndarray:
    """x + (eps / 255) * sign(grad_x J(theta, x, y)), clipped to [0, 1]."""
    if config.epsilon_255 < 0:
        raise ValueError("epsilon_255 must be non-negative")
    image = np.asarray(image, dtype=np.float32)
    if config.epsilon_255 == 0:
        return image.copy()
    signs = gradient_sign(model, image[None], [targets])[0]
    return apply_perturbation(image, signs, config.epsilon_255, config.clip)


# ---------------------------------------------------------------------------
# Vector cache


def layer_subset_hash(layer_ids: Sequence[str]) -> int:
    digest = hashlib.sha256("\n".join(layer_ids).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def write_records(path: str | Path, records: Iterable[tuple[int, int, int, float, int, np.ndarray]]) -> None:
    """Write (image_id, box_index, label, epsilon_255, layer_hash, vector) records atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".safevec")
    with os.fdopen(fd, "wb") as f:
        f.write(CACHE_MAGIC)
        for image_id, box_index, label, eps, lhash, vec in records:
            vec = np.asarray(vec, dtype="<f4").reshape(-1)
            f.write(_RECORD.pack(image_id, box_index, label, eps, lhash, vec.shape[0]))
            f.write(vec.tobytes())
    os.replace(tmp, path)  # last write wins


def read_records(path: str | Path) -> list[tuple[int, int, int, float, int, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != CACHE_MAGIC:
        raise ValueError(f"{path}: not a SAFE vector cache file")
    out, pos = [], 8
    while pos < len(data):
        image_id, box_index, label, eps, lhash, n = _RECORD.unpack_from(data, pos)
        pos += _RECORD.size
        vec = np.frombuffer(data, dtype="<f4", count=n, offset=pos).copy()
        pos += 4 * n
        out.append((image_id, box_index, label, eps, lhash, vec))
    return out


@dataclass
class VectorCache:
    """On-disk vectors keyed by (image_id, epsilon_255, layer-subset hash)."""
    root: Path = field(default_factory=lambda: Path(os.environ.get(CACHE_ENV, ".safe_ood_cache")))

    def __post_init__(self):
        self.root = Path(self.root)

    def path(self, image_id: int, epsilon_255: float, lhash: int) -> Path:
        return self.root / f"{image_id}_{epsilon_255:g}_{lhash:016x}.safevec"

    def get(self, image_id: int, epsilon_255: float, lhash: int):
        p = self.path(image_id, epsilon_255, lhash)
        return read_records(p) if p.exists() else None

    def put(self, image_id: int, epsilon_255: float, lhash: int, records) -> None:
        write_records(self.path(image_id, epsilon_255, lhash), records)


# ---------------------------------------------------------------------------
# Training pairs


def generate_training_pairs(
    dataset: Iterable[tuple[np.ndarray, dict]],
    detector,
    config: PerturbConfig,
    safe_layers: Sequence[str],
    confidence_threshold: float = 0.5,
    batch_size: int = 32,
    cache: VectorCache | None = None,
    stats: PairStats | None = None,
) -> Iterator[LabeledSafeVector]:
    """Yield, per image, the clean vectors (label 0) then the perturbed ones (label 1).

    The detector is run on the clean image only; perturbed features are pooled
    at the clean-image boxes. Images without boxes contribute nothing.
    """
    stats = stats if stats is not None else PairStats()
    layer_ids = list(safe_layers)
    lhash = layer_subset_hash(layer_ids)
    it = iter(dataset)
    index = 0
    while True:
        chunk = [item for _, item in zip(range(batch_size), it)]
        if not chunk:
            return
        images = [img for img, _ in chunk]
        targets = [t for _, t in chunk]
        cached = [cache.get(index + k, config.epsilon_255, lhash) if cache else None for k in range(len(chunk))]
        if cache and all(c is not None for c in cached):
            for k, records in enumerate(cached):
                stats.images += 1
                stats.images_without_boxes += int(len(records) == 0)
                for image_id, box_index, label, _, _, vec in records:
                    stats.pairs += label
                    yield LabeledSafeVector(SafeVector(vec, []), int(label), image_id, box_index)
            index += len(chunk)
            continue
        clean = detect_and_pool(detector, images, layer_ids, confidence_threshold, stats=stats)
        signs = gradient_sign(detector, np.stack(images), targets) if config.epsilon_255 > 0 else None
        perturbed_images = (
            apply_perturbation(np.stack(images), signs, config.epsilon_255, config.clip)
            if signs is not None else np.stack(images)
        )
        perturbed = pool_at_boxes(detector, list(perturbed_images), [f.detections.boxes for f in clean], layer_ids)
        for k, (feat, pvec) in enumerate(zip(clean, perturbed)):
            records = []
            dets = feat.detections.to_detections()
            for label, vecs in ((0, feat.vectors), (1, pvec)):
                for b, v in enumerate(vecs):
                    records.append((index + k, b, label, config.epsilon_255, lhash, v))
                    yield LabeledSafeVector(SafeVector(v, feat.layer_offsets, dets[b]), label, index + k, b)
            stats.pairs += len(feat.vectors)
            if cache:
                cache.put(index + k, config.epsilon_255, lhash, records)
        index += len(chunk)
