"""Object-specific feature pooling.

Boxes are mapped onto each feature map (coordinates divided by the map
stride, shifted by -0.5 as in aligned ROI pooling) and the bilinear surface
of the map is averaged over the box to give one value per channel.

The bilinear surface follows the usual ROIAlign boundary rule: a sample at
``y`` in ``[-1, n]`` is clamped into ``[0, n - 1]`` and interpolated; samples
outside that range contribute zero. It is separable, so the box average is
``wy @ M @ wx`` with one weight vector per axis.

``sampling_ratio=None`` (the default) averages the surface exactly over the
box. An integer ``k`` averages a ``k x k`` grid of bilinear samples instead,
which reproduces ``torchvision.ops.roi_align`` with a 1x1 output.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .backbone import FeatureMap


class DegenerateBoxError(ValueError):
    pass


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    def clip(self, width: float, height: float) -> "BoundingBox":
        return BoundingBox(
            min(max(self.x1, 0.0), width),
            min(max(self.y1, 0.0), height),
            min(max(self.x2, 0.0), width),
            min(max(self.y2, 0.0), height),
        )


@dataclass
class SafeVector:
    values: np.ndarray
    layer_offsets: list[tuple[str, int, int]]  # (layer_id, start, length)
    source_detection: Any = field(default=None, repr=False)

    def __len__(self) -> int:
        return int(self.values.shape[0])


def clip_boxes(boxes: np.ndarray, image_hw: tuple[int, int]) -> np.ndarray:
    h, w = image_hw
    out = np.asarray(boxes, dtype=np.float64).reshape(-1, 4).copy()
    out[:, [0, 2]] = out[:, [0, 2]].clip(0, w)
    out[:, [1, 3]] = out[:, [1, 3]].clip(0, h)
    return out


def valid_box_mask(boxes: np.ndarray, min_size: float = 1.0) -> np.ndarray:
    boxes = np.asarray(boxes).reshape(-1, 4)
    return ((boxes[:, 2] - boxes[:, 0]) >= min_size) & ((boxes[:, 3] - boxes[:, 1]) >= min_size)


def _tent(y: np.ndarray, n: int) -> np.ndarray:
    """Interpolation weights of samples ``y`` (any shape) onto ``n`` grid points."""
    inside = (y >= -1.0) & (y <= n)
    yc = np.clip(y, 0.0, n - 1)
    w = np.maximum(0.0, 1.0 - np.abs(yc[..., None] - np.arange(n)))
    return w * inside[..., None]


def _cumulative_tent(y: np.ndarray, n: int) -> np.ndarray:
    """Integral from -1 to ``y`` of every basis function; y in [-1, n], shape (N,) -> (N, n)."""
    knots = np.arange(-1.0, n + 1.0)
    values = _tent(knots, n).T  # (n, n + 2): basis i evaluated at each knot
    seg = 0.5 * (values[:, :-1] + values[:, 1:])
    cum = np.concatenate([np.zeros((n, 1)), np.cumsum(seg, axis=1)], axis=1)
    k = np.clip(np.floor(y + 1.0).astype(int), 0, n)
    u = y + 1.0 - k
    v0 = values[:, k]
    v1 = values[:, np.minimum(k + 1, n + 1)]
    return (cum[:, k] + v0 * u + 0.5 * (v1 - v0) * u * u).T


def axis_weights(lo: np.ndarray, hi: np.ndarray, n: int, sampling_ratio: int | None = None) -> np.ndarray:
    """Per-box weights over ``n`` cells averaging the interpolant on [lo, hi]; (N,) -> (N, n)."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if sampling_ratio is None:
        a = np.clip(lo, -1.0, n)
        b = np.clip(hi, -1.0, n)
        span = (hi - lo)[:, None]
        return (_cumulative_tent(b, n) - _cumulative_tent(a, n)) / span
    s = int(sampling_ratio)
    if s < 1:
        raise ValueError("sampling_ratio must be a positive integer or None")
    frac = (np.arange(s) + 0.5) / s
    ys = lo[:, None] + frac[None, :] * (hi - lo)[:, None]
    return _tent(ys, n).mean(axis=1)


def pool_boxes(
    tensor: np.ndarray,
    boxes: np.ndarray,
    stride: int,
    image_hw: tuple[int, int] | None = None,
    sampling_ratio: int | None = None,
    aligned: bool = True,
) -> np.ndarray:
    """Pool ``boxes`` (N x 4, image pixels) from a C x H x W map; returns N x C.

    Boxes must already be valid after clipping; see ``valid_box_mask``.
    """
    tensor = np.asarray(tensor)
    c, h, w = tensor.shape
    if image_hw is None:
        image_hw = (h * stride, w * stride)
    boxes = clip_boxes(boxes, image_hw)
    if len(boxes) == 0:
        return np.zeros((0, c), dtype=tensor.dtype)
    offset = 0.5 if aligned else 0.0
    fb = boxes / float(stride) - offset
    wx = axis_weights(fb[:, 0], fb[:, 2], w, sampling_ratio)
    wy = axis_weights(fb[:, 1], fb[:, 3], h, sampling_ratio)
    out = np.einsum("nh,chw,nw->nc", wy, tensor.astype(np.float64), wx)
    return out.astype(tensor.dtype, copy=False)


def roi_pool_vector(
    fmap: FeatureMap,
    box: BoundingBox,
    image_hw: tuple[int, int] | None = None,
    sampling_ratio: int | None = None,
    aligned: bool = True,
) -> np.ndarray:
    """Pool one box from one feature map into a length-``channels`` vector."""
    if fmap.stride <= 0:
        raise ValueError("feature map stride must be positive")
    c, h, w = fmap.tensor.shape
    if image_hw is None:
        image_hw = (h * fmap.stride, w * fmap.stride)
    clipped = clip_boxes(box.as_array(), image_hw)
    if not valid_box_mask(clipped)[0]:
        raise DegenerateBoxError(f"box {box} is degenerate after clipping to {image_hw}")
    return pool_boxes(fmap.tensor, clipped, fmap.stride, image_hw, sampling_ratio, aligned)[0]


def build_safe_vector(
    maps: Sequence[FeatureMap],
    box: BoundingBox,
    image_hw: tuple[int, int] | None = None,
    sampling_ratio: int | None = None,
    source_detection: Any = None,
) -> SafeVector:
    """Concatenate the pooled vectors of ``box`` over ``maps`` (network order)."""
    if not maps:
        raise ValueError("build_safe_vector needs at least one feature map")
    parts, offsets, start = [], [], 0
    for m in maps:
        v = roi_pool_vector(m, box, image_hw, sampling_ratio)
        parts.append(v)
        offsets.append((m.layer_id, start, v.shape[0]))
        start += v.shape[0]
    return SafeVector(np.concatenate(parts), offsets, source_detection)
