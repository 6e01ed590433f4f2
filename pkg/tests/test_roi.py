import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from torchvision.ops import roi_align

from safe_ood.backbone import FeatureMap
from safe_ood.roi import (BoundingBox, DegenerateBoxError, build_safe_vector, pool_boxes, roi_pool_vector,
                          valid_box_mask)


def bilinear(fmap, y, x):
    """Bilinear read with the usual detector conventions: zero outside [-1, n], clamp inside."""
    c, h, w = fmap.shape
    if y < -1 or y > h or x < -1 or x > w:
        return np.zeros(c)
    y, x = min(max(y, 0.0), h - 1), min(max(x, 0.0), w - 1)
    y0, x0 = int(np.floor(y)), int(np.floor(x))
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    ly, lx = y - y0, x - x0
    return ((1 - ly) * (1 - lx) * fmap[:, y0, x0] + (1 - ly) * lx * fmap[:, y0, x1]
            + ly * (1 - lx) * fmap[:, y1, x0] + ly * lx * fmap[:, y1, x1])


def dense_oracle(fmap, box, stride, n=100):
    fb = np.asarray(box, dtype=np.float64) / stride - 0.5
    ys = fb[1] + (np.arange(n) + 0.5) / n * (fb[3] - fb[1])
    xs = fb[0] + (np.arange(n) + 0.5) / n * (fb[2] - fb[0])
    return np.mean([bilinear(fmap, y, x) for y in ys for x in xs], axis=0)


def random_case(rng):
    c, h, w = int(rng.integers(1, 4)), int(rng.integers(2, 7)), int(rng.integers(2, 7))
    stride = int(rng.choice([1, 2, 4]))
    fmap = rng.normal(size=(c, h, w))
    H, W = h * stride, w * stride
    x1, y1 = rng.uniform(0, W - 1), rng.uniform(0, H - 1)
    x2, y2 = rng.uniform(x1 + 1, W), rng.uniform(y1 + 1, H)
    return fmap, np.array([x1, y1, x2, y2]), stride


def test_matches_dense_oracle():
    rng = np.random.default_rng(1)
    for _ in range(60):
        fmap, box, stride = random_case(rng)
        got = pool_boxes(fmap, box[None], stride)[0]
        np.testing.assert_allclose(got, dense_oracle(fmap, box, stride, 60), atol=1e-3)


def test_sampling_mode_matches_torchvision():
    rng = np.random.default_rng(2)
    for _ in range(50):
        fmap, box, stride = random_case(rng)
        for s in (1, 2, 3):
            ref = roi_align(torch.tensor(fmap[None]), [torch.tensor(box[None])], output_size=1,
                            spatial_scale=1 / stride, sampling_ratio=s, aligned=True)
            got = pool_boxes(fmap, box[None], stride, sampling_ratio=s)[0]
            np.testing.assert_allclose(got, ref.numpy().reshape(-1), atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.floats(-5, 5), st.floats(0, 40), st.floats(0, 40), st.floats(1, 24), st.floats(1, 24))
def test_constant_map_pools_to_constant(value, x1, y1, bw, bh):
    fmap = np.full((3, 16, 16), value)
    box = np.array([[x1, y1, min(x1 + bw, 64), min(y1 + bh, 64)]])
    if not valid_box_mask(box)[0]:
        return
    np.testing.assert_allclose(pool_boxes(fmap, box, 4), value, atol=1e-12)


def test_translation_by_whole_cells():
    rng = np.random.default_rng(3)
    for _ in range(100):
        fmap = rng.normal(size=(2, 12, 12))
        stride = 4
        box = np.array([rng.uniform(4, 16), rng.uniform(4, 16), 0, 0])
        box[2:] = box[:2] + rng.uniform(2, 16, 2)
        dy, dx = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        shifted = np.roll(fmap, (dy, dx), axis=(1, 2))
        moved = box + stride * np.array([dx, dy, dx, dy])
        np.testing.assert_allclose(pool_boxes(shifted, moved[None], stride), pool_boxes(fmap, box[None], stride),
                                   atol=1e-5)


def test_degenerate_box_raises():
    fm = FeatureMap("l", np.ones((2, 4, 4)), 4)
    with pytest.raises(DegenerateBoxError):
        roi_pool_vector(fm, BoundingBox(70, 70, 80, 80))
    with pytest.raises(DegenerateBoxError):
        roi_pool_vector(fm, BoundingBox(3, 3, 3.5, 9))


def test_safe_vector_concatenates_in_order():
    a = FeatureMap("a", np.full((2, 8, 8), 1.0), 2)
    b = FeatureMap("b", np.full((3, 4, 4), 2.0), 4)
    v = build_safe_vector([a, b], BoundingBox(1, 1, 9, 9))
    assert v.values.tolist() == [1, 1, 2, 2, 2]
    assert v.layer_offsets == [("a", 0, 2), ("b", 2, 3)]
    assert len(v) == 5
    with pytest.raises(ValueError):
        build_safe_vector([], BoundingBox(1, 1, 9, 9))
