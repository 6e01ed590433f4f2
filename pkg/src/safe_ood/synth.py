"""Synthetic multi-object shape scenes with disjoint ID / OOD class sets.

Scenes are 64x64 RGB: a random base colour with Gaussian texture noise and
1-4 filled shapes placed without heavy overlap. ID splits contain circles,
squares and triangles; the OOD split contains five-point stars and plus
crosses. Shapes are rendered with 4x supersampling and annotated with the
tight box of their exact geometry.

Everything is a pure function of ``(kind, n_images, seed)``.
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import jsonschema
import numpy as np
from PIL import Image, ImageDraw

ID_CLASSES = ("circle", "square", "triangle")
OOD_CLASSES = ("star", "cross")
CATEGORY_IDS = {"circle": 1, "square": 2, "triangle": 3, "star": 4, "cross": 5}
SPLIT_KINDS = {"id_train": 0, "id_val": 1, "id_test": 2, "ood_test": 3}

IMAGE_SIZE = 64
SIZE_RANGE = (10.0, 28.0)
MAX_OBJECTS = 4
NOISE_SIGMA = 0.03
MAX_IOU = 0.2
MAX_ATTEMPTS = 1000
SUPERSAMPLE = 4
# dark backgrounds, bright objects: contrast never depends on the colour draw
BACKGROUND_RANGE = (0.0, 0.35)
OBJECT_RANGE = (0.55, 1.0)


class DatasetLoadError(FileNotFoundError):
    pass


class SchemaError(ValueError):
    pass


@dataclass
class Scene:
    image: np.ndarray  # H x W x 3 float32, multiples of 1/255
    boxes: np.ndarray  # (M, 4) x1, y1, x2, y2
    classes: list[str]
    polygons: list[np.ndarray | tuple]  # geometry used for rendering


def split_classes(kind: str) -> tuple[str, ...]:
    if kind not in SPLIT_KINDS:
        raise ValueError(f"unknown split kind {kind!r}")
    return OOD_CLASSES if kind == "ood_test" else ID_CLASSES


# ---------------------------------------------------------------------------
# Geometry


def shape_outline(name: str, radius: float, rotation: float) -> np.ndarray | None:
    """Polygon vertices (K x 2) centred at the origin; None for a circle."""
    if name == "circle":
        return None
    if name == "square":
        ang = rotation + math.pi / 4 + np.arange(4) * math.pi / 2
        rad = np.full(4, radius)
    elif name == "triangle":
        ang = rotation + np.arange(3) * 2 * math.pi / 3
        rad = np.full(3, radius)
    elif name == "star":
        ang = rotation + np.arange(10) * math.pi / 5
        rad = np.where(np.arange(10) % 2 == 0, radius, 0.45 * radius)
    elif name == "cross":
        a, t = radius, 0.3 * radius
        pts = np.array([(t, t), (a, t), (a, -t), (t, -t), (t, -a), (-t, -a),
                        (-t, -t), (-a, -t), (-a, t), (-t, t), (-t, a), (t, a)])
        c, s = math.cos(rotation), math.sin(rotation)
        return pts @ np.array([[c, s], [-s, c]])
    else:
        raise ValueError(f"unknown shape {name!r}")
    return np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1)


def tight_box(outline: np.ndarray | None, radius: float, cx: float, cy: float) -> np.ndarray:
    if outline is None:
        return np.array([cx - radius, cy - radius, cx + radius, cy + radius])
    return np.array([outline[:, 0].min() + cx, outline[:, 1].min() + cy,
                     outline[:, 0].max() + cx, outline[:, 1].max() + cy])


def box_iou(a: np.ndarray, b: np.ndarray) -> float:
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def coverage_mask(outline: np.ndarray | None, radius: float, cx: float, cy: float,
                  size: int = IMAGE_SIZE, factor: int = SUPERSAMPLE) -> np.ndarray:
    """Fractional pixel coverage of a shape, by supersampled rasterisation."""
    big = Image.new("L", (size * factor, size * factor), 0)
    draw = ImageDraw.Draw(big)
    if outline is None:
        # PIL ellipse bounds are inclusive of the last pixel
        r = radius * factor
        draw.ellipse([cx * factor - r, cy * factor - r, cx * factor + r - 1, cy * factor + r - 1], fill=255)
    else:
        pts = (outline + [cx, cy]) * factor - 0.5
        draw.polygon([tuple(p) for p in pts], fill=255)
    arr = np.asarray(big, dtype=np.float32) / 255.0
    return arr.reshape(size, factor, size, factor).mean(axis=(1, 3))


# ---------------------------------------------------------------------------
# Scenes


def _try_scene(rng: np.random.Generator, classes: Sequence[str], size: int) -> Scene | None:
    n_obj = int(rng.integers(1, MAX_OBJECTS + 1))
    base = rng.uniform(*BACKGROUND_RANGE, 3)
    image = np.clip(base + rng.normal(0.0, NOISE_SIGMA, (size, size, 3)), 0.0, 1.0)
    boxes, names, geoms = [], [], []
    for _ in range(n_obj):
        name = classes[int(rng.integers(len(classes)))]
        for _attempt in range(MAX_ATTEMPTS):
            radius = 0.5 * rng.uniform(*SIZE_RANGE)
            outline = shape_outline(name, radius, rng.uniform(0, 2 * math.pi))
            rel = tight_box(outline, radius, 0.0, 0.0)
            cx = rng.uniform(-rel[0], size - rel[2])
            cy = rng.uniform(-rel[1], size - rel[3])
            box = tight_box(outline, radius, cx, cy)
            if all(box_iou(box, b) < MAX_IOU for b in boxes):
                break
        else:
            return None
        color = rng.uniform(*OBJECT_RANGE, 3)
        alpha = coverage_mask(outline, radius, cx, cy, size)[..., None]
        image = image * (1 - alpha) + color * alpha
        boxes.append(box)
        names.append(name)
        geoms.append((outline, radius, cx, cy))
    image = np.round(np.clip(image, 0, 1) * 255.0).astype(np.uint8).astype(np.float32) / 255.0
    return Scene(image, np.array(boxes).reshape(-1, 4), names, geoms)


def render_scene(kind: str, seed: int, index: int, size: int = IMAGE_SIZE) -> tuple[Scene, int]:
    """Scene ``index`` of a split, plus the number of placement failures it took."""
    classes = split_classes(kind)
    retries = 0
    while True:
        ss = np.random.SeedSequence([seed, SPLIT_KINDS[kind], index, retries])
        scene = _try_scene(np.random.default_rng(ss), classes, size)
        if scene is not None:
            return scene, retries
        retries += 1


def render_split(kind: str, n_images: int, seed: int) -> tuple[list[Scene], int]:
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    scenes, retries = [], 0
    for i in range(n_images):
        s, r = render_scene(kind, seed, i)
        scenes.append(s)
        retries += r
    return scenes, retries


def scenes_to_dataset(scenes: Sequence[Scene], kind: str) -> list[tuple[np.ndarray, dict]]:
    """In-memory ``(image, {"boxes", "labels"})`` pairs with dense labels for the split's classes."""
    dense = {name: i for i, name in enumerate(split_classes(kind))}
    return [
        (s.image, {"boxes": s.boxes.astype(np.float64), "labels": np.array([dense[c] for c in s.classes], dtype=np.int64)})
        for s in scenes
    ]


def _png_bytes(image: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.round(image * 255).astype(np.uint8)).save(buf, format="PNG", optimize=False)
    return buf.getvalue()


def generate_split(kind: str, n_images: int, seed: int, out_dir: str | Path) -> Path:
    """Write PNG images and ``annotations.json`` for one split; returns the annotation path."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    scenes, retries = render_split(kind, n_images, seed)
    classes = split_classes(kind)
    manifest = {
        "info": {"kind": kind, "n_images": n_images, "seed": seed, "regenerated_scenes": retries},
        "images": [],
        "annotations": [],
        "categories": [{"id": CATEGORY_IDS[c], "name": c} for c in classes],
    }
    ann_id = 1
    for i, scene in enumerate(scenes):
        fname = f"images/{i:06d}.png"
        (out_dir / fname).write_bytes(_png_bytes(scene.image))
        manifest["images"].append({"id": i + 1, "file_name": fname, "width": IMAGE_SIZE, "height": IMAGE_SIZE})
        for box, name in zip(scene.boxes, scene.classes):
            x1, y1, x2, y2 = (round(float(v), 3) for v in box)
            manifest["annotations"].append({
                "id": ann_id, "image_id": i + 1, "category_id": CATEGORY_IDS[name],
                "bbox": [x1, y1, round(x2 - x1, 3), round(y2 - y1, 3)],
            })
            ann_id += 1
    path = out_dir / "annotations.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


# ---------------------------------------------------------------------------
# Loading

COCO_SCHEMA = {
    "type": "object",
    "required": ["images", "annotations", "categories"],
    "properties": {
        "images": {"type": "array", "items": {
            "type": "object", "required": ["id", "file_name", "width", "height"],
            "properties": {"id": {"type": "integer"}, "file_name": {"type": "string"},
                           "width": {"type": "integer", "minimum": 1}, "height": {"type": "integer", "minimum": 1}},
        }},
        "annotations": {"type": "array", "items": {
            "type": "object", "required": ["id", "image_id", "category_id", "bbox"],
            "properties": {"id": {"type": "integer"}, "image_id": {"type": "integer"},
                           "category_id": {"type": "integer"},
                           "bbox": {"type": "array", "items": {"type": "number"}, "minItems": 4, "maxItems": 4}},
        }},
        "categories": {"type": "array", "items": {
            "type": "object", "required": ["id", "name"],
            "properties": {"id": {"type": "integer"}, "name": {"type": "string"}},
        }},
    },
}


class CocoDataset:
    """COCO-style split: indexable ``(image, {"boxes", "labels", "image_id"})`` pairs.

    Category ids are remapped to dense labels ``0..K-1`` in ascending id order.
    """

    def __init__(self, annotation_file: str | Path, image_root: str | Path | None = None):
        annotation_file = Path(annotation_file)
        self.image_root = Path(image_root) if image_root is not None else annotation_file.parent
        with open(annotation_file) as f:
            doc = json.load(f)
        try:
            jsonschema.validate(doc, COCO_SCHEMA)
        except jsonschema.ValidationError as exc:
            raise SchemaError(f"{annotation_file}: {exc.json_path}: {exc.message}") from None
        self.info = doc.get("info", {})
        cats = sorted(doc["categories"], key=lambda c: c["id"])
        self.category_names = [c["name"] for c in cats]
        dense = {c["id"]: i for i, c in enumerate(cats)}
        self.images = doc["images"]
        known = {im["id"] for im in self.images}
        missing = [im["id"] for im in self.images if not (self.image_root / im["file_name"]).exists()]
        if missing:
            raise DatasetLoadError(f"missing image files for image ids {missing}")
        per_image: dict[int, list] = {im["id"]: [] for im in self.images}
        for k, a in enumerate(doc["annotations"]):
            if a["image_id"] not in known:
                raise DatasetLoadError(f"annotation {a['id']} references absent image id {a['image_id']}")
            if a["category_id"] not in dense:
                raise SchemaError(f"$.annotations[{k}].category_id: unknown category {a['category_id']}")
            per_image[a["image_id"]].append(a)
        self._targets = []
        for im in self.images:
            anns = per_image[im["id"]]
            boxes = np.array([[x, y, x + w, y + h] for x, y, w, h in (a["bbox"] for a in anns)],
                             dtype=np.float64).reshape(-1, 4)
            labels = np.array([dense[a["category_id"]] for a in anns], dtype=np.int64)
            self._targets.append({"boxes": boxes, "labels": labels, "image_id": im["id"]})

    def __len__(self) -> int:
        return len(self.images)

    def load_image(self, i: int) -> np.ndarray:
        path = self.image_root / self.images[i]["file_name"]
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0

    def __getitem__(self, i: int) -> tuple[np.ndarray, dict]:
        return self.load_image(i), self._targets[i]

    def __iter__(self) -> Iterator[tuple[np.ndarray, dict]]:
        for i in range(len(self)):
            yield self[i]

    def materialize(self) -> list[tuple[np.ndarray, dict]]:
        return list(self)


def load_coco_style(annotation_file: str | Path, image_root: str | Path | None = None) -> CocoDataset:
    return CocoDataset(annotation_file, image_root)


def assert_disjoint(id_dataset: CocoDataset, ood_dataset: CocoDataset) -> None:
    shared = set(id_dataset.category_names) & set(ood_dataset.category_names)
    if shared:
        raise ValueError(f"ID and OOD splits share classes: {sorted(shared)}")
