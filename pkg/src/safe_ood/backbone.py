"""Backbone introspection: SAFE layer identification, feature hooks, diagnostics.

A backbone is described declaratively as a JSON layer graph (see
``data/toy_backbone.json``); hooks are bound to live ``torch.nn.Module``
objects by layer id, where a layer id is the dotted module path returned by
``model.named_modules()``.
"""
from __future__ import annotations

import enum
import graphlib
import heapq
import json
import math
import warnings
from contextlib import contextmanager
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
from torch import nn

INPUT_NODE = "input"


class BackboneStructureError(ValueError):
    """Malformed layer graph: cycles, unknown kinds, dangling inputs."""


class UnsupportedBackboneError(ValueError):
    """The backbone contains no residual shortcut conv + BatchNorm layer."""


class DegenerateInputError(ValueError):
    pass


class LayerKind(str, enum.Enum):
    RESIDUAL_SHORTCUT_CONV_BN = "residual_shortcut_conv_bn"
    BLOCK_CONV_BN = "block_conv_bn"
    LATERAL_CONV = "lateral_conv"
    HEAD_CONV = "head_conv"
    OTHER = "other"


@dataclass(frozen=True)
class LayerSpec:
    layer_id: str
    kind: LayerKind
    channels: int
    stride: int
    is_safe: bool

    @property
    def is_conv(self) -> bool:
        return self.kind is not LayerKind.OTHER


@dataclass
class FeatureMap:
    layer_id: str
    tensor: np.ndarray  # channels x height x width
    stride: int

    @property
    def channels(self) -> int:
        return int(self.tensor.shape[0])


@dataclass
class SensitivityReport:
    # (layer_id, mean_ratio, std_ratio) in network order
    entries: list[tuple[str, float, float]]
    n_pairs: int
    n_skipped: int = 0


@dataclass
class AbnormalityReport:
    # (layer_id, mean_max_activation_id, mean_max_activation_ood, ratio)
    entries: list[tuple[str, float, float, float]]
    n_id: int = 0
    n_ood: int = 0


# ---------------------------------------------------------------------------
# Layer-graph descriptions


def builtin_description(name: str) -> dict:
    """Load a description shipped with the package (``toy_backbone``, ``resnet50_pattern``)."""
    fname = name if name.endswith(".json") else f"{name}.json"
    text = resources.files("safe_ood.data").joinpath(fname).read_text()
    return json.loads(text)


def load_description(source: str | Path | Mapping) -> dict:
    if isinstance(source, Mapping):
        return dict(source)
    path = Path(source)
    if not path.exists() and not path.suffix:
        return builtin_description(str(source))
    with open(path) as f:
        return json.load(f)


def _validate_layers(description: Mapping) -> list[dict]:
    layers = description.get("layers")
    if not isinstance(layers, list):
        raise BackboneStructureError("description must have a top-level 'layers' array")
    kinds = {k.value for k in LayerKind}
    seen: dict[str, dict] = {}
    for i, entry in enumerate(layers):
        where = f"layers[{i}]"
        for key in ("id", "kind", "channels", "stride", "inputs", "followed_by_batchnorm", "path"):
            if key not in entry:
                raise BackboneStructureError(f"{where}: missing field {key!r}")
        lid = entry["id"]
        if not isinstance(lid, str) or not lid or lid == INPUT_NODE:
            raise BackboneStructureError(f"{where}: invalid id {lid!r}")
        if lid in seen:
            raise BackboneStructureError(f"{where}: duplicate id {lid!r}")
        if entry["kind"] not in kinds:
            raise BackboneStructureError(f"{where} ({lid}): unknown kind {entry['kind']!r}")
        if entry["path"] not in ("shortcut", "main"):
            raise BackboneStructureError(f"{where} ({lid}): path must be 'shortcut' or 'main'")
        for key in ("channels", "stride"):
            v = entry[key]
            if isinstance(v, bool) or not isinstance(v, int) or v <= 0:
                raise BackboneStructureError(f"{where} ({lid}): {key} must be a positive integer")
        if not isinstance(entry["inputs"], list):
            raise BackboneStructureError(f"{where} ({lid}): inputs must be an array")
        seen[lid] = entry
    for entry in layers:
        for src in entry["inputs"]:
            if src != INPUT_NODE and src not in seen:
                raise BackboneStructureError(f"layer {entry['id']!r}: unknown input {src!r}")
    return layers


def _network_order(layers: list[dict]) -> list[dict]:
    """Topological order, ties broken by position in the file."""
    position = {e["id"]: i for i, e in enumerate(layers)}
    graph = {e["id"]: {s for s in e["inputs"] if s != INPUT_NODE} for e in layers}
    try:
        graphlib.TopologicalSorter(graph).prepare()
    except graphlib.CycleError as exc:
        raise BackboneStructureError(f"layer graph contains a cycle: {exc.args[1]}") from None
    indegree = {k: len(v) for k, v in graph.items()}
    consumers: dict[str, list[str]] = {k: [] for k in graph}
    for k, srcs in graph.items():
        for s in srcs:
            consumers[s].append(k)
    ready = [position[k] for k, d in indegree.items() if d == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        lid = layers[heapq.heappop(ready)]["id"]
        order.append(layers[position[lid]])
        for c in consumers[lid]:
            indegree[c] -= 1
            if indegree[c] == 0:
                heapq.heappush(ready, position[c])
    return order


def describe_layers(description: str | Path | Mapping) -> list[LayerSpec]:
    """Validate a description and return every layer as a LayerSpec, in network order.

    A layer is SAFE exactly when it is a convolution on a residual shortcut
    path whose output is consumed directly by a BatchNorm.
    """
    layers = _network_order(_validate_layers(load_description(description)))
    specs = []
    for e in layers:
        kind = LayerKind(e["kind"])
        structural = kind is not LayerKind.OTHER and e["path"] == "shortcut" and bool(e["followed_by_batchnorm"])
        if kind is LayerKind.RESIDUAL_SHORTCUT_CONV_BN and not structural:
            raise BackboneStructureError(
                f"layer {e['id']!r} is declared {kind.value} but is not a shortcut conv "
                "followed by BatchNorm"
            )
        if structural:
            kind = LayerKind.RESIDUAL_SHORTCUT_CONV_BN
        specs.append(LayerSpec(e["id"], kind, e["channels"], e["stride"], structural))
    return specs


def identify_safe_layers(description: str | Path | Mapping) -> list[LayerSpec]:
    """Return all layers of ``description`` with SAFE layers flagged.

    Raises UnsupportedBackboneError if no SAFE layer exists.
    """
    specs = describe_layers(description)
    if not any(s.is_safe for s in specs):
        desc = load_description(description)
        shortcut = [e["id"] for e in desc["layers"] if e["path"] == "shortcut" and e["kind"] != "other"]
        bn_fed = [e["id"] for e in desc["layers"] if e["followed_by_batchnorm"] and e["kind"] != "other"]
        closest = (shortcut or bn_fed)[:3]
        hint = f"; closest candidates: {', '.join(closest)}" if closest else ""
        raise UnsupportedBackboneError(
            "no residual shortcut convolution followed by BatchNorm found" + hint
        )
    return specs


def safe_layer_ids(specs: Iterable[LayerSpec]) -> list[str]:
    return [s.layer_id for s in specs if s.is_safe]


def conv_layer_ids(specs: Iterable[LayerSpec]) -> list[str]:
    return [s.layer_id for s in specs if s.is_conv]


# ---------------------------------------------------------------------------
# Hooks


def resolve_layer(model: nn.Module, layer_id: str) -> nn.Module:
    modules = dict(model.named_modules())
    if layer_id not in modules or layer_id == "":
        raise KeyError(f"unknown layer id {layer_id!r}")
    return modules[layer_id]


@contextmanager
def capture(model: nn.Module, layer_ids: Sequence[str]):
    """Record the outputs of ``layer_ids`` during forward passes inside the block."""
    store: dict[str, torch.Tensor] = {}
    modules = [resolve_layer(model, lid) for lid in layer_ids]
    handles = []
    for lid, module in zip(layer_ids, modules):
        def hook(_m, _inp, out, lid=lid):
            store[lid] = out
        handles.append(module.register_forward_hook(hook))
    try:
        yield store
    finally:
        for h in handles:
            h.remove()


@contextmanager
def inference_mode(model: nn.Module):
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            yield model
    finally:
        model.train(was_training)


def to_batch(images) -> torch.Tensor:
    """HxWxC float images in [0, 1] (array or list of arrays) -> NxCxHxW float32 tensor."""
    if isinstance(images, torch.Tensor):
        return images if images.dim() == 4 else images.unsqueeze(0)
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def probe_shapes(model: nn.Module, specs: Iterable[LayerSpec], input_hw: tuple[int, int] = (64, 64)) -> None:
    """One forward pass checking each hooked layer's channels and ceil-division stride."""
    specs = [s for s in specs if s.kind is not LayerKind.OTHER or _has_module(model, s.layer_id)]
    ids = [s.layer_id for s in specs]
    h, w = input_hw
    with inference_mode(model), capture(model, ids) as store:
        model(torch.zeros(1, 3, h, w))
    for s in specs:
        out = store.get(s.layer_id)
        if out is None:
            raise BackboneStructureError(f"layer {s.layer_id!r} produced no output in the probe pass")
        expect = (s.channels, math.ceil(h / s.stride), math.ceil(w / s.stride))
        if tuple(out.shape[1:]) != expect:
            raise BackboneStructureError(
                f"layer {s.layer_id!r}: description implies shape {expect}, model gives {tuple(out.shape[1:])}"
            )


def _has_module(model: nn.Module, layer_id: str) -> bool:
    return layer_id in dict(model.named_modules())


def _stride_of(input_hw: tuple[int, int], out: torch.Tensor) -> int:
    return max(1, int(round(input_hw[0] / out.shape[-2])))


def extract_feature_maps(model: nn.Module, image, layer_ids: Sequence[str]) -> list[FeatureMap]:
    """Feature maps of ``layer_ids`` for one HxWxC image, from a single inference pass."""
    if not layer_ids:
        return []
    for lid in layer_ids:
        resolve_layer(model, lid)
    x = to_batch(image)
    with inference_mode(model), capture(model, layer_ids) as store:
        model(x)
    hw = tuple(x.shape[-2:])
    return [
        FeatureMap(lid, store[lid][0].detach().cpu().numpy().copy(), _stride_of(hw, store[lid]))
        for lid in layer_ids
    ]


# ---------------------------------------------------------------------------
# Diagnostics


def sensitivity_probe(model: nn.Module, image_pairs: Sequence[tuple], layer_ids: Sequence[str]) -> SensitivityReport:
    """Empirical sensitivity: ||f_l(x) - f_l(x*)|| / ||x - x*|| per layer, over image pairs."""
    if len(image_pairs) < 2:
        raise ValueError("sensitivity_probe needs at least two image pairs")
    ratios: dict[str, list[float]] = {lid: [] for lid in layer_ids}
    skipped = 0
    for x, x_star in image_pairs:
        a, b = to_batch(x), to_batch(x_star)
        denom = float(torch.linalg.vector_norm((a - b).double()))
        if denom == 0.0:
            skipped += 1
            continue
        with inference_mode(model), capture(model, layer_ids) as store:
            model(torch.cat([a, b]))
            for lid in layer_ids:
                out = store[lid]
                num = float(torch.linalg.vector_norm((out[0] - out[1]).double()))
                ratios[lid].append(num / denom)
    if skipped:
        warnings.warn(f"sensitivity_probe: skipped {skipped} identical pair(s)", stacklevel=2)
    n = len(image_pairs) - skipped
    if n == 0:
        raise DegenerateInputError("all image pairs are identical")
    entries = [(lid, float(np.mean(r)), float(np.std(r))) for lid, r in ratios.items()]
    return SensitivityReport(entries, n_pairs=n, n_skipped=skipped)


def _mean_max_activation(model: nn.Module, images, layer_ids: Sequence[str], batch_size: int = 64) -> np.ndarray:
    images = list(images)
    per_layer = np.zeros(len(layer_ids))
    for start in range(0, len(images), batch_size):
        x = to_batch(np.stack(images[start:start + batch_size]))
        with inference_mode(model), capture(model, layer_ids) as store:
            model(x)
            for i, lid in enumerate(layer_ids):
                per_layer[i] += store[lid].abs().flatten(1).amax(dim=1).double().sum().item()
    return per_layer / len(images)


def activation_abnormality(model: nn.Module, id_images, ood_images, safe_layer_ids: Sequence[str]) -> AbnormalityReport:
    """Mean per-image max |activation| at each layer for ID vs OOD images."""
    id_images, ood_images = list(id_images), list(ood_images)
    if not id_images or not ood_images:
        raise ValueError("activation_abnormality needs non-empty ID and OOD image sets")
    id_act = _mean_max_activation(model, id_images, safe_layer_ids)
    ood_act = _mean_max_activation(model, ood_images, safe_layer_ids)
    entries = []
    for lid, a, b in zip(safe_layer_ids, id_act, ood_act):
        ratio = float(b / a) if a > 0 else (1.0 if b == a else math.inf)
        entries.append((lid, float(a), float(b), ratio))
    return AbnormalityReport(entries, n_id=len(id_images), n_ood=len(ood_images))
