"""Feature-monitoring MLP mapping SAFE vectors to OOD scores in (0, 1)."""
from __future__ import annotations

import csv
import logging
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SAFEMLP1"
# keeps saturated scores strictly inside (0, 1)
_SCORE_LO, _SCORE_HI = np.finfo(np.float64).tiny, 1.0 - 2.0 ** -53
_HEADER = struct.Struct("<IQfQ")  # input_dim, seed, epsilon_255, layer hash


@dataclass
class TrainConfig:
    epochs: int = 5
    learning_rate: float = 1e-3
    momentum: float = 0.9
    dropout: float = 0.5
    images_per_batch: int = 32
    seed: int = 0

    def __post_init__(self):
        if min(self.epochs, self.learning_rate, self.images_per_batch) <= 0 or not 0 <= self.dropout < 1:
            raise ValueError(f"invalid TrainConfig {self}")


class MonitorMLP(nn.Module):
    """d -> d/2 -> d/4 -> 1 with ReLU, dropout before the output layer and a sigmoid."""

    def __init__(self, input_dim: int, dropout: float = 0.5):
        super().__init__()
        if input_dim < 4:
            raise ValueError(f"input_dim must be >= 4, got {input_dim}")
        d = input_dim
        self.fc1 = nn.Linear(d, d // 2)
        self.fc2 = nn.Linear(d // 2, d // 4)
        self.drop = nn.Dropout(dropout)
        self.out = nn.Linear(d // 4, 1)
        self.seed = 0
        self.epsilon_255 = 0.0
        self.layer_hash = 0
        self.deployable = True

    @property
    def input_dim(self) -> int:
        return self.fc1.in_features

    @property
    def layer_dims(self) -> list[int]:
        return [self.fc1.in_features, self.fc1.out_features, self.fc2.out_features, 1]

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.fc1(x))
        x = F.relu(self.fc2(x))
        return self.out(self.drop(x)).squeeze(-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(x))

    def weight_blocks(self) -> list[torch.Tensor]:
        return [self.fc1.weight, self.fc1.bias, self.fc2.weight, self.fc2.bias, self.out.weight, self.out.bias]


def init_mlp(input_dim: int, seed: int = 0, dropout: float = 0.5) -> MonitorMLP:
    """Uniform Xavier weights, zero biases; deterministic in ``seed``."""
    mlp = MonitorMLP(input_dim, dropout)
    g = torch.Generator().manual_seed(int(seed))
    for layer in (mlp.fc1, mlp.fc2, mlp.out):
        nn.init.xavier_uniform_(layer.weight, generator=g)
        nn.init.zeros_(layer.bias)
    mlp.seed = int(seed)
    return mlp


def _collect(stream) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xs, ys, groups = [], [], []
    for item in stream:
        xs.append(np.asarray(item.vector.values, dtype=np.float32))
        ys.append(item.label)
        groups.append(item.image_index)
    if not xs:
        raise ValueError("training stream is empty")
    return np.stack(xs), np.asarray(ys, dtype=np.float32), np.asarray(groups)


def train_monitor(mlp: MonitorMLP, stream: Iterable, config: TrainConfig | None = None):
    """Train on a stream of LabeledSafeVector; see ``fit_monitor`` for the recipe."""
    x, y, groups = _collect(stream)
    return fit_monitor(mlp, x, y, groups, config)


def fit_monitor(
    mlp: MonitorMLP,
    vectors: np.ndarray,
    labels: np.ndarray,
    groups: np.ndarray,
    config: TrainConfig | None = None,
) -> tuple[MonitorMLP, list[tuple[int, int, float]]]:
    """SGD with momentum on binary cross-entropy.

    Each step consumes every vector from ``images_per_batch`` consecutive
    images (``groups`` holds the source image of each vector); image order is
    reshuffled every epoch from ``config.seed``. Returns the model and the
    (epoch, step, loss) history.
    """
    config = config or TrainConfig()
    vectors = np.asarray(vectors, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.float32)
    groups = np.asarray(groups)
    if len(vectors) == 0:
        raise ValueError("training stream is empty")
    if vectors.shape[1] != mlp.input_dim:
        raise ValueError(f"vector length {vectors.shape[1]} does not match MLP input_dim {mlp.input_dim}")
    if len(np.unique(labels)) < 2:
        warnings.warn("training data contains a single label; the monitor is not deployable", stacklevel=2)
        mlp.deployable = False
    mlp.drop.p = config.dropout

    image_ids, inverse = np.unique(groups, return_inverse=True)
    members = [np.flatnonzero(inverse == i) for i in range(len(image_ids))]
    x_all = torch.from_numpy(vectors)
    y_all = torch.from_numpy(labels)
    opt = torch.optim.SGD(mlp.parameters(), lr=config.learning_rate, momentum=config.momentum)
    rng = np.random.default_rng(config.seed)
    history = []
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        mlp.train()
        step = 0
        for epoch in range(config.epochs):
            order = rng.permutation(len(members))
            for start in range(0, len(order), config.images_per_batch):
                idx = np.concatenate([members[i] for i in order[start:start + config.images_per_batch]])
                logits = mlp.logits(x_all[idx])
                loss = F.binary_cross_entropy_with_logits(logits, y_all[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
                value = loss.item()
                if not np.isfinite(value):
                    raise ArithmeticError(f"non-finite monitor loss at epoch {epoch + 1} step {step}")
                history.append((epoch + 1, step, value))
                step += 1
    mlp.eval()
    return mlp, history


def epoch_losses(history: Sequence[tuple[int, int, float]]) -> list[float]:
    epochs = sorted({e for e, _, _ in history})
    return [float(np.mean([l for e, _, l in history if e == ep])) for ep in epochs]


def write_loss_history(history, path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "step", "loss"])
        w.writerows(history)


def score_batch(mlp: MonitorMLP, vectors: np.ndarray) -> np.ndarray:
    vectors = np.asarray(vectors, dtype=np.float32)
    if vectors.ndim != 2 or vectors.shape[1] != mlp.input_dim:
        raise ValueError(f"vector length {vectors.shape[-1]} does not match MLP input_dim {mlp.input_dim}")
    was_training = mlp.training
    mlp.eval()
    try:
        with torch.no_grad():
            logits = mlp.logits(torch.from_numpy(vectors)).double()
        return torch.sigmoid(logits).numpy().clip(_SCORE_LO, _SCORE_HI)
    finally:
        mlp.train(was_training)


def score(mlp: MonitorMLP, vector) -> float:
    """OOD score of one SAFE vector; higher is more OOD."""
    values = getattr(vector, "values", vector)
    values = np.asarray(values, dtype=np.float32).reshape(-1)
    if values.shape[0] != mlp.input_dim:
        raise ValueError(f"vector length {values.shape[0]} does not match MLP input_dim {mlp.input_dim}")
    return float(score_batch(mlp, values[None])[0])


def save_monitor(mlp: MonitorMLP, path: str | Path) -> None:
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(_HEADER.pack(mlp.input_dim, mlp.seed, mlp.epsilon_255, mlp.layer_hash))
        for t in mlp.weight_blocks():
            f.write(t.detach().numpy().astype("<f4").tobytes())


def load_monitor(path: str | Path) -> MonitorMLP:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a monitor checkpoint")
    input_dim, seed, eps, lhash = _HEADER.unpack_from(data, 8)
    mlp = MonitorMLP(input_dim)
    pos = 8 + _HEADER.size
    with torch.no_grad():
        for t in mlp.weight_blocks():
            n = t.numel()
            t.copy_(torch.from_numpy(np.frombuffer(data, dtype="<f4", count=n, offset=pos).copy()).reshape(t.shape))
            pos += 4 * n
    mlp.seed, mlp.epsilon_255, mlp.layer_hash = seed, eps, lhash
    mlp.eval()
    return mlp
