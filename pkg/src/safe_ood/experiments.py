"""Evaluation harness: SAFE and MSP scoring, layer ablations and the epsilon sweep.

Everything that depends only on the frozen detector (detections, pooled
features of every conv layer, input-gradient signs) is computed once in a
``FeatureBank``; each experiment run then only re-pools the perturbed images
for its epsilon and trains a fresh monitor on a column slice.
"""
from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import synth
from .backbone import builtin_description, conv_layer_ids, identify_safe_layers, safe_layer_ids
from .detector import ToyDetector, train_detector
from .features import detect_and_pool, pool_at_boxes
from .metrics import auroc, fpr95, msp_score
from .monitor import MonitorMLP, TrainConfig, fit_monitor, init_mlp, score_batch
from .surrogate import apply_perturbation, gradient_sign

log = logging.getLogger(__name__)

CSV_COLUMNS = ["run_id", "seed", "epsilon_255", "layer_subset", "n_id", "n_ood", "auroc", "fpr95"]
OOD_SETS_NOTE = "averaged over the synthetic OOD split only"


class EvaluationDegenerateError(RuntimeError):
    """No detection survived confidence suppression on the ID or the OOD set."""


@dataclass
class PipelineConfig:
    n_train: int = 500
    n_val: int = 100
    n_id_test: int = 200
    n_ood_test: int = 200
    data_seed: int = 0
    detector_epochs: int = 30
    detector_seed: int = 0
    epsilon_255: float = 8.0
    layers: str | tuple[str, ...] = "safe"
    confidence_threshold: float = 0.5
    base_seed: int = 0
    n_seeds: int = 3
    monitor: TrainConfig = field(default_factory=TrainConfig)
    sampling_ratio: int | None = None
    clip: bool = True

    def seeds(self) -> list[int]:
        return [derive_seed(self.base_seed, i) for i in range(self.n_seeds)]


def derive_seed(base_seed: int, run_index: int) -> int:
    digest = hashlib.sha256(f"{int(base_seed)}:{int(run_index)}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


@dataclass
class EvalResult:
    auroc: float
    fpr95: float
    n_id: int
    n_ood: int
    seed: int | None = None
    epsilon_255: float | None = None
    layer_subset: tuple[str, ...] = ()
    confidence_threshold: float = 0.5
    id_scores: np.ndarray = field(default=None, repr=False)
    ood_scores: np.ndarray = field(default=None, repr=False)
    flags: list[str] = field(default_factory=list)


@dataclass
class AblationRecord:
    """One configuration evaluated over several seeds."""
    label: str
    layer_subset: tuple[str, ...]
    epsilon_255: float
    results: list[EvalResult]
    flags: list[str] = field(default_factory=list)

    @property
    def mean_auroc(self) -> float:
        return float(np.mean([r.auroc for r in self.results]))

    @property
    def std_auroc(self) -> float:
        return float(np.std([r.auroc for r in self.results]))

    @property
    def mean_fpr95(self) -> float:
        return float(np.mean([r.fpr95 for r in self.results]))


def score_result(id_scores, ood_scores, **provenance) -> EvalResult:
    id_scores = np.asarray(id_scores, dtype=np.float64)
    ood_scores = np.asarray(ood_scores, dtype=np.float64)
    if id_scores.size == 0 or ood_scores.size == 0:
        raise EvaluationDegenerateError(
            f"no surviving detections (ID: {id_scores.size}, OOD: {ood_scores.size})"
        )
    return EvalResult(
        auroc(id_scores, ood_scores), fpr95(id_scores, ood_scores), id_scores.size, ood_scores.size,
        id_scores=id_scores, ood_scores=ood_scores, **provenance,
    )


def _monitor_scores(monitor, vectors: np.ndarray) -> np.ndarray:
    if isinstance(monitor, MonitorMLP):
        return score_batch(monitor, vectors)
    return np.asarray([float(monitor(v)) for v in vectors], dtype=np.float64)


def resolve_layers(selector, detector_layers: Sequence[str] | None = None,
                   description="toy_backbone") -> list[str]:
    """``"safe"``, ``"all_conv"`` or an explicit id list -> layer ids in network order."""
    specs = identify_safe_layers(builtin_description(description) if isinstance(description, str) else description)
    if isinstance(selector, str) and selector in ("safe", "all_conv"):
        return safe_layer_ids(specs) if selector == "safe" else conv_layer_ids(specs)
    ids = [selector] if isinstance(selector, str) else list(selector)
    known = set(detector_layers or conv_layer_ids(specs))
    unknown = [i for i in ids if i not in known]
    if not ids or unknown:
        raise ValueError(f"unknown layer ids {unknown}" if unknown else "empty layer subset")
    return ids


# ---------------------------------------------------------------------------
# Baseline and single-pipeline evaluation


def msp_baseline(detector: ToyDetector, image: np.ndarray, confidence_threshold: float = 0.5) -> np.ndarray:
    """1 - max softmax probability for each detection of ``image``."""
    feats = detect_and_pool(detector, [np.asarray(image, np.float32)], [], confidence_threshold)
    return msp_score(feats[0].detections.class_probs)


def evaluate_pipeline(detector, monitor, id_test, ood_test, config: PipelineConfig | None = None,
                      layer_ids: Sequence[str] | None = None) -> EvalResult:
    """Detect on both test sets, score every surviving detection, compute AUROC and FPR95.

    ``monitor`` is a MonitorMLP or any callable mapping one vector to a score.
    """
    config = config or PipelineConfig()
    layer_ids = list(layer_ids or resolve_layers(config.layers))
    id_images = [img for img, _ in id_test]
    ood_images = [img for img, _ in ood_test]
    if not id_images or not ood_images:
        raise ValueError("both test sets must be non-empty")
    scores = []
    for images in (id_images, ood_images):
        feats = detect_and_pool(detector, images, layer_ids, config.confidence_threshold,
                                sampling_ratio=config.sampling_ratio)
        vecs = [f.vectors for f in feats if len(f.vectors)]
        scores.append(_monitor_scores(monitor, np.concatenate(vecs)) if vecs else np.zeros(0))
    return score_result(*scores, epsilon_255=getattr(monitor, "epsilon_255", None),
                        seed=getattr(monitor, "seed", None), layer_subset=tuple(layer_ids),
                        confidence_threshold=config.confidence_threshold)


# ---------------------------------------------------------------------------
# Testbed and feature bank


@dataclass
class Testbed:
    detector: ToyDetector
    history: list[dict]
    train: list
    val: list
    id_test: list
    ood_test: list


def build_testbed(config: PipelineConfig) -> Testbed:
    """Render the synthetic splits in memory and train the frozen detector."""
    splits = {}
    for kind, n in (("id_train", config.n_train), ("id_val", config.n_val),
                    ("id_test", config.n_id_test), ("ood_test", config.n_ood_test)):
        scenes, _ = synth.render_split(kind, n, config.data_seed)
        splits[kind] = synth.scenes_to_dataset(scenes, kind)
    det, history = train_detector(splits["id_train"], epochs=config.detector_epochs, seed=config.detector_seed,
                                  val_dataset=splits["id_val"])
    return Testbed(det, history, splits["id_train"], splits["id_val"], splits["id_test"], splits["ood_test"])


class FeatureBank:
    """Pooled features of every bank layer for one frozen detector, computed once."""

    def __init__(self, detector, train, id_test, ood_test, layer_ids: Sequence[str] | None = None,
                 confidence_threshold: float = 0.5, sampling_ratio: int | None = None,
                 clip: bool = True, batch_size: int = 50):
        self.detector = detector
        self.layer_ids = list(layer_ids or resolve_layers("all_conv"))
        self.confidence_threshold = confidence_threshold
        self.sampling_ratio = sampling_ratio
        self.clip = clip
        self.images = np.stack([img for img, _ in train]).astype(np.float32)
        targets = [t for _, t in train]

        clean = detect_and_pool(detector, list(self.images), self.layer_ids, confidence_threshold,
                                sampling_ratio=sampling_ratio)
        self.offsets = {lid: (start, n) for lid, start, n in clean[0].layer_offsets}
        self.boxes = [f.detections.boxes for f in clean]
        self.clean = np.concatenate([f.vectors for f in clean])
        self.groups = np.repeat(np.arange(len(clean)), [len(f.vectors) for f in clean])
        self.signs = np.concatenate([
            gradient_sign(detector, self.images[i:i + batch_size], targets[i:i + batch_size])
            for i in range(0, len(self.images), batch_size)
        ]).astype(np.int8)
        self._perturbed: dict[float, np.ndarray] = {}

        self.test = {}
        for name, data in (("id", id_test), ("ood", ood_test)):
            feats = detect_and_pool(detector, [img for img, _ in data], self.layer_ids, confidence_threshold,
                                    sampling_ratio=sampling_ratio)
            dim = self.clean.shape[1]
            self.test[name] = (
                np.concatenate([f.vectors for f in feats]) if feats else np.zeros((0, dim), np.float32),
                np.concatenate([msp_score(f.detections.class_probs) for f in feats]) if feats else np.zeros(0),
            )

    def columns(self, layer_subset: Sequence[str]) -> np.ndarray:
        missing = [l for l in layer_subset if l not in self.offsets]
        if missing:
            raise ValueError(f"layers {missing} are not in the feature bank")
        return np.concatenate([np.arange(s, s + n) for s, n in (self.offsets[l] for l in layer_subset)])

    def perturbed(self, epsilon_255: float) -> np.ndarray:
        eps = float(epsilon_255)
        if eps == 0:
            return self.clean
        if eps not in self._perturbed:
            images = apply_perturbation(self.images, self.signs, eps, self.clip)
            vecs = pool_at_boxes(self.detector, list(images), self.boxes, self.layer_ids,
                                 sampling_ratio=self.sampling_ratio)
            self._perturbed[eps] = np.concatenate(vecs)
        return self._perturbed[eps]

    def training_set(self, epsilon_255: float, layer_subset: Sequence[str]):
        cols = self.columns(layer_subset)
        x = np.concatenate([self.clean[:, cols], self.perturbed(epsilon_255)[:, cols]])
        y = np.r_[np.zeros(len(self.clean)), np.ones(len(self.clean))].astype(np.float32)
        return x, y, np.r_[self.groups, self.groups]

    def msp_result(self) -> EvalResult:
        return score_result(self.test["id"][1], self.test["ood"][1],
                            confidence_threshold=self.confidence_threshold)


def train_and_evaluate(bank: FeatureBank, layer_subset: Sequence[str], epsilon_255: float, seed: int,
                       train_config: TrainConfig | None = None) -> tuple[MonitorMLP, list, EvalResult]:
    """Fit a fresh monitor on one layer subset and score the bank's test detections."""
    layer_subset = list(layer_subset)
    x, y, groups = bank.training_set(epsilon_255, layer_subset)
    config = replace(train_config or TrainConfig(), seed=seed)
    mlp = init_mlp(x.shape[1], seed, config.dropout)
    mlp, history = fit_monitor(mlp, x, y, groups, config)
    mlp.epsilon_255 = float(epsilon_255)
    cols = bank.columns(layer_subset)
    result = score_result(
        score_batch(mlp, bank.test["id"][0][:, cols]), score_batch(mlp, bank.test["ood"][0][:, cols]),
        seed=seed, epsilon_255=float(epsilon_255), layer_subset=tuple(layer_subset),
        confidence_threshold=bank.confidence_threshold,
    )
    if not np.any(x):
        result.flags.append("all-zero-features")
    return mlp, history, result


def run_record(bank: FeatureBank, label: str, layer_subset: Sequence[str], epsilon_255: float,
               config: PipelineConfig) -> AblationRecord:
    results = [train_and_evaluate(bank, layer_subset, epsilon_255, s, config.monitor)[2] for s in config.seeds()]
    flags = sorted({f for r in results for f in r.flags})
    return AblationRecord(label, tuple(layer_subset), float(epsilon_255), results, flags)


# ---------------------------------------------------------------------------
# Harnesses


def ablate_individual_layers(bank: FeatureBank, layer_ids: Sequence[str], config: PipelineConfig,
                             out_dir: str | Path | None = None) -> list[AblationRecord]:
    """One fresh monitor per conv layer, same seeds and epsilon for every layer."""
    records = [run_record(bank, f"layer:{lid}", [lid], config.epsilon_255, config) for lid in layer_ids]
    if out_dir is not None:
        write_results_csv(records, Path(out_dir) / "ablate_layers.csv")
        plot_layer_bars(records, Path(out_dir) / "ablate_layers.png", safe=resolve_layers("safe"))
    return records


def ablate_random_subsets(bank: FeatureBank, k_values: Sequence[int], n_draws: int, exclude_safe: bool,
                          seed: int, config: PipelineConfig, safe_layers: Sequence[str] | None = None,
                          out_dir: str | Path | None = None) -> list[AblationRecord]:
    """Random layer subsets of each size k, plus the SAFE-layer reference run (first record)."""
    safe_layers = list(safe_layers or resolve_layers("safe"))
    pool = [l for l in bank.layer_ids if not (exclude_safe and l in safe_layers)]
    for k in k_values:
        if not 1 <= k <= len(pool):
            raise ValueError(f"k={k} outside the eligible pool of {len(pool)} layers")
    records = [run_record(bank, "safe-reference", safe_layers, config.epsilon_255, config)]
    run_index = 0
    for k in k_values:
        draws = n_draws
        if k == len(pool):
            draws = 1
            log.info("k=%d equals the pool size; a single subset exists", k)
        for d in range(draws):
            rng = np.random.default_rng(derive_seed(seed, run_index))
            run_index += 1
            subset = [pool[i] for i in sorted(rng.choice(len(pool), size=k, replace=False))]
            rec = run_record(bank, f"k={k}:draw={d}", subset, config.epsilon_255, config)
            if draws < n_draws:
                rec.flags.append("single-subset")
            records.append(rec)
    if out_dir is not None:
        write_results_csv(records, Path(out_dir) / "ablate_subsets.csv")
    return records


def subset_summary(records: Sequence[AblationRecord]) -> dict[int, tuple[float, float]]:
    """k -> (mean, std) AUROC over draws."""
    by_k: dict[int, list[float]] = {}
    for r in records:
        if r.label.startswith("k="):
            by_k.setdefault(int(r.label[2:].split(":")[0]), []).append(r.mean_auroc)
    return {k: (float(np.mean(v)), float(np.std(v))) for k, v in by_k.items()}


def sweep_epsilon(bank: FeatureBank, epsilon_values: Sequence[float], config: PipelineConfig,
                  layer_subset: Sequence[str] | None = None,
                  out_dir: str | Path | None = None) -> list[AblationRecord]:
    """Train and evaluate one monitor per epsilon and seed on a shared detector."""
    eps = [float(e) for e in epsilon_values]
    if any(e < 0 for e in eps) or len(set(eps)) != len(eps):
        raise ValueError("epsilon values must be non-negative and distinct")
    layer_subset = list(layer_subset or resolve_layers(config.layers))
    records = []
    for e in eps:
        rec = run_record(bank, f"eps={e:g}", layer_subset, e, config)
        if e == 0:
            rec.flags.append("epsilon-zero-chance-level")
        records.append(rec)
    if out_dir is not None:
        write_results_csv(records, Path(out_dir) / "sweep_epsilon.csv")
        plot_epsilon_curves(records, Path(out_dir))
    return records


# ---------------------------------------------------------------------------
# Output


def write_results_csv(records: Sequence[AblationRecord], path: str | Path,
                      extra: Sequence[tuple[str, EvalResult]] = ()) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [(rec.label, r) for rec in records for r in rec.results] + list(extra)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_COLUMNS)
        for run_id, r in rows:
            eps = "" if r.epsilon_255 is None else repr(float(r.epsilon_255))
            w.writerow([run_id, "" if r.seed is None else r.seed, eps, "+".join(r.layer_subset),
                        r.n_id, r.n_ood, repr(r.auroc), repr(r.fpr95)])
    return path


def read_results_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def plot_epsilon_curves(records: Sequence[AblationRecord], out_dir: Path) -> list[Path]:
    plt = _pyplot()
    eps = [r.epsilon_255 for r in records]
    paths = []
    for metric in ("auroc", "fpr95"):
        vals = np.array([[getattr(x, metric) for x in r.results] for r in records])
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        ax.errorbar(eps, vals.mean(1), yerr=vals.std(1), marker="o", capsize=3)
        ax.set_xlabel("epsilon (0-255 scale)")
        ax.set_ylabel(metric.upper())
        ax.grid(alpha=0.3)
        fig.tight_layout()
        p = out_dir / f"sweep_epsilon_{metric}.png"
        fig.savefig(p, dpi=120)
        plt.close(fig)
        paths.append(p)
    return paths


def plot_layer_bars(records: Sequence[AblationRecord], path: Path, safe: Sequence[str] = ()) -> Path:
    plt = _pyplot()
    names = [r.layer_subset[0] for r in records]
    fig, ax = plt.subplots(figsize=(max(5, 0.35 * len(names)), 3.4))
    colors = ["tab:red" if n in safe else "tab:gray" for n in names]
    ax.bar(range(len(names)), [r.mean_auroc for r in records], yerr=[r.std_auroc for r in records], color=colors)
    ax.set_xticks(range(len(names)), names, rotation=70, fontsize=7)
    ax.set_ylabel("AUROC")
    ax.axhline(0.5, color="k", lw=0.6, ls=":")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


# ---------------------------------------------------------------------------
# The end-to-end experiment


@dataclass
class ExperimentSummary:
    safe: AblationRecord
    msp: EvalResult
    detector_recall: float

    @property
    def passes(self) -> dict[str, bool]:
        return {
            "auroc>=0.80": self.safe.mean_auroc >= 0.80,
            "auroc-margin>=0.05": self.safe.mean_auroc - self.msp.auroc >= 0.05,
            "fpr95<msp": self.safe.mean_fpr95 < self.msp.fpr95,
        }


def run_experiment(config: PipelineConfig | None = None, out_dir: str | Path | None = None,
                   progress: Callable[[str], None] | None = None) -> tuple[ExperimentSummary, Testbed, FeatureBank]:
    """Testbed, SAFE monitors over the configured seeds and the MSP baseline."""
    config = config or PipelineConfig()
    say = progress or log.info
    bed = build_testbed(config)
    say(f"detector trained, validation recall {bed.history[-1]['val_recall']:.3f}")
    bank = FeatureBank(bed.detector, bed.train, bed.id_test, bed.ood_test,
                       confidence_threshold=config.confidence_threshold,
                       sampling_ratio=config.sampling_ratio, clip=config.clip)
    layers = resolve_layers(config.layers)
    safe = run_record(bank, "safe", layers, config.epsilon_255, config)
    msp = bank.msp_result()
    summary = ExperimentSummary(safe, msp, bed.history[-1]["val_recall"])
    if out_dir is not None:
        write_results_csv([safe], Path(out_dir) / "results.csv", extra=[("msp", msp)])
    return summary, bed, bank
