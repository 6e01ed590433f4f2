"""Command-line entry point: ``safe-ood <subcommand> [flags]``.

Exit status: 0 success, 2 configuration or flag error, 3 runtime failure
(the message names the log file). Every artifact-producing run writes
``run.json`` into ``--out`` before doing any work and marks it complete at
the end.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import subprocess
import sys
import time
import traceback
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
SPLITS = ("id_train", "id_val", "id_test", "ood_test")

log = logging.getLogger("safe_ood")


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# Configuration


def default_config() -> dict:
    from .experiments import PipelineConfig
    cfg = dataclasses.asdict(PipelineConfig())
    cfg["layers"] = "safe"
    cfg.update({"k_values": [3], "n_draws": 5, "exclude_safe": True,
                "epsilons": [0, 1, 2, 4, 8, 16], "render_threshold": 0.5, "n_render": 4})
    return cfg


def _merge(base: dict, override: dict, where: str) -> dict:
    out = dict(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"{where}: unknown config key {key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}: {key!r} must be an object")
            out[key] = _merge(base[key], value, f"{where}.{key}")
        else:
            out[key] = value
    return out


def _parse_layers(text: str):
    if text in ("safe", "all_conv"):
        return text
    ids = [t.strip() for t in text.split(",") if t.strip()]
    if not ids:
        raise ConfigError("--layers: empty layer list")
    return ids


def resolve_config(args) -> dict:
    """Defaults < config file < flags."""
    cfg = default_config()
    if args.config:
        try:
            with open(args.config) as f:
                cfg = _merge(cfg, json.load(f), str(args.config))
        except FileNotFoundError:
            raise ConfigError(f"--config: file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"--config: invalid JSON: {exc}") from None
    if args.seed is not None:
        key = {"gen-data": "data_seed", "train-detector": "detector_seed"}.get(args.command, "base_seed")
        cfg[key] = args.seed
    if args.epsilon is not None:
        if args.epsilon < 0:
            raise ConfigError("--epsilon must be non-negative")
        cfg["epsilon_255"] = args.epsilon
    if args.layers is not None:
        cfg["layers"] = _parse_layers(args.layers)
    if args.confidence_threshold is not None:
        if not 0 <= args.confidence_threshold <= 1:
            raise ConfigError("--confidence-threshold must lie in [0, 1]")
        cfg["confidence_threshold"] = args.confidence_threshold
    for flag, key in (("threshold", "render_threshold"), ("k", "k_values"), ("draws", "n_draws"),
                      ("epsilons", "epsilons"), ("n_images", "n_render")):
        value = getattr(args, flag, None)
        if value is not None:
            cfg[key] = value
    return cfg


def pipeline_config(cfg: dict):
    from .experiments import PipelineConfig
    from .monitor import TrainConfig
    fields = {f.name for f in dataclasses.fields(PipelineConfig)}
    kwargs = {k: v for k, v in cfg.items() if k in fields}
    kwargs["monitor"] = TrainConfig(**cfg["monitor"])
    if isinstance(kwargs["layers"], list):
        kwargs["layers"] = tuple(kwargs["layers"])
    try:
        return PipelineConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def version() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=10)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    from importlib.metadata import PackageNotFoundError, version as pkg_version
    try:
        return pkg_version("safe-ood")
    except PackageNotFoundError:
        return "unknown"


# ---------------------------------------------------------------------------
# Inputs


def _require_path(value, flag: str) -> Path:
    if value is None:
        raise ConfigError(f"{flag} is required")
    path = Path(value)
    if not path.exists():
        raise ConfigError(f"{flag}: path does not exist: {path}")
    return path


def _split(data_root: Path, name: str, flag: str = "--data"):
    from .synth import load_coco_style
    ann = data_root / name / "annotations.json"
    if not ann.exists():
        raise ConfigError(f"{flag}: missing split {name!r} (expected {ann})")
    return load_coco_style(ann).materialize()


def _split_or_root(path: Path):
    from .synth import load_coco_style
    ann = path / "annotations.json" if path.is_dir() else path
    if not ann.exists():
        raise ConfigError(f"--data: no annotations.json at {path}")
    return load_coco_style(ann)


def _detector(args):
    from .detector import load_detector
    return load_detector(_require_path(args.detector, "--detector"))


def _monitor(args):
    from .monitor import load_monitor
    return load_monitor(_require_path(args.monitor, "--monitor"))


def _bank(args, cfg):
    from .experiments import FeatureBank
    root = _require_path(args.data, "--data")
    det = _detector(args)
    train, id_test, ood_test = (_split(root, s) for s in ("id_train", "id_test", "ood_test"))
    return FeatureBank(det, train, id_test, ood_test, confidence_threshold=cfg["confidence_threshold"],
                       sampling_ratio=cfg["sampling_ratio"], clip=cfg["clip"])


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gen_data(args, cfg, out: Path) -> dict:
    from .synth import generate_split
    sizes = {"id_train": cfg["n_train"], "id_val": cfg["n_val"], "id_test": cfg["n_id_test"],
             "ood_test": cfg["n_ood_test"]}
    return {kind: str(generate_split(kind, n, cfg["data_seed"], out / kind)) for kind, n in sizes.items()}


def cmd_train_detector(args, cfg, out: Path) -> dict:
    from .detector import TrainingFailure, save_detector, train_detector, write_training_log
    root = _require_path(args.data, "--data")
    train, val = _split(root, "id_train"), _split(root, "id_val")
    try:
        det, history = train_detector(train, epochs=cfg["detector_epochs"], seed=cfg["detector_seed"],
                                      val_dataset=val, confidence_threshold=cfg["confidence_threshold"])
    except TrainingFailure as exc:
        write_training_log(exc.history, out / "training_log.csv")
        raise
    save_detector(det, out / "detector.safedet")
    write_training_log(history, out / "training_log.csv")
    return {"val_recall": history[-1]["val_recall"]}


def cmd_train_monitor(args, cfg, out: Path) -> dict:
    from .experiments import resolve_layers
    from .monitor import TrainConfig, init_mlp, save_monitor, train_monitor, write_loss_history, epoch_losses
    from .surrogate import (CACHE_ENV, PairStats, PerturbConfig, VectorCache, generate_training_pairs,
                            layer_subset_hash)
    root = _require_path(args.data, "--data")
    det = _detector(args)
    train = _split(root, "id_train")
    layers = resolve_layers(cfg["layers"], [n for n, _ in det.named_modules()])
    stats = PairStats()
    cache = VectorCache() if os.environ.get(CACHE_ENV) else None
    stream = list(generate_training_pairs(train, det, PerturbConfig(cfg["epsilon_255"], clip=cfg["clip"]),
                                          layers, cfg["confidence_threshold"], cache=cache, stats=stats))
    train_cfg = TrainConfig(**{**cfg["monitor"], "seed": cfg["base_seed"]})
    dim = len(stream[0].vector.values) if stream else 0
    if dim == 0:
        raise RuntimeError("no training vectors: the detector produced no boxes on the training split")
    mlp = init_mlp(dim, cfg["base_seed"], train_cfg.dropout)
    mlp, history = train_monitor(mlp, stream, train_cfg)
    mlp.epsilon_255 = float(cfg["epsilon_255"])
    mlp.layer_hash = layer_subset_hash(layers)
    save_monitor(mlp, out / "monitor.safemlp")
    write_loss_history(history, out / "loss_history.csv")
    return {"layers": layers, "pairs": stats.pairs, "images_without_boxes": stats.images_without_boxes,
            "epoch_losses": epoch_losses(history), "deployable": mlp.deployable}


def _score_rows(det, mlp, dataset, layers, cfg):
    from .features import detect_and_pool
    from .metrics import msp_score
    from .monitor import score_batch
    images = [img for img, _ in dataset]
    feats = detect_and_pool(det, images, layers, cfg["confidence_threshold"], sampling_ratio=cfg["sampling_ratio"])
    for (_, target), f in zip(dataset, feats):
        if not len(f.vectors):
            continue
        s = score_batch(mlp, f.vectors)
        m = msp_score(f.detections.class_probs)
        for b in range(len(s)):
            yield target.get("image_id"), b, f.detections.boxes[b], int(f.detections.labels[b]), \
                float(f.detections.scores[b]), float(s[b]), float(m[b])


def _monitor_layers(mlp, det, cfg):
    from .experiments import resolve_layers
    from .surrogate import layer_subset_hash
    layers = resolve_layers(cfg["layers"], [n for n, _ in det.named_modules()])
    if mlp.layer_hash and mlp.layer_hash != layer_subset_hash(layers):
        raise ConfigError("--layers does not match the layer subset the monitor was trained on")
    return layers


def cmd_score(args, cfg, out: Path) -> dict:
    import csv
    det, mlp = _detector(args), _monitor(args)
    layers = _monitor_layers(mlp, det, cfg)
    dataset = _split_or_root(_require_path(args.data, "--data")).materialize()
    n = 0
    with open(out / "scores.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["image_id", "box_index", "x1", "y1", "x2", "y2", "class_id", "confidence", "ood_score", "msp"])
        for image_id, b, box, label, conf, s, m in _score_rows(det, mlp, dataset, layers, cfg):
            w.writerow([image_id, b, *(f"{v:.3f}" for v in box), label, repr(conf), repr(s), repr(m)])
            n += 1
    return {"detections": n}


def cmd_evaluate(args, cfg, out: Path) -> dict:
    from .experiments import AblationRecord, evaluate_pipeline, score_result, write_results_csv
    from .metrics import msp_score
    from .features import detect_and_pool
    det, mlp = _detector(args), _monitor(args)
    layers = _monitor_layers(mlp, det, cfg)
    root = _require_path(args.data, "--data")
    id_test, ood_test = _split(root, "id_test"), _split(root, "ood_test")
    result = evaluate_pipeline(det, mlp, id_test, ood_test, pipeline_config(cfg), layers)
    msp = []
    for data in (id_test, ood_test):
        feats = detect_and_pool(det, [img for img, _ in data], [], cfg["confidence_threshold"])
        msp.append(np.concatenate([msp_score(f.detections.class_probs) for f in feats]))
    baseline = score_result(*msp, confidence_threshold=cfg["confidence_threshold"])
    record = AblationRecord("safe", tuple(layers), float(mlp.epsilon_255), [result])
    write_results_csv([record], out / "results.csv", extra=[("msp", baseline)])
    return {"safe": {"auroc": result.auroc, "fpr95": result.fpr95, "n_id": result.n_id, "n_ood": result.n_ood},
            "msp": {"auroc": baseline.auroc, "fpr95": baseline.fpr95}}


def _record_summary(records) -> list[dict]:
    return [{"label": r.label, "layers": list(r.layer_subset), "epsilon_255": r.epsilon_255,
             "mean_auroc": r.mean_auroc, "std_auroc": r.std_auroc, "mean_fpr95": r.mean_fpr95,
             "flags": r.flags} for r in records]


def cmd_ablate_layers(args, cfg, out: Path) -> dict:
    from .experiments import ablate_individual_layers, resolve_layers
    bank = _bank(args, cfg)
    layers = resolve_layers("all_conv") if cfg["layers"] == "safe" else resolve_layers(cfg["layers"])
    records = ablate_individual_layers(bank, layers, pipeline_config(cfg), out)
    return {"records": _record_summary(records)}


def cmd_ablate_subsets(args, cfg, out: Path) -> dict:
    from .experiments import ablate_random_subsets, subset_summary
    bank = _bank(args, cfg)
    records = ablate_random_subsets(bank, cfg["k_values"], cfg["n_draws"], cfg["exclude_safe"], cfg["base_seed"],
                                    pipeline_config(cfg), out_dir=out)
    return {"reference": _record_summary(records[:1])[0],
            "per_k": {str(k): {"mean": m, "std": s} for k, (m, s) in subset_summary(records).items()}}


def cmd_sweep_epsilon(args, cfg, out: Path) -> dict:
    from .experiments import resolve_layers, sweep_epsilon
    bank = _bank(args, cfg)
    records = sweep_epsilon(bank, cfg["epsilons"], pipeline_config(cfg), resolve_layers(cfg["layers"]), out)
    return {"records": _record_summary(records)}


def cmd_diagnose(args, cfg, out: Path) -> dict:
    import csv
    from .backbone import activation_abnormality, sensitivity_probe
    from .experiments import resolve_layers
    from .surrogate import apply_perturbation
    det = _detector(args)
    root = _require_path(args.data, "--data")
    id_test, ood_test = _split(root, "id_test"), _split(root, "ood_test")
    layers = resolve_layers("all_conv")
    rng = np.random.default_rng(cfg["base_seed"])
    images = np.stack([img for img, _ in id_test[:32]])
    noisy = apply_perturbation(images, rng.choice([-1, 1], size=images.shape).astype(np.int8), 8.0)
    sens = sensitivity_probe(det, list(zip(images, noisy)), layers)
    ab = activation_abnormality(det, [i for i, _ in id_test], [i for i, _ in ood_test], layers)
    safe = set(resolve_layers("safe"))
    with open(out / "sensitivity.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["layer_id", "is_safe", "mean_ratio", "std_ratio"])
        w.writerows([(l, l in safe, m, s) for l, m, s in sens.entries])
    with open(out / "abnormality.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["layer_id", "is_safe", "mean_max_id", "mean_max_ood", "ratio"])
        w.writerows([(l, l in safe, a, b, r) for l, a, b, r in ab.entries])
    return {"pairs": sens.n_pairs, "skipped_pairs": sens.n_skipped}


def cmd_render(args, cfg, out: Path) -> dict:
    from PIL import Image, ImageDraw
    det, mlp = _detector(args), _monitor(args)
    layers = _monitor_layers(mlp, det, cfg)
    dataset = _split_or_root(_require_path(args.data, "--data"))
    n = min(int(cfg["n_render"]), len(dataset))
    subset = [dataset[i] for i in range(n)]
    rows = list(_score_rows(det, mlp, subset, layers, cfg))
    threshold = float(cfg["render_threshold"])
    written = []
    for i, (image, target) in enumerate(subset):
        scale = 4
        pil = Image.fromarray(np.round(image * 255).astype(np.uint8)).resize(
            (image.shape[1] * scale, image.shape[0] * scale), Image.NEAREST)
        draw = ImageDraw.Draw(pil)
        for image_id, _, box, _, _, s, _ in rows:
            if image_id != target.get("image_id"):
                continue
            color = (230, 40, 40) if s > threshold else (40, 200, 70)
            draw.rectangle([float(v) * scale for v in box], outline=color, width=2)
            draw.text((float(box[0]) * scale + 2, float(box[1]) * scale + 1), f"{s:.2f}", fill=color)
        path = out / f"render_{i:03d}.png"
        pil.save(path)
        written.append(path.name)
    return {"images": written, "threshold": threshold}


COMMANDS = {
    "gen-data": (cmd_gen_data, "render the synthetic ID/OOD splits"),
    "train-detector": (cmd_train_detector, "train and freeze the toy detector"),
    "train-monitor": (cmd_train_monitor, "build FGSM surrogate pairs and train the monitor MLP"),
    "score": (cmd_score, "per-detection OOD scores to CSV"),
    "evaluate": (cmd_evaluate, "AUROC/FPR95 of the monitor and the MSP baseline"),
    "ablate-layers": (cmd_ablate_layers, "one monitor per conv layer"),
    "ablate-subsets": (cmd_ablate_subsets, "random non-SAFE layer subsets against the SAFE set"),
    "sweep-epsilon": (cmd_sweep_epsilon, "monitor quality as a function of epsilon"),
    "diagnose": (cmd_diagnose, "layer sensitivity and activation abnormality reports"),
    "render": (cmd_render, "draw detections coloured by the ID/OOD decision"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (flags override it)")
    common.add_argument("--seed", type=int)
    common.add_argument("--epsilon", type=float, help="FGSM step on the 0-255 intensity scale")
    common.add_argument("--layers", help="safe, all_conv or a comma-separated list of layer ids")
    common.add_argument("--confidence-threshold", type=float)
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--jobs", type=int, default=1, help="maximum worker threads")
    common.add_argument("--overwrite", action="store_true")
    common.add_argument("--data", help="dataset root (split directories) or a single split")
    common.add_argument("--detector", help="detector checkpoint")
    common.add_argument("--monitor", help="monitor checkpoint")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="safe-ood", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name == "render":
            p.add_argument("--threshold", type=float, help="OOD-score threshold for colouring (default 0.5)")
            p.add_argument("--n-images", type=int)
        if name == "ablate-subsets":
            p.add_argument("--k", type=int, nargs="+")
            p.add_argument("--draws", type=int)
        if name == "sweep-epsilon":
            p.add_argument("--epsilons", type=float, nargs="+")
    return parser


def _prepare_out(out: Path, overwrite: bool) -> None:
    if out.exists() and any(out.iterdir()) and not overwrite:
        raise ConfigError(f"--out: {out} already exists; pass --overwrite to replace its contents")
    out.mkdir(parents=True, exist_ok=True)


def _write_run(out: Path, record: dict) -> None:
    tmp = out / ".run.json.tmp"
    tmp.write_text(json.dumps(record, indent=2, sort_keys=True, default=str))
    os.replace(tmp, out / "run.json")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    out = Path(args.out)
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        cfg = resolve_config(args)
        _prepare_out(out, args.overwrite)
    except ConfigError as exc:
        print(f"safe-ood {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    import torch
    torch.set_num_threads(args.jobs)
    log_path = out / "run.log"
    handler = logging.FileHandler(log_path, mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    record = {"command": args.command, "argv": list(argv if argv is not None else sys.argv[1:]),
              "config": cfg, "version": version(), "status": "incomplete", "started": time.time()}
    _write_run(out, record)
    fn = COMMANDS[args.command][0]
    try:
        record["result"] = fn(args, cfg, out)
        record["status"] = "complete"
        status = EXIT_OK
    except ConfigError as exc:
        record.update(status="failed", error=str(exc))
        print(f"safe-ood {args.command}: error: {exc}", file=sys.stderr)
        status = EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - reported through the exit status
        log.error("%s failed:\n%s", args.command, traceback.format_exc())
        record.update(status="failed", error=f"{type(exc).__name__}: {exc}", log=str(log_path))
        print(f"safe-ood {args.command}: {type(exc).__name__}: {exc} (see {log_path})", file=sys.stderr)
        status = EXIT_RUNTIME
    finally:
        record["finished"] = time.time()
        _write_run(out, record)
        log.removeHandler(handler)
        handler.close()
    return status


if __name__ == "__main__":
    sys.exit(main())
