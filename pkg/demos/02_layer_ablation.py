"""Which conv layers carry the OOD signal? One monitor per layer, then random subsets.

Run from the repository root:  python3 demos/02_layer_ablation.py [out_dir]
"""
import sys
from pathlib import Path

from safe_ood.experiments import (PipelineConfig, ablate_individual_layers, ablate_random_subsets,
                                  resolve_layers, run_experiment, subset_summary)

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/layers")
config = PipelineConfig(n_train=300, n_id_test=100, n_ood_test=100, detector_epochs=25)
_, _, bank = run_experiment(config)
safe = resolve_layers("safe")

# Features are cached in the bank, so each record only retrains a small MLP.
records = ablate_individual_layers(bank, resolve_layers("all_conv"), config, out)
for r in sorted(records, key=lambda r: -r.mean_auroc):
    tag = "SAFE" if r.layer_subset[0] in safe else ""
    print(f"{r.label:18s} AUROC {r.mean_auroc:.3f} +/- {r.std_auroc:.3f} {tag}")

subsets = ablate_random_subsets(bank, [3], 5, True, config.base_seed, config, safe, out)
mean, std = subset_summary(subsets)[3]
print(f"\nSAFE set {subsets[0].mean_auroc:.3f} vs random non-SAFE triples {mean:.3f} +/- {std:.3f}")
print(f"bar chart: {out / 'ablate_layers.png'}")
