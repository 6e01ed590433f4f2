"""How strong should the surrogate perturbation be? Sweep epsilon on the 0-255 scale.

At epsilon 0 the "OOD" surrogates equal the clean features, so the monitor has nothing
to learn; the curve shows how quickly the signal appears as epsilon grows.

Run from the repository root:  python3 demos/03_epsilon_sweep.py [out_dir]
"""
import sys
from pathlib import Path

from safe_ood.experiments import PipelineConfig, run_experiment, sweep_epsilon

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/epsilon")
config = PipelineConfig(n_train=300, n_id_test=100, n_ood_test=100, detector_epochs=25)
_, _, bank = run_experiment(config)

for r in sweep_epsilon(bank, [0, 1, 2, 4, 8, 16], config, out_dir=out):
    flags = f" ({', '.join(r.flags)})" if r.flags else ""
    print(f"eps {r.epsilon_255:4g}: AUROC {r.mean_auroc:.3f}  FPR95 {r.mean_fpr95:.3f}{flags}")
print(f"curves: {out}/sweep_epsilon_auroc.png, {out}/sweep_epsilon_fpr95.png")
