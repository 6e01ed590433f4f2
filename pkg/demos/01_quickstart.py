"""Train a toy detector, fit a SAFE monitor on FGSM surrogates, and compare it with MSP.

Run from the repository root:  python3 demos/01_quickstart.py [out_dir]
A smaller configuration than the default keeps this to a couple of minutes on one core.
"""
import sys
from pathlib import Path

from safe_ood.experiments import PipelineConfig, run_experiment

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/quickstart")
config = PipelineConfig(n_train=300, n_id_test=100, n_ood_test=100, detector_epochs=25)

# Detector training, feature caching and one monitor per seed all happen here.
summary, bed, bank = run_experiment(config, out, progress=print)

print(f"\ntest detections pooled: {len(bank.test['id'][0])} ID, {len(bank.test['ood'][0])} OOD")
for r in summary.safe.results:
    print(f"  seed {r.seed}: AUROC {r.auroc:.3f}  FPR95 {r.fpr95:.3f}")
print(f"SAFE mean AUROC {summary.safe.mean_auroc:.3f}, MSP AUROC {summary.msp.auroc:.3f}")
print(f"results table: {out / 'results.csv'}")
