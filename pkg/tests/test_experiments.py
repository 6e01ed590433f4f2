import numpy as np
import pytest

from safe_ood.experiments import (CSV_COLUMNS, EvaluationDegenerateError, FeatureBank, PipelineConfig,
                                  ablate_individual_layers, ablate_random_subsets, derive_seed, evaluate_pipeline,
                                  msp_baseline, read_results_csv, resolve_layers, subset_summary, sweep_epsilon)
from safe_ood.features import detect_and_pool
from safe_ood.monitor import TrainConfig

SAFE = ["s1.b1.shortcut", "s2.b1.shortcut", "s3.b1.shortcut"]
FAST = PipelineConfig(n_seeds=2, confidence_threshold=0.3, monitor=TrainConfig(epochs=2))


@pytest.fixture(scope="module")
def bank(small_detector, small_splits):
    return FeatureBank(small_detector, small_splits["id_train"][:60], small_splits["id_test"],
                       small_splits["ood_test"], confidence_threshold=0.3)


def test_resolve_layers():
    assert resolve_layers("safe") == SAFE
    assert len(resolve_layers("all_conv")) == 19
    assert resolve_layers(["s2.b2.conv1", "stem"]) == ["s2.b2.conv1", "stem"]
    with pytest.raises(ValueError, match="bogus"):
        resolve_layers(["bogus"])


def test_derived_seeds_are_stable_and_distinct():
    assert derive_seed(0, 1) == derive_seed(0, 1)
    assert len({derive_seed(0, i) for i in range(100)}) == 100
    assert PipelineConfig(n_seeds=3).seeds() == [derive_seed(0, i) for i in range(3)]


def test_constant_and_oracle_monitors(small_detector, small_splits):
    cfg = PipelineConfig(confidence_threshold=0.3)
    const = evaluate_pipeline(small_detector, lambda v: 0.5, small_splits["id_test"], small_splits["ood_test"], cfg)
    assert const.auroc == 0.5 and const.fpr95 >= 0.95
    # oracle: ID and OOD test images are known, so tag vectors by membership
    ood_vecs = np.concatenate([f.vectors for f in detect_and_pool(
        small_detector, [i for i, _ in small_splits["ood_test"]], SAFE, 0.3)])
    known = {v.tobytes() for v in ood_vecs}
    oracle = evaluate_pipeline(small_detector, lambda v: float(v.tobytes() in known),
                               small_splits["id_test"], small_splits["ood_test"], cfg)
    assert oracle.auroc == 1.0 and oracle.fpr95 == 0.0
    assert const.n_id == oracle.n_id >= 1


def test_degenerate_evaluation(small_detector, small_splits):
    cfg = PipelineConfig(confidence_threshold=1.0)
    with pytest.raises(EvaluationDegenerateError):
        evaluate_pipeline(small_detector, lambda v: 0.5, small_splits["id_test"], small_splits["ood_test"], cfg)


def test_msp_baseline_range(small_detector, small_splits):
    s = msp_baseline(small_detector, small_splits["id_test"][0][0], 0.3)
    assert ((s >= 0) & (s <= 1 - 1 / 3 + 1e-12)).all()


def test_bank_zero_epsilon_features_are_clean(bank):
    x, y, g = bank.training_set(0, SAFE)
    half = len(x) // 2
    np.testing.assert_array_equal(x[:half], x[half:])
    assert y[:half].sum() == 0 and y[half:].all()
    assert not np.array_equal(bank.perturbed(8), bank.clean)


def test_layer_ablation_cardinality_and_determinism(bank, tmp_path):
    layers = resolve_layers("all_conv")
    a = ablate_individual_layers(bank, layers, FAST, tmp_path / "a")
    b = ablate_individual_layers(bank, layers, FAST, tmp_path / "b")
    assert len(a) == 19 and [r.layer_subset for r in a] == [(l,) for l in layers]
    assert (tmp_path / "a" / "ablate_layers.csv").read_bytes() == (tmp_path / "b" / "ablate_layers.csv").read_bytes()
    rows = read_results_csv(tmp_path / "a" / "ablate_layers.csv")
    assert list(rows[0]) == CSV_COLUMNS and len(rows) == 19 * 2
    assert (tmp_path / "a" / "ablate_layers.png").stat().st_size > 0


def test_random_subsets(bank):
    recs = ablate_random_subsets(bank, [2, 16], 3, True, 0, FAST)
    assert recs[0].label == "safe-reference" and recs[0].layer_subset == tuple(SAFE)
    drawn = recs[1:]
    assert all(not set(r.layer_subset) & set(SAFE) for r in drawn)
    assert [len(r.layer_subset) for r in drawn] == [2, 2, 2, 16]
    assert "single-subset" in drawn[-1].flags
    assert set(subset_summary(recs)) == {2, 16}
    with pytest.raises(ValueError):
        ablate_random_subsets(bank, [17], 1, True, 0, FAST)


def test_epsilon_sweep(bank, tmp_path):
    recs = sweep_epsilon(bank, [0, 4], FAST, SAFE, tmp_path)
    assert [r.epsilon_255 for r in recs] == [0.0, 4.0]
    assert "epsilon-zero-chance-level" in recs[0].flags
    for name in ("sweep_epsilon.csv", "sweep_epsilon_auroc.png", "sweep_epsilon_fpr95.png"):
        assert (tmp_path / name).exists()
    with pytest.raises(ValueError):
        sweep_epsilon(bank, [1, 1], FAST)
    with pytest.raises(ValueError):
        sweep_epsilon(bank, [-1], FAST)
