import json

import pytest

from safe_ood.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from safe_ood.experiments import CSV_COLUMNS, read_results_csv

SMALL = {"n_train": 200, "n_val": 40, "n_id_test": 30, "n_ood_test": 30, "detector_epochs": 20,
         "confidence_threshold": 0.4}


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(SMALL))
    data, det, mon = root / "data", root / "det", root / "mon"
    assert main(["gen-data", "--config", str(cfg), "--out", str(data)]) == EXIT_OK
    assert main(["train-detector", "--config", str(cfg), "--data", str(data), "--out", str(det)]) == EXIT_OK
    assert main(["train-monitor", "--config", str(cfg), "--data", str(data), "--detector",
                 str(det / "detector.safedet"), "--out", str(mon)]) == EXIT_OK
    return {"root": root, "cfg": cfg, "data": data, "det": det / "detector.safedet", "mon": mon / "monitor.safemlp"}


def run_json(path):
    return json.loads((path / "run.json").read_text())


def test_quickstart_chain(chain):
    out = chain["root"] / "eval"
    code = main(["evaluate", "--config", str(chain["cfg"]), "--data", str(chain["data"]),
                 "--detector", str(chain["det"]), "--monitor", str(chain["mon"]), "--out", str(out)])
    assert code == EXIT_OK
    rows = read_results_csv(out / "results.csv")
    assert list(rows[0]) == CSV_COLUMNS
    assert [r["run_id"] for r in rows] == ["safe", "msp"]
    rec = run_json(out)
    assert rec["status"] == "complete" and rec["version"]
    assert rec["config"]["confidence_threshold"] == 0.4
    for name in ("id_train", "id_val", "id_test", "ood_test"):
        assert (chain["data"] / name / "annotations.json").exists()


def test_missing_checkpoint_names_flag(chain, capsys):
    code = main(["evaluate", "--data", str(chain["data"]), "--detector", str(chain["root"] / "nope.safedet"),
                 "--monitor", str(chain["mon"]), "--out", str(chain["root"] / "e2")])
    assert code == EXIT_CONFIG
    assert "--detector" in capsys.readouterr().err
    assert run_json(chain["root"] / "e2")["status"] == "failed"


def test_refuses_existing_output(chain, capsys):
    out = chain["root"] / "data"
    assert main(["gen-data", "--out", str(out)]) == EXIT_CONFIG
    assert "--overwrite" in capsys.readouterr().err


def test_render_and_score(chain):
    out = chain["root"] / "render"
    code = main(["render", "--threshold", "0.5", "--n-images", "4", "--data", str(chain["data"] / "ood_test"),
                 "--detector", str(chain["det"]), "--monitor", str(chain["mon"]), "--out", str(out)])
    assert code == EXIT_OK
    assert len(list(out.glob("render_*.png"))) == 4
    out = chain["root"] / "score"
    assert main(["score", "--data", str(chain["data"] / "id_test"), "--detector", str(chain["det"]),
                 "--monitor", str(chain["mon"]), "--out", str(out)]) == EXIT_OK
    assert (out / "scores.csv").read_text().startswith("image_id,box_index")


def test_layer_mismatch_with_monitor(chain):
    code = main(["evaluate", "--layers", "stem", "--data", str(chain["data"]), "--detector", str(chain["det"]),
                 "--monitor", str(chain["mon"]), "--out", str(chain["root"] / "mismatch")])
    assert code == EXIT_CONFIG


def test_runtime_failure_exit_code(chain, capsys):
    out = chain["root"] / "fail"
    cfg = chain["root"] / "fail.json"
    cfg.write_text(json.dumps({**SMALL, "detector_epochs": 1}))
    code = main(["train-detector", "--config", str(cfg), "--data", str(chain["data"]), "--out", str(out)])
    assert code == EXIT_RUNTIME
    err = capsys.readouterr().err
    assert str(out / "run.log") in err
    rec = run_json(out)
    assert rec["status"] == "failed" and rec["log"].endswith("run.log")
    assert (out / "training_log.csv").exists()
    assert "TrainingFailure" in (out / "run.log").read_text()


def test_config_precedence_and_errors(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"n_train": 3, "n_val": 1, "n_id_test": 1, "n_ood_test": 2, "data_seed": 5}))
    assert main(["gen-data", "--config", str(cfg), "--seed", "9", "--out", str(tmp_path / "o")]) == EXIT_OK
    rec = run_json(tmp_path / "o")
    assert rec["config"]["data_seed"] == 9 and rec["config"]["n_train"] == 3
    info = json.loads((tmp_path / "o" / "ood_test" / "annotations.json").read_text())["info"]
    assert info["seed"] == 9 and info["n_images"] == 2
    cfg.write_text(json.dumps({"not_a_key": 1}))
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "p")]) == EXIT_CONFIG
    assert main(["gen-data", "--epsilon", "-1", "--out", str(tmp_path / "q")]) == EXIT_CONFIG
    assert main(["gen-data", "--bogus-flag", "--out", str(tmp_path / "r")]) == EXIT_CONFIG
    assert main(["gen-data", "--jobs", "0", "--out", str(tmp_path / "s")]) == EXIT_CONFIG
