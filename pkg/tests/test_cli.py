import json

import numpy as np
import pytest

from helpers import norm_profile_model
from nnarx.cli import EXIT_NOT_CERTIFIED, EXIT_OK, EXIT_USAGE, PROBE_COLUMNS, main
from nnarx.config import ExperimentConfig, load_config
from nnarx.exceptions import ConfigError
from nnarx.io import save_model


def write_config(path, **overrides):
    cfg = ExperimentConfig().to_dict()
    cfg["excitation"]["length"] = 200
    cfg["dataset"].update(n_train=3, n_val=1, n_test=1)
    cfg["train"]["max_epochs"] = 4
    for key, value in overrides.items():
        cfg[key].update(value) if isinstance(value, dict) else cfg.__setitem__(key, value)
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "exp.json", seed=11, output_dir=str(root / "run"))
    assert main(["generate", "--config", str(cfg)]) == EXIT_OK
    assert main(["train", "--config", str(cfg), "--dataset", str(root / "run" / "dataset")]) == EXIT_OK
    return root


def test_config_roundtrip(tmp_path):
    cfg = ExperimentConfig(seed=5)
    cfg.with_train(max_epochs=7)
    again = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg
    assert again.train.seed == 5


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"schema_version": 2})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"model": {"depth": 3}})
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")


def test_generate_paper_sized_dataset(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json")
    out = tmp_path / "ds"
    assert main(["generate", "--config", str(cfg), "--out", str(out), "--n-train", "10", "--n-val", "3",
                 "--n-test", "0"]) == EXIT_OK
    assert capsys.readouterr().out.strip() == str(out / "manifest.json")
    assert len(list(out.glob("*.csv"))) == 13
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["counts"] == {"train": 10, "val": 3, "test": 0}
    assert manifest["config"]["seed"] == 0 and manifest["schema_version"] == 1


def test_generate_is_byte_identical(tmp_path):
    cfg = write_config(tmp_path / "c.json")
    for name in ("a", "b"):
        assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / name)]) == EXIT_OK
    for f in (tmp_path / "a").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_generate_zero_trajectories(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", dataset={"n_train": 0, "n_val": 0, "n_test": 0})
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "x")]) == EXIT_USAGE
    assert "zero trajectories" in capsys.readouterr().err


def test_generate_ph_needs_parameter_file(tmp_path):
    cfg = write_config(tmp_path / "c.json", plant={"name": "ph"})
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "x")]) == EXIT_USAGE


def test_train_outputs(pipeline):
    run = pipeline / "run" / "train"
    for name in ("model.json", "history.csv", "certificate.json", "train_summary.json"):
        assert (run / name).exists()
    summary = json.loads((run / "train_summary.json").read_text())
    assert summary["seeds"]["master"] == 11 and summary["seeds"]["train"] == 11
    assert summary["loss_window"]["washout"] == 20
    assert summary["config"]["train"]["max_epochs"] == 4
    cert = json.loads((run / "certificate.json").read_text())
    assert cert["certified"] and cert["nu"] < 0
    model_doc = json.loads((run / "model.json").read_text())
    assert model_doc["metadata"]["config"]["seed"] == 11
    assert (run / "history.csv").read_text().splitlines()[0] == "epoch,loss,val_error,nu,certified"


def test_train_zero_epochs(pipeline, tmp_path):
    out = tmp_path / "t0"
    assert main(["train", "--dataset", str(pipeline / "run" / "dataset"), "--max-epochs", "0",
                 "--out", str(out)]) == EXIT_OK
    assert (out / "model.json").exists()
    assert (out / "history.csv").read_text().splitlines() == ["epoch,loss,val_error,nu,certified"]


def test_train_corrupted_manifest(pipeline, tmp_path):
    bad = tmp_path / "bad"
    bad.mkdir()
    (bad / "manifest.json").write_text('{"kind": "nnarx-dataset", "schema_version": 1}')
    assert main(["train", "--dataset", str(bad), "--out", str(tmp_path / "o")]) == EXIT_USAGE
    assert main(["train", "--dataset", str(tmp_path / "nowhere"), "--out", str(tmp_path / "o")]) == EXIT_USAGE


def test_certify_exit_codes(pipeline, tmp_path, capsys):
    assert main(["certify", str(pipeline / "run" / "train" / "model.json")]) == EXIT_OK
    assert "nu" in capsys.readouterr().out
    save_model(norm_profile_model(1.0, 1.0), tmp_path / "over.json")
    assert main(["certify", str(tmp_path / "over.json"), "--format", "json",
                 "--json", str(tmp_path / "r.json")]) == EXIT_NOT_CERTIFIED
    assert json.loads(capsys.readouterr().out)["verdict"] == "NotCertified"
    assert json.loads((tmp_path / "r.json").read_text())["nu"] == pytest.approx(0.5)
    (tmp_path / "broken.json").write_text('{"kind": "nnarx-model", "schema_version": 1, "layers": 3}')
    assert main(["certify", str(tmp_path / "broken.json")]) == EXIT_USAGE
    assert "error" in capsys.readouterr().err


def test_certify_margin_flag(tmp_path):
    save_model(norm_profile_model(0.453, 0.985), tmp_path / "m.json")
    assert main(["certify", str(tmp_path / "m.json")]) == EXIT_OK
    assert main(["certify", str(tmp_path / "m.json"), "--margin", "0.06"]) == EXIT_NOT_CERTIFIED


def test_evaluate_outputs(pipeline, tmp_path, capsys):
    model = str(pipeline / "run" / "train" / "model.json")
    data = str(pipeline / "run" / "dataset")
    assert main(["evaluate", model, "--dataset", data, "--out", str(tmp_path / "e")]) == EXIT_OK
    assert "pooled FIT" in capsys.readouterr().out
    header = (tmp_path / "e" / "report_test.csv").read_text().splitlines()[0]
    assert header == "trajectory,split,fit_percent,rmse,max_abs_error,diverged,domain,washout,certified,fit_y1"
    summary = json.loads((tmp_path / "e" / "summary_test.json").read_text())
    assert summary["domain"] == "physical" and summary["model_metadata"]["seeds"]["master"] == 11
    assert (tmp_path / "e" / "plot_traj_004.csv").exists()
    assert main(["--threads", "2", "evaluate", model, "--dataset", data, "--split", "train",
                 "--out", str(tmp_path / "e2")]) == EXIT_OK
    assert len((tmp_path / "e2" / "report_train.csv").read_text().splitlines()) == 4


def test_evaluate_empty_split(pipeline, tmp_path):
    out = tmp_path / "ds"
    cfg = write_config(tmp_path / "c.json", dataset={"n_test": 0})
    main(["generate", "--config", str(cfg), "--out", str(out)])
    assert main(["evaluate", str(pipeline / "run" / "train" / "model.json"), "--dataset", str(out),
                 "--out", str(tmp_path / "e")]) == EXIT_USAGE


def test_probe_certified_model(pipeline, tmp_path, capsys):
    out = tmp_path / "probe.csv"
    assert main(["probe", str(pipeline / "run" / "train" / "model.json"), "--out", str(out)]) == EXIT_OK
    line = capsys.readouterr().out.strip()
    ratio = float(line.split("ratio")[1].split()[0])
    assert ratio < 1e-6
    rows = out.read_text().splitlines()
    assert rows[0] == ",".join(PROBE_COLUMNS) and len(rows) == 202
    slack = [float(r.split(",")[5]) for r in rows[1:-1]]
    assert max(abs(s) for s in slack) < 1e-9


def test_probe_identical_states(pipeline, tmp_path, capsys):
    out = tmp_path / "p.csv"
    assert main(["probe", str(pipeline / "run" / "train" / "model.json"), "--state-scale", "0",
                 "--out", str(out)]) == EXIT_OK
    dist = [float(r.split(",")[2]) for r in out.read_text().splitlines()[1:]]
    assert not any(dist)
    assert "identical initial states" in capsys.readouterr().out


def test_probe_explosive_demo(tmp_path, capsys):
    assert main(["probe", "--demo", "explosive", "--out", str(tmp_path / "x.csv")]) == EXIT_OK
    assert "diverged at step" in capsys.readouterr().out


def test_probe_needs_model():
    assert main(["probe"]) == EXIT_USAGE


def test_usage_errors():
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == 2
