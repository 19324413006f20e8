import copy
import csv

import numpy as np
import pytest
import yaml

from maskfed.cli import (
    EXIT_ARTIFACT,
    EXIT_CONFIG,
    EXIT_NUMERIC,
    EXIT_OK,
    load_model,
    main,
    save_model,
)
from maskfed.config import ExperimentConfig
from maskfed.core import ConfigError

BASE_CONFIG = {
    "objective": {"kind": "quadratic", "ridge": 0.0},
    "data": {"clients": 2, "samples": 20, "dim": 4, "heterogeneity": 0.5, "seed": 7},
    "plan": {"mode": "random", "p": 0.6},
    "trainer": {
        "local_steps": 2,
        "rounds": 8,
        "eta": 0.05,
        "radius": 10.0,
        "seed": 11,
        "record_every": 4,
        "constants_trials": 16,
    },
}


def write_config(tmp_path, doc, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(doc))
    return path


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_train_writes_artifacts(tmp_path):
    cfg = write_config(tmp_path, BASE_CONFIG)
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    for name in ("metrics.csv", "model.bin", "constants.txt"):
        assert (out / name).exists()
    rows = read_csv(out / "metrics.csv")
    assert rows[0] == [
        "run_id", "seed", "round", "F_value", "Fmask_value",
        "grad_norm_sq_F", "grad_norm_sq_Fmask", "dist_to_wstar_mask",
    ]
    assert [r[2] for r in rows[1:]] == ["0", "4", "8"]


def test_train_deterministic_bytes(tmp_path):
    cfg = write_config(tmp_path, BASE_CONFIG)
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert main(["train", "--config", str(cfg), "--out", str(out1)]) == EXIT_OK
    assert main(["train", "--config", str(cfg), "--out", str(out2)]) == EXIT_OK
    for name in ("metrics.csv", "model.bin", "constants.txt", "datasets.bin"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()


def test_csv_roundtrips_17_digits(tmp_path):
    cfg = write_config(tmp_path, BASE_CONFIG)
    out = tmp_path / "run"
    main(["train", "--config", str(cfg), "--out", str(out)])
    rows = read_csv(out / "metrics.csv")
    for row in rows[1:]:
        for cell in row[3:]:
            assert format(float(cell), ".17g") == cell


def test_zero_probability_rejected_with_field(tmp_path, capsys):
    doc = copy.deepcopy(BASE_CONFIG)
    doc["plan"]["p"] = [0.5, 0.0]
    cfg = write_config(tmp_path, doc)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    assert "plan.p" in capsys.readouterr().err


def test_unknown_key_rejected_with_path(tmp_path, capsys):
    doc = copy.deepcopy(BASE_CONFIG)
    doc["trainer"]["learning_rate"] = 0.1
    cfg = write_config(tmp_path, doc)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    assert "trainer.learning_rate" in capsys.readouterr().err


def test_numeric_failure_exit_code(tmp_path):
    doc = copy.deepcopy(BASE_CONFIG)
    doc["trainer"]["eta"] = 1e150
    doc["trainer"]["radius"] = 1e300
    cfg = write_config(tmp_path, doc)
    with pytest.warns(RuntimeWarning):
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "x")]) == EXIT_NUMERIC


def test_seed_override_changes_run(tmp_path):
    cfg = write_config(tmp_path, BASE_CONFIG)
    out1, out2 = tmp_path / "a", tmp_path / "b"
    main(["train", "--config", str(cfg), "--out", str(out1)])
    main(["train", "--config", str(cfg), "--out", str(out2), "--seed", "999"])
    assert (out1 / "metrics.csv").read_bytes() != (out2 / "metrics.csv").read_bytes()


# --- sweep ---------------------------------------------------------------------

def sweep_doc():
    doc = copy.deepcopy(BASE_CONFIG)
    doc["sweep"] = {"parameter": "plan.p", "values": [1.0, 0.8, 0.6, 0.4], "seeds": 5}
    return doc


def test_sweep_produces_cells_and_summary(tmp_path):
    cfg = write_config(tmp_path, sweep_doc())
    out = tmp_path / "sweep"
    assert main(["sweep", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    cells = sorted(out.glob("cell_*.csv"))
    assert len(cells) == 4
    for cell in cells:
        rows = read_csv(cell)
        run_ids = {r[0] for r in rows[1:]}
        assert len(run_ids) == 5  # one run per seed
    summary = read_csv(out / "summary.csv")
    assert summary[0][:4] == ["cell_index", "parameter", "value", "seeds"]
    assert len(summary) == 5


def test_sweep_parallel_workers_match_sequential(tmp_path):
    cfg = write_config(tmp_path, sweep_doc())
    seq, par = tmp_path / "seq", tmp_path / "par"
    assert main(["sweep", "--config", str(cfg), "--out", str(seq)]) == EXIT_OK
    assert main(["sweep", "--config", str(cfg), "--out", str(par), "--workers", "2"]) == EXIT_OK
    for f in sorted(seq.iterdir()):
        assert f.read_bytes() == (par / f.name).read_bytes()


def test_sweep_requires_block_and_values(tmp_path, capsys):
    cfg = write_config(tmp_path, BASE_CONFIG)
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    doc = sweep_doc()
    doc["sweep"]["values"] = []
    cfg2 = write_config(tmp_path, doc, "cfg2.yaml")
    assert main(["sweep", "--config", str(cfg2), "--out", str(tmp_path / "y")]) == EXIT_CONFIG
    assert "sweep.values" in capsys.readouterr().err


# --- stability -------------------------------------------------------------------

def stability_doc():
    doc = copy.deepcopy(BASE_CONFIG)
    doc["plan"] = {"mode": "random", "p": 1.0}
    doc["stability"] = {
        "n_values": [8, 12],
        "seeds": 2,
        "rounds": 6,
        "test_samples": 16,
        "p_values": [1.0, 0.5],
    }
    return doc


def test_stability_row_counts_and_slope(tmp_path):
    cfg = write_config(tmp_path, stability_doc())
    out = tmp_path / "stab"
    assert main(["stability", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    rows = read_csv(out / "stability_seeds.csv")
    assert rows[0] == ["seed", "n", "N", "p", "divergence", "gap"]
    assert len(rows) - 1 == 2 * 2 * 2  # p values x n values x seeds
    summary = read_csv(out / "stability_summary.csv")
    assert summary[0] == ["p", "n", "mean_divergence", "mean_gap", "slope"]
    for row in summary[1:]:
        assert np.isfinite(float(row[4]))


def test_stability_identity_debug_flag(tmp_path):
    cfg = write_config(tmp_path, stability_doc())
    out = tmp_path / "stab0"
    assert main([
        "stability", "--config", str(cfg), "--out", str(out),
        "--debug-identity-perturbation",
    ]) == EXIT_OK
    rows = read_csv(out / "stability_seeds.csv")
    assert all(float(r[4]) == 0.0 for r in rows[1:])


def test_stability_requires_block(tmp_path):
    cfg = write_config(tmp_path, BASE_CONFIG)
    assert main(["stability", "--config", str(cfg), "--out", str(tmp_path / "x")]) == EXIT_CONFIG


# --- analyze --------------------------------------------------------------------

def test_analyze_after_train(tmp_path, capsys):
    cfg = write_config(tmp_path, BASE_CONFIG)
    out = tmp_path / "run"
    main(["train", "--config", str(cfg), "--out", str(out)])
    assert main(["analyze", str(out)]) == EXIT_OK
    report = (out / "analysis.txt").read_text()
    assert "verdict = satisfied" in report
    kv = dict(
        line.split(" = ") for line in report.strip().splitlines()
    )
    assert float(kv["margin"]) >= 0
    assert float(kv["stationarity_bound"]) >= float(kv["grad_norm_sq_F"])


def test_analyze_full_mask_bound_is_twice_eps(tmp_path):
    doc = copy.deepcopy(BASE_CONFIG)
    doc["plan"] = {"mode": "full"}
    cfg = write_config(tmp_path, doc)
    out = tmp_path / "run"
    main(["train", "--config", str(cfg), "--out", str(out)])
    main(["analyze", str(out)])
    kv = dict(
        line.split(" = ") for line in (out / "analysis.txt").read_text().strip().splitlines()
    )
    assert float(kv["stationarity_bound"]) == pytest.approx(2 * float(kv["grad_norm_sq_Fmask"]))


def test_analyze_missing_artifact(tmp_path, capsys):
    assert main(["analyze", str(tmp_path / "nowhere")]) == EXIT_ARTIFACT
    assert "missing" in capsys.readouterr().err


def test_analyze_corrupted_model(tmp_path, capsys):
    cfg = write_config(tmp_path, BASE_CONFIG)
    out = tmp_path / "run"
    main(["train", "--config", str(cfg), "--out", str(out)])
    raw = bytearray((out / "model.bin").read_bytes())
    raw[10] ^= 0xFF
    (out / "model.bin").write_bytes(bytes(raw))
    assert main(["analyze", str(out)]) == EXIT_ARTIFACT
    assert "integrity" in capsys.readouterr().err


def test_model_file_roundtrip(tmp_path):
    w = np.array([1.5, -2.25, 0.0, 3e-17])
    save_model(tmp_path / "m.bin", w)
    assert np.array_equal(load_model(tmp_path / "m.bin"), w)


# --- config schema --------------------------------------------------------------

def test_config_rejects_rolling_with_p():
    doc = copy.deepcopy(BASE_CONFIG)
    doc["plan"] = {"mode": "rolling", "p": 0.5, "s": 2}
    with pytest.raises(ConfigError, match="plan.p"):
        ExperimentConfig.from_dict(doc)


def test_config_rejects_oversized_submodel():
    doc = copy.deepcopy(BASE_CONFIG)
    doc["plan"] = {"mode": "rolling", "s": 9}
    with pytest.raises(ConfigError, match="plan.s"):
        ExperimentConfig.from_dict(doc)


def test_config_epochs_guard():
    doc = copy.deepcopy(BASE_CONFIG)
    doc["trainer"]["epochs"] = 3
    with pytest.raises(ConfigError, match="trainer.epochs"):
        ExperimentConfig.from_dict(doc)


def test_config_override_revalidates():
    cfg = ExperimentConfig.from_dict(BASE_CONFIG)
    with pytest.raises(ConfigError):
        cfg.with_override("plan.p", -0.5)
    cfg2 = cfg.with_override("plan.p", 0.3)
    assert cfg2.raw["plan"]["p"] == [0.3, 0.3]
