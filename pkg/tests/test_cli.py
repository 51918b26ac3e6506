from __future__ import annotations

import json

import pytest

from temprec.cli import main


@pytest.fixture
def config_file(small_config, tmp_path):
    path = tmp_path / "exp.toml"
    small_config.dump(path)
    return path


def test_synth_then_ingest(tmp_path, capsys):
    data = tmp_path / "data"
    assert main(["-q", "synth", "--out", str(data), "--n-users", "12", "--n-items", "20", "--events-max", "15", "--seed", "3"]) == 0
    assert (data / "interactions.csv").exists() and (data / "ground_truth.json").exists()
    capsys.readouterr()
    assert main(["-q", "ingest", "--data", str(data), "--out", str(tmp_path / "split")]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["users"] == 12
    assert (tmp_path / "split" / "split.json").exists()


def test_profile_and_encode(config_file, tmp_path, capsys):
    out = tmp_path / "prof"
    assert main(["-q", "profile", "--config", str(config_file), "--out", str(out), "--horizons", "short"]) == 0
    lines = (out / "profiles.jsonl").read_text().splitlines()
    assert len(lines) == 40 and json.loads(lines[0])["horizon"] == "short"
    capsys.readouterr()
    assert main(["-q", "encode", "--config", str(config_file), "--out", str(out)]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["items"] == [30, 32]


def test_train_eval_explain(config_file, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["-q", "train", "--config", str(config_file), "--out", str(out)]) == 0
    for name in ("config.snapshot", "checkpoint.bin", "train_report.json", "metrics.json"):
        assert (out / name).exists()
    before = (out / "metrics.json").read_bytes()
    assert main(["-q", "eval", "--config", str(config_file), "--out", str(out), "--segment", "validation"]) == 0
    assert (out / "metrics-validation.json").exists()
    assert (out / "metrics.json").read_bytes() == before
    capsys.readouterr()
    assert main(["-q", "explain", "--config", str(config_file), "--out", str(out), "--user", "u0000"]) == 0
    rec = json.loads((out / "explanations" / "u0000.json").read_text())
    assert rec["alpha_short"] + rec["alpha_long"] == pytest.approx(1.0, abs=1e-15)
    assert "recent tastes" in capsys.readouterr().out


def test_explain_rejects_single_profile_model(config_file, tmp_path, capsys):
    out = tmp_path / "run"
    main(["-q", "train", "--config", str(config_file), "--out", str(out), "--variant", "lt_only"])
    assert main(["-q", "explain", "--config", str(config_file), "--out", str(out), "--user", "u0000"]) == 2
    assert "has no attention" in capsys.readouterr().err


def test_matrix_and_report(config_file, tmp_path, capsys):
    out = tmp_path / "m"
    assert main(["-q", "matrix", "--config", str(config_file), "--out", str(out), "--variants", "proposed,centric,st_only"]) == 0
    assert "relative gain vs centric" in capsys.readouterr().out
    for name in ("matrix.json", "report.txt", "report.csv", "gains.csv", "gains.png"):
        assert (out / name).exists()
    assert main(["-q", "report", str(out), "--no-plot", "--out", str(tmp_path / "r")]) == 0
    assert (tmp_path / "r" / "report.csv").exists() and not (tmp_path / "r" / "gains.png").exists()


def test_global_flags_work_before_the_command(config_file, tmp_path):
    out = tmp_path / "pop"
    assert main(["-q", "--config", str(config_file), "--out", str(out), "--seed", "2", "train", "--variant", "popularity"]) == 0
    assert "seed = 2" in (out / "config.snapshot").read_text()


def test_errors_exit_with_status_two(tmp_path, capsys):
    assert main(["-q", "report", str(tmp_path / "nothing")]) == 2
    assert "missing artifacts" in capsys.readouterr().err
    bad = tmp_path / "bad.toml"
    bad.write_text('variant = "bpr"\n')
    assert main(["-q", "train", "--config", str(bad)]) == 2
    assert main(["-q", "train", "--out", str(tmp_path / "x")]) == 2
    assert "no data" in capsys.readouterr().err


def test_invalid_synth_config_is_reported(tmp_path, capsys):
    assert main(["-q", "synth", "--out", str(tmp_path), "--n-items", "20"]) == 2
    assert "events_max" in capsys.readouterr().err


def test_unknown_variant_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["train", "--variant", "bpr"])
    assert exc.value.code == 2
