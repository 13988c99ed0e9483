import csv
import json

import pytest

from attnsim.cli import load_config, main, ConfigError


def test_simulate_writes_reports(tmp_path, capsys):
    out = tmp_path / "o"
    rc = main(["simulate", "--preset", "gpt2-small", "--token-keep", "0.26", "--pq", "8+4",
               "--threshold", "0.1", "--out", str(out)])
    assert rc == 0
    doc = json.loads((out / "report.json").read_text())
    assert abs(doc["pruning_summary"]["token_keep_avg"] - 0.26) < 0.01
    assert doc["pq_stats"]["rows_total"] > 0
    for name in ("stages.csv", "breakdown.dat", "breakdown.png", "stages.png", "roofline.png"):
        assert (out / name).stat().st_size > 0
    with open(out / "stages.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:4] == ["step", "layer", "head", "query"]
    assert len(rows) == 1 + 32 * 12 * 12


def test_simulate_no_prune_no_pq_breakdown_flat(tmp_path, capsys):
    out = tmp_path / "o"
    assert main(["simulate", "--preset", "bert-base", "--no-prune", "--no-pq", "--no-figures",
                 "--out", str(out)]) == 0
    doc = json.loads((out / "report.json").read_text())
    assert [s["speedup_total"] for s in doc["breakdown"]["steps"]] == [1.0] * 4
    lines = [l for l in (out / "breakdown.dat").read_text().splitlines() if not l.startswith("#")]
    assert len(lines) == 4 and all(len(l.split()) == 6 for l in lines)


def test_missing_preset_names_flag(capsys):
    assert main(["simulate", "--token-keep", "0.5"]) == 2
    assert "--preset" in capsys.readouterr().err


def test_bad_config_is_line_anchored(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\npreset = bert-base\n\nbogus = 1\n")
    assert main(["simulate", "--config", str(cfg)]) == 2
    assert f"{cfg}:4:" in capsys.readouterr().err
    cfg.write_text("preset = bert-base\ntoken_keep_avg = lots\n")
    assert main(["simulate", "--config", str(cfg)]) == 2
    assert f"{cfg}:2:" in capsys.readouterr().err
    cfg.write_text("preset bert-base\n")
    with pytest.raises(ConfigError, match=":1:"):
        load_config(cfg)


def test_config_and_seed_env(tmp_path, monkeypatch, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("preset = bert-base\ntoken_keep_avg = 0.5\nseed = 3\nmsb = 12\nlsb = 0\n")
    monkeypatch.setenv("SPATTEN_SEED", "11")
    out = tmp_path / "o"
    assert main(["simulate", "--config", str(cfg), "--no-figures", "--out", str(out)]) == 0
    doc = json.loads((out / "report.json").read_text())
    assert doc["config"]["seed"] == 11
    assert doc["config"]["token_keep_avg"] == 0.5


def test_sweep_parallelism_plateau(tmp_path, capsys):
    out = tmp_path / "s"
    assert main(["sweep", "--preset", "gpt2-small", "--token-keep", "0.263", "--v-keep", "0.75",
                 "--parallelism", "1,2,4,8,16,32", "--jobs", "2", "--out", str(out)]) == 0
    with open(out / "sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    cycles = [int(r["cycles"]) for r in sorted(rows, key=lambda r: int(r["parallelism"]))]
    assert cycles == sorted(cycles, reverse=True)
    assert cycles[4] / cycles[5] - 1 < 0.05
    assert (out / "sweep.png").exists()


def test_sweep_sram(tmp_path, capsys):
    out = tmp_path / "s"
    assert main(["sweep", "--preset", "bert-base", "--sram-kb", "196,392", "--no-figures", "--out", str(out)]) == 0
    with open(out / "sweep.csv") as fh:
        c = [int(r["cycles"]) for r in csv.DictReader(fh)]
    assert abs(c[0] - c[1]) / c[0] < 0.01


def test_sweep_empty_grid_header_only(tmp_path, capsys):
    out = tmp_path / "s"
    assert main(["sweep", "--preset", "bert-base", "--parallelism", "", "--out", str(out)]) == 0
    lines = (out / "sweep.csv").read_text().splitlines()
    assert len(lines) == 1 and lines[0].startswith("preset,")


def test_verify_subset_and_fault(capsys):
    assert main(["verify", "--only", "1,2"]) == 0
    assert main(["verify", "--only", "1", "--fault", "tie-flip"]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_importance_command(tmp_path, capsys):
    import numpy as np
    from attnsim.workloads import write_trace
    p = np.random.default_rng(0).random((3, 2, 6, 6))
    write_trace(tmp_path / "t.bin", p / p.sum(axis=3, keepdims=True))
    out = tmp_path / "imp.csv"
    assert main(["importance", "--trace", str(tmp_path / "t.bin"), "--token-keep", "0.5", "--out", str(out)]) == 0
    assert out.read_text().startswith("token,score")
