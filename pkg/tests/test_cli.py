import csv
import json
import os

import pytest

from flowedit_lab.cli import main, write_artifacts


def run(argv, capsys):
    code = main(argv)
    return code, capsys.readouterr()


def test_edit_smoke_reports_all_metrics(tmp_path, capsys):
    code, out = run(["edit", "--method", "flowedit", "--n-avg", "16", "--seed", "0", "--samples", "200",
                     "--out", str(tmp_path)], capsys)
    assert code == 0
    assert "config hash" in out.out and "numpy" in out.out
    rows = list(csv.DictReader(open(tmp_path / "metrics.csv")))
    assert len(rows) == 1 and rows[0]["method"] == "flowedit"
    for key in ("transport_cost_msd", "pairing_accuracy", "energy_distance_to_target",
                "self_distance_threshold"):
        assert rows[0][key] != ""
    assert float(rows[0]["pairing_accuracy"]) >= 0.95


def test_figure3_twice_is_byte_identical(tmp_path, capsys):
    args = ["figure3", "--seed", "7", "--samples", "150", "--T", "10"]
    for d in ("a", "b"):
        assert run([*args, "--out", str(tmp_path / d)], capsys)[0] == 0
    for name in ("edits.csv", "metrics.csv", "report.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_missing_mixture_exits_2_naming_field(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("target:\n  dim: 2\n  components: []\n")
    code, out = run(["figure3", "--config", str(cfg), "--out", str(tmp_path / "o")], capsys)
    assert code == 2
    assert f"{cfg}:1: missing required field 'source'" in out.err
    assert not (tmp_path / "o").exists()


def test_bad_flag_value_exits_2(tmp_path, capsys):
    code, out = run(["edit", "--method", "warp", "--out", str(tmp_path)], capsys)
    assert code == 2 and "methods" in out.err
    with pytest.raises(SystemExit) as info:
        main(["sweep", "--axis", "bogus"])
    assert info.value.code == 2


def test_sample_and_sweep_artifacts(tmp_path, capsys):
    assert run(["sample", "--seed", "1", "--samples", "20", "--out", str(tmp_path)], capsys)[0] == 0
    lines = (tmp_path / "samples.csv").read_text().splitlines()
    assert lines[0] == "distribution,seed,row,label,x_0,x_1" and len(lines) == 41
    code, out = run(["sweep", "--axis", "c", "--values", "0.8,1.0", "--seed", "0", "--samples", "50",
                     "--T", "10", "--out", str(tmp_path)], capsys)
    assert code == 0
    summary = json.loads((tmp_path / "sweep_summary.json").read_text())
    assert summary["axis"] == "c" and summary["values"] == [0.8, 1.0]


def test_train_writes_loadable_checkpoint(tmp_path, capsys):
    code, _ = run(["train", "--iterations", "200", "--out", str(tmp_path)], capsys)
    assert code == 0
    assert {p.name for p in tmp_path.iterdir()} == {"weights.npz", "loss_curve.csv", "model.json"}
    code, out = run(["edit", "--backend", "learned", "--weights", str(tmp_path / "weights.npz"),
                     "--method", "flowedit", "--seed", "0", "--samples", "30", "--T", "5",
                     "--out", str(tmp_path / "e")], capsys)
    assert code == 0 and (tmp_path / "e" / "metrics.csv").exists()


def test_atomic_write_leaves_nothing_on_failure(tmp_path):
    class Boom:
        def encode(self, _):
            raise RuntimeError("boom")

    with pytest.raises(RuntimeError):
        write_artifacts(tmp_path, {"a.csv": "x\n", "b.csv": Boom()})
    assert os.listdir(tmp_path) == []
    write_artifacts(tmp_path, {"a.csv": "x\n", "b.bin": b"\x00"})
    assert sorted(os.listdir(tmp_path)) == ["a.csv", "b.bin"]
