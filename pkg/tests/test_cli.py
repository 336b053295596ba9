import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from tsformer import __version__
from tsformer.cli import main, read_kv_file, resolve_config
from tsformer.data import load_csv, make_windows, minmax_fit
from tsformer.interpret import read_matrix_csv
from tsformer.model import ModelConfig

CONFIG = """# small desk run
d_model = 8
heads = 2
encoder_layers = 1
decoder_layers = 4   # four decoder layers
ffn_dim = 16
max_epochs = 3
patience = 2
seed = 11
"""


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "cfg.txt").write_text(CONFIG)
    assert main(["synth", "--out", str(d / "data.csv"), "--days", "160", "--seed", "2"]) == 0
    return d


def _train(work, name, *extra):
    out = work / name
    code = main(["train", "--data", str(work / "data.csv"), "--config", str(work / "cfg.txt"),
                 "--out", str(out), *extra])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def ckpt(work):
    return _train(work, "m1.ckpt")


class TestConfigFiles:
    def test_parse(self, tmp_path):
        p = tmp_path / "c.txt"
        p.write_text("a = 1 # note\n\n# comment\nb=x, y\n")
        assert read_kv_file(p) == {"a": "1", "b": "x, y"}

    def test_override_wins(self):
        r = resolve_config({"d_model": "16", "dropout": "0.2"}, {"d_model": "8"})
        assert r == {"d_model": 8, "dropout": 0.2}

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="colour"):
            resolve_config({"colour": "red"}, {})


class TestSynth:
    def test_header_and_rows(self, work):
        lines = (work / "data.csv").read_text().splitlines()
        assert lines[0] == "date,demand,idx_1,idx_2,idx_3,temp_max,weather,date_type,month,weekday"
        assert len(lines) == 161

    def test_byte_identical(self, work, tmp_path):
        spec = tmp_path / "spec.txt"
        spec.write_text("days = 120\nseed = 4\nweekly_amp = 0.4\n")
        for name in ("a.csv", "b.csv"):
            assert main(["synth", "--spec", str(spec), "--out", str(tmp_path / name)]) == 0
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        man = json.loads((tmp_path / "a.csv.manifest.json").read_text())
        assert man["seed"] == 4 and man["config"]["weekly_amp"] == 0.4

    def test_hundred_days_window_count(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path / "h.csv"), "--days", "100"]) == 0
        ds = load_csv(tmp_path / "h.csv")
        for h in (1, 7):
            cfg = ModelConfig(feature_dim=ds.schema.feature_dim).with_horizon(h).replace(encoder_input_length=max(7, h + 4))
            n = len(make_windows(ds, cfg, minmax_fit(ds)))
            assert n == 100 - cfg.encoder_input_length - h + 1
        assert len(make_windows(ds, ModelConfig(feature_dim=9), minmax_fit(ds))) == 100 - 7 - 1 + 1

    def test_bad_spec(self, tmp_path, capsys):
        spec = tmp_path / "bad.txt"
        spec.write_text("days = -3\n")
        assert main(["synth", "--spec", str(spec), "--out", str(tmp_path / "x.csv")]) == 2
        err = capsys.readouterr().err.strip().splitlines()
        assert len(err) == 1 and err[0].startswith("tsformer: error[validation]: ")


class TestTrain:
    def test_outputs_and_manifest(self, ckpt, work):
        hist = list(csv.DictReader(open(f"{ckpt}.history.csv")))
        assert list(hist[0]) == ["epoch", "train_loss", "val_mae"]
        man = json.loads(open(f"{ckpt}.manifest.json").read())
        assert man["command"] == "train" and man["seed"] == 11 and man["version"] == __version__
        assert man["config"]["decoder_layers"] == 4 and man["config"]["learning_rate"] == 3e-3
        assert set(man["inputs"]) == {str(work / "data.csv"), str(work / "cfg.txt")}
        assert all(len(v) == 64 for v in man["inputs"].values())
        assert str(ckpt) in man["outputs"]

    def test_deterministic(self, ckpt, work):
        again = _train(work, "m1_again.ckpt")
        assert again.read_bytes() == ckpt.read_bytes()

    def test_horizon_flag(self, work):
        out = _train(work, "h7.ckpt", "--horizon", "7")
        man = json.loads(open(f"{out}.manifest.json").read())
        assert (man["config"]["forecast_horizon"], man["config"]["decoder_input_length"]) == (7, 11)

    def test_flag_overrides_file(self, work):
        out = _train(work, "s.ckpt", "--seed", "5", "--set", "max_epochs=1", "--set", "patience=0")
        man = json.loads(open(f"{out}.manifest.json").read())
        assert man["config"]["seed"] == 5 and man["config"]["max_epochs"] == 1

    def test_default_config_is_reference_column(self):
        c = ModelConfig()
        assert (c.encoder_input_length, c.decoder_input_length, c.d_model, c.heads,
                c.encoder_layers, c.decoder_layers, c.ffn_dim, c.dropout) == (7, 5, 32, 4, 4, 4, 64, 0.1)

    def test_no_calendar(self, work):
        out = _train(work, "nc.ckpt", "--no-calendar", "--max-epochs", "2")
        man = json.loads(open(f"{out}.manifest.json").read())
        assert man["config"]["use_calendar"] is False

    def test_reproduces_validation_mae(self, ckpt, work):
        best = json.loads(open(f"{ckpt}.manifest.json").read())
        meta_hist = list(csv.DictReader(open(f"{ckpt}.history.csv")))
        best_mae = min(float(r["val_mae"]) for r in meta_hist)
        prefix = work / "val"
        assert main(["evaluate", "--checkpoint", str(ckpt), "--data", str(work / "data.csv"),
                     "--split", "validate", "--out", str(prefix)]) == 0
        rows = json.loads((work / "val.json").read_text())
        model_row = next(r for r in rows if r["model"] == "tsformer")
        assert abs(model_row["mae"] - best_mae) <= 1e-9
        assert best["command"] == "train"


class TestEvaluate:
    def test_horizon_blocks_and_baselines(self, work):
        long = work / "long.csv"
        assert main(["synth", "--out", str(long), "--days", "420", "--seed", "3"]) == 0
        h30 = work / "h30.ckpt"
        assert main(["train", "--data", str(long), "--config", str(work / "cfg.txt"), "--out", str(h30),
                     "--horizon", "30", "--max-epochs", "2"]) == 0
        prefix = work / "rep"
        assert main(["evaluate", "--checkpoint", str(h30), "--data", str(long),
                     "--horizons", "1,7,15,30", "--out", str(prefix)]) == 0
        rows = list(csv.DictReader(open(f"{prefix}.csv")))
        by_model = {}
        for r in rows:
            by_model.setdefault(r["model"], []).append(int(r["horizon"]))
        assert by_model["tsformer"] == [1, 7, 15, 30]
        assert by_model["naive"] == [1]
        assert by_model["seasonal_naive_s7"] == [7, 15, 30]
        assert json.loads((work / "rep.json").read_text())[0]["model"] == "naive"

    def test_oracle(self, ckpt, work):
        prefix = work / "oracle"
        assert main(["evaluate", "--checkpoint", str(ckpt), "--data", str(work / "data.csv"),
                     "--oracle", "--out", str(prefix)]) == 0
        rows = [r for r in csv.DictReader(open(f"{prefix}.csv")) if r["model"] == "oracle"]
        assert rows and all(float(r[k]) == 0.0 for r in rows for k in ("mae", "rmse", "mape"))

    def test_per_lead(self, work):
        h7 = work / "h7.ckpt"
        if not h7.exists():
            _train(work, "h7.ckpt", "--horizon", "7")
        prefix = work / "lead"
        assert main(["evaluate", "--checkpoint", str(h7), "--data", str(work / "data.csv"),
                     "--horizons", "7", "--per-lead", "--out", str(prefix)]) == 0
        names = [r["model"] for r in csv.DictReader(open(f"{prefix}.csv"))]
        assert "tsformer@lead7" in names and "seasonal_naive_s7@lead1" in names


class TestForecast:
    def test_prints_next_days(self, work, capsys):
        h7 = work / "h7.ckpt"
        if not h7.exists():
            _train(work, "h7.ckpt", "--horizon", "7")
        capsys.readouterr()
        assert main(["forecast", "--checkpoint", str(h7), "--data", str(work / "data.csv")]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0] == "date,forecast" and len(lines) == 8
        last = (work / "data.csv").read_text().strip().splitlines()[-1].split(",")[0]
        assert lines[1].split(",")[0] > last


class TestAblate:
    def test_table_and_manifest(self, work):
        out = work / "abl.csv"
        assert main(["ablate", "--data", str(work / "data.csv"), "--config", str(work / "cfg.txt"),
                     "--max-epochs", "2", "--horizons", "1,3", "--out", str(out)]) == 0
        rows = list(csv.reader(open(out)))
        assert rows[0] == ["model", "metric", "h1", "h3"]
        assert {r[0] for r in rows[1:]} == {"Tsformer w/ calendar", "Tsformer w/o calendar"}
        assert len(rows) == 7
        man = json.loads(open(f"{out}.manifest.json").read())
        a, b = man["config"]["with_calendar"], man["config"]["without_calendar"]
        assert [k for k in a if a[k] != b[k]] == ["use_calendar"]
        assert man["config"]["differs_in"] == ["use_calendar"]
        assert man["seed"] == 11


class TestAttention:
    def test_eight_matrices_and_labels(self, ckpt, work):
        out = work / "att"
        assert main(["attention", "--checkpoint", str(ckpt), "--data", str(work / "data.csv"),
                     "--out", str(out)]) == 0
        csvs = sorted(p.name for p in out.glob("*.csv"))
        assert len(csvs) == 8 and len(list(out.glob("*.svg"))) == 8
        m, rows, cols = read_matrix_csv(out / "decoder_layer1_cross.csv")
        assert m.shape == (5, 7) and rows == [4, 5, 6, 7, 8] and cols == list(range(1, 8))
        m, rows, cols = read_matrix_csv(out / "decoder_layer4_self.csv")
        assert m.shape == (5, 5) and cols == [4, 5, 6, 7, 8]

    def test_deterministic_and_per_head(self, ckpt, work):
        a, b = work / "att_a", work / "att_b"
        for d in (a, b):
            assert main(["attention", "--checkpoint", str(ckpt), "--data", str(work / "data.csv"),
                         "--out", str(d), "--per-head", "--no-heatmaps"]) == 0
        names = sorted(p.name for p in a.glob("*.csv"))
        assert len(names) == 8 + 8 * 2
        assert all((a / n).read_bytes() == (b / n).read_bytes() for n in names)


class TestGridSearch:
    def test_ranked_with_failures(self, work):
        grid = work / "grid.txt"
        grid.write_text("learning_rate = 0.0, 0.01\nheads = 2, 3\n")
        out = work / "grid.csv"
        assert main(["gridsearch", "--data", str(work / "data.csv"), "--config", str(work / "cfg.txt"),
                     "--grid", str(grid), "--out", str(out), "--set", "decoder_layers=1"]) == 0
        rows = list(csv.DictReader(open(out)))
        assert [r["rank"] for r in rows] == ["1", "2", "3", "4"]
        assert [r["learning_rate"] for r in rows[:2]] == ["0.01", "0.0"]
        assert rows[2]["error"] and rows[3]["error"]
        assert json.loads(rows[0]["model_config"])["heads"] == 2

    def test_size_one_matches_train_and_validation_eval(self, ckpt, work):
        grid = work / "one.txt"
        grid.write_text("d_model = 8\n")
        out = work / "one.csv"
        assert main(["gridsearch", "--data", str(work / "data.csv"), "--config", str(work / "cfg.txt"),
                     "--grid", str(grid), "--out", str(out)]) == 0
        row = next(csv.DictReader(open(out)))
        hist = list(csv.DictReader(open(f"{ckpt}.history.csv")))
        assert float(row["val_mae"]) == min(float(r["val_mae"]) for r in hist)


class TestExitCodes:
    def _err(self, capsys):
        err = capsys.readouterr().err.strip().splitlines()
        assert len(err) == 1
        return err[0]

    def test_validation(self, work, tmp_path, capsys):
        bad = tmp_path / "bad.txt"
        bad.write_text("d_model = 7\n")
        assert main(["train", "--data", str(work / "data.csv"), "--config", str(bad),
                     "--out", str(tmp_path / "x.ckpt")]) == 2
        assert self._err(capsys).startswith("tsformer: error[validation]: ")

    def test_bad_csv(self, tmp_path, capsys):
        p = tmp_path / "d.csv"
        p.write_text("date,demand\n2020-01-01,1\n")
        assert main(["train", "--data", str(p), "--out", str(tmp_path / "x.ckpt")]) == 2
        assert "row 1" in self._err(capsys)

    def test_io(self, tmp_path, capsys):
        assert main(["train", "--data", str(tmp_path / "missing.csv"), "--out", str(tmp_path / "x")]) == 4
        assert self._err(capsys).startswith("tsformer: error[io]: ")

    def test_divergence(self, work, tmp_path, capsys, monkeypatch):
        from tsformer import estimators
        from tsformer.train import TrainingDivergedError

        def boom(*a, **k):
            raise TrainingDivergedError(2, 5)

        monkeypatch.setattr(estimators, "train", boom)
        assert main(["train", "--data", str(work / "data.csv"), "--config", str(work / "cfg.txt"),
                     "--out", str(tmp_path / "x.ckpt")]) == 3
        line = self._err(capsys)
        assert line.startswith("tsformer: error[divergence]: ") and "epoch 2" in line

    def test_console_script(self, tmp_path):
        r = subprocess.run([sys.executable, "-m", "tsformer.cli", "synth", "--out", str(tmp_path / "s.csv"),
                            "--days", "10"], capture_output=True, text=True)
        assert r.returncode == 2 and r.stderr.startswith("tsformer: error[validation]:")
