import csv
import json

import pytest

from snn_forge import config as cfgmod
from snn_forge.cli import EXIT_DIVERGED, EXIT_IO, EXIT_OK, EXIT_USAGE, main
from snn_forge.experiments import stress_cells, stress_matrix, worker_count

# a tiny MLP problem so each run takes about a second
TINY = ["--set", "net=mlp", "--set", "hidden=[16]", "--set", "data.n=300", "--set", "optim.epochs=1",
        "--set", "precision=float64"]


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


class TestUsage:
    def test_unknown_flag(self, tmp_path):
        with pytest.raises(SystemExit) as info:
            main(["run", "--bogus", "--out", str(tmp_path)])
        assert info.value.code == EXIT_USAGE

    def test_invalid_field_is_named(self, tmp_path, capsys):
        assert main(["run", "--set", "optim.lr=-1", "--out", str(tmp_path)]) == EXIT_USAGE
        assert "optim.lr" in capsys.readouterr().err

    def test_unknown_config_key(self, tmp_path, capsys):
        assert main(["run", "--set", "optim.learning_rate=0.1", "--out", str(tmp_path)]) == EXIT_USAGE
        assert "learning_rate" in capsys.readouterr().err

    def test_malformed_json_config(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{mode: train")
        assert main(["run", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_USAGE

    def test_missing_config_file(self, tmp_path):
        assert main(["run", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == EXIT_IO

    def test_missing_checkpoint(self, tmp_path):
        args = ["run", "--mode", "eval", "--set", f"checkpoint={tmp_path / 'nope.ckpt'}", "--out", str(tmp_path)]
        assert main(args + TINY) == EXIT_IO

    def test_override_parsing(self):
        raw = cfgmod.apply_override({}, "sg.gamma", cfgmod.parse_value("0.5"))
        raw = cfgmod.apply_override(raw, "sg.shape", cfgmod.parse_value("arctan"))
        assert cfgmod.from_dict(raw).sg.gamma == 0.5
        assert cfgmod.from_dict(raw).sg.shape == "arctan"


class TestModes:
    def test_theory_writes_decay_csv(self, tmp_path):
        out = tmp_path / "theory"
        code = main(["run", "--mode", "theory", "--tau", "2", "--vthr", "1", "--set", "theory.n_samples=5000",
                     "--out", str(out)])
        assert code == EXIT_OK
        rows = read_csv(out / "metrics.csv")
        assert list(rows[0]) == ["tau", "vthr", "reset", "t", "tv", "rate", "r2"]
        assert len(rows) == 10
        assert json.loads((out / "summary.json").read_text())["fits"][0]["tau"] == 2.0
        assert json.loads((out / "config.json").read_text())["theory"]["taus"] == [2.0]

    def test_train_artifacts_and_reproducibility(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["run", "--mode", "train", "--sg", "trsg", "--init-vthr", "0.1", "--out", str(a)] + TINY) == EXIT_OK
        for name in ("config.json", "metrics.csv", "summary.json", "checkpoint.ckpt"):
            assert (a / name).exists()
        # the resolved config alone reproduces the metrics byte for byte
        assert main(["run", "--config", str(a / "config.json"), "--out", str(b)]) == EXIT_OK
        assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()

    def test_divergence_exit_code(self, tmp_path):
        out = tmp_path / "div"
        code = main(["run", "--mode", "train", "--set", "optim.lr=1e300", "--set", "optim.epochs=2",
                     "--out", str(out)] + TINY[:-2])
        assert code == EXIT_DIVERGED
        assert json.loads((out / "summary.json").read_text())["status"] == "diverged"

    def test_eval_from_checkpoint(self, tmp_path):
        main(["run", "--mode", "train", "--out", str(tmp_path / "t")] + TINY)
        out = tmp_path / "e"
        code = main(["run", "--mode", "eval", "--set", f"checkpoint={tmp_path / 't' / 'checkpoint.ckpt'}",
                     "--out", str(out)] + TINY)
        assert code == EXIT_OK
        trained = json.loads((tmp_path / "t" / "summary.json").read_text())["test_acc"]
        assert json.loads((out / "summary.json").read_text())["test_acc"] == pytest.approx(trained, abs=1e-12)

    def test_drift(self, tmp_path):
        assert main(["run", "--mode", "drift", "--out", str(tmp_path)] + TINY) == EXIT_OK
        rows = read_csv(tmp_path / "metrics.csv")
        assert list(rows[0]) == ["layer", "t", "tv"]
        assert "assumptions" in json.loads((tmp_path / "summary.json").read_text())


class TestStress:
    def test_grid_is_thirty_cells(self):
        cells = stress_cells(cfgmod.from_dict({}))
        assert len(cells) == 30
        keys = {(c.sg.scale_mode, c.init_vthr, c.reset) for c in cells}
        assert len(keys) == 30
        assert not any(c.train_vthr or c.train_tau for c in cells)

    def test_trsg_never_diverges_and_table_is_deterministic(self, tmp_path, monkeypatch):
        monkeypatch.setenv("SNN_FORGE_THREADS", "2")
        cfg = cfgmod.from_dict({"net": "mlp", "hidden": [16], "data": {"n": 300}, "optim": {"epochs": 1},
                                "stress": {"modes": ["TrSG"], "vthrs": [0.1, 0.5, 1.0, 1.5, 2.0]}})
        rows = stress_matrix(cfg)
        assert len(rows) == 10
        assert all(r["status"] == "ok" for r in rows)
        assert stress_matrix(cfg) == rows

    def test_stress_mode_writes_table(self, tmp_path):
        args = ["run", "--mode", "stress", "--set", 'stress.modes=["AS","TrSG"]', "--set", "stress.vthrs=[1.0]",
                "--set", 'stress.resets=["soft"]', "--out", str(tmp_path)]
        assert main(args + TINY) == EXIT_OK
        rows = read_csv(tmp_path / "metrics.csv")
        assert [r["mode"] for r in rows] == ["AS", "TrSG"]
        assert "ratio_ag_0" in rows[0]

    def test_thread_cap(self, monkeypatch):
        monkeypatch.setenv("SNN_FORGE_THREADS", "3")
        assert worker_count(30) == 3
        assert worker_count(2) == 2
        monkeypatch.setenv("SNN_FORGE_THREADS", "1")
        assert worker_count(30) == 1
