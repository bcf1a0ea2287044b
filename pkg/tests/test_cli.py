import json
import os

import pytest

from twostage_cltr.cli import build_config, main
from twostage_cltr.errors import ConfigError


class TestValidateCommand:
    def test_sampler_suite_passes(self, capsys):
        assert main(["validate", "--suite", "sampler"]) == 0
        out = capsys.readouterr().out
        assert "[PASS] sampler" in out


class TestRunAndTable:
    def micro_args(self, out_dir):
        return [
            "run",
            "--out", out_dir,
            "--synth-users", "90",
            "--synth-items", "40",
            "--k2-list", "10",
            "--n-list", "500",
            "--regimes", "joint",
            "--n-runs", "1",
            "--n-mc", "6",
            "--batch-size", "16",
            "--n-epochs", "1",
            "--n-mc-eval", "8",
            "--ndcg-samples", "8",
            "--logging-train-steps", "10",
            "--logging-n-mc", "4",
            "--K", "4",
            "--embedding-dim", "8",
            "--seed", "3",
        ]

    def test_run_writes_grid_and_table(self, tmp_path, capsys):
        out = str(tmp_path / "res")
        assert main(self.micro_args(out)) == 0
        assert os.path.exists(os.path.join(out, "grid.csv"))
        assert os.path.exists(os.path.join(out, "table.txt"))
        assert "joint" in capsys.readouterr().out

    def test_cell_flag_restricts(self, tmp_path):
        out = str(tmp_path / "res2")
        args = self.micro_args(out) + ["--regimes", "joint,independent", "--cell", "joint,10,500"]
        assert main(args) == 0
        with open(os.path.join(out, "grid.csv")) as fh:
            body = fh.read()
        assert "independent" not in body

    def test_table_command(self, tmp_path, capsys):
        out = str(tmp_path / "res3")
        main(self.micro_args(out))
        capsys.readouterr()
        assert main(["table", "--in", out]) == 0
        assert "joint" in capsys.readouterr().out


class TestConfigLayering:
    def test_file_and_flag_override(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"n_runs": 7, "master_seed": 11, "k2_list": [20]}))
        import argparse

        from twostage_cltr.cli import _add_config_flags

        parser = argparse.ArgumentParser()
        parser.add_argument("--config")
        parser.add_argument("--preset", default=None)
        parser.add_argument("--seed", type=int, default=None)
        parser.add_argument("--out", default=None)
        _add_config_flags(parser)
        args = parser.parse_args(["--config", str(cfg_path), "--n-runs", "3"])
        cfg = build_config(args)
        assert cfg.n_runs == 3  # flag beats file
        assert cfg.master_seed == 11  # file beats default
        assert cfg.k2_list == (20,)

    def test_paper_preset_requires_dataset(self):
        with pytest.raises(ConfigError):
            main(["run", "--preset", "paper"])
