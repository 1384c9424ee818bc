import csv

import numpy as np
import pytest

from cbm.cli import main
from cbm.config import ConfigError, RunConfig, dumps_config, loads_config
from cbm.experiment import verify_suite
from cbm.mdp import random_mdp, save_mdp

SMALL_CONFIG = """
[run]
total_steps = 30
eval_interval = 10
warmup_steps = 64
buffer_capacity = 500
eval_samples = 128

[cbm]
n_prototypes = 8
batch_size = 16
latent_dim = 6
hidden_dim = 16
"""


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "small.ini"
    path.write_text(SMALL_CONFIG)
    return path


class TestConfig:
    def test_defaults_round_trip(self):
        config = RunConfig()
        assert loads_config(dumps_config(config)) == config

    def test_values_round_trip(self):
        config = loads_config(SMALL_CONFIG + "\n[env]\ndistractor_scale = 0.25\n")
        assert config.env.distractor_scale == 0.25 and config.cbm.n_prototypes == 8
        assert loads_config(dumps_config(config)) == config

    def test_unknown_key_is_named(self):
        with pytest.raises(ConfigError, match="cbm.temprature"):
            loads_config("[cbm]\ntemprature = 0.1\n")

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="extra"):
            loads_config("[extra]\nx = 1\n")

    def test_bad_value_is_named(self):
        with pytest.raises(ConfigError, match="run.total_steps"):
            loads_config("[run]\ntotal_steps = many\n")

    def test_invalid_value_is_named(self):
        with pytest.raises(ConfigError, match="cbm.temperature"):
            loads_config("[cbm]\ntemperature = -1\n")

    def test_warmup_must_cover_a_batch(self):
        with pytest.raises(ConfigError, match="warmup"):
            loads_config("[run]\nwarmup_steps = 10\n")

    def test_seed_override(self):
        config = RunConfig().with_seed(7)
        assert config.run.seed == 7 and config.cbm_config().seed == 7


class TestTrainCommand:
    def test_outputs(self, tmp_path, config_file):
        out = tmp_path / "run"
        assert main(["train", "--config", str(config_file), "--out", str(out)]) == 0
        metrics = read_csv(out / "metrics.csv")
        assert metrics[0] == ["step", "L_CBM", "L_P", "code_entropy", "usage_min", "usage_max"]
        assert len(metrics) == 31
        evals = read_csv(out / "eval.csv")
        assert [row[0] for row in evals[1:]] == ["0", "10", "20", "30"]
        assert (out / "config.ini").read_text() == config_file.read_text()
        assert loads_config((out / "effective.ini").read_text()).run.total_steps == 30
        assert sorted(p.name for p in (out / "checkpoints").iterdir()) == [
            f"step_{s:07d}.ckpt" for s in (0, 10, 20, 30)]

    def test_rerun_is_bitwise_identical(self, tmp_path, config_file):
        for name in ("a", "b"):
            assert main(["train", "--config", str(config_file), "--seed", "3",
                         "--out", str(tmp_path / name)]) == 0
        for name in ("metrics.csv", "eval.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_seed_changes_metrics(self, tmp_path, config_file):
        for seed in ("0", "1"):
            main(["train", "--config", str(config_file), "--seed", seed,
                  "--out", str(tmp_path / seed)])
        assert (tmp_path / "0" / "metrics.csv").read_bytes() != \
               (tmp_path / "1" / "metrics.csv").read_bytes()

    def test_refuses_to_clobber(self, tmp_path, config_file, capsys):
        out = tmp_path / "run"
        out.mkdir()
        (out / "keep.txt").write_text("x")
        assert main(["train", "--config", str(config_file), "--out", str(out)]) == 2
        assert "--overwrite" in capsys.readouterr().err
        assert (out / "keep.txt").exists()
        assert main(["train", "--config", str(config_file), "--out", str(out),
                     "--overwrite"]) == 0
        assert not (out / "keep.txt").exists()

    def test_zero_steps_gives_header_only_metrics(self, tmp_path):
        cfg = tmp_path / "zero.ini"
        cfg.write_text(SMALL_CONFIG.replace("total_steps = 30", "total_steps = 0"))
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 0
        assert len(read_csv(tmp_path / "run" / "metrics.csv")) == 1

    def test_unknown_key_exits_nonzero(self, tmp_path, capsys):
        cfg = tmp_path / "bad.ini"
        cfg.write_text("[cbm]\ntemprature = 0.1\n")
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 2
        assert "cbm.temprature" in capsys.readouterr().err
        assert not (tmp_path / "run").exists()


class TestEvalCommand:
    def test_reproduces_training_evaluation(self, tmp_path, config_file):
        run = tmp_path / "run"
        main(["train", "--config", str(config_file), "--out", str(run)])
        out = tmp_path / "eval"
        assert main(["eval", "--checkpoint", str(run / "checkpoints" / "step_0000030.ckpt"),
                     "--buffer", str(run / "eval_buffer.ckpt"), "--out", str(out)]) == 0
        report = read_csv(out / "ch_report.csv")
        assert report[1][1] == read_csv(run / "eval.csv")[-1][1]
        embeddings = read_csv(out / "embeddings.csv")
        assert len(embeddings) == 129 and embeddings[0][-1] == "cluster"

    def test_missing_checkpoint(self, tmp_path):
        assert main(["eval", "--checkpoint", str(tmp_path / "none"), "--buffer",
                     str(tmp_path / "none"), "--out", str(tmp_path / "eval")]) == 2
        assert not (tmp_path / "eval").exists()


class TestOtherCommands:
    def test_bisim(self, tmp_path):
        save_mdp(random_mdp(0, 4, 2), tmp_path / "m.txt")
        assert main(["bisim", "--mdp", str(tmp_path / "m.txt"), "--c", "0.5",
                     "--out", str(tmp_path / "out")]) == 0
        d = np.array(read_csv(tmp_path / "out" / "distances.csv"), dtype=float)
        assert d.shape == (4, 4) and np.all(np.diag(d) == 0)
        assert len(read_csv(tmp_path / "out" / "values.csv")) == 4

    def test_verify_is_reproducible(self, tmp_path):
        for name in ("a", "b"):
            assert main(["verify", "--n-mdps", "6", "--seed", "2",
                         "--out", str(tmp_path / name)]) == 0
        assert (tmp_path / "a" / "verify.csv").read_bytes() == \
               (tmp_path / "b" / "verify.csv").read_bytes()
        assert len(read_csv(tmp_path / "a" / "verify.csv")) == 7

    def test_verify_zero_mdps(self, tmp_path):
        assert main(["verify", "--n-mdps", "0", "--out", str(tmp_path / "v")]) == 0
        assert len(read_csv(tmp_path / "v" / "verify.csv")) == 1

    def test_verify_suite_cycles_c(self):
        rows = verify_suite(4, max_states=3, max_actions=2)
        assert [r.c for r in rows] == [0.5, 0.9, 0.5, 0.9]
        assert all(r.gamma == r.c and r.violations == 0 for r in rows)

    def test_sinkhorn_from_csv(self, tmp_path):
        (tmp_path / "d.csv").write_text("0,1\n1,0\n")
        assert main(["sinkhorn", "--input", str(tmp_path / "d.csv"), "--epsilon", "0.05",
                     "--out", str(tmp_path / "out")]) == 0
        q = np.array(read_csv(tmp_path / "out" / "codes.csv"), dtype=float)
        assert q[0, 1] <= 3e-9 and q[1, 0] <= 3e-9

    def test_sinkhorn_converged_random(self, tmp_path):
        assert main(["sinkhorn", "--random", "4", "12", "--iters", "converged",
                     "--out", str(tmp_path / "out")]) == 0
        q = np.array(read_csv(tmp_path / "out" / "codes.csv"), dtype=float)
        np.testing.assert_allclose(q.sum(axis=1), 3.0, atol=1e-6)

    def test_sinkhorn_rejects_ragged_input(self, tmp_path):
        (tmp_path / "d.csv").write_text("0,1\n1\n")
        assert main(["sinkhorn", "--input", str(tmp_path / "d.csv"),
                     "--out", str(tmp_path / "out")]) == 2
