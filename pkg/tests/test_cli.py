import subprocess
import sys

import pytest

FAST = ["--n-clients", "2", "--cycles-per-client", "12", "--hidden", "3",
        "--local-epochs", "2", "--retrain-epochs", "1", "--fedavg-epochs", "1",
        "--rounds", "1", "--patience", "2"]


def fedprog(*argv):
    return subprocess.run([sys.executable, "-m", "fedprog", *argv],
                          capture_output=True, text=True)


@pytest.fixture(scope="module")
def cyclic_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("fleet")
    res = fedprog("synth", "--task", "cyclic", "--out", str(out), *FAST)
    assert res.returncode == 0, res.stderr
    return out


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, cyclic_dir):
    out = tmp_path_factory.mktemp("run")
    res = fedprog("run", "--algo", "fedma", "--data-dir", str(cyclic_dir),
                  "--out", str(out), *FAST)
    assert res.returncode == 0, res.stderr
    return out


class TestSynth:
    def test_cyclic_files(self, cyclic_dir):
        names = sorted(p.name for p in cyclic_dir.glob("*.csv"))
        assert names == ["cyclic_client_0.csv", "cyclic_client_1.csv"]

    def test_deterministic_bytes(self, cyclic_dir, tmp_path):
        res = fedprog("synth", "--task", "cyclic", "--out", str(tmp_path), *FAST)
        assert res.returncode == 0
        for name in ("cyclic_client_0.csv", "cyclic_client_1.csv"):
            assert (tmp_path / name).read_bytes() == (cyclic_dir / name).read_bytes()

    def test_noncyclic_files(self, tmp_path):
        res = fedprog("synth", "--task", "noncyclic", "--out", str(tmp_path),
                      "--n-engines", "5", "--n-test-engines", "3",
                      "--lifespan-min", "60", "--lifespan-max", "100")
        assert res.returncode == 0, res.stderr
        for name in ("engine_train.csv", "engine_test.csv", "engine_test_rul.txt"):
            assert (tmp_path / name).exists()
        assert "5 training and 3 test engines" in res.stdout


class TestRun:
    def test_outputs_and_stdout(self, run_dir):
        for name in ("metrics.csv", "checkpoint.json", "config.txt"):
            assert (run_dir / name).exists()

    def test_round_lines_printed(self, cyclic_dir, tmp_path):
        res = fedprog("run", "--algo", "fedavg", "--data-dir", str(cyclic_dir),
                      "--out", str(tmp_path), *FAST)
        assert res.returncode == 0, res.stderr
        assert "round 1 fedavg rmse" in res.stdout
        assert "best round" in res.stdout

    def test_config_file_plus_flag_override(self, cyclic_dir, tmp_path):
        cfg = tmp_path / "exp.cfg"
        cfg.write_text(f"algo = fedavg\nrounds = 3\ndata_dir = {cyclic_dir}\n"
                       "hidden = 3\nlocal_epochs = 1\nfedavg_epochs = 1\n"
                       "n_clients = 2\npatience = 1\n")
        out = tmp_path / "out"
        res = fedprog("run", "--config", str(cfg), "--rounds", "1",
                      "--out", str(out))
        assert res.returncode == 0, res.stderr
        assert "rounds = 1" in (out / "config.txt").read_text()

    def test_bad_config_key_fails(self, tmp_path):
        cfg = tmp_path / "exp.cfg"
        cfg.write_text("roundz = 3\n")
        res = fedprog("run", "--config", str(cfg), "--out", str(tmp_path / "o"))
        assert res.returncode == 1
        assert "error:" in res.stderr and "unknown key" in res.stderr

    def test_bad_flag_value_fails(self, tmp_path):
        res = fedprog("run", "--rounds", "lots", "--out", str(tmp_path / "o"))
        assert res.returncode == 1
        assert "cannot parse" in res.stderr


class TestEval:
    def test_scores_checkpoint(self, cyclic_dir, run_dir):
        res = fedprog("eval", str(run_dir / "checkpoint.json"),
                      "--data-dir", str(cyclic_dir), *FAST)
        assert res.returncode == 0, res.stderr
        assert "client 0 rmse" in res.stdout
        assert "client 1 rmse" in res.stdout
        assert "mean rmse" in res.stdout

    def test_baseline_gives_improvement_column(self, cyclic_dir, run_dir):
        res = fedprog("eval", str(run_dir / "checkpoint.json"),
                      "--data-dir", str(cyclic_dir),
                      "--baseline", str(run_dir / "metrics.csv"), *FAST)
        assert res.returncode == 0, res.stderr
        assert "imp" in res.stdout

    def test_task_mismatch_fails(self, run_dir, tmp_path):
        res = fedprog("eval", str(run_dir / "checkpoint.json"),
                      "--task", "noncyclic", "--n-engines", "5",
                      "--n-test-engines", "2")
        assert res.returncode == 1
        assert "task" in res.stderr

    def test_missing_checkpoint_fails(self, tmp_path):
        res = fedprog("eval", str(tmp_path / "nope.json"), *FAST)
        assert res.returncode == 1
        assert "error:" in res.stderr


class TestDumpFeatures:
    def test_writes_activation_csv(self, cyclic_dir, run_dir, tmp_path):
        out = tmp_path / "acts.csv"
        res = fedprog("dump-features", str(run_dir / "checkpoint.json"),
                      "--data-dir", str(cyclic_dir), "--neurons", "0,2",
                      "--out", str(out), *FAST)
        assert res.returncode == 0, res.stderr
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "window_index,neuron_0,neuron_2"
        assert len(lines) > 1

    def test_neuron_out_of_range_fails(self, cyclic_dir, run_dir, tmp_path):
        res = fedprog("dump-features", str(run_dir / "checkpoint.json"),
                      "--data-dir", str(cyclic_dir), "--neurons", "0,99",
                      "--out", str(tmp_path / "acts.csv"), *FAST)
        assert res.returncode == 1
        assert "out of range" in res.stderr


class TestHelp:
    def test_top_level_help(self):
        res = fedprog("--help")
        assert res.returncode == 0
        for cmd in ("synth", "run", "eval", "dump-features"):
            assert cmd in res.stdout

    def test_run_help_shows_defaults(self):
        res = fedprog("run", "--help")
        assert res.returncode == 0
        assert "--sigma0-sq" in res.stdout
        assert "default: 10.0" in res.stdout
