import subprocess
import sys

import pytest

TINY_CONFIG = """
seed = 11
toy.n_real = 4
toy.n_synthetic = 4
toy.n_pool = 6
toy.n_eval = 2
toy.min_duration_s = 1.0
toy.max_duration_s = 1.3
net.hidden = 12
net.embed_dim = 6
train.batch_size = 8
train.max_epochs = 1
train.patience = 0
train.lr_bce = 0.001
ulm.k = 6
"""


def _run(*args):
    return subprocess.run([sys.executable, "-m", "synthsel.cli", *args],
                          capture_output=True, text=True, timeout=600)


def _write_cfg(tmp_path, out_name="out"):
    path = tmp_path / "toy.cfg"
    path.write_text(TINY_CONFIG + f"paths.out_dir = {tmp_path / out_name}\n")
    return path


class TestCli:
    def test_toy_corpus_then_stages_exit_zero(self, tmp_path):
        cfg = _write_cfg(tmp_path)
        for args in (("toy-corpus",), ("featurize",), ("train-scorer", "--head", "bce"),
                     ("score", "--method", "cls"), ("select", "--scores", "cls"),
                     ("analyze",)):
            proc = _run(*args, "--config", str(cfg))
            assert proc.returncode == 0, proc.stderr
        assert (tmp_path / "out" / "selections" / "cls.txt").is_file()
        assert (tmp_path / "out" / "analysis" / "score_hist.png").is_file()

    def test_missing_dependency_exits_nonzero_with_stage(self, tmp_path):
        cfg = _write_cfg(tmp_path)
        proc = _run("score", "--method", "cls", "--config", str(cfg))
        assert proc.returncode == 1
        assert "score:cls" in proc.stderr

    def test_config_typo_exit_code(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("net.hiden = 3\n")
        proc = _run("toy-corpus", "--config", str(path))
        assert proc.returncode == 2
        assert "net.hiden" in proc.stderr

    def test_cached_rerun_reports_cached(self, tmp_path):
        cfg = _write_cfg(tmp_path)
        assert _run("toy-corpus", "--config", str(cfg)).returncode == 0
        proc = _run("toy-corpus", "--config", str(cfg))
        assert proc.returncode == 0
        assert "[cached] toy-corpus" in proc.stdout

    def test_select_criterion_flag(self, tmp_path):
        cfg = _write_cfg(tmp_path)
        for args in (("toy-corpus",), ("featurize",), ("train-scorer", "--head", "bce"),
                     ("score", "--method", "cls")):
            assert _run(*args, "--config", str(cfg)).returncode == 0
        proc = _run("select", "--scores", "cls", "--criterion", "bottom:0.5",
                    "--config", str(cfg))
        assert proc.returncode == 0
        import json

        meta = json.loads((tmp_path / "out" / "selections" / "cls.txt.json").read_text())
        assert meta["criterion"] == "bottom:0.5"

    def test_out_override(self, tmp_path):
        cfg = _write_cfg(tmp_path)
        proc = _run("toy-corpus", "--config", str(cfg), "--out", str(tmp_path / "alt"))
        assert proc.returncode == 0
        assert (tmp_path / "alt" / "corpus.jsonl").is_file()
