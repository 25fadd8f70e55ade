import csv
import subprocess
import sys

import numpy as np
import pytest

from mamba_st.checkpoint import save_checkpoint
from mamba_st.cli import EXIT_FAILED, EXIT_OK, EXIT_USAGE, main
from mamba_st.imageio import image_read, image_write
from mamba_st.model import ModelConfig, build_model
from mamba_st.train import write_toy_dataset

TINY = ModelConfig(d_model=8, n_state=4, patch_size=8, encoder_layers=1, decoder_layers=1)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    rng = np.random.default_rng(0)
    image_write(rng.uniform(size=(3, 18, 21)), root / "content.png")
    image_write(rng.uniform(size=(3, 24, 24)), root / "style.png")
    save_checkpoint(build_model(TINY, 0), TINY, root / "model.ckpt")
    return root


def stylize(ws, out, *extra):
    return main(["stylize", "--content", str(ws / "content.png"), "--style", str(ws / "style.png"),
                 "--checkpoint", str(ws / "model.ckpt"), "--out", str(out), *extra])


class TestArtFID:
    def test_zero(self, capsys):
        assert main(["artfid", "--fid", "0", "--lpips", "0"]) == EXIT_OK
        assert capsys.readouterr().out.strip() == "1.0"

    def test_value(self, capsys):
        assert main(["artfid", "--fid", "16.75", "--lpips", "0.53"]) == EXIT_OK
        assert capsys.readouterr().out.strip() == "27.1575"

    def test_negative_is_usage_error(self, capsys):
        assert main(["artfid", "--fid", "-1", "--lpips", "0"]) == EXIT_USAGE
        assert "nonnegative" in capsys.readouterr().err


class TestUsage:
    def test_missing_arguments(self, capsys):
        assert main(["stylize"]) == EXIT_USAGE
        assert "usage" in capsys.readouterr().err

    def test_no_command(self):
        assert main([]) == EXIT_USAGE

    def test_help_is_ok(self, capsys):
        assert main(["--help"]) == EXIT_OK

    def test_unknown_suite(self, capsys):
        assert main(["verify", "--suite", "nope"]) == EXIT_USAGE
        assert "nope" in capsys.readouterr().err

    def test_bad_seed_env(self, monkeypatch, capsys):
        monkeypatch.setenv("MAMBA_ST_SEED", "abc")
        assert main(["verify", "--suite", "losses"]) == EXIT_USAGE

    def test_missing_checkpoint(self, tmp_path, workspace):
        code = main(["stylize", "--content", str(workspace / "content.png"), "--style",
                     str(workspace / "style.png"), "--checkpoint", str(tmp_path / "none.ckpt"),
                     "--out", str(tmp_path / "o.png")])
        assert code == EXIT_USAGE

    def test_module_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "mamba_st", "artfid", "--fid", "1", "--lpips", "1"],
                              capture_output=True, text=True)
        assert proc.returncode == 0 and proc.stdout.strip() == "4.0"


class TestStylize:
    def test_crops_and_writes(self, workspace, tmp_path, capsys):
        assert stylize(workspace, tmp_path / "o.png") == EXIT_OK
        assert image_read(tmp_path / "o.png").shape == (3, 16, 16)
        err = capsys.readouterr().err
        assert "18x21 to 16x16" in err and "style from 24x24" in err

    def test_deterministic_bytes(self, workspace, tmp_path):
        stylize(workspace, tmp_path / "a.png", "--seed", "3")
        stylize(workspace, tmp_path / "b.png", "--seed", "3")
        assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()

    def test_seed_from_environment(self, workspace, tmp_path, monkeypatch):
        stylize(workspace, tmp_path / "a.png", "--seed", "9")
        monkeypatch.setenv("MAMBA_ST_SEED", "9")
        stylize(workspace, tmp_path / "b.png")
        assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()

    def test_no_shuffle_changes_output(self, workspace, tmp_path):
        stylize(workspace, tmp_path / "a.png")
        stylize(workspace, tmp_path / "b.png", "--no-shuffle")
        assert not np.array_equal(image_read(tmp_path / "a.png"), image_read(tmp_path / "b.png"))

    def test_small_style_resized(self, workspace, tmp_path, capsys):
        image_write(np.full((3, 8, 8), 0.5), tmp_path / "small.png")
        code = main(["stylize", "--content", str(workspace / "content.png"), "--style",
                     str(tmp_path / "small.png"), "--checkpoint", str(workspace / "model.ckpt"),
                     "--out", str(tmp_path / "o.png")])
        assert code == EXIT_OK and "resizing style" in capsys.readouterr().err


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    return write_toy_dataset(tmp_path_factory.mktemp("toy"), n=2, size=16)


class TestTrainToy:
    def run(self, data, out, *extra):
        cdir, sdir = data
        return main(["train-toy", "--content-dir", str(cdir), "--style-dir", str(sdir),
                     "--out-checkpoint", str(out), "--iters", "2", "--width", "8", *extra])

    def test_deterministic_checkpoint(self, data, tmp_path, capsys):
        assert self.run(data, tmp_path / "a.ckpt", "--seed", "1") == EXIT_OK
        assert self.run(data, tmp_path / "b.ckpt", "--seed", "1") == EXIT_OK
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        assert "final smoothed loss" in capsys.readouterr().out

    def test_loss_log(self, data, tmp_path):
        self.run(data, tmp_path / "a.ckpt", "--identity-only", "--loss-log", str(tmp_path / "loss.csv"))
        with open(tmp_path / "loss.csv") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["iteration", "loss"] and len(rows) == 3

    def test_trained_checkpoint_stylizes(self, data, tmp_path):
        self.run(data, tmp_path / "m.ckpt")
        code = main(["stylize", "--content", str(data[0] / "000.png"), "--style", str(data[1] / "001.png"),
                     "--checkpoint", str(tmp_path / "m.ckpt"), "--out", str(tmp_path / "o.png")])
        assert code == EXIT_OK


class TestVerifyAndBench:
    @pytest.mark.parametrize("suite", ["losses", "roundtrip"])
    def test_quick_suites_pass(self, suite, capsys):
        assert main(["verify", "--suite", suite]) == EXIT_OK
        assert "all properties passed" in capsys.readouterr().out

    def test_failure_exit_code(self, monkeypatch, capsys):
        from mamba_st import verify as verify_mod
        failing = verify_mod.VerifyReport([verify_mod.PropertyResult("losses", "broken", 1, 1.0, 0.0)])
        monkeypatch.setattr(verify_mod, "verify", lambda suite, seed: failing)
        assert main(["verify", "--suite", "losses"]) == EXIT_FAILED
        assert "FAILED" in capsys.readouterr().out

    def test_bench_csv(self, tmp_path, capsys):
        out = tmp_path / "b.csv"
        assert main(["bench", "--lengths", "16,32", "--d", "4", "--n-state", "2", "--repeats", "3",
                     "--out", str(out)]) == EXIT_OK
        with open(out) as f:
            assert len(list(csv.reader(f))) == 5

    @pytest.mark.parametrize("lengths", ["", "8,x", "0,8"])
    def test_bench_bad_lengths(self, lengths, tmp_path):
        assert main(["bench", "--lengths", lengths, "--out", str(tmp_path / "b.csv")]) == EXIT_USAGE

    def test_bench_few_repeats(self, tmp_path):
        assert main(["bench", "--repeats", "2", "--out", str(tmp_path / "b.csv")]) == EXIT_USAGE
