"""End-to-end CLI tests, run in process through main(argv).

Exit code contract: 0 success, 1 validation/parse, 2 numerical failure,
3 I/O error.
"""

import numpy as np
import pytest

import multiformer.cli as cli
from multiformer.checkpoint import load_checkpoint
from multiformer.cli import EXIT_IO, EXIT_NUMERICAL, EXIT_OK, EXIT_VALIDATION, main

ARCH = """
d_model = 16
heads = 2
decoder_layers = 1
ffn_dim = 16
vocab_size = 8
feature_dim = 4
encoder_layers = 2

block 1 : full local(4)
block 1 : conv(3,2) conv(3,2)
"""

TASK = """
symbol_count = 5
target_len_min = 3
target_len_max = 5
redundancy = 2
feature_dim = 4
noise = 0.05
"""


@pytest.fixture
def ws(tmp_path):
    (tmp_path / "m.arch").write_text(ARCH)
    (tmp_path / "t.task").write_text(TASK)
    return tmp_path


def do_train(ws, out="run", steps=6, extra=()):
    return main(["train", "--arch", str(ws / "m.arch"),
                 "--task", str(ws / "t.task"), "--seed", "0",
                 "--steps", str(steps), "--out", str(ws / out),
                 "--log-every", "3", *extra])


class TestTrain:
    def test_happy_path(self, ws, capsys):
        assert do_train(ws) == EXIT_OK
        out = capsys.readouterr().out
        assert "trained 6 updates" in out
        assert (ws / "run" / "metrics.csv").exists()
        assert (ws / "run" / "ckpt_000006.mfck").exists()

    def test_warm_start(self, ws, capsys):
        assert do_train(ws) == EXIT_OK
        code = do_train(ws, out="warm", steps=3,
                        extra=("--init-from", str(ws / "run" / "ckpt_000006.mfck")))
        assert code == EXIT_OK

    def test_bad_arch_file(self, ws, capsys):
        (ws / "bad.arch").write_text(ARCH.replace("heads = 2", "heads = banana"))
        code = main(["train", "--arch", str(ws / "bad.arch"),
                     "--task", str(ws / "t.task"), "--seed", "0",
                     "--steps", "1", "--out", str(ws / "o")])
        assert code == EXIT_VALIDATION
        assert "error:" in capsys.readouterr().err

    def test_vocab_mismatch_is_validation(self, ws, capsys):
        (ws / "t2.task").write_text(TASK.replace("symbol_count = 5",
                                                 "symbol_count = 9"))
        code = main(["train", "--arch", str(ws / "m.arch"),
                     "--task", str(ws / "t2.task"), "--seed", "0",
                     "--steps", "1", "--out", str(ws / "o")])
        assert code == EXIT_VALIDATION

    def test_missing_task_file_is_io(self, ws, capsys):
        code = main(["train", "--arch", str(ws / "m.arch"),
                     "--task", str(ws / "absent.task"), "--seed", "0",
                     "--steps", "1", "--out", str(ws / "o")])
        assert code == EXIT_IO


class TestAnalyze:
    def test_report_from_trained_checkpoint(self, ws, capsys):
        do_train(ws)
        capsys.readouterr()
        code = main(["analyze", "--ckpt", str(ws / "run" / "ckpt_000006.mfck"),
                     "--arch", str(ws / "m.arch"), "--samples", "5",
                     "--seed", "1", "--csv", str(ws / "r.csv"),
                     "--svg", str(ws / "r.svg")])
        assert code == EXIT_OK
        out = capsys.readouterr().out
        assert "layer  0" in out and "entropy=" in out
        assert (ws / "r.csv").exists() and (ws / "r.svg").exists()
        header = (ws / "r.csv").read_text().splitlines()[0]
        assert header.startswith("layer,head,mechanism")

    def test_arch_mismatch_is_validation(self, ws, capsys):
        do_train(ws)
        other = ARCH.replace("ffn_dim = 16", "ffn_dim = 32")
        (ws / "other.arch").write_text(other)
        code = main(["analyze", "--ckpt", str(ws / "run" / "ckpt_000006.mfck"),
                     "--arch", str(ws / "other.arch"), "--samples", "2",
                     "--seed", "1", "--csv", str(ws / "r.csv"),
                     "--svg", str(ws / "r.svg")])
        assert code == EXIT_VALIDATION

    def test_missing_checkpoint_is_io(self, ws, capsys):
        code = main(["analyze", "--ckpt", str(ws / "absent.mfck"),
                     "--arch", str(ws / "m.arch"), "--samples", "2",
                     "--seed", "1", "--csv", str(ws / "r.csv"),
                     "--svg", str(ws / "r.svg")])
        assert code == EXIT_IO

    def test_unwritable_report_dir_is_io(self, ws, capsys):
        do_train(ws)
        code = main(["analyze", "--ckpt", str(ws / "run" / "ckpt_000006.mfck"),
                     "--arch", str(ws / "m.arch"), "--samples", "2",
                     "--seed", "1", "--csv", str(ws / "nope" / "r.csv"),
                     "--svg", str(ws / "r.svg")])
        assert code == EXIT_IO


class TestAvgCkpt:
    def test_averages_window_around_best(self, ws, capsys):
        do_train(ws)
        capsys.readouterr()
        code = main(["avg-ckpt", "--metrics", str(ws / "run" / "metrics.csv"),
                     "--dir", str(ws / "run"), "--out", str(ws / "avg.mfck")])
        assert code == EXIT_OK
        assert "averaged steps" in capsys.readouterr().out
        data = load_checkpoint(ws / "avg.mfck")
        assert "sources" in data.meta_dict()

    def test_missing_member_is_io(self, ws, capsys):
        do_train(ws)
        (ws / "run" / "ckpt_000003.mfck").unlink()
        code = main(["avg-ckpt", "--metrics", str(ws / "run" / "metrics.csv"),
                     "--dir", str(ws / "run"), "--out", str(ws / "avg.mfck")])
        assert code == EXIT_IO

    def test_bad_metrics_is_validation(self, ws, capsys):
        (ws / "bad.csv").write_text("wrong,header\n1,2\n")
        code = main(["avg-ckpt", "--metrics", str(ws / "bad.csv"),
                     "--dir", str(ws), "--out", str(ws / "avg.mfck")])
        assert code == EXIT_VALIDATION


class TestVerify:
    def test_fast_suite_passes(self, capsys):
        assert main(["verify", "--fast"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "PASS" in out and "FAIL" not in out

    def test_failure_maps_to_numerical_exit(self, monkeypatch, capsys):
        class Fake:
            passed = False

            def line(self):
                return "FAIL fake_suite: deviation 1.0"

        monkeypatch.setattr(cli, "run_all", lambda fast: [Fake()])
        assert main(["verify", "--fast"]) == EXIT_NUMERICAL
        assert "FAIL fake_suite" in capsys.readouterr().out


class TestBench:
    def test_counts_reported_per_mechanism(self, ws, capsys):
        code = main(["bench", "--arch", str(ws / "m.arch"), "--lens", "16,32"])
        assert code == EXIT_OK
        lines = capsys.readouterr().out.splitlines()
        assert lines[0] == "n,mechanism,score_products,wall_ms"

        def fields(line):
            # mechanism labels may contain commas: conv(3,2)
            left, count, _ = line.rsplit(",", 2)
            n, mech = left.split(",", 1)
            return n, mech, int(count)

        rows = [fields(l) for l in lines[1:]]
        # three distinct mechanisms in the file, two lengths
        assert len(rows) == 6
        assert ("16", "full", 16 * 16) in rows
        assert ("32", "conv(3,2)", 32 * 16) in rows
        local32 = next(r for r in rows if r[0] == "32" and r[1] == "local(4)")
        assert local32[2] <= 32 * 5

    @pytest.mark.parametrize("lens", ["12,x", "0", ""])
    def test_bad_lens_is_validation(self, ws, lens, capsys):
        assert main(["bench", "--arch", str(ws / "m.arch"),
                     "--lens", lens]) == EXIT_VALIDATION


class TestUsage:
    def test_no_command(self):
        with pytest.raises(SystemExit) as e:
            main([])
        assert e.value.code == EXIT_VALIDATION

    def test_unknown_command(self):
        with pytest.raises(SystemExit) as e:
            main(["transmogrify"])
        assert e.value.code == EXIT_VALIDATION

    def test_missing_required_argument(self):
        with pytest.raises(SystemExit) as e:
            main(["train", "--seed", "0"])
        assert e.value.code == EXIT_VALIDATION

    def test_help_exits_zero(self, capsys):
        with pytest.raises(SystemExit) as e:
            main(["--help"])
        assert e.value.code == 0
        assert "train" in capsys.readouterr().out
