import json
import subprocess
import sys

import pytest

from contextbank.cli import build_parser, main
from contextbank.membank import read_bank

TINY = """
[trace]
n_cameras = 2
n_test_cameras = 1
duration_days = 2.0

[pretrain]
steps = 10
clips_per_batch = 8
learning_rate = 1.0

[train]
steps = 5
clips_per_batch = 8
learning_rate = 0.1
"""


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "tiny.toml"
    cfg.write_text(TINY)
    assert run("synth", "gen", "--config", cfg, "--seed", 11, "--out", d / "t.trace") == 0
    assert run("bank", "build", "--trace", d / "t.trace", "--out", d / "banks") == 0
    assert run("train", "--config", cfg, "--trace", d / "t.trace", "--banks", d / "banks", "--mode", "st+lt",
               "--seed", 3, "--out", d / "m.model") == 0
    assert run("train", "--config", cfg, "--trace", d / "t.trace", "--banks", d / "banks", "--mode", "single",
               "--seed", 3, "--out", d / "single.model") == 0
    return d


class TestExitCodes:
    def test_no_command(self, capsys):
        assert run() == 1
        assert "missing subcommand" in capsys.readouterr().err

    def test_unknown_flag_named(self, capsys):
        assert run("synth", "gen", "--seed", 1, "--out", "x", "--bogus-flag") == 1
        assert "--bogus-flag" in capsys.readouterr().err

    def test_missing_required(self):
        assert run("synth", "gen", "--out", "x") == 1

    def test_bad_strategy(self, tmp_path):
        assert run("bank", "build", "--trace", "t", "--strategy", "top_k:0", "--out", tmp_path) == 1

    def test_missing_file_is_data_error(self, tmp_path):
        assert run("bank", "build", "--trace", tmp_path / "none.trace", "--out", tmp_path / "b") == 2

    def test_corrupt_bank(self, pipeline, tmp_path, capsys):
        import shutil
        banks = tmp_path / "banks"
        shutil.copytree(pipeline / "banks", banks)
        target = banks / "cam00.bank"
        raw = bytearray(target.read_bytes())
        raw[len(raw) // 2] ^= 0x40
        target.write_bytes(bytes(raw))
        assert run("bank", "info", "--bank", target) == 2
        assert run("eval", "--model", pipeline / "m.model", "--trace", pipeline / "t.trace", "--banks", banks,
                   "--split", "all") == 2
        assert "error" in capsys.readouterr().err

    def test_corrupt_trace(self, tmp_path):
        bad = tmp_path / "bad.trace"
        bad.write_text("CTXTRACE 1\n{broken")
        assert run("bank", "build", "--trace", bad, "--out", tmp_path / "b") == 2

    def test_unknown_config_key(self, tmp_path):
        cfg = tmp_path / "c.toml"
        cfg.write_text("[trace]\nnot_a_key = 1\n")
        assert run("synth", "gen", "--config", cfg, "--seed", 1, "--out", tmp_path / "t") == 2

    def test_bad_override(self):
        assert run("synth", "gen", "--seed", 1, "--out", "x", "--set", "novalue") == 1

    def test_baseline_needs_single_model(self, pipeline):
        assert run("eval", "--model", pipeline / "m.model", "--trace", pipeline / "t.trace", "--banks",
                   pipeline / "banks", "--mode", "majvote") == 2

    def test_module_entry_point(self):
        out = subprocess.run([sys.executable, "-m", "contextbank.cli", "--help"], capture_output=True, text=True)
        assert out.returncode == 0 and "synth" in out.stdout


SUBCOMMANDS = [["synth", "gen"], ["bank", "build"], ["bank", "info"], ["train"], ["eval"], ["report", "attend"],
               ["report", "fp"], ["bench"]]


class TestHelp:
    @pytest.mark.parametrize("path", SUBCOMMANDS, ids=" ".join)
    def test_every_flag_listed_with_default(self, path, capsys):
        with pytest.raises(SystemExit) as exc:
            main(path + ["--help"])
        assert exc.value.code == 0
        text = capsys.readouterr().out
        parser = build_parser()
        sub = parser
        for name in path:
            sub = next(a for a in sub._actions if a.dest in ("command", "action")).choices[name]
        for action in sub._actions:
            for flag in action.option_strings:
                assert flag in text
            if action.option_strings and action.default not in (None, False, [], "==SUPPRESS=="):
                assert f"(default: {action.default})" in " ".join(text.split())

    def test_defaults_match_config(self):
        from contextbank.config import BankConfig
        parser = build_parser()
        bank = next(a for a in parser._actions if a.dest == "command").choices["bank"]
        build = next(a for a in bank._actions if a.dest == "action").choices["build"]
        defaults = {a.dest: a.default for a in build._actions}
        assert defaults["strategy"] == BankConfig().strategy and defaults["capacity"] == BankConfig().capacity


class TestCommands:
    def test_synth_gen_deterministic(self, pipeline, tmp_path):
        cfg = pipeline / "tiny.toml"
        for name in ("a", "b"):
            assert run("synth", "gen", "--config", cfg, "--seed", 11, "--out", tmp_path / name) == 0
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes() == (pipeline / "t.trace").read_bytes()
        assert run("synth", "gen", "--config", cfg, "--seed", 12, "--out", tmp_path / "c") == 0
        assert (tmp_path / "c").read_bytes() != (tmp_path / "a").read_bytes()

    def test_stride_halves_bank(self, pipeline, tmp_path):
        assert run("bank", "build", "--trace", pipeline / "t.trace", "--strategy", "stride:2",
                   "--out", tmp_path / "s2") == 0
        assert run("bank", "build", "--trace", pipeline / "t.trace", "--strategy", "top_k:1",
                   "--out", tmp_path / "k1") == 0
        for cam in ("cam00", "cam01"):
            half, full = read_bank(tmp_path / "s2" / f"{cam}.bank"), read_bank(tmp_path / "k1" / f"{cam}.bank")
            assert abs(len(half) - len(full) / 2) <= 1

    def test_bank_manifest(self, pipeline):
        doc = json.loads((pipeline / "banks" / "banks.json").read_text())
        assert doc["strategy"] == "top_k:1" and sorted(doc["cameras"]) == ["cam00", "cam01"]

    def test_bank_info(self, pipeline, capsys):
        assert run("bank", "info", "--bank", pipeline / "banks" / "cam00.bank") == 0
        assert "strategy top_k:1" in capsys.readouterr().out

    @pytest.mark.parametrize("mode", ["single", "sf", "st", "lt", "st+lt"])
    def test_eval_modes(self, pipeline, tmp_path, mode):
        model = pipeline / ("single.model" if mode == "single" else "m.model")
        if mode not in ("single", "st+lt"):
            model = tmp_path / "mode.model"
            assert run("train", "--config", pipeline / "tiny.toml", "--trace", pipeline / "t.trace", "--banks",
                       pipeline / "banks", "--mode", mode, "--seed", 1, "--out", model) == 0
        assert run("eval", "--model", model, "--trace", pipeline / "t.trace", "--banks", pipeline / "banks",
                   "--mode", mode, "--out", tmp_path / "r.json") == 0
        doc = json.loads((tmp_path / "r.json").read_text())
        assert 0.0 <= doc["map50"] <= 1.0 and doc["config"]["mode"] == mode

    @pytest.mark.parametrize("mode", ["majvote", "stspatial"])
    def test_eval_baselines(self, pipeline, mode):
        assert run("eval", "--model", pipeline / "single.model", "--trace", pipeline / "t.trace",
                   "--banks", pipeline / "banks", "--mode", mode) == 0

    def test_report_attend_writes_csv_and_png(self, pipeline, tmp_path):
        assert run("report", "attend", "--model", pipeline / "m.model", "--trace", pipeline / "t.trace",
                   "--banks", pipeline / "banks", "--out-dir", tmp_path) == 0
        lines = (tmp_path / "attention_timeline.csv").read_text().splitlines()
        assert lines[0] == "bin_lo,bin_hi,count" and len(lines) == 145
        assert (tmp_path / "attention_timeline.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"

    def test_report_fp_writes_csv_and_png(self, pipeline, tmp_path):
        assert run("report", "fp", "--model", pipeline / "m.model", "--trace", pipeline / "t.trace",
                   "--banks", pipeline / "banks", "--compare-model", pipeline / "single.model",
                   "--out-dir", tmp_path) == 0
        header = (tmp_path / "fp_histogram.csv").read_text().splitlines()[0]
        assert header == "bin_lo,bin_hi,fp_main,fp_compare"
        assert (tmp_path / "fp_histogram.png").exists()


def outputs(directory):
    return {p.relative_to(directory).as_posix(): p.read_bytes() for p in sorted(directory.rglob("*")) if p.is_file()}


class TestDeterminism:
    """Every subcommand run twice on the same inputs writes the same bytes."""

    def commands(self, d, out):
        cfg, trace, banks = d / "tiny.toml", d / "t.trace", d / "banks"
        return [
            ("synth", "gen", "--config", cfg, "--seed", 11, "--out", out / "t.trace"),
            ("bank", "build", "--trace", trace, "--strategy", "top_k:2", "--out", out / "banks"),
            ("train", "--config", cfg, "--trace", trace, "--banks", banks, "--mode", "st+lt", "--seed", 5,
             "--out", out / "m.model"),
            ("eval", "--model", d / "m.model", "--trace", trace, "--banks", banks, "--out", out / "r.json",
             "--detections", out / "dets.txt"),
            ("eval", "--model", d / "single.model", "--trace", trace, "--banks", banks, "--mode", "stspatial",
             "--out", out / "r_sp.json"),
            ("report", "attend", "--model", d / "m.model", "--trace", trace, "--banks", banks,
             "--out-dir", out / "attend"),
            ("report", "fp", "--model", d / "m.model", "--trace", trace, "--banks", banks, "--out-dir", out / "fp"),
            ("bench", "--config", cfg, "--set", "trace.n_cameras=3", "--set", "train.steps=2",
             "--out-dir", out / "bench"),
            ("bank", "info", "--bank", banks / "cam00.bank"),
        ]

    def test_byte_identical(self, pipeline, tmp_path, capsys):
        results = []
        for name in ("one", "two"):
            out = tmp_path / name
            out.mkdir()
            stdout = []
            for cmd in self.commands(pipeline, out):
                assert run(*cmd) == 0, cmd
                stdout.append(capsys.readouterr().out.replace(str(out), "<out>"))
            results.append((outputs(out), stdout))
        (files_a, out_a), (files_b, out_b) = results
        assert sorted(files_a) == sorted(files_b)
        for k in files_a:
            assert files_a[k] == files_b[k], k
        # timing lines from the bench progress are the only stdout that may differ
        strip = lambda lines: [ln for text in lines for ln in text.splitlines() if not ln.endswith("s)")
                               and "pretraining" not in ln]
        assert strip(out_a) == strip(out_b)
