import subprocess
import sys

import numpy as np
import pytest

from glyphstyle.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, build_parser, run
from glyphstyle.glyphsynth import load_png

TOY = "g1\tLR\ta,b\ng2\tLR\tb,c\ng3\tLR\tc,d\ng4\tLR\ta,b\ng5\tLR\te,f\n" + "".join(f"{x}\tatom\n" for x in "abcdef")
SHORT = ["--iterations", "2", "--batch-size", "2", "--log-every", "1"]


@pytest.fixture()
def toy(tmp_path):
    p = tmp_path / "toy.tsv"
    p.write_text(TOY, encoding="utf-8")
    return str(p)


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    out = tmp_path_factory.mktemp("ck")
    assert run(["train", "--out-dir", str(out), *SHORT]) == EXIT_OK
    return out


def test_select_refs_toy_example(toy, capsys):
    assert run(["select-refs", "--table", toy, "--n-ref", "3", "--min-new", "2"]) == EXIT_OK
    assert capsys.readouterr().out.strip() == "[g1,g3,g5]"


def test_decompose_prints_components(toy, capsys):
    assert run(["decompose", "--table", toy, "--glyphs", "g3"]) == EXIT_OK
    assert capsys.readouterr().out == "g3\t1\tc:LR,d:LR\n"


def test_map_refs_writes_mapping(toy, tmp_path, capsys):
    out = tmp_path / "m"
    assert run(["map-refs", "--table", toy, "--refs", "g1,g3,g5", "--contents", "g2", "--k", "2", "--out-dir", str(out)]) == 0
    assert capsys.readouterr().out == "g2\tg1,g3\n"
    assert (out / "mapping.tsv").read_text() == "g2\tg1,g3\n"
    assert "mapping.tsv" in (out / "manifest.tsv").read_text()


def test_missing_table_exits_2(tmp_path, capsys):
    missing = str(tmp_path / "nowhere.tsv")
    assert run(["select-refs", "--table", missing]) == EXIT_DATA
    assert missing in capsys.readouterr().err


def test_bad_table_exits_2(tmp_path):
    p = tmp_path / "bad.tsv"
    p.write_text("g\tLR\tg,a\na\tatom\n", encoding="utf-8")
    assert run(["decompose", "--table", str(p)]) == EXIT_DATA


@pytest.mark.parametrize("argv", [["frobnicate"], [], ["select-refs", "--n-ref", "x"], ["generate"]])
def test_usage_errors_exit_1(argv):
    assert run(argv) == EXIT_USAGE


def _subcommands():
    parser = build_parser()
    action = next(a for a in parser._actions if a.dest == "command")
    return action.choices


@pytest.mark.parametrize("name", ["decompose", "select-refs", "map-refs", "synth-data", "train", "generate", "eval", "attn-viz"])
def test_help_lists_every_flag_with_defaults(name):
    sub = _subcommands()[name]
    text = sub.format_help()
    for action in sub._actions:
        for opt in action.option_strings:
            assert opt in text
        if action.option_strings and action.default not in (None, False, "==SUPPRESS==") and action.help:
            assert "default" in text
    assert "--seed" in text


def test_help_via_subprocess():
    res = subprocess.run([sys.executable, "-m", "glyphstyle.cli", "train", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "--lambda-l1" in res.stdout and "0.1" in res.stdout


def test_synth_data_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert run(["synth-data", "--out-dir", str(d), "--n-styles", "2", "--seed", "3"]) == EXIT_OK
    assert (a / "manifest.tsv").read_bytes() == (b / "manifest.tsv").read_bytes()
    assert (a / "meta.tsv").exists()


def test_train_config_file_merge(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("iterations = 50\nuse_sr = off\nlog_every = 1\n")
    out = tmp_path / "t"
    assert run(["train", "--config", str(cfg), "--iterations", "1", "--batch-size", "2", "--out-dir", str(out)]) == EXIT_OK
    text = (out / "config.txt").read_text()
    assert "iterations = 1\n" in text and "use_sr = False\n" in text


def test_train_is_byte_identical(tmp_path, checkpoint):
    again = tmp_path / "again"
    assert run(["train", "--out-dir", str(again), *SHORT]) == EXIT_OK
    for name in ("train_log.tsv", "checkpoint.bin", "metrics.tsv", "manifest.tsv"):
        assert (again / name).read_bytes() == (checkpoint / name).read_bytes()


def test_generate_happy_path_and_bit_stable(tmp_path, checkpoint, capsys):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        argv = ["generate", "--checkpoint", str(checkpoint / "checkpoint.bin"), "--content", "明", "--style", "s1"]
        assert run(argv + ["--out-dir", str(out)]) == EXIT_OK
        files = sorted(p.name for p in out.iterdir())
        assert files == ["manifest.tsv", "s1_u660e.png"]
        outs.append((out / "s1_u660e.png").read_bytes())
    assert outs[0] == outs[1]
    img = load_png(tmp_path / "a" / "s1_u660e.png")
    assert img.shape == (32, 32) and 0 <= img.min() and img.max() <= 1


def test_generate_unknown_style_and_glyph(tmp_path, checkpoint):
    ck = str(checkpoint / "checkpoint.bin")
    assert run(["generate", "--checkpoint", ck, "--content", "明", "--style", "s99", "--out-dir", str(tmp_path)]) == EXIT_DATA
    assert run(["generate", "--checkpoint", ck, "--content", "木", "--style", "s1", "--out-dir", str(tmp_path)]) == EXIT_DATA
    assert run(["generate", "--checkpoint", str(tmp_path / "none.bin"), "--content", "明", "--style", "s1", "--out-dir", str(tmp_path)]) == EXIT_DATA


def test_eval_writes_metrics(tmp_path, checkpoint):
    out = tmp_path / "e"
    argv = ["eval", "--checkpoint", str(checkpoint / "checkpoint.bin"), "--split", "ufuc", "sfuc", "--save-images", "--out-dir", str(out)]
    assert run(argv) == EXIT_OK
    text = (out / "metrics.tsv").read_text()
    assert text.count("style\tsplit") == 2 and "\tufuc\t" in text and "\tsfuc\t" in text
    assert any((out / "images" / "ufuc").rglob("*.png"))


@pytest.mark.parametrize("probe", ["point:1,2", "stroke:0,0,3,3", "box:0,0,2,2", "component:日"])
def test_attn_viz_exports(tmp_path, checkpoint, probe, capsys):
    out = tmp_path / "v"
    argv = ["attn-viz", "--checkpoint", str(checkpoint / "checkpoint.bin"), "--content", "明", "--style", "s0",
            "--probe", probe, "--out-dir", str(out)]
    assert run(argv) == EXIT_OK
    raw = np.load(out / "s0_u660e_attention.npy")
    assert raw.shape == (4, 12) and np.all(raw >= 0)
    n = {"point:1,2": 1, "stroke:0,0,3,3": 4, "box:0,0,2,2": 4}.get(probe)
    if n is not None:
        assert raw.sum() == pytest.approx(8 * n, rel=1e-9)  # summed over 8 heads
    else:
        assert "localization" in capsys.readouterr().out


@pytest.mark.parametrize("probe,code", [("point:9,9", EXIT_DATA), ("blob:1", EXIT_USAGE), ("component:心", EXIT_DATA)])
def test_attn_viz_bad_probes(tmp_path, checkpoint, probe, code):
    argv = ["attn-viz", "--checkpoint", str(checkpoint / "checkpoint.bin"), "--content", "明", "--style", "s0",
            "--probe", probe, "--out-dir", str(tmp_path)]
    assert run(argv) == code
