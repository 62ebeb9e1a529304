import json
import subprocess
import sys

import pytest

from bifocal.cli import run
from bifocal.data import read_examples


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def overfit(workdir):
    """A small synthetic set and a model trained to reproduce it."""
    data = workdir / "d.tsv"
    assert run(["synth", "--seed", "3", "--n", "6", "--out", str(data), "--names", "4",
                "--years", "3", "--distractors", "1"]) == 0
    model = workdir / "m.npz"
    assert run(["train", "--train", str(data), "--out", str(model), "--hidden", "16",
                "--embed", "8", "--lr", "0.02", "--epochs", "300", "--patience", "300",
                "--batch-size", "6", "--target-loss", "0.005", "--no-timing"]) == 0
    return data, model


def test_synth_is_deterministic(workdir):
    a, b = workdir / "a.tsv", workdir / "b.tsv"
    for path in (a, b):
        assert run(["synth", "--seed", "11", "--n", "40", "--out", str(path), "--split"]) == 0
    assert a.read_bytes() == b.read_bytes()
    parts = [len(read_examples(f"{a}.{s}")) for s in ("train", "valid", "test")]
    assert sum(parts) == 40


def test_unknown_flag_exits_one(capsys):
    assert run(["synth", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err


def test_missing_command_exits_one(capsys):
    assert run([]) == 1


def test_missing_input_is_data_error(workdir, capsys):
    assert run(["train", "--train", str(workdir / "nope.tsv"), "--out", str(workdir / "x.npz"),
                "--epochs", "1", "--patience", "1"]) == 2
    assert "data error" in capsys.readouterr().err


def test_bad_config_exits_one(workdir):
    cfg = workdir / "bad.json"
    cfg.write_text(json.dumps({"hidden": 8, "colour": "blue"}))
    assert run(["train", "--train", "x", "--out", "y", "--config", str(cfg)]) == 1
    assert run(["train", "--train", "x", "--out", "y", "--hidden", "0"]) == 1


def test_train_writes_log(overfit):
    _, model = overfit
    lines = open(str(model) + ".log.tsv").read().splitlines()
    assert lines[0] == "epoch\ttrain_loss\tvalid_loss\tseconds"
    assert all(line.endswith("\t-") for line in lines[1:])


def test_generate_then_evaluate(overfit, workdir, capsys):
    data, model = overfit
    hyp = workdir / "hyp.txt"
    assert run(["generate", "--model", str(model), "--input", str(data), "--out", str(hyp)]) == 0
    assert len(hyp.read_text().splitlines()) == 6
    capsys.readouterr()
    assert run(["evaluate", "--hyp", str(hyp), "--ref", str(data)]) == 0
    out = capsys.readouterr().out.split()
    assert out[0::2] == ["BLEU-4", "NIST-4", "ROUGE-4"]
    assert float(out[1]) >= 95.0


def test_generate_accepts_bare_infoboxes(overfit, workdir, capsys):
    _, model = overfit
    bare = workdir / "bare.tsv"
    bare.write_text("name|ada lovelace\toccupation|writer\n")
    capsys.readouterr()
    assert run(["generate", "--model", str(model), "--input", str(bare), "--beam", "2"]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 1


def test_evaluate_length_mismatch(overfit, workdir):
    data, _ = overfit
    hyp = workdir / "short.txt"
    hyp.write_text("a b c\n")
    assert run(["evaluate", "--hyp", str(hyp), "--ref", str(data)]) == 2


def test_bad_decode_args(overfit):
    data, model = overfit
    assert run(["generate", "--model", str(model), "--input", str(data), "--beam", "0"]) == 1


def test_inspect_attention(overfit, workdir, capsys):
    data, model = overfit
    out = workdir / "inspect"
    capsys.readouterr()
    assert run(["inspect-attention", "--model", str(model), "--input", str(data),
                "--out-dir", str(out), "--limit", "2", "--pgm"]) == 0
    summary = capsys.readouterr().out.split()
    assert summary[0] == "examples" and summary[1] == "2"
    rows = (out / "stay_on.tsv").read_text().splitlines()
    assert rows[0] == "example\tsteps\tmean_run\trevisit_fraction\tsource"
    assert len(rows) == 3 and all(r.endswith("\tbeta") for r in rows[1:])
    for i in range(2):
        for kind in ("alpha", "beta"):
            assert (out / f"{kind}_{i}.tsv").exists()
            assert (out / f"{kind}_{i}.pgm").exists()
            assert (out / f"{kind}_{i}.png").read_bytes()[:4] == b"\x89PNG"
    assert (out / "trace.tsv").read_text().startswith("example\tt\ttoken")


def test_finetune_command(overfit, workdir):
    data, model = overfit
    out = workdir / "ft.npz"
    assert run(["finetune", "--model", str(model), "--train", str(data), "--out", str(out),
                "--epochs", "1", "--patience", "1", "--extend-vocab", "--no-timing"]) == 0
    assert out.exists()
    assert run(["finetune", "--model", str(model), "--train", str(data), "--out", str(out),
                "--hidden", "32"]) == 1


def test_import_wikibio_command(workdir):
    from pathlib import Path
    fx = Path(__file__).parent / "fixtures"
    out = workdir / "wb.tsv"
    assert run(["import-wikibio", "--box", str(fx / "five.box"), "--sentences",
                str(fx / "five.sent"), "--nb", str(fx / "five.nb"), "--out", str(out)]) == 0
    assert len(read_examples(out)) == 4


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "bifocal", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "inspect-attention" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "bifocal", "train", "--nope"], capture_output=True,
                          text=True)
    assert proc.returncode == 1 and "usage" in proc.stderr
