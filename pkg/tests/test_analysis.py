import numpy as np
import pytest

from bifocal.analysis import (beta_matrix, field_alpha_matrix, read_pgm, stay_on_stats, trace_rows,
                              write_matrix, write_pgm, write_trace_tsv)
from bifocal.decoder import DecoderStepTrace
from bifocal.plotting import attention_heatmap


def step(t, beta, alpha, token="x"):
    beta = None if beta is None else np.asarray(beta, float)
    return DecoderStepTrace(t, 5, -0.5, beta, np.asarray(alpha, float), np.asarray(alpha, float),
                            surface=token)


def test_stay_on_single_run():
    s = stay_on_stats(np.array([[0.9, 0.1], [0.8, 0.2], [0.7, 0.3]]))
    assert (s.mean_run, s.revisit_fraction, s.runs, s.visited) == (3.0, 0.0, 1, 1)


def test_stay_on_revisit():
    # focus sequence 0 0 1 0 2 -> runs [0, 1, 0, 2]; field 0 revisited
    focus = [0, 0, 1, 0, 2]
    s = stay_on_stats(np.eye(3)[focus])
    assert s.mean_run == pytest.approx(5 / 4)
    assert s.revisit_fraction == pytest.approx(1 / 3)


def test_stay_on_tie_goes_low():
    s = stay_on_stats(np.array([[0.5, 0.5], [0.5, 0.5]]))
    assert s.runs == 1


def test_stay_on_empty():
    assert stay_on_stats(np.zeros((0, 3))).runs == 0


def test_beta_matrix():
    traces = [step(1, [0.2, 0.8], [1.0]), step(2, [0.6, 0.4], [1.0])]
    assert beta_matrix(traces).tolist() == [[0.2, 0.8], [0.6, 0.4]]
    with pytest.raises(ValueError):
        beta_matrix([step(1, None, [1.0])])


def test_field_alpha_matrix_drops_delimiters():
    traces = [step(1, None, [0.1, 0.3, 0.2, 0.05, 0.35])]
    m = field_alpha_matrix(traces, np.array([-1, 0, 0, -1, 1]), 2)
    np.testing.assert_allclose(m, [[0.5, 0.35]])


def test_trace_rows(tmp_path):
    traces = [step(1, [0.25, 0.75], [0.5, 0.5], token="ada")]
    row = trace_rows(traces, example=3)[0].split("\t")
    assert row[:6] == ["3", "1", "ada", "-0.5", "0.25,0.75", "0.5,0.5"]
    path = tmp_path / "t.tsv"
    write_trace_tsv(path, [traces, traces])
    lines = path.read_text().splitlines()
    assert lines[0].startswith("example\tt\ttoken") and len(lines) == 3


def test_write_matrix(tmp_path):
    path = tmp_path / "m.tsv"
    write_matrix(path, np.array([[0.5, 0.5]]), ["1:ada"], ["name", "job"])
    assert path.read_text() == "step\tname\tjob\n1:ada\t0.5\t0.5\n"


def test_pgm_round_trip(tmp_path):
    path = tmp_path / "m.pgm"
    write_pgm(path, np.array([[1.0, 0.0], [0.5, 0.25]]), cell=2)
    px = read_pgm(path)
    assert px.shape == (4, 4)
    assert px[0, 0] == 0 and px[0, 2] == 255 and px[2, 0] == 128 and px[3, 3] == 191
    with pytest.raises(ValueError):
        write_pgm(path, np.zeros((0, 2)))


def test_png_heatmap(tmp_path):
    path = tmp_path / "h.png"
    attention_heatmap(path, np.array([[0.9, 0.1], [0.2, 0.8]]), ["ada", "."], ["name", "job"], "t")
    assert path.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    with pytest.raises(ValueError):
        attention_heatmap(path, np.zeros((0, 2)), [], ["a", "b"])
