"""Attention trace dumps, field-level heatmap matrices and stay-on statistics."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .decoder import DecoderStepTrace

TRACE_HEADER = ("t", "token", "logprob", "beta", "alpha_fused", "f_mean", "gamma_mean")


def _fmt(x: float) -> str:
    return "nan" if not np.isfinite(x) else f"{x:.6g}"


def _vec(v: np.ndarray | None) -> str:
    return "" if v is None else ",".join(f"{x:.6g}" for x in v)


def trace_rows(traces: Sequence[DecoderStepTrace], example: int = 0) -> list[str]:
    """One tab-separated record per decoding step (no header)."""
    rows = []
    for tr in traces:
        token = tr.surface if tr.surface is not None else str(tr.token)
        rows.append("\t".join([str(example), str(tr.t), token, _fmt(tr.logprob), _vec(tr.beta),
                               _vec(tr.alpha_fused), _fmt(tr.f_mean), _fmt(tr.gamma_mean)]))
    return rows


def write_trace_tsv(path: str | Path, all_traces: Sequence[Sequence[DecoderStepTrace]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("example\t" + "\t".join(TRACE_HEADER) + "\n")
        for i, traces in enumerate(all_traces):
            for row in trace_rows(traces, i):
                fh.write(row + "\n")


def beta_matrix(traces: Sequence[DecoderStepTrace]) -> np.ndarray:
    """Macro weights as a (steps, fields) matrix."""
    if not traces:
        return np.zeros((0, 0))
    if traces[0].beta is None:
        raise ValueError("traces carry no macro attention (flat model)")
    return np.stack([tr.beta for tr in traces])


def field_alpha_matrix(traces: Sequence[DecoderStepTrace], field_of: np.ndarray,
                       n_fields: int) -> np.ndarray:
    """Fused value weights summed per field, (steps, fields).

    Positions with a negative ``field_of`` (such as delimiters) are dropped.
    """
    out = np.zeros((len(traces), n_fields))
    for i, tr in enumerate(traces):
        fo = np.asarray(field_of)[:tr.alpha_fused.size]
        keep = fo >= 0
        np.add.at(out[i], fo[keep], tr.alpha_fused[keep])
    return out


def write_matrix(path: str | Path, matrix: np.ndarray, row_labels: Sequence[str],
                 col_labels: Sequence[str]) -> None:
    """Dense matrix as TSV with a header of column labels."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("step\t" + "\t".join(col_labels) + "\n")
        for label, row in zip(row_labels, matrix):
            fh.write(label + "\t" + "\t".join(f"{x:.6g}" for x in row) + "\n")


def write_pgm(path: str | Path, matrix: np.ndarray, cell: int = 8) -> None:
    """Binary grayscale PGM; weight 1 is black, 0 is white, each cell ``cell`` px."""
    m = np.clip(np.asarray(matrix, dtype=np.float64), 0.0, 1.0)
    if m.ndim != 2 or m.size == 0:
        raise ValueError("heatmap needs a nonempty 2-D matrix")
    pixels = np.round(255 * (1.0 - m)).astype(np.uint8)
    pixels = np.kron(pixels, np.ones((cell, cell), dtype=np.uint8))
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][:w * h], dtype=np.uint8).reshape(h, w)


@dataclass
class StayOnStats:
    mean_run: float          # mean consecutive steps with an unchanged argmax field
    revisit_fraction: float  # fraction of visited fields attended again after being left
    runs: int
    visited: int


def stay_on_stats(matrix: np.ndarray) -> StayOnStats:
    """Stay-on and never-look-back summary of a (steps, fields) weight matrix.

    The focus at each step is the argmax field (ties to the lowest index).
    """
    m = np.asarray(matrix)
    if m.shape[0] == 0:
        return StayOnStats(0.0, 0.0, 0, 0)
    focus = np.argmax(m, axis=1)
    runs = [int(focus[0])]
    for f in focus[1:]:
        if f != runs[-1]:
            runs.append(int(f))
    visited = set(runs)
    revisited = {f for f in visited if runs.count(f) > 1}
    return StayOnStats(len(focus) / len(runs), len(revisited) / len(visited), len(runs), len(visited))
