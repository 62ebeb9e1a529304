"""GRU cells, masked (bi)directional runners and embedding lookup."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

INIT_SCALE = 0.08


def uniform_init(rng: np.random.Generator, *shape: int, scale: float = INIT_SCALE) -> np.ndarray:
    return rng.uniform(-scale, scale, size=shape)


@dataclass
class GruParams:
    """Weights of one GRU cell.

    Gate blocks are packed column-wise in the order update (z), reset (r),
    candidate (n): ``w_x`` is (d_in, 3h), ``w_h`` is (h, 3h), ``b`` is (3h,).
    """

    w_x: Tensor
    w_h: Tensor
    b: Tensor

    @property
    def d_in(self) -> int:
        return self.w_x.shape[0]

    @property
    def d_h(self) -> int:
        return self.w_h.shape[0]

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int, d_h: int) -> GruParams:
        return cls(Tensor(uniform_init(rng, d_in, 3 * d_h), requires_grad=True),
                   Tensor(uniform_init(rng, d_h, 3 * d_h), requires_grad=True),
                   Tensor(uniform_init(rng, 3 * d_h), requires_grad=True))


class _Cell:
    """A GRU cell with its recurrent weight blocks sliced once per run."""

    def __init__(self, p: GruParams):
        h = p.d_h
        self.p = p
        self.h = h
        self.w_hzr = p.w_h[:, :2 * h]
        self.w_hn = p.w_h[:, 2 * h:]

    def project(self, x: Tensor) -> Tensor:
        return ad.matmul(x, self.p.w_x) + self.p.b

    def step(self, xp: Tensor, h_prev: Tensor) -> Tensor:
        return gru_cell(xp, ad.matmul(h_prev, self.w_hzr), h_prev, self.w_hn)


def gru_cell(xp: Tensor, hzr: Tensor, h_prev: Tensor, w_hn: Tensor) -> Tensor:
    """GRU update from precomputed projections.

    ``xp`` = x W_x + b (..., 3h) and ``hzr`` = h_prev W_h[:, :2h] (..., 2h).
    """
    h = h_prev.shape[-1]
    zr = ad.sigmoid(xp[..., :2 * h] + hzr)
    z = zr[..., :h]
    r = zr[..., h:]
    n = ad.tanh(xp[..., 2 * h:] + ad.matmul(r * h_prev, w_hn))
    return (1.0 - z) * n + z * h_prev


def _check_dims(op: str, p: GruParams, x: Tensor, h: Tensor) -> None:
    if x.shape[-1] != p.d_in or h.shape[-1] != p.d_h or x.shape[:-1] != h.shape[:-1]:
        raise ShapeError(op, x.shape, h.shape, p.w_x.shape, p.w_h.shape)


def gru_step(params: GruParams, x: Tensor, h_prev: Tensor) -> Tensor:
    """One GRU update; ``x`` is (..., d_in) and ``h_prev`` is (..., d_h)."""
    _check_dims("gru_step", params, x, h_prev)
    cell = _Cell(params)
    return cell.step(cell.project(x), h_prev)


def gru_run(params: GruParams, xs: Tensor, mask: np.ndarray | None = None,
            h0: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Run a GRU left to right over ``xs`` of shape (B, T, d_in).

    Where ``mask[b, t]`` is False the state is carried over unchanged, so the
    final state is the state after each row's last valid position.
    Returns (states (B, T, d_h), final state (B, d_h)).
    """
    B, T = xs.shape[0], xs.shape[1]
    if T == 0:
        raise ShapeError("gru_run (empty sequence)", xs.shape)
    h = h0 if h0 is not None else Tensor(np.zeros((B, params.d_h)))
    _check_dims("gru_run", params, xs[:, 0], h)
    cell = _Cell(params)
    xp = cell.project(xs)
    states = []
    for t in range(T):
        h_new = cell.step(xp[:, t], h)
        if mask is not None and not mask[:, t].all():
            m = np.broadcast_to(mask[:, t, None].astype(np.float64), h_new.shape)
            h_new = m * h_new + (1.0 - m) * h
        h = h_new
        states.append(h)
    return ad.stack(states, axis=1), h


def reverse_index(lengths: np.ndarray, T: int) -> np.ndarray:
    """Per-row index map that reverses each row's first ``lengths[b]`` positions."""
    t = np.arange(T)[None, :]
    L = np.asarray(lengths)[:, None]
    return np.where(t < L, L - 1 - t, t)


def bigru_run(p_fwd: GruParams, p_bwd: GruParams, xs: Tensor,
              lengths: np.ndarray | None = None) -> tuple[Tensor, Tensor, Tensor]:
    """Bidirectional GRU over padded rows of ``xs`` (B, T, d_in).

    A 2-D ``xs`` (T, d_in) is treated as a single row.  Returns the
    per-position concatenation ``[fwd; bwd]`` (B, T, 2h) and the two final
    states: forward after the last valid element, backward after the first.
    """
    single = xs.ndim == 2
    if single:
        xs = ad.reshape(xs, (1,) + xs.shape)
    B, T = xs.shape[0], xs.shape[1]
    if T == 0:
        raise ShapeError("bigru_run (empty sequence)", xs.shape)
    if lengths is None:
        lengths = np.full(B, T)
        mask = None
    else:
        lengths = np.asarray(lengths)
        if lengths.min() < 1:
            raise ShapeError("bigru_run (empty sequence)", tuple(lengths))
        mask = np.arange(T)[None, :] < lengths[:, None]
        if mask.all():
            mask = None
    fwd, fwd_last = gru_run(p_fwd, xs, mask)
    if mask is None:
        rev = (slice(None), slice(None, None, -1))
    else:
        rows = np.arange(B)[:, None]
        rev = (rows, reverse_index(lengths, T))
    bwd_rev, bwd_last = gru_run(p_bwd, xs[rev], mask)
    out = ad.concat([fwd, bwd_rev[rev]], axis=-1)
    if single:
        out = ad.reshape(out, out.shape[1:])
        fwd_last = ad.reshape(fwd_last, fwd_last.shape[1:])
        bwd_last = ad.reshape(bwd_last, bwd_last.shape[1:])
    return out, fwd_last, bwd_last


# -- embeddings -------------------------------------------------------------

PAD_ID = 0


def init_embeddings(rng: np.random.Generator, vocab_size: int, dim: int) -> Tensor:
    table = uniform_init(rng, vocab_size, dim)
    table[PAD_ID] = 0.0
    return Tensor(table, requires_grad=True)


def embed(table: Tensor, ids) -> Tensor:
    """Look up rows; the PAD row stays zero and never receives gradient."""
    return ad.take_rows(table, ids, frozen_row=PAD_ID)


def read_embedding_file(path: str | Path) -> dict[str, np.ndarray]:
    """Parse ``word v1 v2 ... v_d`` lines into a dict."""
    vectors: dict[str, np.ndarray] = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split(" ")
            if len(parts) < 2:
                continue
            vec = np.array([float(v) for v in parts[1:]])
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise ValueError(f"{path}:{lineno}: expected {dim} values, got {vec.size}")
            vectors[parts[0]] = vec
    return vectors


def load_pretrained(table: Tensor, itos: list[str], path: str | Path) -> int:
    """Overwrite rows of ``table`` for words present in an embedding file.

    Returns the number of rows replaced.
    """
    vectors = read_embedding_file(path)
    hits = 0
    for i, word in enumerate(itos):
        if i == PAD_ID or word not in vectors:
            continue
        vec = vectors[word]
        if vec.size != table.shape[1]:
            raise ValueError(f"embedding file dim {vec.size} != model embed size {table.shape[1]}")
        table.data[i] = vec
        hits += 1
    return hits
