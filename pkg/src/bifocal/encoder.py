"""Infobox encoding: per-field value bi-GRUs, a contextual bi-GRU across
fields, and the flat single-sequence encoder used by the basic seq2seq model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import BOS_ID, EOS_ID, PAD_ID, Example, Vocabulary
from .layers import bigru_run, embed
from .model import Model


@dataclass
class FlatToken:
    surface: str
    id: int
    is_field: bool
    field_index: int


def flatten(ex: Example, vocab: Vocabulary) -> list[FlatToken]:
    """``[name] v1 v2 [field] ...`` with field-name delimiters.

    Delimiter ids come from the field-name vocabulary, value ids from the word
    vocabulary (unknown words map to UNK; the surface string is kept).
    """
    out = []
    for i, (name, vals) in enumerate(ex.fields):
        out.append(FlatToken(name, vocab.field_id(name), True, i))
        out.extend(FlatToken(v, vocab.id(v), False, i) for v in vals)
    return out


def _pad(rows: list[list[int]], fill: int = 0) -> tuple[np.ndarray, np.ndarray]:
    width = max(1, max((len(r) for r in rows), default=1))
    arr = np.full((len(rows), width), fill, dtype=np.int64)
    mask = np.zeros((len(rows), width), dtype=bool)
    for i, r in enumerate(rows):
        arr[i, :len(r)] = r
        mask[i, :len(r)] = True
    return arr, mask


class Batch:
    """Index arrays for a list of examples, padded to the longest member."""

    def __init__(self, examples: list[Example], vocab: Vocabulary, with_targets: bool = True):
        if not examples:
            raise ValueError("empty batch")
        self.examples = examples
        self.size = len(examples)
        self.field_names = [[name for name, _ in ex.fields] for ex in examples]
        if any(not ex.fields for ex in examples):
            raise ValueError("every infobox needs at least one field")

        # structured view: one value sequence per (example, field)
        seqs, seq_of, spans = [], [], []
        positions, field_of, surfaces = [], [], []
        for b, ex in enumerate(examples):
            seq_row, span_row, pos_row, fo_row = [], [], [], []
            start = 0
            for i, (_, vals) in enumerate(ex.fields):
                seq_row.append(len(seqs))
                pos_row.extend((len(seqs), k) for k in range(len(vals)))
                fo_row.extend([i] * len(vals))
                span_row.append((start, start + len(vals)))
                start += len(vals)
                seqs.append(vocab.ids(vals))
            seq_of.append(seq_row)
            spans.append(span_row)
            positions.append(pos_row)
            field_of.append(fo_row)
            surfaces.append(ex.values)
        self.seq_ids, seq_mask = _pad(seqs)
        self.seq_lengths = seq_mask.sum(axis=1)
        self.field_seq, self.field_mask = _pad(seq_of)
        self.field_ids, _ = _pad([[vocab.field_id(n) for n in names] for names in self.field_names])
        self.field_of, self.value_mask = _pad(field_of)
        W = self.value_mask.shape[1]
        self.value_pos = np.zeros((self.size, W, 2), dtype=np.int64)
        for b, row in enumerate(positions):
            if row:
                self.value_pos[b, :len(row)] = row
        self.field_spans = spans
        self.value_surfaces = surfaces

        # flat view for the basic seq2seq encoder
        flat = [flatten(ex, vocab) for ex in examples]
        self.flat_word, self.flat_mask = _pad([[PAD_ID if t.is_field else t.id for t in f] for f in flat])
        self.flat_field, _ = _pad([[t.id if t.is_field else PAD_ID for t in f] for f in flat])
        self.flat_field_of, _ = _pad([[t.field_index for t in f] for f in flat])
        self.flat_copyable, _ = _pad([[0 if t.is_field else 1 for t in f] for f in flat])
        self.flat_copyable = self.flat_copyable.astype(bool)
        self.flat_surfaces = [[t.surface for t in f] for f in flat]

        if with_targets:
            desc = [vocab.ids(ex.description) for ex in examples]
            self.dec_in, _ = _pad([[BOS_ID] + d for d in desc])
            self.dec_out, self.dec_mask = _pad([d + [EOS_ID] for d in desc])


@dataclass
class EncodedInfobox:
    """Encoder output for a batch.

    ``value_reps`` covers every attendable position: the infobox values in
    flattened order (bifocal encoder) or the whole flattened sequence
    including delimiters (flat encoder).  ``copyable`` marks positions whose
    surface string may replace an UNK.
    """

    value_reps: Tensor
    value_mask: np.ndarray
    field_of: np.ndarray
    copyable: np.ndarray
    surfaces: list[list[str]]
    field_names: list[list[str]]
    field_reps: Tensor | None = None
    field_mask: np.ndarray | None = None
    field_spans: list[list[tuple[int, int]]] | None = None
    summary: Tensor | None = None
    field_proj: Tensor | None = None
    value_proj: Tensor | None = None
    session: object | None = None    # decoder-side parameter cache, see decoder.prepare

    @property
    def batch_size(self) -> int:
        return self.value_reps.shape[0]

    def select(self, idx: np.ndarray) -> EncodedInfobox:
        """Rows ``idx`` as constants (inference only)."""
        idx = np.asarray(idx)
        t = lambda x: None if x is None else Tensor(x.data[idx])  # noqa: E731
        a = lambda x: None if x is None else x[idx]  # noqa: E731
        lst = lambda x: None if x is None else [x[i] for i in idx]  # noqa: E731
        return EncodedInfobox(t(self.value_reps), a(self.value_mask), a(self.field_of),
                              a(self.copyable), lst(self.surfaces), lst(self.field_names),
                              t(self.field_reps), a(self.field_mask), lst(self.field_spans),
                              t(self.summary), t(self.field_proj), t(self.value_proj),
                              self.session)


def encode_values(batch: Batch, model: Model) -> tuple[Tensor, Tensor, Tensor]:
    """Bi-GRU over each field's values.

    Returns (value_reps (B, W, 2h) in flattened order, per-field final state
    ``[fwd_last; bwd_first]`` (N_fields, 2h), per-position states (N_fields, L, 2h)).
    """
    emb = embed(model.params["emb.word"], batch.seq_ids)
    states, fwd_last, bwd_last = bigru_run(model.gru("enc.value_fwd"), model.gru("enc.value_bwd"),
                                           emb, batch.seq_lengths)
    pos = batch.value_pos
    value_reps = states[pos[..., 0], pos[..., 1]]
    finals = ad.concat([fwd_last, bwd_last], axis=-1)
    return value_reps, finals, states


def encode_fields(batch: Batch, model: Model, finals: Tensor) -> Tensor:
    """Field representations h^g (B, M, d_field)."""
    c = model.config
    seq = batch.field_seq
    parts = []
    if c.field_rep in ("concat", "name"):
        parts.append(embed(model.params["emb.field"], batch.field_ids))
    if c.field_rep in ("concat", "values"):
        parts.append(finals[seq])
    inputs = parts[0] if len(parts) == 1 else ad.concat(parts, axis=-1)
    if not c.field_context:
        return inputs
    lengths = batch.field_mask.sum(axis=1)
    reps, _, _ = bigru_run(model.gru("enc.field_fwd"), model.gru("enc.field_bwd"), inputs, lengths)
    return reps


def _masked_mean(reps: Tensor, mask: np.ndarray) -> Tensor:
    w = mask / mask.sum(axis=1, keepdims=True)
    w = np.broadcast_to(w[..., None], reps.shape)
    return ad.tsum(reps * w, axis=1)


def encode(batch: Batch, model: Model) -> EncodedInfobox:
    c = model.config
    if c.bifocal:
        value_reps, finals, _ = encode_values(batch, model)
        field_reps = encode_fields(batch, model, finals)
        summary = _masked_mean(field_reps, batch.field_mask)
        return EncodedInfobox(value_reps, batch.value_mask, batch.field_of,
                              batch.value_mask.copy(), batch.value_surfaces, batch.field_names,
                              field_reps, batch.field_mask, batch.field_spans, summary)
    words = embed(model.params["emb.word"], batch.flat_word)
    names = embed(model.params["emb.field"], batch.flat_field)
    lengths = batch.flat_mask.sum(axis=1)
    reps, _, _ = bigru_run(model.gru("enc.flat_fwd"), model.gru("enc.flat_bwd"), words + names, lengths)
    summary = _masked_mean(reps, batch.flat_mask)
    return EncodedInfobox(reps, batch.flat_mask, batch.flat_field_of,
                          batch.flat_copyable & batch.flat_mask, batch.flat_surfaces,
                          batch.field_names, summary=summary)
