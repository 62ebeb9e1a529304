"""GRU decoder over fused contexts: single steps, greedy and beam search,
and UNK copy post-processing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attention import (StepAttention, fuse_attention, macro_attention, micro_attention, project,
                        weighted_sum)
from .autodiff import Tensor
from .data import BOS_ID, EOS_ID, UNK, UNK_ID
from .encoder import EncodedInfobox
from .gating import GatedState, gate_step
from .layers import embed, gru_cell
from .model import Model

DEFAULT_MAX_LEN = 60


@dataclass
class DecoderState:
    s: Tensor                       # (B, hidden)
    prev: np.ndarray                # (B,) previous token ids
    gated: GatedState | None
    t: int = 1

    def select(self, idx: np.ndarray) -> DecoderState:
        idx = np.asarray(idx)
        gated = self.gated.select(idx) if self.gated is not None else None
        return DecoderState(Tensor(self.s.data[idx]), self.prev[idx], gated, self.t)


@dataclass
class DecoderStepTrace:
    """What one example saw while emitting one token."""

    t: int
    token: int
    logprob: float
    beta: np.ndarray | None
    alpha: np.ndarray
    alpha_fused: np.ndarray
    f_t: np.ndarray | None = None
    gamma_t: np.ndarray | None = None
    surface: str | None = None

    @property
    def f_mean(self) -> float:
        return float(np.mean(self.f_t)) if self.f_t is not None else float("nan")

    @property
    def gamma_mean(self) -> float:
        return float(np.mean(self.gamma_t)) if self.gamma_t is not None else float("nan")


@dataclass
class StepOutput:
    attention: StepAttention
    c_t: Tensor | None
    f_t: Tensor | None
    gamma_t: Tensor | None
    features: Tensor | None = None


@dataclass
class Hypothesis:
    tokens: list[int]
    logprob: float
    finished: bool
    traces: list[DecoderStepTrace] = field(default_factory=list)

    @property
    def score(self) -> float:
        return length_normalized(self.logprob, len(self.tokens) + int(self.finished))


def length_normalized(logprob: float, n_decisions: int) -> float:
    return logprob / max(n_decisions, 1)


class _Session:
    """Parameter slices and stacks reused by every step of one decoding pass."""

    def __init__(self, model: Model):
        c = model.config
        h, e = c.hidden, c.embed
        self.att = model.attention()
        self.gate = model.gate().stack_forget_weights() if c.uses_gating else None
        dec = model.gru("dec.gru")
        self.w_x_emb = dec.w_x[:e]
        self.w_x_ctx = dec.w_x[e:]
        self.b = dec.b
        self.w_hn = dec.w_h[:, 2 * h:]
        blocks = [("u_w", self.att.u_w)]
        if c.bifocal:
            blocks.append(("u_g", self.att.u_g))
        if self.gate is not None and self.gate.w_gamma is not None:
            blocks.append(("gamma", self.gate.w_gamma))
        blocks.append(("hzr", dec.w_h[:, :2 * h]))
        self.slices = {}
        start = 0
        for name, mat in blocks:
            self.slices[name] = slice(start, start + mat.shape[1])
            start += mat.shape[1]
        self.s_mat = ad.concat([m for _, m in blocks], axis=1)

    def embed_inputs(self, model: Model, ids: np.ndarray) -> Tensor:
        """Token-embedding share of the decoder GRU input projection, plus bias."""
        return ad.matmul(embed(model.params["emb.word"], ids), self.w_x_emb) + self.b


def prepare(model: Model, enc: EncodedInfobox) -> EncodedInfobox:
    """Cache the step-independent projections for decoding ``enc``."""
    if enc.session is None:
        enc.session = _Session(model)
    att = enc.session.att
    if enc.value_proj is None:
        enc.value_proj = project(enc.value_reps, att.v_w_mat)
    if enc.field_reps is not None and enc.field_proj is None:
        enc.field_proj = project(enc.field_reps, att.v_g_mat)
    return enc


def init_state(model: Model, enc: EncodedInfobox) -> DecoderState:
    """s_0 = tanh(affine(mean of the field representations)); BOS as first input."""
    p = model.params
    s0 = ad.tanh(ad.matmul(enc.summary, p["dec.init_w"]) + p["dec.init_b"])
    B = enc.batch_size
    gated = None
    if model.config.uses_gating:
        gated = GatedState.zeros(B, model.config.field_dim(), model.config.gating_variant)
    return DecoderState(s0, np.full(B, BOS_ID, dtype=np.int64), gated, 1)


def decode_step(model: Model, state: DecoderState, enc: EncodedInfobox,
                prev: np.ndarray | None = None, input_proj: Tensor | None = None,
                project_vocab: bool = True) -> tuple[DecoderState, Tensor | None, StepOutput]:
    """Advance every row one step.

    Macro attention -> gating chain -> fused micro attention -> decoder GRU
    with input ``[embedding(prev); c_t; c_w]`` -> affine + log-softmax over
    ``[s_t; c_t; c_w]``.  ``prev`` overrides the stored previous tokens
    (teacher forcing); ``input_proj`` may carry their precomputed embedding
    projection.  With ``project_vocab=False`` no log-probs are computed and
    the output features are left in ``StepOutput.features``.
    """
    c = model.config
    p = model.params
    enc = prepare(model, enc)
    sess = enc.session
    prev = state.prev if prev is None else np.asarray(prev)
    s_prev = state.s
    sp = ad.matmul(s_prev, sess.s_mat)
    sl = sess.slices

    alpha = micro_attention(enc.value_reps, s_prev, sess.att, enc.value_mask, enc.value_proj,
                            query=sp[:, sl["u_w"]])
    beta = c_g = c_t = f = gamma = None
    gated = state.gated
    if c.bifocal:
        beta, c_g = macro_attention(enc.field_reps, s_prev, sess.att, enc.field_mask,
                                    enc.field_proj, query=sp[:, sl["u_g"]])
        fused, c_w = fuse_attention(alpha, beta, enc.field_of, enc.value_reps)
        if c.uses_gating:
            gp = sp[:, sl["gamma"]] if "gamma" in sl else None
            c_t, f, gamma, gated = gate_step(c_g, s_prev, state.gated, sess.gate,
                                             c.gating_variant, c.gate_input, gamma_proj=gp)
        else:
            c_t = c_g
        contexts = [c_t, c_w]
    else:
        fused = alpha
        c_w = weighted_sum(alpha, enc.value_reps)
        contexts = [c_w]

    if input_proj is None:
        input_proj = sess.embed_inputs(model, prev)
    ctx = contexts[0] if len(contexts) == 1 else ad.concat(contexts, axis=-1)
    xp = input_proj + ad.matmul(ctx, sess.w_x_ctx)
    s = gru_cell(xp, sp[:, sl["hzr"]], s_prev, sess.w_hn)
    features = ad.concat([s, ctx], axis=-1)
    logp = None
    if project_vocab:
        logp = ad.log_softmax(ad.matmul(features, p["out.w"]) + p["out.b"])
    nxt = DecoderState(s, prev, gated, state.t + 1)
    out = StepOutput(StepAttention(beta, alpha, fused, c_g, c_w), c_t, f, gamma, features)
    return nxt, logp, out


def _row_trace(out: StepOutput, b: int, t: int, token: int, logprob: float,
               enc: EncodedInfobox) -> DecoderStepTrace:
    att = out.attention
    W = int(enc.value_mask[b].sum())
    beta = None
    if att.beta is not None:
        M = int(enc.field_mask[b].sum())
        beta = att.beta.data[b, :M].copy()
    return DecoderStepTrace(
        t, int(token), float(logprob), beta, att.alpha.data[b, :W].copy(),
        att.alpha_fused.data[b, :W].copy(),
        None if out.f_t is None else out.f_t.data[b].copy(),
        None if out.gamma_t is None else out.gamma_t.data[b].copy())


def greedy_decode(model: Model, enc: EncodedInfobox, max_len: int = DEFAULT_MAX_LEN
                  ) -> tuple[list[list[int]], list[list[DecoderStepTrace]]]:
    """Argmax decoding (ties -> lowest id) until EOS or ``max_len`` tokens.

    EOS is not emitted; each returned token has exactly one trace.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    enc = prepare(model, enc)
    state = init_state(model, enc)
    B = enc.batch_size
    tokens: list[list[int]] = [[] for _ in range(B)]
    traces: list[list[DecoderStepTrace]] = [[] for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    for t in range(1, max_len + 1):
        state, logp, out = decode_step(model, state, enc)
        choice = np.argmax(logp.data, axis=-1)
        for b in np.flatnonzero(~done):
            tok = int(choice[b])
            if tok == EOS_ID:
                done[b] = True
                continue
            tokens[b].append(tok)
            traces[b].append(_row_trace(out, b, t, tok, logp.data[b, tok], enc))
        if done.all():
            break
        state.prev = choice.astype(np.int64)
    return tokens, traces


def sequence_logprob(model: Model, enc: EncodedInfobox, tokens: list[int], finished: bool) -> float:
    """Log-probability of a token sequence (plus EOS when ``finished``) for a 1-row ``enc``."""
    enc = prepare(model, enc)
    state = init_state(model, enc)
    total = 0.0
    for tok in list(tokens) + ([EOS_ID] if finished else []):
        state, logp, _ = decode_step(model, state, enc)
        total += float(logp.data[0, tok])
        state.prev = np.array([tok])
    return total


def beam_search(step_fn, init, beam_width: int, max_len: int, eos: int = EOS_ID) -> list[Hypothesis]:
    """Generic length-normalised beam search.

    ``step_fn(states, t) -> (log-probs (n, V), new_states, info)`` advances
    every alive hypothesis at step ``t``; ``new_states(rows, tokens)`` keeps
    the chosen parents and ``info(row, token)`` returns an optional trace.
    ``init`` is the initial state for a single hypothesis.  Candidates are ranked by cumulative log-prob among
    hypotheses of equal length (ties: parent order, then lowest token id);
    finished hypotheses are compared by log-prob per decision.  Returns
    finished hypotheses sorted best first.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    alive = [Hypothesis([], 0.0, False)]
    states = init
    finished: list[Hypothesis] = []
    for t in range(1, max_len + 1):
        logp, new_states, infos = step_fn(states, t)
        cands = []
        for r, hyp in enumerate(alive):
            row = logp[r]
            top = np.argsort(-row, kind="stable")[:beam_width]
            for tok in top:
                cands.append((hyp.logprob + float(row[tok]), r, int(tok)))
        cands.sort(key=lambda c: (-c[0], c[1], c[2]))
        keep_rows, next_alive = [], []
        for total, r, tok in cands[:beam_width]:
            parent = alive[r]
            if tok == eos:
                finished.append(Hypothesis(list(parent.tokens), total, True, list(parent.traces)))
                continue
            trace = infos(r, tok) if infos is not None else None
            hyp = Hypothesis(parent.tokens + [tok], total, False,
                             parent.traces + ([trace] if trace is not None else []))
            next_alive.append(hyp)
            keep_rows.append(r)
        if not next_alive:
            alive = []
            break
        alive = next_alive
        states = new_states(np.array(keep_rows), np.array([h.tokens[-1] for h in alive]))
    finished.extend(alive)
    finished.sort(key=lambda h: -h.score)
    return finished


def beam_decode(model: Model, enc: EncodedInfobox, beam_width: int = 5,
                max_len: int = DEFAULT_MAX_LEN) -> tuple[list[int], list[DecoderStepTrace]]:
    """Beam search for a single example (``enc`` with one row).

    The greedy sequence is scored alongside the beam's survivors, so the
    result never scores below greedy decoding.
    """
    if enc.batch_size != 1:
        raise ValueError("beam_decode works on one example at a time")
    enc = prepare(model, enc)
    if beam_width == 1:
        tokens, traces = greedy_decode(model, enc, max_len)
        return tokens[0], traces[0]

    base = enc

    def step_fn(state, t):
        rows_enc = base.select(np.zeros(state.s.shape[0], dtype=np.int64))
        nxt, logp, out = decode_step(model, state, rows_enc)

        def new_states(rows, toks):
            st = nxt.select(rows)
            st.prev = toks.astype(np.int64)
            return st

        def info(r, tok):
            return _row_trace(out, r, t, tok, logp.data[r, tok], rows_enc)

        return logp.data, new_states, info

    hyps = beam_search(step_fn, init_state(model, enc), beam_width, max_len)
    best = hyps[0]
    g_tokens, g_traces = greedy_decode(model, enc, max_len)
    g_finished = len(g_tokens[0]) < max_len
    g_score = length_normalized(sequence_logprob(model, enc, g_tokens[0], g_finished),
                                len(g_tokens[0]) + int(g_finished))
    if g_score > best.score:
        return g_tokens[0], g_traces[0]
    return best.tokens, best.traces


def copy_postprocess(tokens: list[str], traces: list[DecoderStepTrace],
                     surfaces: list[str], copyable: np.ndarray | None = None) -> list[str]:
    """Replace each UNK with the input value holding the largest fused weight.

    Ties go to the lowest flattened index; ``copyable`` (optional) excludes
    positions such as field delimiters.
    """
    if len(tokens) != len(traces):
        raise ValueError("tokens and traces are not aligned")
    out = list(tokens)
    for i, (tok, tr) in enumerate(zip(tokens, traces)):
        if tok != UNK:
            continue
        w = np.asarray(tr.alpha_fused, dtype=np.float64)
        if copyable is not None:
            w = np.where(copyable[:w.size], w, -np.inf)
        if w.size == 0 or not np.isfinite(w).any():
            continue
        out[i] = surfaces[int(np.argmax(w))]
    return out


def describe(model: Model, enc: EncodedInfobox, beam_width: int = 1,
             max_len: int = DEFAULT_MAX_LEN, copy: bool = True
             ) -> tuple[list[list[str]], list[list[DecoderStepTrace]]]:
    """Decode a batch into token strings (with copy post-processing by default)."""
    if beam_width == 1:
        ids, traces = greedy_decode(model, enc, max_len)
    else:
        ids, traces = [], []
        for b in range(enc.batch_size):
            t, tr = beam_decode(model, enc.select([b]), beam_width, max_len)
            ids.append(t)
            traces.append(tr)
    vocab = model.vocab
    out = []
    for b, (row, tr) in enumerate(zip(ids, traces)):
        words = [vocab.token(i) for i in row]
        for step, w in zip(tr, words):
            step.surface = w
        if copy:
            W = int(enc.value_mask[b].sum())
            words = copy_postprocess(words, tr, enc.surfaces[b], enc.copyable[b, :W])
        out.append(words)
    return out, traces


__all__ = ["DecoderState", "DecoderStepTrace", "decode_step", "greedy_decode", "beam_decode",
           "beam_search", "copy_postprocess", "describe", "init_state", "UNK_ID"]
