"""Macro (field) attention, micro (value) attention and their fusion.

All functions are batched: a leading axis B indexes independent examples,
and boolean masks mark the real (non-padding) fields/values of each row.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


@dataclass
class AttentionParams:
    u_g: Tensor   # (d_state, d_att)
    v_g_mat: Tensor   # (d_field, d_att)
    v_g: Tensor   # (d_att,)
    u_w: Tensor   # (d_state, d_att)
    v_w_mat: Tensor   # (d_value, d_att)
    v_w: Tensor   # (d_att,)


@dataclass
class StepAttention:
    beta: Tensor | None       # (B, M)
    alpha: Tensor             # (B, W)
    alpha_fused: Tensor       # (B, W)
    c_g: Tensor | None        # (B, d_field)
    c_w: Tensor               # (B, d_value)


def _scores(reps_proj: Tensor, s_prev: Tensor, u: Tensor, v: Tensor,
            query: Tensor | None) -> Tensor:
    if query is None:
        query = ad.matmul(s_prev, u)
    q = ad.expand(query, 1, reps_proj.shape[1])
    return ad.matmul(ad.tanh(q + reps_proj), v)


def weighted_sum(weights: Tensor, reps: Tensor) -> Tensor:
    """sum_i weights[b, i] * reps[b, i, :] -> (B, d)."""
    w = ad.expand(weights, -1, reps.shape[-1])
    return ad.tsum(w * reps, axis=1)


def project(reps: Tensor, mat: Tensor) -> Tensor:
    """Precompute the step-independent half of the score, ``reps @ V``."""
    return ad.matmul(reps, mat)


def macro_attention(field_reps: Tensor, s_prev: Tensor, params: AttentionParams,
                    mask: np.ndarray | None = None,
                    field_proj: Tensor | None = None,
                    query: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """beta = softmax_i(v_g . tanh(U_g s + V_g h_i)); c_g = sum_i beta_i h_i.

    ``field_reps`` (B, M, d_field), ``s_prev`` (B, d_state).  ``field_proj``
    and ``query`` optionally supply precomputed ``V_g h`` and ``U_g s``.
    """
    if field_reps.ndim != 3 or s_prev.ndim != 2 or field_reps.shape[0] != s_prev.shape[0]:
        raise ShapeError("macro_attention", field_reps.shape, s_prev.shape)
    if field_proj is None:
        field_proj = project(field_reps, params.v_g_mat)
    beta = ad.softmax(_scores(field_proj, s_prev, params.u_g, params.v_g, query), mask)
    return beta, weighted_sum(beta, field_reps)


def micro_attention(value_reps: Tensor, s_prev: Tensor, params: AttentionParams,
                    mask: np.ndarray | None = None,
                    value_proj: Tensor | None = None,
                    query: Tensor | None = None) -> Tensor:
    """alpha = softmax over all W values of v_w . tanh(U_w s + V_w h_j)."""
    if value_reps.ndim != 3 or s_prev.ndim != 2 or value_reps.shape[0] != s_prev.shape[0]:
        raise ShapeError("micro_attention", value_reps.shape, s_prev.shape)
    if value_proj is None:
        value_proj = project(value_reps, params.v_w_mat)
    return ad.softmax(_scores(value_proj, s_prev, params.u_w, params.v_w, query), mask)


def fuse_attention(alpha: Tensor, beta: Tensor, field_of: np.ndarray,
                   value_reps: Tensor) -> tuple[Tensor, Tensor]:
    """Reweight each value by its field's macro weight and renormalise.

    ``field_of[b, j]`` is the 0-based field index of value j.  Padding values
    must carry alpha = 0.  Returns (alpha_fused (B, W), c_w (B, d_value)).
    """
    field_of = np.asarray(field_of)
    if alpha.shape != field_of.shape or beta.shape[0] != alpha.shape[0]:
        raise ShapeError("fuse_attention", alpha.shape, beta.shape, field_of.shape)
    rows = np.arange(alpha.shape[0])[:, None]
    num = alpha * beta[rows, field_of]
    den = ad.tsum(num, axis=-1)
    if np.any(den.data < 1e-30):
        raise FloatingPointError("degenerate fused attention")
    fused = num / ad.expand(den, -1, alpha.shape[1])
    return fused, weighted_sum(fused, value_reps)
