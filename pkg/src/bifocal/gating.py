"""Stay-on forget gate and never-look-back orthogonalization.

Per decoder step the order is: macro context -> orthogonalize against the
reference -> blend with the previous combined context through the gate ->
(variant "gru") advance the context-history GRU.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .layers import GruParams, gru_step

ORTHO_EPS = 1e-12
VARIANTS = ("prev", "gru")


@dataclass
class GateParams:
    w_ft: Tensor          # (d, d) applied to the previous macro context
    w_fg: Tensor          # (d, d) applied to the previous combined context
    b_f: Tensor           # (d,)
    w_gamma: Tensor | None = None   # (d_state, d)
    b_gamma: Tensor | None = None   # (d,)
    gamma_const: Tensor | None = None  # (d,), used when gamma does not depend on the state
    history: GruParams | None = None
    w_f_stacked: Tensor | None = None   # optional cache of [w_ft; w_fg]

    def stack_forget_weights(self) -> GateParams:
        self.w_f_stacked = ad.concat([self.w_ft, self.w_fg], axis=0)
        return self


@dataclass
class GatedState:
    c_prev: Tensor            # c_{t-1}
    cg_prev: Tensor           # macro context fed to the previous gate
    history: Tensor | None    # context-history GRU state (variant "gru")
    gamma: Tensor | None = None

    @classmethod
    def zeros(cls, batch: int, dim: int, variant: str) -> GatedState:
        z = Tensor(np.zeros((batch, dim)))
        return cls(z, z, z if variant == "gru" else None)

    def select(self, idx: np.ndarray) -> GatedState:
        pick = lambda t: None if t is None else Tensor(t.data[idx])  # noqa: E731
        return GatedState(pick(self.c_prev), pick(self.cg_prev), pick(self.history))


def orthogonalize(c_g: Tensor, reference: Tensor, gamma: Tensor,
                  eps: float = ORTHO_EPS) -> Tensor:
    """c_g - gamma * (<ref, c_g> / <ref, ref>) * ref, row by row.

    Rows whose reference has squared norm below ``eps`` are returned unchanged.
    """
    if c_g.shape != reference.shape or gamma.shape != c_g.shape:
        raise ShapeError("orthogonalize", c_g.shape, reference.shape, gamma.shape)
    rr = ad.dot(reference, reference)
    guard = rr.data < eps
    keep = (~guard).astype(np.float64)
    coef = ad.dot(reference, c_g) / (rr * keep + guard.astype(np.float64)) * keep
    return c_g - gamma * ad.expand(coef, -1, c_g.shape[-1]) * reference


def forget_gate(cg_prev: Tensor, c_prev: Tensor, params: GateParams) -> Tensor:
    """f_t = sigmoid(W_t cg_{t-1} + W_g c_{t-1} + b_f)."""
    if cg_prev.shape != c_prev.shape:
        raise ShapeError("forget_gate", cg_prev.shape, c_prev.shape)
    if params.w_f_stacked is not None:
        pre = ad.matmul(ad.concat([cg_prev, c_prev], axis=-1), params.w_f_stacked)
    else:
        pre = ad.matmul(cg_prev, params.w_ft) + ad.matmul(c_prev, params.w_fg)
    return ad.sigmoid(pre + params.b_f)


def combine(c_g: Tensor, c_prev: Tensor, f: Tensor) -> Tensor:
    """c_t = (1 - f) * c_g + f * c_prev; exact at f in {0, 1}."""
    if not c_g.shape == c_prev.shape == f.shape:
        raise ShapeError("combine", c_g.shape, c_prev.shape, f.shape)
    return (1.0 - f) * c_g + f * c_prev


def forget_gate_combine(c_g: Tensor, c_prev: Tensor, cg_prev: Tensor,
                        params: GateParams) -> tuple[Tensor, Tensor]:
    f = forget_gate(cg_prev, c_prev, params)
    return f, combine(c_g, c_prev, f)


def update_history(history: Tensor, c_t: Tensor, params: GateParams, variant: str) -> Tensor:
    if variant != "gru":
        raise ValueError(f"update_history requires gating variant 'gru', got {variant!r}")
    if params.history is None:
        raise ValueError("gate parameters carry no history GRU")
    return gru_step(params.history, c_t, history)


def gamma_of(s_prev: Tensor, params: GateParams, proj: Tensor | None = None) -> Tensor:
    """Orthogonalization strength in (0, 1) per dimension.

    ``proj`` may carry a precomputed ``s_prev @ w_gamma``.
    """
    if params.w_gamma is not None:
        if proj is None:
            proj = ad.matmul(s_prev, params.w_gamma)
        return ad.sigmoid(proj + params.b_gamma)
    if params.gamma_const is None:
        raise ValueError("gate parameters carry neither w_gamma nor gamma_const")
    g = ad.sigmoid(params.gamma_const)
    return ad.expand(g, 0, s_prev.shape[0])


def gate_step(c_g_raw: Tensor, s_prev: Tensor, state: GatedState, params: GateParams,
              variant: str = "gru", gate_input: str = "post",
              gamma_proj: Tensor | None = None) -> tuple[Tensor, Tensor, Tensor, GatedState]:
    """Run the full chain for one step.

    Returns (c_t, f_t, gamma_t, next state).  ``gate_input`` picks whether the
    macro context remembered for the next gate is taken after ("post") or
    before ("pre") orthogonalization.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown gating variant {variant!r}")
    gamma = gamma_of(s_prev, params, gamma_proj)
    reference = state.history if variant == "gru" else state.c_prev
    c_g = orthogonalize(c_g_raw, reference, gamma)
    f, c_t = forget_gate_combine(c_g, state.c_prev, state.cg_prev, params)
    history = update_history(state.history, c_t, params, variant) if variant == "gru" else None
    remembered = c_g if gate_input == "post" else c_g_raw
    return c_t, f, gamma, GatedState(c_t, remembered, history)
