"""Model configuration and parameter store."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .attention import AttentionParams
from .autodiff import Tensor
from .data import Vocabulary
from .gating import VARIANTS, GateParams
from .layers import GruParams, init_embeddings, uniform_init

FIELD_REPS = ("concat", "name", "values")


@dataclass
class ModelConfig:
    hidden: int = 256
    embed: int = 300
    bifocal: bool = True
    gating: bool = True
    gating_variant: str = "gru"
    field_rep: str = "concat"
    field_context: bool = True
    gamma_mode: str = "state"      # state | const
    gate_input: str = "post"       # post | pre
    seed: int = 0

    def validate(self) -> None:
        if self.hidden < 1 or self.embed < 1:
            raise ValueError("hidden and embed sizes must be positive")
        if self.gating_variant not in VARIANTS:
            raise ValueError(f"gating_variant must be one of {VARIANTS}")
        if self.field_rep not in FIELD_REPS:
            raise ValueError(f"field_rep must be one of {FIELD_REPS}")
        if self.gamma_mode not in ("state", "const"):
            raise ValueError("gamma_mode must be 'state' or 'const'")
        if self.gate_input not in ("post", "pre"):
            raise ValueError("gate_input must be 'post' or 'pre'")

    @property
    def uses_gating(self) -> bool:
        return self.bifocal and self.gating

    def field_input_dim(self) -> int:
        return {"concat": self.embed + 2 * self.hidden, "name": self.embed,
                "values": 2 * self.hidden}[self.field_rep]

    def field_dim(self) -> int:
        """Size of a field representation h^g (and of every macro context)."""
        return 2 * self.hidden if self.field_context else self.field_input_dim()

    def context_dim(self) -> int:
        return self.field_dim() if self.bifocal else 0

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def to_dict(self) -> dict:
        return asdict(self)


class Model:
    """Named float64 parameters plus typed views for each component."""

    def __init__(self, config: ModelConfig, vocab: Vocabulary, params: dict[str, Tensor] | None = None):
        config.validate()
        self.config = config
        self.vocab = vocab
        self.params = params if params is not None else self._init_params()

    def _init_params(self) -> dict[str, Tensor]:
        c = self.config
        rng = np.random.default_rng(c.seed)
        h, e = c.hidden, c.embed
        V = len(self.vocab)
        p: dict[str, Tensor] = {}

        def mat(name, *shape):
            p[name] = Tensor(uniform_init(rng, *shape), requires_grad=True, name=name)

        def gru(prefix, d_in, d_h):
            g = GruParams.init(rng, d_in, d_h)
            p[prefix + ".w_x"], p[prefix + ".w_h"], p[prefix + ".b"] = g.w_x, g.w_h, g.b

        p["emb.word"] = init_embeddings(rng, V, e)
        p["emb.field"] = init_embeddings(rng, self.vocab.num_fields, e)
        d_val = 2 * h
        if c.bifocal:
            gru("enc.value_fwd", e, h)
            gru("enc.value_bwd", e, h)
            if c.field_context:
                gru("enc.field_fwd", c.field_input_dim(), h)
                gru("enc.field_bwd", c.field_input_dim(), h)
            d_f = c.field_dim()
            mat("att.u_g", h, h)
            mat("att.v_g_mat", d_f, h)
            mat("att.v_g", h)
            summary = d_f
        else:
            gru("enc.flat_fwd", e, h)
            gru("enc.flat_bwd", e, h)
            summary = d_val
        mat("att.u_w", h, h)
        mat("att.v_w_mat", d_val, h)
        mat("att.v_w", h)
        if c.uses_gating:
            d_f = c.field_dim()
            mat("gate.w_ft", d_f, d_f)
            mat("gate.w_fg", d_f, d_f)
            mat("gate.b_f", d_f)
            if c.gamma_mode == "state":
                mat("gate.w_gamma", h, d_f)
                mat("gate.b_gamma", d_f)
            else:
                mat("gate.gamma_const", d_f)
            if c.gating_variant == "gru":
                gru("gate.history", d_f, d_f)
        mat("dec.init_w", summary, h)
        mat("dec.init_b", h)
        d_ctx = c.context_dim()
        gru("dec.gru", e + d_ctx + d_val, h)
        mat("out.w", h + d_ctx + d_val, V)
        mat("out.b", V)
        for name, t in p.items():
            t.name = name
        return p

    # -- typed views ------------------------------------------------------

    def gru(self, prefix: str) -> GruParams:
        p = self.params
        return GruParams(p[prefix + ".w_x"], p[prefix + ".w_h"], p[prefix + ".b"])

    def attention(self) -> AttentionParams:
        p = self.params
        return AttentionParams(p.get("att.u_g"), p.get("att.v_g_mat"), p.get("att.v_g"),
                               p["att.u_w"], p["att.v_w_mat"], p["att.v_w"])

    def gate(self) -> GateParams:
        p = self.params
        history = self.gru("gate.history") if "gate.history.w_x" in p else None
        return GateParams(p["gate.w_ft"], p["gate.w_fg"], p["gate.b_f"], p.get("gate.w_gamma"),
                          p.get("gate.b_gamma"), p.get("gate.gamma_const"), history)

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def copy(self) -> Model:
        params = {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()}
        return Model(ModelConfig.from_dict(self.config.to_dict()), self.vocab, params)
