"""Teacher-forced training with Adam, early stopping, checkpoints and fine-tuning."""

from __future__ import annotations

import json
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import Example, Vocabulary, build_vocab
from .encoder import Batch, encode
from .decoder import decode_step, init_state, prepare
from .layers import init_embeddings, load_pretrained, uniform_init
from .model import Model, ModelConfig

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    hidden: int = 256
    embed: int = 300
    lr: float = 0.0004
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 20
    patience: int = 5
    batch_size: int = 32
    seed: int = 0
    clip: float = 5.0
    top_k: int = 20000
    min_count: int = 1
    bifocal: bool = True
    gating: bool = True
    gating_variant: str = "gru"
    field_rep: str = "concat"
    field_context: bool = True
    gamma_mode: str = "state"
    gate_input: str = "post"
    embeddings: str | None = None
    target_loss: float | None = None   # stop once the training loss falls below this

    def validate(self) -> None:
        for name in ("hidden", "embed", "lr", "epochs", "patience", "batch_size", "clip"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.patience > self.epochs:
            raise ValueError("patience must not exceed epochs")
        self.model_config().validate()

    def model_config(self) -> ModelConfig:
        return ModelConfig(hidden=self.hidden, embed=self.embed, bifocal=self.bifocal,
                           gating=self.gating, gating_variant=self.gating_variant,
                           field_rep=self.field_rep, field_context=self.field_context,
                           gamma_mode=self.gamma_mode, gate_input=self.gate_input, seed=self.seed)

    def replace(self, **overrides) -> TrainConfig:
        d = asdict(self)
        d.update({k: v for k, v in overrides.items() if v is not None})
        return TrainConfig(**d)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    valid_loss: float
    seconds: float | None = None


@dataclass
class Checkpoint:
    model: Model
    config: TrainConfig
    epoch: int = 0
    best_valid: float = math.inf
    history: list[EpochRecord] = field(default_factory=list)


# -- loss ---------------------------------------------------------------------

def batch_loss(model: Model, batch: Batch) -> Tensor:
    """Mean per-token negative log-likelihood under teacher forcing (PAD masked)."""
    n_tokens = int(batch.dec_mask.sum())
    if n_tokens == 0:
        raise ValueError("batch has no target tokens")
    enc = prepare(model, encode(batch, model))
    state = init_state(model, enc)
    inputs = enc.session.embed_inputs(model, batch.dec_in)
    feats = []
    for t in range(batch.dec_in.shape[1]):
        state, _, out = decode_step(model, state, enc, prev=batch.dec_in[:, t],
                                    input_proj=inputs[:, t], project_vocab=False)
        feats.append(out.features)
    # the vocabulary projection does not feed back under teacher forcing
    logits = ad.matmul(ad.stack(feats, axis=1), model.params["out.w"]) + model.params["out.b"]
    logp = ad.log_softmax(logits)
    B, T = batch.dec_out.shape
    picked = logp[np.arange(B)[:, None], np.arange(T)[None, :], batch.dec_out]
    nll = picked * batch.dec_mask.astype(np.float64)
    return ad.tsum(nll) * (-1.0 / n_tokens)


def loss(examples: Sequence[Example], model: Model) -> Tensor:
    return batch_loss(model, Batch(list(examples), model.vocab))


def evaluate_loss(model: Model, examples: Sequence[Example], batch_size: int = 64) -> float:
    """Token-weighted mean NLL, computed without recording a tape."""
    total = 0.0
    count = 0
    for i in range(0, len(examples), batch_size):
        batch = Batch(list(examples[i:i + batch_size]), model.vocab)
        n = int(batch.dec_mask.sum())
        total += batch_loss(model, batch).item() * n
        count += n
    return total / max(count, 1)


def compute_gradients(model: Model, batch: Batch) -> tuple[float, dict[str, np.ndarray]]:
    with Tape() as tape:
        value = batch_loss(model, batch)
    raw = ad.backward(tape, value)
    grads = {name: raw.get(t.id, np.zeros_like(t.data)) for name, t in model.params.items()}
    return value.item(), grads


# -- optimiser --------------------------------------------------------------

class Adam:
    """Bias-corrected Adam over a dict of named parameters."""

    def __init__(self, lr: float = 0.0004, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, g in grads.items():
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            params[name].data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], optimizer: Adam) -> None:
    optimizer.step(params, grads)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


# -- loops --------------------------------------------------------------------

def _snapshot(model: Model) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in model.params.items()}


def _restore(model: Model, snap: dict[str, np.ndarray]) -> None:
    for k, v in snap.items():
        model.params[k].data[...] = v


def _fit(model: Model, config: TrainConfig, train: Sequence[Example], valid: Sequence[Example],
         optimizer: Adam, rng: np.random.Generator, start_epoch: int = 0,
         timing: bool = True) -> tuple[list[EpochRecord], float, int]:
    train = list(train)
    batches_per_epoch = math.ceil(len(train) / config.batch_size)
    best = math.inf
    best_epoch = start_epoch
    best_snap = _snapshot(model)
    stale = 0
    history: list[EpochRecord] = []
    for epoch in range(start_epoch + 1, start_epoch + config.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train))
        total = 0.0
        for k in range(batches_per_epoch):
            idx = order[k * config.batch_size:(k + 1) * config.batch_size]
            batch = Batch([train[i] for i in idx], model.vocab)
            value, grads = compute_gradients(model, batch)
            if not math.isfinite(value):
                _restore(model, best_snap)
                raise FloatingPointError(f"training loss diverged at epoch {epoch}")
            clip_global_norm(grads, config.clip)
            optimizer.step(model.params, grads)
            total += value
        train_loss = total / batches_per_epoch
        valid_loss = evaluate_loss(model, valid) if valid else train_loss
        rec = EpochRecord(epoch, train_loss, valid_loss,
                          time.perf_counter() - t0 if timing else None)
        history.append(rec)
        log.info("epoch %d train %.4f valid %.4f", epoch, train_loss, valid_loss)
        if valid_loss < best:
            best, best_epoch, stale = valid_loss, epoch, 0
            best_snap = _snapshot(model)
        else:
            stale += 1
            if stale >= config.patience:
                log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                break
        if config.target_loss is not None and train_loss < config.target_loss:
            break
    _restore(model, best_snap)
    return history, best, best_epoch


def early_stop_epoch(valid_losses: Sequence[float], patience: int) -> int:
    """Epoch (1-based) at which the patience rule halts for a loss sequence."""
    best = math.inf
    stale = 0
    for epoch, v in enumerate(valid_losses, 1):
        if v < best:
            best, stale = v, 0
        else:
            stale += 1
            if stale >= patience:
                return epoch
    return len(valid_losses)


def train(config: TrainConfig, train_examples: Sequence[Example],
          valid_examples: Sequence[Example] = (), vocab: Vocabulary | None = None,
          timing: bool = True) -> Checkpoint:
    """Train from scratch; returns the best-validation checkpoint."""
    config.validate()
    if not train_examples:
        raise ValueError("empty training set")
    if vocab is None:
        vocab = build_vocab(train_examples, config.top_k, config.min_count)
    model = Model(config.model_config(), vocab)
    if config.embeddings:
        hits = load_pretrained(model.params["emb.word"], vocab.itos, config.embeddings)
        log.info("loaded %d pretrained embedding rows", hits)
    rng = np.random.default_rng(config.seed)
    opt = Adam(config.lr, config.beta1, config.beta2, config.adam_eps)
    history, best, best_epoch = _fit(model, config, train_examples, valid_examples, opt, rng,
                                     timing=timing)
    return Checkpoint(model, config, best_epoch, best, history)


def fine_tune(checkpoint: Checkpoint, examples: Sequence[Example],
              valid_examples: Sequence[Example] = (), extend_vocab: bool = False,
              timing: bool = True, **overrides) -> Checkpoint:
    """Continue training a checkpoint on new data with fresh Adam moments.

    Unknown tokens map to UNK unless ``extend_vocab`` adds new rows.
    """
    for key in ("hidden", "embed"):
        if overrides.get(key) not in (None, getattr(checkpoint.config, key)):
            raise ValueError(f"cannot change {key} when fine-tuning")
    if not examples:
        warnings.warn("fine-tuning on an empty stream; checkpoint unchanged", RuntimeWarning,
                      stacklevel=2)
        return checkpoint
    config = checkpoint.config.replace(**overrides)
    config.validate()
    model = checkpoint.model.copy()
    if extend_vocab:
        model = _extend(model, model.vocab.extended(examples), config.seed)
    rng = np.random.default_rng(config.seed)
    opt = Adam(config.lr, config.beta1, config.beta2, config.adam_eps)
    history, best, best_epoch = _fit(model, config, examples, valid_examples, opt, rng,
                                     start_epoch=checkpoint.epoch, timing=timing)
    return Checkpoint(model, config, best_epoch, best, history)


def _extend(model: Model, vocab: Vocabulary, seed: int) -> Model:
    rng = np.random.default_rng(seed + 7919)
    old = model.vocab
    p = dict(model.params)
    add_w = len(vocab) - len(old)
    add_f = vocab.num_fields - old.num_fields
    if add_w:
        e = p["emb.word"].data
        p["emb.word"] = Tensor(np.vstack([e, uniform_init(rng, add_w, e.shape[1])]), True, "emb.word")
        w = p["out.w"].data
        p["out.w"] = Tensor(np.hstack([w, uniform_init(rng, w.shape[0], add_w)]), True, "out.w")
        p["out.b"] = Tensor(np.concatenate([p["out.b"].data, uniform_init(rng, add_w)]), True, "out.b")
    if add_f:
        f = p["emb.field"].data
        p["emb.field"] = Tensor(np.vstack([f, uniform_init(rng, add_f, f.shape[1])]), True, "emb.field")
    return Model(model.config, vocab, p)


# -- persistence --------------------------------------------------------------

def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(ckpt.config),
        "model_config": ckpt.model.config.to_dict(),
        "vocab": ckpt.model.vocab.to_dict(),
        "epoch": ckpt.epoch,
        "best_valid": ckpt.best_valid if math.isfinite(ckpt.best_valid) else None,
    }
    arrays = {"param/" + k: v.data for k, v in ckpt.model.params.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path: str | Path) -> Checkpoint:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        params = {k[len("param/"):]: Tensor(z[k].copy(), requires_grad=True, name=k[len("param/"):])
                  for k in z.files if k.startswith("param/")}
    vocab = Vocabulary.from_dict(meta["vocab"])
    model = Model(ModelConfig.from_dict(meta["model_config"]), vocab, params)
    best = meta["best_valid"] if meta["best_valid"] is not None else math.inf
    return Checkpoint(model, TrainConfig.from_dict(meta["config"]), meta["epoch"], best)


def write_epoch_log(history: Sequence[EpochRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch\ttrain_loss\tvalid_loss\tseconds\n")
        for r in history:
            secs = "-" if r.seconds is None else f"{r.seconds:.3f}"
            fh.write(f"{r.epoch}\t{r.train_loss:.10f}\t{r.valid_loss:.10f}\t{secs}\n")


__all__ = ["TrainConfig", "Checkpoint", "EpochRecord", "Adam", "adam_step", "batch_loss", "loss",
           "evaluate_loss", "train", "fine_tune", "save_checkpoint", "load_checkpoint",
           "write_epoch_log", "early_stop_epoch", "clip_global_norm", "init_embeddings"]
