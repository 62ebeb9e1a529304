"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.  Messages go to standard error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields as dc_fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .analysis import (beta_matrix, field_alpha_matrix, stay_on_stats, write_matrix, write_pgm,
                       write_trace_tsv)
from .data import (DataError, SynthConfig, build_vocab, import_wikibio, read_examples,
                   split_examples, synth_generate, write_examples)
from .decoder import DEFAULT_MAX_LEN, describe
from .encoder import Batch, encode
from .metrics import bleu4, format_scores, nist4, rouge4
from .training import (TrainConfig, fine_tune, load_checkpoint, save_checkpoint, train,
                       write_epoch_log)

log = logging.getLogger("bifocal")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DECODE_BATCH = 64


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# -- argument groups ----------------------------------------------------------

def _add_train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model and optimisation (override --config)")
    g.add_argument("--config", help="JSON file with training settings")
    g.add_argument("--hidden", type=int)
    g.add_argument("--embed", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--epochs", type=int)
    g.add_argument("--patience", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--clip", type=float)
    g.add_argument("--top-k", type=int)
    g.add_argument("--min-count", type=int)
    g.add_argument("--target-loss", type=float)
    g.add_argument("--gating-variant", choices=("prev", "gru"))
    g.add_argument("--field-rep", choices=("concat", "name", "values"))
    g.add_argument("--gamma-mode", choices=("state", "const"))
    g.add_argument("--gate-input", choices=("post", "pre"))
    g.add_argument("--no-field-context", action="store_true")
    g.add_argument("--ablate-bifocal", action="store_true",
                   help="basic seq2seq: flat encoder and attention, no gating")
    g.add_argument("--ablate-gating", action="store_true",
                   help="fused bifocal attention without gated orthogonalization")
    g.add_argument("--embeddings", help="pretrained word vectors, one 'word v1 .. vd' per line")
    g.add_argument("--no-timing", action="store_true",
                   help="write '-' instead of wall-clock seconds in the epoch log")


def _add_decode_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--beam", type=int, default=1)
    p.add_argument("--max-len", type=int, default=DEFAULT_MAX_LEN)
    p.add_argument("--no-copy", action="store_true", help="leave UNK tokens in the output")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bifocal", description="Infobox-to-text generation with fused "
                     "bifocal attention and gated orthogonalization.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model from scratch")
    p.add_argument("--train", required=True)
    p.add_argument("--valid")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="epoch log TSV (default: <out>.log.tsv)")
    _add_train_flags(p)

    p = sub.add_parser("finetune", help="continue training a checkpoint on new data")
    p.add_argument("--model", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--valid")
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    p.add_argument("--extend-vocab", action="store_true",
                   help="add rows for unseen tokens instead of mapping them to UNK")
    _add_train_flags(p)

    p = sub.add_parser("generate", help="write one description per input infobox")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True, help="canonical file; descriptions are ignored")
    p.add_argument("--out", help="output file (default: stdout)")
    _add_decode_flags(p)

    p = sub.add_parser("evaluate", help="score generated descriptions")
    p.add_argument("--hyp", required=True, help="one tokenised description per line")
    p.add_argument("--ref", required=True, help="canonical file holding the references")
    p.add_argument("--rouge-f1", action="store_true", help="report ROUGE-4 F1 instead of recall")

    p = sub.add_parser("import-wikibio", help="convert WikiBio .box/.sent files")
    p.add_argument("--box", required=True)
    p.add_argument("--sentences", required=True)
    p.add_argument("--nb", help="sentences-per-article file; first sentence is kept")
    p.add_argument("--out", required=True)

    p = sub.add_parser("synth", help="generate a synthetic infobox dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--out", required=True)
    p.add_argument("--domain", choices=("sports", "arts", "mixed"), default="mixed")
    p.add_argument("--distractors", type=int, default=SynthConfig.distractors)
    p.add_argument("--names", type=int, default=SynthConfig.n_first,
                   help="size of the first- and last-name pools")
    p.add_argument("--years", type=int, default=SynthConfig.n_years)
    p.add_argument("--unique-names", action="store_true", help="invent a fresh name per person")
    p.add_argument("--split", action="store_true",
                   help="also write <out>.train/.valid/.test (80/10/10)")

    p = sub.add_parser("inspect-attention", help="dump per-step attention traces")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--limit", type=int, default=0, help="only the first N examples (0 = all)")
    p.add_argument("--pgm", action="store_true", help="grayscale PGM heatmaps")
    p.add_argument("--no-png", action="store_true", help="skip the matplotlib PNG heatmaps")
    _add_decode_flags(p)
    return parser


# -- helpers ------------------------------------------------------------------

_FLAG_FIELDS = ("hidden", "embed", "lr", "epochs", "patience", "batch_size", "seed", "clip",
                "top_k", "min_count", "target_loss", "gating_variant", "field_rep", "gamma_mode",
                "gate_input", "embeddings")


def _overrides(args: argparse.Namespace) -> dict:
    out = {k: getattr(args, k) for k in _FLAG_FIELDS if getattr(args, k) is not None}
    if args.ablate_bifocal:
        out["bifocal"] = False
        out["gating"] = False
    if args.ablate_gating:
        out["gating"] = False
    if args.no_field_context:
        out["field_context"] = False
    return out


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    if not isinstance(d, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    names = {f.name for f in dc_fields(TrainConfig)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise UsageError(f"unknown config keys: {unknown}")
    return d


def _decode_all(model, examples, beam: int, max_len: int, copy: bool):
    words, traces = [], []
    for i in range(0, len(examples), DECODE_BATCH):
        chunk = examples[i:i + DECODE_BATCH]
        enc = encode(Batch(chunk, model.vocab, with_targets=False), model)
        w, tr = describe(model, enc, beam_width=beam, max_len=max_len, copy=copy)
        words.extend(w)
        traces.extend(tr)
    return words, traces


def _check_decode_args(args) -> None:
    if args.beam < 1:
        raise UsageError("--beam must be >= 1")
    if args.max_len < 1:
        raise UsageError("--max-len must be >= 1")


# -- commands -----------------------------------------------------------------

def cmd_train(args) -> int:
    cfg_dict = _load_config_file(args.config)
    config = TrainConfig.from_dict(cfg_dict).replace(**_overrides(args))
    config.validate()
    train_ex = read_examples(args.train)
    valid_ex = read_examples(args.valid) if args.valid else []
    vocab = build_vocab(train_ex, config.top_k, config.min_count)
    ckpt = train(config, train_ex, valid_ex, vocab, timing=not args.no_timing)
    save_checkpoint(ckpt, args.out)
    write_epoch_log(ckpt.history, args.log or args.out + ".log.tsv")
    print(f"saved {args.out} (best epoch {ckpt.epoch}, valid loss {ckpt.best_valid:.4f})",
          file=sys.stderr)
    return EXIT_OK


def cmd_finetune(args) -> int:
    ckpt = load_checkpoint(args.model)
    overrides = {**_load_config_file(args.config), **_overrides(args)}
    examples = read_examples(args.train)
    valid_ex = read_examples(args.valid) if args.valid else []
    tuned = fine_tune(ckpt, examples, valid_ex, extend_vocab=args.extend_vocab,
                      timing=not args.no_timing, **overrides)
    save_checkpoint(tuned, args.out)
    write_epoch_log(tuned.history, args.log or args.out + ".log.tsv")
    return EXIT_OK


def cmd_generate(args) -> int:
    _check_decode_args(args)
    model = load_checkpoint(args.model).model
    examples = read_examples(args.input, infobox_only=True)
    words, _ = _decode_all(model, examples, args.beam, args.max_len, not args.no_copy)
    lines = "".join(" ".join(w) + "\n" for w in words)
    if args.out:
        Path(args.out).write_text(lines, encoding="utf-8")
    else:
        sys.stdout.write(lines)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    try:
        with open(args.hyp, encoding="utf-8") as fh:
            hyps = [line.split() for line in fh.read().splitlines()]
    except OSError as exc:
        raise DataError(f"cannot read {args.hyp}: {exc}") from None
    refs = read_examples(args.ref)
    if len(hyps) != len(refs):
        raise DataError(f"{len(hyps)} hypotheses but {len(refs)} references")
    pairs = [(h, [list(r.description)]) for h, r in zip(hyps, refs)]
    scores = {"BLEU-4": bleu4(pairs), "NIST-4": nist4(pairs),
              "ROUGE-4": rouge4(pairs, f1=args.rouge_f1)}
    print(format_scores(scores))
    return EXIT_OK


def cmd_import(args) -> int:
    n = import_wikibio(args.box, args.sentences, args.out, nb_path=args.nb)
    print(f"wrote {n} examples to {args.out}", file=sys.stderr)
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    cfg = SynthConfig(domain=args.domain, n_first=args.names, n_last=args.names,
                      n_years=args.years, distractors=args.distractors,
                      name_style="unique" if args.unique_names else "pool")
    examples = synth_generate(args.seed, args.n, cfg)
    write_examples(args.out, examples)
    if args.split:
        for suffix, part in zip(("train", "valid", "test"), split_examples(examples)):
            write_examples(f"{args.out}.{suffix}", part)
    return EXIT_OK


def cmd_inspect(args) -> int:
    _check_decode_args(args)
    model = load_checkpoint(args.model).model
    examples = read_examples(args.input, infobox_only=True)
    if args.limit > 0:
        examples = examples[:args.limit]
    words, traces = _decode_all(model, examples, args.beam, args.max_len, not args.no_copy)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_trace_tsv(out / "trace.tsv", traces)
    batch = Batch(examples, model.vocab, with_targets=False)
    if model.config.bifocal:
        field_of, copyable = batch.field_of, batch.value_mask
    else:
        field_of, copyable = batch.flat_field_of, batch.flat_copyable
    rows = ["example\tsteps\tmean_run\trevisit_fraction\tsource"]
    for i, (w, tr) in enumerate(zip(words, traces)):
        names = batch.field_names[i]
        fo = np.where(copyable[i], field_of[i], -1)
        alpha_m = field_alpha_matrix(tr, fo, len(names))
        matrices = {"alpha": alpha_m}
        if model.config.bifocal:
            matrices["beta"] = beta_matrix(tr) if tr else np.zeros((0, len(names)))
        source = "beta" if "beta" in matrices else "alpha"
        stats = stay_on_stats(matrices[source])
        rows.append(f"{i}\t{len(tr)}\t{stats.mean_run:.6g}\t{stats.revisit_fraction:.6g}\t{source}")
        labels = [f"{t.t}:{t.surface}" for t in tr]
        for kind, m in matrices.items():
            write_matrix(out / f"{kind}_{i}.tsv", m, labels, names)
            if not tr:
                continue
            if args.pgm:
                write_pgm(out / f"{kind}_{i}.pgm", m)
            if not args.no_png:
                from .plotting import attention_heatmap
                attention_heatmap(out / f"{kind}_{i}.png", m, w, names,
                                  title=f"example {i} ({kind})")
    (out / "stay_on.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    runs = [float(r.split("\t")[2]) for r in rows[1:]]
    revisits = [float(r.split("\t")[3]) for r in rows[1:]]
    print(f"examples {len(runs)} mean_run {np.mean(runs):.4f} "
          f"revisit_fraction {np.mean(revisits):.4f}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "finetune": cmd_finetune, "generate": cmd_generate,
            "evaluate": cmd_evaluate, "import-wikibio": cmd_import, "synth": cmd_synth,
            "inspect-attention": cmd_inspect}


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:   # --help / --version
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, OverflowError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())
