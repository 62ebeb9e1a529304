"""Examples, the canonical line format, vocabularies, WikiBio import and a
synthetic biography generator.

Canonical format, one example per line (UTF-8, LF)::

    field1|v1 v2<TAB>field2|v1<TAB>...<TAB>###<TAB>description tokens[<TAB>@domain]

The optional trailing ``@domain`` column carries a domain label.
"""

from __future__ import annotations

import hashlib
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

log = logging.getLogger(__name__)

PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<bos>", "<eos>"
PAD_ID, UNK_ID, BOS_ID, EOS_ID = 0, 1, 2, 3
SPECIALS = (PAD, UNK, BOS, EOS)
SEPARATOR = "###"


class DataError(Exception):
    """Unreadable, malformed or empty dataset input."""


Field = tuple[str, tuple[str, ...]]


@dataclass(frozen=True)
class Example:
    fields: tuple[Field, ...]
    description: tuple[str, ...]
    domain: str | None = None

    @property
    def num_fields(self) -> int:
        return len(self.fields)

    @property
    def values(self) -> list[str]:
        return [v for _, vals in self.fields for v in vals]


def make_example(fields, description, domain: str | None = None) -> Example:
    """Build an Example from loose lists, normalising tokens to lower case.

    Field names with spaces are joined by underscores; fields left without
    values are dropped with a warning.
    """
    clean: list[Field] = []
    for name, vals in fields:
        if isinstance(vals, str):
            vals = vals.split()
        vals = tuple(v.lower() for v in vals if v)
        name = "_".join(name.lower().split())
        if not vals:
            log.warning("dropping field %r with no values", name)
            continue
        clean.append((name, vals))
    if isinstance(description, str):
        description = description.split()
    return Example(tuple(clean), tuple(t.lower() for t in description), domain)


def format_example(ex: Example) -> str:
    cols = [f"{name}|{' '.join(vals)}" for name, vals in ex.fields]
    cols += [SEPARATOR, " ".join(ex.description)]
    if ex.domain:
        cols.append("@" + ex.domain)
    return "\t".join(cols)


def parse_line(line: str, infobox_only: bool = False) -> Example:
    """Parse one canonical line.

    With ``infobox_only`` a line without the separator is accepted as a bare
    infobox and gets an empty description.
    """
    cols = line.rstrip("\n").split("\t")
    if SEPARATOR not in cols:
        if not infobox_only:
            raise DataError("missing '###' separator")
        cols = cols + [SEPARATOR, ""]
    k = cols.index(SEPARATOR)
    rest = cols[k + 1:]
    domain = None
    if rest and rest[-1].startswith("@"):
        domain = rest.pop()[1:] or None
    if len(rest) != 1 or not (rest[0].split() or infobox_only):
        raise DataError("missing description")
    fields = []
    for col in cols[:k]:
        if "|" not in col:
            raise DataError(f"field column without '|': {col!r}")
        name, vals = col.split("|", 1)
        if not name:
            raise DataError("empty field name")
        fields.append((name, vals.split()))
    ex = make_example(fields, rest[0], domain)
    if not ex.fields:
        raise DataError("no fields with values")
    return ex


def parse_examples(path: str | Path, strict: bool = False,
                   infobox_only: bool = False) -> Iterator[Example]:
    """Lazily yield examples; bad lines are logged and skipped (strict: raised)."""
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    good = bad = 0
    with fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                ex = parse_line(line, infobox_only)
            except DataError as exc:
                if strict:
                    raise DataError(f"{path}:{lineno}: {exc}") from None
                log.warning("%s:%d: skipped (%s)", path, lineno, exc)
                bad += 1
                continue
            good += 1
            yield ex
    if bad:
        log.warning("%s: %d malformed line(s) skipped", path, bad)
    if good == 0:
        raise DataError(f"{path}: zero valid examples")


def read_examples(path: str | Path, strict: bool = False,
                  infobox_only: bool = False) -> list[Example]:
    return list(parse_examples(path, strict=strict, infobox_only=infobox_only))


def write_examples(path: str | Path, examples: Iterable[Example]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            fh.write(format_example(ex) + "\n")
            n += 1
    return n


def split_examples(examples: list[Example]) -> tuple[list[Example], list[Example], list[Example]]:
    """Deterministic 80/10/10 train/valid/test split keyed on example index."""
    train, valid, test = [], [], []
    for i, ex in enumerate(examples):
        bucket = int(hashlib.md5(str(i).encode()).hexdigest(), 16) % 10
        (test if bucket == 0 else valid if bucket == 1 else train).append(ex)
    return train, valid, test


# -- vocabulary -----------------------------------------------------------

@dataclass
class Vocabulary:
    itos: list[str]
    field_itos: list[str]
    freq: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self.stoi = {w: i for i, w in enumerate(self.itos)}
        self.field_stoi = {w: i for i, w in enumerate(self.field_itos)}
        if len(self.stoi) != len(self.itos) or len(self.field_stoi) != len(self.field_itos):
            raise ValueError("vocabulary entries must be unique")

    def __len__(self) -> int:
        return len(self.itos)

    @property
    def num_fields(self) -> int:
        return len(self.field_itos)

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def ids(self, tokens: Iterable[str]) -> list[int]:
        return [self.stoi.get(t, UNK_ID) for t in tokens]

    def field_id(self, name: str) -> int:
        return self.field_stoi.get(name, UNK_ID)

    def token(self, i: int) -> str:
        return self.itos[i]

    def to_dict(self) -> dict:
        return {"itos": self.itos, "field_itos": self.field_itos, "freq": self.freq}

    @classmethod
    def from_dict(cls, d: dict) -> Vocabulary:
        return cls(list(d["itos"]), list(d["field_itos"]), dict(d.get("freq", {})))

    def extended(self, examples: Iterable[Example]) -> Vocabulary:
        """Copy with unseen value/description tokens and field names appended."""
        itos, fitos = list(self.itos), list(self.field_itos)
        seen, fseen = set(itos), set(fitos)
        for ex in examples:
            for name, vals in ex.fields:
                if name not in fseen:
                    fseen.add(name)
                    fitos.append(name)
                for v in vals:
                    if v not in seen:
                        seen.add(v)
                        itos.append(v)
            for t in ex.description:
                if t not in seen:
                    seen.add(t)
                    itos.append(t)
        return Vocabulary(itos, fitos, dict(self.freq))


def count_tokens(examples: Iterable[Example]) -> tuple[Counter, Counter]:
    words: Counter = Counter()
    names: Counter = Counter()
    for ex in examples:
        for name, vals in ex.fields:
            names[name] += 1
            words.update(vals)
        words.update(ex.description)
    return words, names


def build_vocab(examples: Iterable[Example], top_k: int = 20000, min_count: int = 1) -> Vocabulary:
    """Keep the ``top_k`` most frequent tokens, specials included.

    Ties at the cutoff are broken lexicographically.  Field names get their
    own map and are all kept.
    """
    if top_k < len(SPECIALS):
        raise ValueError(f"top_k must be >= {len(SPECIALS)}")
    words, names = count_tokens(examples)
    ranked = sorted((w for w, c in words.items() if c >= min_count and w not in SPECIALS),
                    key=lambda w: (-words[w], w))
    kept = ranked[:top_k - len(SPECIALS)]
    fields = [PAD, UNK] + sorted(names)
    return Vocabulary(list(SPECIALS) + kept, fields, {w: words[w] for w in kept})


# -- WikiBio import -------------------------------------------------------

def _split_key(key: str) -> tuple[str, int | None]:
    base, sep, idx = key.rpartition("_")
    if sep and idx.isdigit():
        return base, int(idx)
    return key, None


def parse_wikibio_box(line: str) -> list[Field]:
    """Regroup ``fieldname_i:token`` items into ordered (field, values) pairs."""
    groups: dict[str, list[tuple[int, str]]] = {}
    for item in line.rstrip("\n").split("\t"):
        if ":" not in item:
            continue
        key, token = item.split(":", 1)
        name, idx = _split_key(key)
        bucket = groups.setdefault(name, [])
        if token == "<none>" or not token:
            continue
        bucket.append((idx if idx is not None else len(bucket) + 1, token))
    fields: list[Field] = []
    for name, items in groups.items():
        if not items:
            continue
        items.sort(key=lambda p: p[0])
        positions = [i for i, _ in items]
        if positions != list(range(1, len(items) + 1)):
            log.warning("field %r: index gaps %s, keeping sorted order", name, positions)
        fields.append((name, tuple(tok.lower() for _, tok in items)))
    return fields


def import_wikibio(box_path: str | Path, sentence_path: str | Path, out_path: str | Path,
                   nb_path: str | Path | None = None) -> int:
    """Convert WikiBio ``.box`` + sentence files to the canonical format.

    With ``nb_path`` (sentences per article) only the first sentence of each
    article is used; otherwise sentences are taken one per box line.
    """
    try:
        boxes = Path(box_path).read_text(encoding="utf-8").splitlines()
        sents = Path(sentence_path).read_text(encoding="utf-8").splitlines()
        counts = None
        if nb_path is not None:
            counts = [int(x) for x in Path(nb_path).read_text(encoding="utf-8").split()]
    except OSError as exc:
        raise DataError(str(exc)) from exc
    if counts is not None:
        if sum(counts) != len(sents):
            raise DataError(f"sentence file has {len(sents)} lines, .nb expects {sum(counts)}")
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(int)
        firsts = [sents[s] for s in starts]
    else:
        firsts = sents
    if len(firsts) != len(boxes):
        raise DataError(f"misaligned files: {len(boxes)} boxes vs {len(firsts)} sentences")
    out = []
    for lineno, (box, sent) in enumerate(zip(boxes, firsts), 1):
        fields = parse_wikibio_box(box)
        if not fields or not sent.split():
            log.warning("article %d: empty infobox or sentence, skipped", lineno)
            continue
        out.append(make_example(fields, sent))
    if not out:
        raise DataError("zero valid examples")
    return write_examples(out_path, out)


# -- synthetic biographies --------------------------------------------------

NATIONALITIES = ("american", "english", "indian", "french", "german", "italian", "spanish",
                 "brazilian", "canadian", "australian", "irish", "scottish", "dutch", "swedish",
                 "polish", "mexican", "japanese", "nigerian", "kenyan", "greek")
MONTHS = ("january", "february", "march", "april", "may", "june", "july", "august",
          "september", "october", "november", "december")
OCCUPATIONS = {
    "sports": ("footballer", "cricketer", "coach", "swimmer", "boxer", "sprinter", "cyclist",
               "goalkeeper", "referee", "manager", "wrestler", "golfer", "jockey", "rower"),
    "arts": ("actor", "director", "painter", "singer", "writer", "poet", "producer", "dancer",
             "composer", "sculptor", "novelist", "photographer", "playwright", "violinist"),
}
CITIES = ("leeds", "milan", "porto", "lyon", "ajax", "celtic", "boston", "denver", "madrid",
          "munich", "chelsea", "dublin", "kobe", "lagos", "austin")
CLUB_SUFFIX = ("united", "rovers", "athletic", "wanderers")
GENRES = ("jazz", "opera", "cinema", "theatre", "ballet", "poetry", "sculpture", "folk",
          "portraiture", "drama", "animation", "comedy")
DISTRACTORS = ("image", "caption", "website", "height", "weight", "signature", "spouse_count",
               "awards_count")
_SYLLABLES = ("ka", "lo", "mi", "ra", "ten", "vo", "shi", "dan", "el", "ru", "po", "zan",
              "be", "qui", "tor", "ha", "nel", "sa", "gri", "fu", "wen", "dor", "ix", "lu")


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for :func:`synth_generate`.

    ``name_style='pool'`` draws names from fixed pools of pseudo-words;
    ``'unique'`` invents a fresh first/last name for every person.
    """

    domain: str = "mixed"          # sports | arts | mixed
    n_first: int = 40
    n_last: int = 40
    name_style: str = "pool"
    n_years: int = 60
    distractors: int = 2
    max_occupations: int = 3
    shuffle_fields: bool = True


def _pseudo_word(rng: np.random.Generator, lo: int = 2, hi: int = 3) -> str:
    n = int(rng.integers(lo, hi + 1))
    return "".join(_SYLLABLES[int(i)] for i in rng.integers(0, len(_SYLLABLES), size=n))


def _name_pool(tag: int, size: int) -> list[str]:
    rng = np.random.default_rng(1000 + tag)
    pool: list[str] = []
    seen = set()
    while len(pool) < size:
        w = _pseudo_word(rng)
        if w not in seen:
            seen.add(w)
            pool.append(w)
    return pool


def _join_list(items: list[str]) -> list[str]:
    if len(items) == 1:
        return list(items)
    out: list[str] = []
    for i, it in enumerate(items[:-1]):
        if i:
            out.append(",")
        out.append(it)
    return out + ["and", items[-1]]


def render_description(fields: dict[str, tuple[str, ...]]) -> list[str]:
    """Fixed template grammar; depends only on the infobox contents."""
    name = list(fields["name"])
    desc = name + ["(", "born"] + list(fields["birth_date"]) + [")", "is"]
    nat = fields["nationality"][0]
    desc += ["an" if nat[0] in "aeiou" else "a", nat]
    desc += _join_list(list(fields["occupation"]))
    if "team" in fields:
        desc += ["who", "played", "for"] + list(fields["team"])
    if "genre" in fields:
        desc += ["known", "for"] + list(fields["genre"])
    return desc + ["."]


def synth_generate(seed: int, n: int, config: SynthConfig = SynthConfig()) -> list[Example]:
    """Deterministic pseudo-random person infoboxes with templated descriptions.

    Distractor fields carry tokens that never occur in any description.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    firsts = _name_pool(0, config.n_first)
    lasts = _name_pool(1, config.n_last)
    years = [str(1900 + i) for i in range(config.n_years)]
    out = []
    for k in range(n):
        domain = config.domain
        if domain == "mixed":
            domain = ("sports", "arts")[int(rng.integers(0, 2))]
        if config.name_style == "unique":
            name = (_pseudo_word(rng, 3, 4), _pseudo_word(rng, 3, 4))
        else:
            name = (firsts[int(rng.integers(len(firsts)))], lasts[int(rng.integers(len(lasts)))])
        date = (str(int(rng.integers(1, 29))), MONTHS[int(rng.integers(12))],
                years[int(rng.integers(len(years)))])
        pool = OCCUPATIONS[domain]
        n_occ = int(rng.integers(1, config.max_occupations + 1))
        occ = tuple(pool[int(i)] for i in rng.choice(len(pool), size=n_occ, replace=False))
        fields: dict[str, tuple[str, ...]] = {
            "name": name,
            "birth_date": date,
            "nationality": (NATIONALITIES[int(rng.integers(len(NATIONALITIES)))],),
            "occupation": occ,
        }
        if domain == "sports":
            fields["team"] = (CITIES[int(rng.integers(len(CITIES)))],
                              CLUB_SUFFIX[int(rng.integers(len(CLUB_SUFFIX)))])
        elif rng.random() < 0.8:
            fields["genre"] = (GENRES[int(rng.integers(len(GENRES)))],)
        desc = render_description(fields)
        picks = rng.choice(len(DISTRACTORS), size=min(config.distractors, len(DISTRACTORS)),
                           replace=False)
        for i in sorted(int(p) for p in picks):
            width = int(rng.integers(1, 3))
            fields[DISTRACTORS[i]] = tuple(f"x{DISTRACTORS[i][:3]}{int(v)}"
                                           for v in rng.integers(0, 20, size=width))
        items = list(fields.items())
        if config.shuffle_fields:
            order = rng.permutation(len(items))
            items = [items[int(i)] for i in order]
        out.append(Example(tuple(items), tuple(desc), domain))
    return out
