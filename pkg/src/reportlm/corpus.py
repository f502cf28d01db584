"""Report ingestion: tokenisation, vocabulary, index encoding and splits.

Tokenisation rules
------------------
* Text is split into word runs (``\\w+``) and runs of one repeated
  punctuation character; whitespace separates nothing else.
* A raw token whose first character is uppercase is emitted as ``<up>``
  followed by the lowercased token (one marker, also for all-caps words).
* Inside a lowercased token, a run of ``k >= 3`` identical characters is
  emitted as ``<rep>``, ``str(k)``, ``char``; the surrounding characters are
  emitted as separate pieces.
* The whole sequence is wrapped in ``<bos>`` / ``<eos>``.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ValidationError

PAD, UNK, BOS, EOS, UP, REP = "<pad>", "<unk>", "<bos>", "<eos>", "<up>", "<rep>"
SPECIALS = (PAD, UNK, BOS, EOS, UP, REP)
PAD_ID, UNK_ID, BOS_ID, EOS_ID, UP_ID, REP_ID = range(6)

VOCAB_FORMAT = "reportlm-vocabulary"
VOCAB_VERSION = 1

_RAW_TOKEN = re.compile(r"\w+|([^\w\s])\1*")
_RUN = re.compile(r"(.)\1{2,}", re.DOTALL)


# ---------------------------------------------------------------------------
# records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Report:
    id: str
    text: str

    def __post_init__(self):
        if not isinstance(self.id, str) or not self.id:
            raise ValidationError("report id must be a non-empty string")


@dataclass(frozen=True)
class LabeledReport:
    report: Report
    labels: dict

    @property
    def id(self):
        return self.report.id

    @property
    def text(self):
        return self.report.text


@dataclass(frozen=True)
class TaskSchema:
    name: str
    classes: tuple
    kind: str

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        if self.kind not in ("binary", "multilabel"):
            raise ValidationError(f"schema kind must be 'binary' or 'multilabel', got {self.kind!r}")
        if self.kind == "binary" and len(self.classes) != 1:
            raise ValidationError(f"binary schema {self.name!r} needs exactly one class, got {len(self.classes)}")
        if self.kind == "multilabel" and len(self.classes) < 2:
            raise ValidationError(f"multilabel schema {self.name!r} needs at least two classes")
        if len(set(self.classes)) != len(self.classes):
            raise ValidationError(f"schema {self.name!r} has duplicate class names")

    @property
    def n_classes(self):
        return len(self.classes)

    def label_matrix(self, labeled):
        """Stack label maps into an ``(n, n_classes)`` 0/1 array, checking keys."""
        rows = []
        expected = set(self.classes)
        for item in labeled:
            labels = item.labels if isinstance(item, LabeledReport) else item
            keys = set(labels)
            if keys != expected:
                missing = sorted(expected - keys)
                extra = sorted(keys - expected)
                ident = getattr(item, "id", "?")
                raise ValidationError(
                    f"labels of report {ident!r} do not match schema {self.name!r}: "
                    f"missing {missing}, unexpected {extra}"
                )
            row = []
            for c in self.classes:
                v = labels[c]
                if v not in (0, 1):
                    raise ValidationError(f"label {c!r} must be 0 or 1, got {v!r}")
                row.append(int(v))
            rows.append(row)
        return np.asarray(rows, dtype=np.float64).reshape(len(rows), self.n_classes)

    def to_dict(self):
        return {"name": self.name, "classes": list(self.classes), "kind": self.kind}

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], tuple(d["classes"]), d["kind"])


#: Task schemas for the three labelled report tasks.
PRESET_SCHEMAS = {
    "stroke": TaskSchema("stroke", ("acute_ischemic_stroke",), "binary"),
    "occlusion": TaskSchema("occlusion", ("M1", "M2", "distal_ICA", "basilar"), "multilabel"),
    "hemorrhage": TaskSchema("hemorrhage", ("SDH", "SAH", "IVH", "IPH", "EDH"), "multilabel"),
}


# ---------------------------------------------------------------------------
# tokenisation
# ---------------------------------------------------------------------------

def _split_runs(piece):
    out = []
    pos = 0
    for m in _RUN.finditer(piece):
        if m.start() > pos:
            out.append(piece[pos:m.start()])
        out.extend((REP, str(m.end() - m.start()), m.group(1)))
        pos = m.end()
    if pos < len(piece):
        out.append(piece[pos:])
    return out


def tokenize(text: str) -> list:
    """Tokenise raw report text into marker-annotated lowercase tokens.

    >>> tokenize("No acute hemorrhage.")
    ['<bos>', '<up>', 'no', 'acute', 'hemorrhage', '.', '<eos>']
    """
    tokens = [BOS]
    for m in _RAW_TOKEN.finditer(text):
        raw = m.group(0)
        if raw[0].isupper():
            tokens.append(UP)
        tokens.extend(_split_runs(raw.lower()))
    tokens.append(EOS)
    return tokens


def detokenize(tokens) -> str:
    """Render tokens back to text; ``tokenize(detokenize(t)) == t`` for tokenizer output."""
    words = []
    upper = False
    it = iter(tokens)
    for tok in it:
        if tok in (BOS, EOS, PAD):
            continue
        if tok == UP:
            upper = True
            continue
        if tok == REP:
            count, char = next(it), next(it)
            word = char * int(count)
        else:
            word = tok
        if upper:
            word = word[0].upper() + word[1:]
            upper = False
        words.append(word)
    return " ".join(words)


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------

class Vocabulary:
    """Token/index bijection with a minimum-frequency cutoff.

    Indices 0-5 are reserved for the special tokens; kept tokens follow in
    order of descending frequency with ties broken lexicographically.
    """

    def __init__(self, tokens, frequencies=None, min_count=1):
        self.itos = list(SPECIALS) + [t for t in tokens if t not in SPECIALS]
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValidationError("vocabulary tokens must be unique")
        self.frequencies = dict(frequencies or {})
        self.min_count = int(min_count)

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def index(self, token) -> int:
        return self.stoi.get(token, UNK_ID)

    def token(self, index) -> str:
        return self.itos[index]

    @property
    def hash(self) -> str:
        """Stable digest of the index table; stored in every model container."""
        payload = json.dumps(self.itos, ensure_ascii=False, separators=(",", ":")).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()

    def to_dict(self):
        return {
            "format": VOCAB_FORMAT,
            "version": VOCAB_VERSION,
            "specials": {name: i for i, name in enumerate(SPECIALS)},
            "min_count": self.min_count,
            "tokens": self.itos[len(SPECIALS):],
            "frequencies": dict(sorted(self.frequencies.items())),
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != VOCAB_FORMAT:
            raise ValidationError(f"not a vocabulary file (format={d.get('format')!r})")
        if d.get("version") != VOCAB_VERSION:
            raise ValidationError(f"unsupported vocabulary version {d.get('version')!r}")
        specials = d.get("specials", {})
        if specials != {name: i for i, name in enumerate(SPECIALS)}:
            raise ValidationError("vocabulary special-token table does not match this build")
        return cls(d["tokens"], d.get("frequencies"), d.get("min_count", 1))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), ensure_ascii=False, indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def build_vocabulary(corpus, min_count=5, max_size=None) -> Vocabulary:
    """Build a vocabulary from token sequences, dropping tokens seen fewer than ``min_count`` times."""
    if min_count < 1:
        raise ValidationError(f"min_count must be >= 1, got {min_count}")
    counts = Counter()
    n_docs = 0
    for tokens in corpus:
        n_docs += 1
        counts.update(t for t in tokens if t not in SPECIALS)
    if n_docs == 0:
        raise ValidationError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    if max_size is not None:
        kept = kept[: max(0, int(max_size) - len(SPECIALS))]
    return Vocabulary(kept, counts, min_count)


def encode_indices(tokens, vocab: Vocabulary) -> list:
    return [vocab.stoi.get(t, UNK_ID) for t in tokens]


def decode_indices(indices, vocab: Vocabulary) -> list:
    return [vocab.itos[i] for i in indices]


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

@dataclass
class SplitSpec:
    fractions: dict = field(default_factory=lambda: {"train": 0.85, "valid": 0.10, "test": 0.05})
    seed: int = 0

    def __post_init__(self):
        total = math.fsum(self.fractions.values())
        if abs(total - 1.0) > 1e-9:
            raise ValidationError(f"split fractions must sum to 1, got {total!r}")
        if any(f < 0 for f in self.fractions.values()):
            raise ValidationError("split fractions must be non-negative")


#: Labelled-set split presets (train/valid/test) for the three tasks.
LABELED_SPLIT_PRESETS = {
    "occlusion": {"train": 0.30, "valid": 0.20, "test": 0.50},
    "stroke": {"train": 0.30, "valid": 0.10, "test": 0.60},
    "hemorrhage": {"train": 0.10, "valid": 0.20, "test": 0.70},
}


def partition_sizes(n, fractions) -> dict:
    """Largest-remainder allocation of ``n`` items to named fractions."""
    names = list(fractions)
    exact = [n * fractions[k] for k in names]
    sizes = [math.floor(x) for x in exact]
    order = sorted(range(len(names)), key=lambda i: (-(exact[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return dict(zip(names, sizes))


def split(corpus, spec: SplitSpec) -> dict:
    """Seeded shuffle followed by contiguous slicing into named partitions."""
    items = list(corpus)
    sizes = partition_sizes(len(items), spec.fractions)
    perm = np.random.default_rng(spec.seed).permutation(len(items))
    out = {}
    start = 0
    for name, size in sizes.items():
        out[name] = [items[i] for i in perm[start:start + size]]
        start += size
    return out


# ---------------------------------------------------------------------------
# JSON-lines I/O
# ---------------------------------------------------------------------------

def read_corpus(path) -> list:
    """Read a JSON-lines corpus; records carrying ``labels`` become :class:`LabeledReport`."""
    out = []
    seen = set()
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if "id" not in obj or "text" not in obj:
                raise ValidationError(f"{path}:{lineno}: record needs 'id' and 'text'")
            rid = str(obj["id"])
            if rid in seen:
                raise ValidationError(f"{path}:{lineno}: duplicate report id {rid!r}")
            seen.add(rid)
            report = Report(rid, obj["text"])
            if not report.text.strip():
                warnings.warn(f"report {rid!r} has empty text", stacklevel=2)
            labels = obj.get("labels")
            out.append(LabeledReport(report, dict(labels)) if labels is not None else report)
    return out


def write_corpus(path, items):
    with Path(path).open("w", encoding="utf-8") as fh:
        for item in items:
            rec = {"id": item.id, "text": item.text}
            if isinstance(item, LabeledReport):
                rec["labels"] = item.labels
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")


def texts(items):
    return [item.text for item in items]


def index_corpus(items, vocab: Vocabulary) -> list:
    return [encode_indices(tokenize(item.text), vocab) for item in items]
