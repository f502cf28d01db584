"""Templated pseudo-report generator with known ground-truth labels.

Each class is either mentioned as a finding (probability ``prevalence``) or,
failing that, mentioned only in negated form (probability
``distractor_rate``).  A finding mention is negated with probability
``negation_rate``.  The label of a class is 1 exactly when an affirmed
mention was emitted.

Affirmed and negated mention templates come in pairs that use the same bag
of words and differ only in word order, so the negation scope can only be
recovered from context.  Phrase tables live in ``data/phrases.json``.
"""

from __future__ import annotations

import functools
import itertools
import json
import re
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .corpus import LabeledReport, Report, TaskSchema
from .exceptions import ValidationError

__all__ = ["SynthConfig", "PhraseTables", "generate_synthetic_corpus", "scan_labels", "alternating_corpus", "carve"]


@functools.lru_cache(maxsize=1)
def _load_tables():
    raw = resources.files("reportlm").joinpath("data/phrases.json").read_text(encoding="utf-8")
    return json.loads(raw)


class PhraseTables:
    """Finding phrases, mention template pairs and the pseudo-word lexicon."""

    def __init__(self, tables=None):
        tables = tables or _load_tables()
        if tables.get("format") != "reportlm-phrase-tables":
            raise ValidationError("not a phrase-table document")
        self.version = tables["version"]
        self.findings = {k: list(v) for k, v in tables["findings"].items()}
        self.mention_templates = list(tables["mention_templates"])
        self.filler_templates = list(tables["filler_templates"])
        self.syllables = list(tables["syllables"])

    def lexicon(self, size):
        """The first ``size`` pseudo-words; independent of any corpus seed."""
        words = []
        for n in itertools.count(2):
            for combo in itertools.product(self.syllables, repeat=n):
                words.append("".join(combo))
                if len(words) == size:
                    # fixed permutation so low-rank (frequent) words are not all alike
                    order = np.random.default_rng(self.version).permutation(size)
                    return [words[i] for i in order]


@dataclass
class SynthConfig:
    classes: tuple = ("SDH", "SAH", "IVH")
    prevalence: dict = field(default_factory=dict)
    default_prevalence: float = 0.5
    negation_rate: float = 0.4
    distractor_rate: float = 0.5
    vocab_size: int = 200
    n_reports: int = 1000
    filler_sentences: tuple = (1, 3)
    seed: int = 0
    id_prefix: str = "r"
    zipf_exponent: float = 1.0

    def __post_init__(self):
        self.classes = tuple(self.classes)
        for c in self.classes:
            p = self.prevalence_of(c)
            if not 0.0 <= p <= 1.0:
                raise ValidationError(f"prevalence of {c!r} must lie in [0, 1], got {p}")
        for name in ("negation_rate", "distractor_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {v}")
        if self.vocab_size < 1:
            raise ValidationError("vocab_size must be positive")
        lo, hi = self.filler_sentences
        if not 0 <= lo <= hi:
            raise ValidationError(f"filler_sentences range {self.filler_sentences} is invalid")

    def prevalence_of(self, cls):
        return float(self.prevalence.get(cls, self.default_prevalence))

    @property
    def schema(self):
        kind = "binary" if len(self.classes) == 1 else "multilabel"
        return TaskSchema("synthetic", self.classes, kind)


def _capitalize(sentence):
    return sentence[0].upper() + sentence[1:]


def _render(template, **slots):
    text = template.format(**slots)
    return _capitalize(text)


def generate_synthetic_corpus(config: SynthConfig, tables: PhraseTables = None) -> list:
    """Generate ``config.n_reports`` labelled pseudo-reports, deterministic per seed."""
    if config.n_reports <= 0:
        raise ValidationError(f"n_reports must be positive, got {config.n_reports}")
    tables = tables or PhraseTables()
    unknown = [c for c in config.classes if c not in tables.findings]
    if unknown:
        raise ValidationError(f"no finding phrases for classes {unknown}")
    rng = np.random.default_rng(config.seed)
    lexicon = tables.lexicon(config.vocab_size)
    ranks = np.arange(1, len(lexicon) + 1, dtype=np.float64)
    word_p = ranks ** -config.zipf_exponent
    word_p /= word_p.sum()

    def word():
        return lexicon[rng.choice(len(lexicon), p=word_p)]

    def filler_phrase():
        return " ".join(word() for _ in range(int(rng.integers(1, 3))))

    width = max(6, len(str(config.n_reports)))
    out = []
    for i in range(config.n_reports):
        sentences = []
        labels = {}
        for c in config.classes:
            mentioned = rng.random() < config.prevalence_of(c)
            if mentioned:
                negated = rng.random() < config.negation_rate
            else:
                negated = True
                if rng.random() >= config.distractor_rate:
                    labels[c] = 0
                    continue
            phrase = tables.findings[c][int(rng.integers(len(tables.findings[c])))]
            template = tables.mention_templates[int(rng.integers(len(tables.mention_templates)))]
            form = "negated" if negated else "affirmed"
            sentences.append(_render(template[form], finding=phrase, filler=filler_phrase()))
            labels[c] = 0 if negated else 1
        lo, hi = config.filler_sentences
        for _ in range(int(rng.integers(lo, hi + 1))):
            template = tables.filler_templates[int(rng.integers(len(tables.filler_templates)))]
            n_slots = template.count("{word}")
            sentences.append(_capitalize(template.replace("{word}", "{}").format(*(word() for _ in range(n_slots)))))
        order = rng.permutation(len(sentences))
        text = " ".join(sentences[j] for j in order)
        out.append(LabeledReport(Report(f"{config.id_prefix}{i:0{width}d}", text), labels))
    return out


@functools.lru_cache(maxsize=32)
def _affirmed_patterns(classes, version):
    tables = PhraseTables()
    patterns = {}
    filler = r"[a-z]+(?: [a-z]+)*"
    for c in classes:
        alts = "|".join(re.escape(p) for p in sorted(tables.findings[c], key=len, reverse=True))
        regs = []
        for pair in tables.mention_templates:
            parts = re.split(r"(\{finding\}|\{filler\})", pair["affirmed"])
            pieces = []
            for part in parts:
                if part == "{finding}":
                    pieces.append(f"(?:{alts})")
                elif part == "{filler}":
                    pieces.append(filler)
                else:
                    pieces.append(re.escape(part))
            regs.append(re.compile("".join(pieces), re.IGNORECASE))
        patterns[c] = regs
    return patterns


def scan_labels(text, classes) -> dict:
    """Re-derive labels from generated text using only the phrase tables."""
    classes = tuple(classes)
    patterns = _affirmed_patterns(classes, PhraseTables().version)
    sentences = re.split(r"(?<=\.)\s+", text.strip())
    return {c: int(any(p.fullmatch(s) for s in sentences for p in patterns[c])) for c in classes}


def alternating_corpus(n_docs=32, length=16, a=6, b=7, seed=0) -> list:
    """Index sequences ``a b a b ...`` (random start) whose every token is predictable."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_docs):
        first, second = (a, b) if rng.random() < 0.5 else (b, a)
        out.append([first if t % 2 == 0 else second for t in range(length)])
    return out


def carve(corpus, sizes, unlabeled=("unlabeled",)) -> dict:
    """Contiguous named slices of ``corpus`` in ``sizes`` order.

    Partitions named in ``unlabeled`` keep only the report text.
    """
    items = list(corpus)
    total = sum(int(n) for n in sizes.values())
    if total != len(items):
        raise ValidationError(f"partition sizes sum to {total}, corpus has {len(items)} reports")
    out = {}
    start = 0
    for name, n in sizes.items():
        part = items[start:start + int(n)]
        out[name] = [r.report for r in part] if name in unlabeled else part
        start += int(n)
    return out
