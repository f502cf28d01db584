"""``reportlm`` command line: synth, train-lm, encode, train-clf, baseline, project.

Exit codes: 0 success, 1 validation/config error, 2 I/O error, 3 internal error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import traceback
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import SWEEP_COLUMNS, align_embeddings, load_embeddings, sweep
from .config import load_config, require_paths, write_effective_config
from .container import (
    load_classifier,
    load_language_model,
    load_lm_checkpoint,
    save_classifier,
    save_language_model,
    save_lm_checkpoint,
)
from .corpus import (
    LABELED_SPLIT_PRESETS,
    PRESET_SCHEMAS,
    LabeledReport,
    SplitSpec,
    TaskSchema,
    Vocabulary,
    build_vocabulary,
    encode_indices,
    read_corpus,
    split,
    tokenize,
    write_corpus,
)
from .exceptions import ContainerError, ReportLMError, ValidationError
from .finetune import CLF_METRICS_COLUMNS, SemiSupervisedClassifier, threshold_labels
from .langmodel import LanguageModel, write_metrics_csv
from .metrics import evaluate
from .synthetic import SynthConfig, carve, generate_synthetic_corpus
from .vectorize import CountVectorizer, TfidfVectorizer, fit_truncated_svd

__all__ = ["main", "build_parser", "EXIT_OK", "EXIT_VALIDATION", "EXIT_IO", "EXIT_INTERNAL"]

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_INTERNAL = 0, 1, 2, 3


def _out_dir(path):
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _write_rows(path, columns, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow(["" if r.get(c) is None else (repr(r[c]) if isinstance(r[c], float) else r[c]) for c in columns])


def _tokens(reports):
    return [tokenize(r.text) for r in reports]


def _check_nonempty(reports):
    for r in reports:
        if not r.text.strip():
            raise ValidationError(f"report {r.id!r} has empty text and cannot be encoded")


def _schema(config, labeled):
    if config["paths"].get("schema"):
        (path,) = require_paths(config, "schema")
        with open(path, encoding="utf-8") as fh:
            return TaskSchema.from_dict(json.load(fh))
    keys = sorted({k for item in labeled for k in item.labels})
    for schema in PRESET_SCHEMAS.values():
        if sorted(schema.classes) == keys:
            return schema
    raise ValidationError(f"no schema given (paths.schema) and labels {keys} match no preset task")


def _labeled_partitions(config):
    """``(train, valid, test)`` labelled reports from ``paths.labeled`` (+ optional ``paths.test``)."""
    (labeled_path,) = require_paths(config, "labeled")
    labeled = read_corpus(labeled_path)
    if not labeled or not all(isinstance(r, LabeledReport) for r in labeled):
        raise ValidationError(f"{labeled_path}: every record needs 'labels'")
    fractions = config["labeled_split"]
    if isinstance(fractions, str):
        if fractions not in LABELED_SPLIT_PRESETS:
            raise ValidationError(f"unknown labeled_split preset {fractions!r}")
        fractions = LABELED_SPLIT_PRESETS[fractions]
    parts = split(labeled, SplitSpec(dict(fractions), seed=config["seed"]))
    test = parts.get("test", [])
    if config["paths"].get("test"):
        (test_path,) = require_paths(config, "test")
        test = read_corpus(test_path)
        if not all(isinstance(r, LabeledReport) for r in test):
            raise ValidationError(f"{test_path}: every record needs 'labels'")
    if not test:
        raise ValidationError("no test reports: set paths.test or a non-zero labeled_split.test")
    if not parts.get("train"):
        raise ValidationError("labeled_split leaves no training reports")
    return parts["train"], parts.get("valid", []), test


def _load_vocab(config):
    (path,) = require_paths(config, "vocab")
    return Vocabulary.load(path)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(config, out):
    out = _out_dir(out)
    s = dict(config["synth"])
    partitions = s.pop("partitions", None)
    s["filler_sentences"] = tuple(s["filler_sentences"])
    synth = SynthConfig(seed=config["seed"], **s)
    reports = generate_synthetic_corpus(synth)
    files = {"corpus": reports} if not partitions else carve(reports, partitions)
    for name, items in files.items():
        write_corpus(out / f"{name}.jsonl", items)
    with open(out / "schema.json", "w", encoding="utf-8") as fh:
        json.dump(synth.schema.to_dict(), fh, sort_keys=True, indent=1)
        fh.write("\n")
    write_effective_config(config, out)
    Y = synth.schema.label_matrix(reports)
    print(f"wrote {len(reports)} reports to {out}")
    for c, p in zip(synth.schema.classes, Y.mean(axis=0)):
        print(f"  {c}: prevalence {p:.3f}")
    return EXIT_OK


def cmd_train_lm(config, out, resume=None):
    out = _out_dir(out)
    (corpus_path,) = require_paths(config, "corpus")
    reports = read_corpus(corpus_path)
    parts = split(reports, SplitSpec(dict(config["split"]), seed=config["seed"]))
    train_tokens = _tokens(parts["train"])
    if config["paths"].get("vocab"):
        vocab = _load_vocab(config)
    else:
        vocab = build_vocabulary(train_tokens, **config["vocab"])
    vocab.save(out / "vocab.json")
    train = [encode_indices(t, vocab) for t in train_tokens]
    valid = [encode_indices(t, vocab) for t in _tokens(parts.get("valid", []))] or None

    params = dict(config["lm"], vocab_size=len(vocab), seed=config["seed"])
    state = None
    if resume is not None:
        try:
            saved, state = load_lm_checkpoint(resume, vocab)
        except ContainerError as exc:
            raise ValidationError(f"cannot resume from {resume}: {exc}") from None
        saved.update(epochs=params["epochs"], verbose=False)
        params = saved
    model = LanguageModel(**params)
    metrics_path = out / "lm_metrics.csv"
    timing = bool(config.get("timing", True))

    def on_epoch(m, rows):
        write_metrics_csv(m.history_, metrics_path, timing=timing)
        save_lm_checkpoint(out / "checkpoint.rlm", m, vocab)
        last = rows[-1]
        print(f"epoch {last['epoch']}: {last['split']} loss {last['loss']:.4f} accuracy {last['accuracy']:.4f}")

    write_effective_config(config, out)
    model.fit(train, validation=valid, resume_from=state, epoch_callback=on_epoch)
    write_metrics_csv(model.history_, metrics_path, timing=timing)
    save_language_model(out / "lm.rlm", model, vocab)
    print(f"saved {out / 'lm.rlm'} (best validation loss {model.best_validation_loss_})")
    return EXIT_OK


def cmd_encode(model_path, vocab_path, corpus_path, out_path):
    vocab = Vocabulary.load(vocab_path)
    model = load_language_model(model_path, vocab)
    reports = read_corpus(corpus_path)
    _check_nonempty(reports)
    enc = model.transform([encode_indices(t, vocab) for t in _tokens(reports)])
    _write_jsonl(out_path, ({"id": r.id, "vector": [float(x) for x in row]} for r, row in zip(reports, enc)))
    print(f"wrote {len(reports)} encodings of dimension {enc.shape[1]} to {out_path}")
    return EXIT_OK


def cmd_train_clf(config, out):
    out = _out_dir(out)
    vocab = _load_vocab(config)
    (encoder_path,) = require_paths(config, "encoder")
    encoder = load_language_model(encoder_path, vocab)
    train, valid, test = _labeled_partitions(config)
    schema = _schema(config, train)
    for part in (train, valid, test):
        _check_nonempty(part)

    def xy(items):
        return [encode_indices(t, vocab) for t in _tokens(items)], schema.label_matrix(items)

    Xtr, Ytr = xy(train)
    validation = xy(valid) if valid else None
    Xte, Yte = xy(test)
    params = dict(config["finetune"])
    params["hidden_sizes"] = tuple(params["hidden_sizes"])
    clf = SemiSupervisedClassifier(encoder=encoder, schema=schema, seed=config["seed"], **params)
    write_effective_config(config, out)
    clf.fit(Xtr, Ytr, validation=validation)
    _write_rows(out / "clf_metrics.csv", CLF_METRICS_COLUMNS, clf.history_)
    save_classifier(out / "head.rlm", clf, vocab)

    scores = clf.predict_proba(Xte)
    report = evaluate(scores, Yte, schema.classes, threshold=clf.threshold)
    report.save(out / "eval_report.json")
    report.write_roc_csv(out / "roc_micro.csv", "micro")
    predicted = threshold_labels(scores, clf.threshold)
    _write_jsonl(out / "predictions.jsonl", (
        {"id": r.id,
         "scores": {c: float(s) for c, s in zip(schema.classes, row)},
         "labels": {c: int(p) for c, p in zip(schema.classes, prow)}}
        for r, row, prow in zip(test, scores, predicted)
    ))
    auc = report.micro["auc"]
    print(f"test micro-AUC {'undefined' if auc is None else f'{auc:.4f}'}  micro-F1 {report.micro['f1']:.4f}")
    return EXIT_OK


def _feature_sets(config, train, test):
    b = config["baselines"]
    sources = list(b["features"])
    out = {}
    tr_tok, te_tok = _tokens(train), _tokens(test)
    for source in sources:
        if source == "tfidf":
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                vec = TfidfVectorizer().fit(tr_tok)
            out["tfidf"] = (vec.transform(tr_tok), vec.transform(te_tok))
        elif source == "counts":
            vec = CountVectorizer().fit(tr_tok)
            out["counts"] = (vec.transform(tr_tok), vec.transform(te_tok))
        elif source == "embeddings":
            if not b.get("embeddings"):
                raise ValidationError("feature source 'embeddings' needs baselines.embeddings (JSON-lines path)")
            ids, matrix = load_embeddings(b["embeddings"])
            out["embeddings"] = (align_embeddings(ids, matrix, [r.id for r in train]),
                                 align_embeddings(ids, matrix, [r.id for r in test]))
        else:
            raise ValidationError(f"unknown feature source {source!r}; use tfidf, counts or embeddings")
    return out


def cmd_baseline(config, out):
    out = _out_dir(out)
    b = config["baselines"]
    models = list(b.get("models") or [])
    if not models:
        raise ValidationError("no baseline models requested (baselines.models is empty)")
    if not b.get("features"):
        raise ValidationError("no feature sources requested (baselines.features is empty)")
    train, _, test = _labeled_partitions(config)
    schema = _schema(config, train)
    features = _feature_sets(config, train, test)
    params = {}
    for m in models:
        p = dict(b.get(m) or {})
        if "hidden_sizes" in p:
            p["hidden_sizes"] = tuple(p["hidden_sizes"])
        if m != "naive_bayes":
            p.setdefault("seed", config["seed"])
        params[m] = p
    write_effective_config(config, out)
    rows, _ = sweep(features, schema.label_matrix(train), schema.label_matrix(test), schema.classes, models, params)
    _write_rows(out / "baselines.csv", SWEEP_COLUMNS, rows)
    for r in rows:
        auc = "error" if r["micro_auc"] is None else f"{r['micro_auc']:.4f}"
        print(f"{r['model']:>12} {r['features']:>10}  micro-AUC {auc}")
    return EXIT_OK


def _label_strings(items):
    out = {}
    for r in items:
        if isinstance(r, LabeledReport):
            pos = sorted(k for k, v in r.labels.items() if v)
            out[r.id] = "|".join(pos) if pos else "none"
    return out


def cmd_project(out_path, k, seed, vectors=None, corpus=None, labels=None):
    if k not in (2, 3):
        raise ValidationError(f"k must be 2 or 3, got {k}")
    if (vectors is None) == (corpus is None):
        raise ValidationError("give exactly one of --vectors or --corpus")
    label_of = {}
    if vectors is not None:
        ids, matrix = load_embeddings(vectors)
    else:
        reports = read_corpus(corpus)
        ids = [r.id for r in reports]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            toks = _tokens(reports)
            matrix = TfidfVectorizer().fit(toks).transform(toks)
        label_of = _label_strings(reports)
    if labels is not None:
        label_of = _label_strings(read_corpus(labels))
    if k > min(matrix.shape):
        raise ValidationError(f"k={k} exceeds the data dimension {min(matrix.shape)}")
    coords = fit_truncated_svd(matrix, k, seed=seed).transform(matrix)
    axes = ["x", "y", "z"][:k]
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", *axes, "label"])
        for rid, row in zip(ids, np.asarray(coords)):
            w.writerow([rid, *(repr(float(v)) for v in row), label_of.get(rid, "")])
    print(f"wrote {len(ids)} projected points to {out_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="reportlm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def configured(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", "-c", help="YAML config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value, e.g. --set lm.epochs=5 (repeatable)")
        p.add_argument("--out", "-o", required=True, help="output directory")
        return p

    configured("synth", "generate a synthetic labelled corpus")
    p = configured("train-lm", "pretrain the bidirectional language model")
    p.add_argument("--resume", help="checkpoint container to resume from")
    configured("train-clf", "fine-tune a classifier head on labelled reports")
    configured("baseline", "run the baseline sweep (model x feature source)")

    p = sub.add_parser("encode", help="write document encodings as JSON lines")
    p.add_argument("--model", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", "-o", required=True)

    p = sub.add_parser("project", help="truncated-SVD projection to 2 or 3 coordinates")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--vectors", help="JSON-lines {id, vector} file")
    src.add_argument("--corpus", help="JSON-lines corpus, projected via TFIDF")
    p.add_argument("--labels", help="labelled corpus whose labels are joined by id")
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", "-o", required=True)
    return parser


def _dispatch(args):
    if args.command == "encode":
        return cmd_encode(args.model, args.vocab, args.corpus, args.out)
    if args.command == "project":
        return cmd_project(args.out, args.k, args.seed, args.vectors, args.corpus, args.labels)
    config = load_config(args.config, args.overrides)
    if args.command == "synth":
        return cmd_synth(config, args.out)
    if args.command == "train-lm":
        return cmd_train_lm(config, args.out, args.resume)
    if args.command == "train-clf":
        return cmd_train_clf(config, args.out)
    return cmd_baseline(config, args.out)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except (ValidationError, ContainerError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ReportLMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception:  # noqa: BLE001
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
