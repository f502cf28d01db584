"""Versioned binary container for trained models.

Layout (all integers little-endian)::

    magic            8 bytes   b"RPTLMCNT"
    format_version   uint32
    manifest_length  uint64    byte length of the manifest
    manifest         UTF-8 JSON (sorted keys)
    payload          concatenated row-major '<f4' tensors

The manifest records ``format_version``, ``kind``, ``config``,
``vocab_hash``, ``metadata`` and a ``tensors`` directory mapping each
tensor name to ``{"shape", "offset", "length"}`` (byte offsets into the
payload), plus ``payload_sha256``.  Values are computed in float64 and
stored as float32; :func:`snap_to_storage` rounds live parameters onto the
float32 grid so a saved model and its reloaded copy compute identically.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from .exceptions import ContainerError, HashMismatchError

__all__ = [
    "MAGIC",
    "FORMAT_VERSION",
    "KINDS",
    "Container",
    "save_container",
    "load_container",
    "read_manifest",
    "snap_to_storage",
    "save_language_model",
    "load_language_model",
    "save_lm_checkpoint",
    "load_lm_checkpoint",
    "save_classifier",
    "load_classifier",
    "save_baseline",
    "load_baseline",
]

MAGIC = b"RPTLMCNT"
FORMAT_VERSION = 1
KINDS = ("language_model", "lm_checkpoint", "classifier_head", "baseline")
_HEADER = struct.Struct("<8sIQ")


@dataclass
class Container:
    manifest: dict
    arrays: dict

    @property
    def kind(self):
        return self.manifest["kind"]

    @property
    def config(self):
        return self.manifest["config"]

    @property
    def vocab_hash(self):
        return self.manifest.get("vocab_hash")

    @property
    def metadata(self):
        return self.manifest.get("metadata", {})


def snap_to_storage(params):
    """Round every parameter tensor in ``params`` (name -> Tensor) to float32 values, in place."""
    for p in params.values():
        p.data = p.data.astype("<f4").astype(np.float64)


def save_container(path, kind, arrays, config=None, vocab_hash=None, metadata=None):
    """Write ``arrays`` (name -> array) and a manifest to ``path``; returns the manifest."""
    if kind not in KINDS:
        raise ContainerError(f"unknown container kind {kind!r}; expected one of {KINDS}")
    tensors = {}
    blobs = []
    offset = 0
    for name in sorted(arrays):
        a = np.asarray(arrays[name], dtype=np.float64)
        if not np.all(np.isfinite(a)):
            raise ContainerError(f"tensor {name!r} contains non-finite values")
        blob = np.ascontiguousarray(a, dtype="<f4").tobytes()
        tensors[name] = {"shape": list(a.shape), "offset": offset, "length": len(blob)}
        blobs.append(blob)
        offset += len(blob)
    payload = b"".join(blobs)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": config or {},
        "vocab_hash": vocab_hash,
        "metadata": metadata or {},
        "tensors": tensors,
        "payload_length": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    body = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(body)))
        fh.write(body)
        fh.write(payload)
    return manifest


def _read_header(fh, path):
    head = fh.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise ContainerError(f"{path}: file too short to be a model container")
    magic, version, length = _HEADER.unpack(head)
    if magic != MAGIC:
        raise ContainerError(f"{path}: not a model container (bad magic {magic!r})")
    if version != FORMAT_VERSION:
        raise ContainerError(f"{path}: container format_version {version} is not supported (expected {FORMAT_VERSION})")
    body = fh.read(length)
    if len(body) != length:
        raise ContainerError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: manifest is not valid JSON ({exc})") from None
    if manifest.get("format_version") != version:
        raise ContainerError(f"{path}: manifest format_version disagrees with header")
    return manifest


def read_manifest(path):
    with open(path, "rb") as fh:
        return _read_header(fh, path)


def _check_directory(manifest, payload_length, path):
    spans = []
    for name, entry in manifest["tensors"].items():
        shape, off, length = entry["shape"], entry["offset"], entry["length"]
        if length != 4 * int(np.prod(shape, dtype=np.int64)):
            raise ContainerError(f"{path}: tensor {name!r} length {length} does not match shape {shape}")
        if off < 0 or off + length > payload_length:
            raise ContainerError(f"{path}: tensor {name!r} lies outside the payload")
        spans.append((off, off + length, name))
    spans.sort()
    for (a0, a1, an), (b0, b1, bn) in zip(spans, spans[1:]):
        if b0 < a1:
            raise ContainerError(f"{path}: tensors {an!r} and {bn!r} overlap")


def load_container(path, kind=None, vocab_hash=None):
    """Read and verify a container.

    ``kind`` (str or tuple) restricts accepted kinds.  When ``vocab_hash`` is
    given it must equal the stored hash, else :class:`HashMismatchError`.
    Arrays are returned as float64 copies of the stored float32 values.
    """
    with open(path, "rb") as fh:
        manifest = _read_header(fh, path)
        payload = fh.read()
    if kind is not None:
        allowed = (kind,) if isinstance(kind, str) else tuple(kind)
        if manifest.get("kind") not in allowed:
            raise ContainerError(f"{path}: container holds a {manifest.get('kind')!r}, expected {' or '.join(allowed)}")
    if len(payload) != manifest["payload_length"]:
        raise ContainerError(f"{path}: payload is {len(payload)} bytes, manifest says {manifest['payload_length']}")
    digest = hashlib.sha256(payload).hexdigest()
    if digest != manifest["payload_sha256"]:
        raise HashMismatchError("payload", manifest["payload_sha256"], digest)
    if vocab_hash is not None and manifest.get("vocab_hash") != vocab_hash:
        raise HashMismatchError("vocabulary", manifest.get("vocab_hash"), vocab_hash)
    _check_directory(manifest, len(payload), path)
    arrays = {}
    for name, entry in manifest["tensors"].items():
        raw = np.frombuffer(payload, dtype="<f4", count=entry["length"] // 4, offset=entry["offset"])
        arrays[name] = raw.reshape(entry["shape"]).astype(np.float64)
    return Container(manifest, arrays)


# ---------------------------------------------------------------------------
# model-level helpers
# ---------------------------------------------------------------------------

def _jsonable_params(estimator, skip=()):
    out = {}
    for k, v in estimator.get_params(deep=False).items():
        if k in skip:
            continue
        out[k] = list(v) if isinstance(v, tuple) else v
    return out


def _vocab_hash(vocab):
    return None if vocab is None else vocab.hash


def save_language_model(path, model, vocab, metadata=None):
    """Store a trained :class:`LanguageModel`; its parameters are snapped to float32 first."""
    params = model.named_parameters()
    snap_to_storage(params)
    meta = {
        "epochs_trained": int(getattr(model, "epochs_trained_", 0)),
        "best_validation_loss": getattr(model, "best_validation_loss_", None),
        "parameter_hash": model.parameter_hash(),
        "encoder_hash": model.parameter_hash(encoder_only=True),
    }
    meta.update(metadata or {})
    return save_container(path, "language_model", model.get_arrays(), _jsonable_params(model), _vocab_hash(vocab), meta)


def _build_language_model(config, arrays):
    from .langmodel import LanguageModel

    model = LanguageModel(**config).initialize()
    model.set_arrays(arrays)
    return model


def load_language_model(path, vocab=None):
    c = load_container(path, "language_model", _vocab_hash(vocab))
    return _build_language_model(c.config, c.arrays)


def save_lm_checkpoint(path, model, vocab):
    """Resumable training state: weights, optimizer moments, best weights, RNG state, history."""
    state = model.checkpoint_state()
    arrays = dict(state["arrays"])
    if state["best_arrays"] is not None:
        arrays.update({f"best.{k}": v for k, v in state["best_arrays"].items()})
    config = {
        "model": _jsonable_params(model),
        "epoch": state["epoch"],
        "step_count": state["step_count"],
        "rng_state": state["rng_state"],
        "history": state["history"],
        "best_loss": None if not np.isfinite(state["best_loss"]) else state["best_loss"],
    }
    return save_container(path, "lm_checkpoint", arrays, config, _vocab_hash(vocab))


def load_lm_checkpoint(path, vocab=None):
    """Returns ``(model_config, resume_state)`` for ``LanguageModel(**model_config).fit(..., resume_from=state)``."""
    c = load_container(path, "lm_checkpoint", _vocab_hash(vocab))
    cfg = c.config
    arrays = {k: v for k, v in c.arrays.items() if not k.startswith("best.")}
    best = {k[len("best."):]: v for k, v in c.arrays.items() if k.startswith("best.")} or None
    state = {
        "epoch": cfg["epoch"],
        "step_count": cfg["step_count"],
        "rng_state": cfg["rng_state"],
        "history": cfg["history"],
        "arrays": arrays,
        "best_loss": np.inf if cfg["best_loss"] is None else cfg["best_loss"],
        "best_arrays": best,
    }
    return cfg["model"], state


def save_classifier(path, clf, vocab, metadata=None):
    """Store a fitted :class:`SemiSupervisedClassifier`: head weights plus its (possibly tuned) encoder."""
    clf._check_trained()
    snap_to_storage(clf.head_.params)
    if clf.head_.scale is not None:
        clf.head_.scale = tuple(a.astype("<f4").astype(np.float64) for a in clf.head_.scale)
    snap_to_storage(clf.encoder_.named_parameters())
    arrays = dict(clf.head_.get_arrays())
    arrays.update({f"encoder.{k}": v for k, v in clf.encoder_.get_arrays().items()})
    config = {
        "classifier": _jsonable_params(clf, skip=("encoder", "schema")),
        "schema": clf.schema.to_dict(),
        "encoder": _jsonable_params(clf.encoder_),
    }
    meta = {
        "best_epoch": getattr(clf, "best_epoch_", None),
        "encoder_hash": clf.encoder_hash(),
        "head_hash": clf.head_hash(),
    }
    meta.update(metadata or {})
    return save_container(path, "classifier_head", arrays, config, _vocab_hash(vocab), meta)


def load_classifier(path, vocab=None):
    from .corpus import TaskSchema
    from .finetune import ClassifierHead, SemiSupervisedClassifier

    c = load_container(path, "classifier_head", _vocab_hash(vocab))
    encoder = _build_language_model(
        c.config["encoder"], {k[len("encoder."):]: v for k, v in c.arrays.items() if k.startswith("encoder.")}
    )
    params = dict(c.config["classifier"])
    params["hidden_sizes"] = tuple(params["hidden_sizes"])
    clf = SemiSupervisedClassifier(encoder=encoder, schema=TaskSchema.from_dict(c.config["schema"]), **params)
    clf.initialize()
    clf.encoder_ = encoder
    scale = None
    if "head.scale.mean" in c.arrays:
        scale = (c.arrays["head.scale.mean"], c.arrays["head.scale.std"])
    clf.head_ = ClassifierHead(encoder.encoding_dim, clf.schema, clf.hidden_sizes, seed=clf.seed, scale=scale)
    clf.head_.set_arrays(c.arrays)
    return clf


def save_baseline(path, model, extra_arrays=None, config=None, vocab_hash=None, metadata=None):
    """Store a fitted baseline estimator, optionally with feature-extraction arrays/config."""
    if model.kind == "naive_bayes":
        arrays = {"nb.feature_count": model.feature_count_, "nb.class_count": model.class_count_}
    elif model.kind in ("logistic", "svm"):
        model.coef_ = model.coef_.astype("<f4").astype(np.float64)
        model.intercept_ = model.intercept_.astype("<f4").astype(np.float64)
        arrays = {"linear.coef": model.coef_, "linear.intercept": model.intercept_}
    else:
        snap_to_storage(model.net_.params)
        arrays = dict(model.get_arrays())
    arrays.update(extra_arrays or {})
    cfg = {
        "model": model.kind,
        "params": _jsonable_params(model),
        "n_features": int(model.n_features_in_),
        "n_outputs": int(model.n_outputs_),
        "features": config or {},
    }
    return save_container(path, "baseline", arrays, cfg, vocab_hash, metadata)


def load_baseline(path, vocab_hash=None):
    """Returns ``(model, container)``; feature arrays stay in ``container.arrays``."""
    from .baselines import BASELINES

    c = load_container(path, "baseline", vocab_hash)
    kind = c.config["model"]
    params = dict(c.config["params"])
    if "hidden_sizes" in params:
        params["hidden_sizes"] = tuple(params["hidden_sizes"])
    model = BASELINES[kind](**params)
    if kind == "naive_bayes":
        model.set_counts(c.arrays["nb.feature_count"], c.arrays["nb.class_count"])
    elif kind in ("logistic", "svm"):
        model._init_weights(c.config["n_features"], c.config["n_outputs"])
        model.coef_ = c.arrays["linear.coef"].copy()
        model.intercept_ = c.arrays["linear.intercept"].copy()
    else:
        model.initialize(c.config["n_features"], c.config["n_outputs"])
        model.set_arrays(c.arrays)
    return model, c
