"""Classifier heads trained on top of a pretrained :class:`LanguageModel` encoder.

Training follows a freeze-then-unfreeze schedule: for the first
``freeze_epochs`` epochs only the head is updated (encodings are computed
once and cached); afterwards the encoder's embedding and LSTM weights join
the optimizer at ``learning_rate * encoder_lr_scale``.  Every output unit is
an independent sigmoid trained with binary cross-entropy, which covers both
binary and multilabel schemas.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from . import tensor as T
from .corpus import TaskSchema
from .exceptions import NotTrainedError, ShapeError, ValidationError
from .metrics import UndefinedMetricError, micro_auroc
from .nn import MLP, params_hash
from .optim import make_optimizer

__all__ = ["FinetuneSchedule", "ClassifierHead", "SemiSupervisedClassifier", "threshold_labels", "CLF_METRICS_COLUMNS"]

CLF_METRICS_COLUMNS = ("epoch", "split", "phase", "loss", "micro_auc")


@dataclass
class FinetuneSchedule:
    total_epochs: int = 1500
    freeze_epochs: int = 500
    learning_rate: float = 3e-4
    encoder_lr_scale: float = 0.1

    def __post_init__(self):
        if not 0 <= self.freeze_epochs <= self.total_epochs:
            raise ValidationError(
                f"freeze_epochs must lie in [0, total_epochs={self.total_epochs}], got {self.freeze_epochs}"
            )
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        if self.encoder_lr_scale < 0:
            raise ValidationError("encoder_lr_scale must be non-negative")

    def scaled(self, total_epochs):
        """Same freeze fraction over a different number of epochs."""
        return FinetuneSchedule(
            total_epochs, round(self.freeze_epochs * total_epochs / self.total_epochs),
            self.learning_rate, self.encoder_lr_scale,
        )


class ClassifierHead:
    """Encoding -> ReLU hidden layers -> one sigmoid per schema class.

    The output layer starts at zero, so an untrained head predicts 0.5.
    """

    def __init__(self, input_dim, schema: TaskSchema, hidden_sizes=(128,), seed=0, scale=None):
        self.schema = schema
        self.input_dim = int(input_dim)
        self.hidden_sizes = tuple(int(h) for h in hidden_sizes)
        rng = np.random.default_rng(seed)
        self.mlp = MLP([self.input_dim, *self.hidden_sizes, schema.n_classes], rng, zero_output=True, prefix="head")
        # optional fixed standardisation of the encodings: (x - mean) / std
        self.scale = None if scale is None else (np.asarray(scale[0], float), np.asarray(scale[1], float))

    @property
    def params(self):
        return self.mlp.params

    def logits(self, encodings, dropout=0.0, training=False, rng=None):
        x = encodings if isinstance(encodings, T.Tensor) else T.Tensor(encodings)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(f"head expects encodings of width {self.input_dim}, got shape {x.shape}")
        if self.scale is not None:
            mean, std = self.scale
            x = T.add_bias(T.matmul(x, T.Tensor(np.diag(1.0 / std))), T.Tensor(-mean / std))
        return self.mlp.forward(x, dropout, training, rng)

    def forward(self, encodings, dropout=0.0, training=False, rng=None):
        return T.sigmoid(self.logits(encodings, dropout, training, rng))

    def get_arrays(self):
        out = {k: v.data for k, v in self.params.items()}
        if self.scale is not None:
            out["head.scale.mean"], out["head.scale.std"] = self.scale
        return out

    def set_arrays(self, arrays):
        for name, p in self.params.items():
            a = np.asarray(arrays[name], dtype=np.float64)
            if a.shape != p.shape:
                raise ShapeError(f"head parameter {name}: stored {a.shape} != {p.shape}")
            p.data = a.copy()
        if "head.scale.mean" in arrays:
            self.scale = (np.asarray(arrays["head.scale.mean"], float), np.asarray(arrays["head.scale.std"], float))


def threshold_labels(probabilities, threshold=0.5):
    """0/1 labels with ``p >= threshold`` counted positive."""
    if not 0.0 <= threshold <= 1.0:
        raise ValidationError(f"threshold must lie in [0, 1], got {threshold}")
    p = np.asarray(probabilities, dtype=np.float64)
    return (p >= threshold).astype(np.int64)


def _safe_micro_auc(scores, labels):
    try:
        return micro_auroc(scores, labels)
    except UndefinedMetricError:
        return None


class SemiSupervisedClassifier(BaseEstimator, ClassifierMixin):
    """Fine-tuned classifier over a language-model encoder.

    ``fit`` never mutates ``encoder``; the (possibly unfrozen and updated)
    encoder used for prediction is ``encoder_``.
    """

    def __init__(
        self,
        encoder=None,
        schema=None,
        hidden_sizes=(128,),
        total_epochs=1500,
        freeze_epochs=500,
        learning_rate=3e-4,
        encoder_lr_scale=0.1,
        batch_size=32,
        dropout=0.0,
        l2=0.0,
        optimizer="adam",
        pos_weight=None,
        standardize=False,
        restore_best=True,
        early_stopping_patience=None,
        threshold=0.5,
        seed=0,
        verbose=False,
    ):
        self.encoder = encoder
        self.schema = schema
        self.hidden_sizes = hidden_sizes
        self.total_epochs = total_epochs
        self.freeze_epochs = freeze_epochs
        self.learning_rate = learning_rate
        self.encoder_lr_scale = encoder_lr_scale
        self.batch_size = batch_size
        self.dropout = dropout
        self.l2 = l2
        self.optimizer = optimizer
        self.pos_weight = pos_weight
        self.standardize = standardize
        self.restore_best = restore_best
        self.early_stopping_patience = early_stopping_patience
        self.threshold = threshold
        self.seed = seed
        self.verbose = verbose

    @property
    def schedule(self):
        return FinetuneSchedule(self.total_epochs, self.freeze_epochs, self.learning_rate, self.encoder_lr_scale)

    def _check_labels(self, Y):
        Y = np.asarray(Y, dtype=np.float64)
        if Y.ndim == 1:
            Y = Y[:, None]
        if Y.ndim != 2 or Y.shape[1] != self.schema.n_classes:
            raise ValidationError(
                f"label matrix shape {Y.shape} does not match schema {self.schema.name!r} "
                f"with classes {list(self.schema.classes)}"
            )
        if not np.all((Y == 0) | (Y == 1)):
            raise ValidationError("labels must be 0 or 1")
        return Y

    def _make_head(self, train_encodings):
        scale = None
        if self.standardize:
            std = train_encodings.std(axis=0)
            scale = (train_encodings.mean(axis=0), np.where(std > 1e-12, std, 1.0))
        return ClassifierHead(self.encoder_.encoding_dim, self.schema, self.hidden_sizes, seed=self.seed, scale=scale)

    def initialize(self, train_encodings=None):
        """Build an untrained head (zero output layer) without any epochs."""
        if self.encoder is None or self.schema is None:
            raise ValidationError("encoder and schema are required")
        self.schedule  # validates
        self.encoder_ = copy.deepcopy(self.encoder)
        if train_encodings is None:
            train_encodings = np.zeros((1, self.encoder_.encoding_dim))
        self.head_ = self._make_head(train_encodings)
        self.history_ = []
        self.encoder_hashes_ = []
        return self

    def fit(self, X, Y, validation=None):
        """Train on index sequences ``X`` and an ``(n, n_classes)`` 0/1 matrix ``Y``."""
        if self.encoder is None or self.schema is None:
            raise ValidationError("encoder and schema are required")
        schedule = self.schedule
        Y = self._check_labels(Y)
        seqs = [np.asarray(s, dtype=np.int64) for s in X]
        if len(seqs) != Y.shape[0]:
            raise ShapeError(f"{len(seqs)} sequences for {Y.shape[0]} label rows")
        if not seqs:
            raise ValidationError("no labelled training data")
        if validation is not None:
            valid_seqs = [np.asarray(s, dtype=np.int64) for s in validation[0]]
            valid_Y = self._check_labels(validation[1])

        self.encoder_ = copy.deepcopy(self.encoder)
        enc = self.encoder_
        train_cache = enc.transform(seqs)
        valid_cache = enc.transform(valid_seqs) if validation is not None else None
        self.head_ = self._make_head(train_cache)
        head = self.head_
        opt = make_optimizer(self.optimizer, list(head.params.values()), schedule.learning_rate, self.l2)
        rng = np.random.default_rng([int(self.seed), 2])
        self.history_ = []
        self.encoder_hashes_ = []
        best = (-np.inf, None, -1)
        stale = 0
        bs = int(self.batch_size)

        for epoch in range(schedule.total_epochs):
            frozen = epoch < schedule.freeze_epochs
            cached = frozen or schedule.encoder_lr_scale == 0
            if epoch == schedule.freeze_epochs and schedule.encoder_lr_scale > 0:
                opt.add_params(enc.encoder_parameters().values(), lr_scale=schedule.encoder_lr_scale)
            order = rng.permutation(len(seqs))
            loss_sum = 0.0
            outputs = np.empty_like(Y)
            for lo in range(0, len(order), bs):
                idx = order[lo:lo + bs]
                if cached:
                    x = T.Tensor(train_cache[idx])
                else:
                    x = enc.encode_tensor([seqs[i] for i in idx])
                probs = head.forward(x, self.dropout, True, rng)
                loss = T.binary_cross_entropy(probs, Y[idx], pos_weight=self.pos_weight)
                loss.backward()
                opt.step()
                if not cached:
                    for p in enc.named_parameters().values():
                        p.grad = None
                loss_sum += loss.item() * len(idx)
                outputs[idx] = probs.data
            phase = "frozen" if frozen else "unfrozen"
            self.history_.append({"epoch": epoch, "split": "train", "phase": phase,
                                  "loss": loss_sum / len(seqs), "micro_auc": _safe_micro_auc(outputs, Y)})
            self.encoder_hashes_.append(enc.parameter_hash(encoder_only=True))
            if validation is not None:
                venc = valid_cache if cached else enc.transform(valid_seqs)
                with T.no_grad():
                    vprob = head.forward(venc)
                vloss = T.binary_cross_entropy(vprob, valid_Y, pos_weight=self.pos_weight).item()
                vauc = _safe_micro_auc(vprob.data, valid_Y)
                self.history_.append({"epoch": epoch, "split": "valid", "phase": phase,
                                      "loss": vloss, "micro_auc": vauc})
                score = -np.inf if vauc is None else vauc
                if score > best[0]:
                    best = (score, self._snapshot(), epoch)
                    stale = 0
                else:
                    stale += 1
            if self.verbose:
                print(self.history_[-1])
            if self.early_stopping_patience is not None and stale >= self.early_stopping_patience:
                break
        self.best_epoch_ = best[2] if best[1] is not None else None
        if self.restore_best and best[1] is not None:
            self._restore(best[1])
        return self

    def _snapshot(self):
        return {
            "head": {k: v.copy() for k, v in self.head_.get_arrays().items()},
            "encoder": {k: v.copy() for k, v in self.encoder_.get_arrays().items()},
        }

    def _restore(self, snap):
        self.head_.set_arrays(snap["head"])
        self.encoder_.set_arrays(snap["encoder"])

    def _check_trained(self):
        if not hasattr(self, "head_"):
            raise NotTrainedError("classifier head has no weights; call fit() first")

    def predict_proba(self, X, encodings=None):
        """Per-class probabilities, shape ``(n, n_classes)``."""
        self._check_trained()
        if encodings is None:
            encodings = self.encoder_.transform(X)
        with T.no_grad():
            return self.head_.forward(encodings).data

    def predict(self, X):
        return threshold_labels(self.predict_proba(X), self.threshold)

    def encoder_hash(self):
        self._check_trained()
        return self.encoder_.parameter_hash(encoder_only=True)

    def head_hash(self):
        self._check_trained()
        return params_hash(self.head_.params)

    def schedule_dict(self):
        return asdict(self.schedule)
