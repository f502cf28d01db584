"""Classical baselines: multinomial Naive Bayes, logistic regression, linear SVM, MLP.

All four share one interface: ``fit(X, Y)`` with a feature matrix (sparse or
dense) and a 0/1 label vector or ``(n, n_classes)`` matrix, then
``predict_scores(X)`` returning an ``(n, n_classes)`` score matrix.  Each
column is an independent binary problem.  Naive Bayes, logistic regression
and the MLP score with probabilities; the SVM scores with raw margins.
"""

from __future__ import annotations

import json

import numpy as np
import scipy.sparse as sp
from scipy.special import expit, logsumexp
from sklearn.base import BaseEstimator, ClassifierMixin

from . import tensor as T
from .exceptions import NotTrainedError, ShapeError, ValidationError
from .metrics import evaluate
from .nn import MLP
from .optim import make_optimizer

__all__ = [
    "MultinomialNaiveBayes",
    "LogisticRegression",
    "LinearSVM",
    "MLPClassifier",
    "train_naive_bayes",
    "train_logistic",
    "train_svm",
    "train_mlp",
    "predict_scores",
    "load_embeddings",
    "align_embeddings",
    "BASELINES",
    "sweep",
    "SWEEP_COLUMNS",
]


def _features(X):
    if sp.issparse(X):
        return X.tocsr().astype(np.float64)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError(f"feature matrix must be 2-D, got shape {X.shape}")
    return X


def _labels(Y, n_rows):
    Y = np.asarray(Y)
    if Y.ndim == 1:
        Y = Y[:, None]
    if Y.ndim != 2:
        raise ShapeError(f"labels must be a vector or matrix, got shape {Y.shape}")
    if Y.shape[0] != n_rows:
        raise ShapeError(f"{n_rows} feature rows for {Y.shape[0]} label rows")
    if not np.all((Y == 0) | (Y == 1)):
        raise ValidationError("labels must be 0 or 1")
    return Y.astype(np.float64)


class _Baseline(BaseEstimator, ClassifierMixin):
    kind = "baseline"

    def _check_trained(self):
        if not hasattr(self, "n_features_in_"):
            raise NotTrainedError(f"{type(self).__name__} is not trained; call fit() first")

    def _check_width(self, X):
        if X.shape[1] != self.n_features_in_:
            raise ShapeError(f"model was trained on {self.n_features_in_} features, got {X.shape[1]}")

    def predict(self, X, threshold=0.5):
        return (self.predict_scores(X) >= threshold).astype(np.int64)

    def predict_proba(self, X):
        return self.predict_scores(X)


# ---------------------------------------------------------------------------
# Naive Bayes
# ---------------------------------------------------------------------------

class MultinomialNaiveBayes(_Baseline):
    """Multinomial NB with additive smoothing, one binary model per label column.

    ``feature_log_prob_[j]`` has shape ``(2, n_features)``: rows for the
    negative and positive class of column ``j``.  A class absent from the
    training labels gets log-prior ``-inf``.
    """

    kind = "naive_bayes"

    def __init__(self, alpha=1.0):
        self.alpha = alpha

    def fit(self, X, Y):
        X = _features(X)
        Y = _labels(Y, X.shape[0])
        if self.alpha <= 0:
            raise ValidationError(f"alpha must be positive, got {self.alpha}")
        min_value = X.min() if X.shape[0] * X.shape[1] else 0.0
        if min_value < 0:
            raise ValidationError(
                f"Naive Bayes needs non-negative features (min {min_value:.4g}); "
                "negative idf weights occur for terms in every document, use raw counts instead"
            )
        feature_count = np.empty((Y.shape[1], 2, X.shape[1]))
        for j in range(Y.shape[1]):
            pos = Y[:, j]
            feature_count[j, 0] = np.asarray(X.T @ (1.0 - pos)).ravel()
            feature_count[j, 1] = np.asarray(X.T @ pos).ravel()
        class_count = np.stack([X.shape[0] - Y.sum(axis=0), Y.sum(axis=0)], axis=1)
        return self.set_counts(feature_count, class_count)

    def set_counts(self, feature_count, class_count):
        """Derive log-probabilities from ``(n_outputs, 2, n_features)`` and ``(n_outputs, 2)`` counts."""
        self.feature_count_ = np.asarray(feature_count, dtype=np.float64)
        self.class_count_ = np.asarray(class_count, dtype=np.float64)
        smoothed = self.feature_count_ + self.alpha
        self.feature_log_prob_ = np.log(smoothed) - np.log(smoothed.sum(axis=2, keepdims=True))
        with np.errstate(divide="ignore"):
            self.class_log_prior_ = np.log(self.class_count_) - np.log(self.class_count_.sum(axis=1, keepdims=True))
        self.n_outputs_, _, self.n_features_in_ = self.feature_count_.shape
        return self

    def joint_log_likelihood(self, X):
        """``(n, n_outputs, 2)`` unnormalised log posteriors."""
        self._check_trained()
        X = _features(X)
        self._check_width(X)
        out = np.empty((X.shape[0], self.n_outputs_, 2))
        for j in range(self.n_outputs_):
            out[:, j, :] = np.asarray(X @ self.feature_log_prob_[j].T) + self.class_log_prior_[j]
        return out

    def predict_log_posterior(self, X):
        jll = self.joint_log_likelihood(X)
        return jll - logsumexp(jll, axis=2, keepdims=True)

    def predict_scores(self, X):
        return np.exp(self.predict_log_posterior(X)[:, :, 1])

    @property
    def coef_(self):
        """Per-column log-odds weights, shape ``(n_outputs, n_features)``."""
        self._check_trained()
        return self.feature_log_prob_[:, 1, :] - self.feature_log_prob_[:, 0, :]


# ---------------------------------------------------------------------------
# linear models trained by full-batch gradient descent
# ---------------------------------------------------------------------------

class _LinearGD(_Baseline):
    def _init_weights(self, n_features, n_outputs):
        self.coef_ = np.zeros((n_outputs, n_features))
        self.intercept_ = np.zeros(n_outputs)
        self.n_features_in_ = n_features
        self.n_outputs_ = n_outputs

    def decision_function(self, X):
        self._check_trained()
        X = _features(X)
        self._check_width(X)
        return np.asarray(X @ self.coef_.T) + self.intercept_

    def fit(self, X, Y):
        X = _features(X)
        Y = _labels(Y, X.shape[0])
        self._init_weights(X.shape[1], Y.shape[1])
        self.loss_curve_ = []
        for epoch in range(int(self.epochs)):
            loss, grad_w, grad_b = self._loss_and_grad(X, Y)
            self.loss_curve_.append(loss)
            lr = self._learning_rate(epoch)
            self.coef_ -= lr * grad_w
            self.intercept_ -= lr * grad_b
        self.loss_curve_.append(self._loss_and_grad(X, Y)[0])
        return self

    def _learning_rate(self, epoch):
        return self.lr


class LogisticRegression(_LinearGD):
    """L2-regularised log-loss minimised by full-batch gradient descent.

    Objective per column: ``mean(log-loss) + l2/2 * ||w||^2`` (bias unpenalised).
    """

    kind = "logistic"

    def __init__(self, lr=0.1, epochs=500, l2=0.0, seed=0):
        self.lr = lr
        self.epochs = epochs
        self.l2 = l2
        self.seed = seed

    def _loss_and_grad(self, X, Y):
        n = X.shape[0]
        z = np.asarray(X @ self.coef_.T) + self.intercept_
        p = expit(z)
        # log(1 + e^z) - y z, stable for both signs
        loss = float(np.sum(np.logaddexp(0.0, z) - Y * z) / n + 0.5 * self.l2 * np.sum(self.coef_ ** 2))
        r = (p - Y) / n
        grad_w = np.asarray(X.T @ r).T + self.l2 * self.coef_
        return loss, grad_w, r.sum(axis=0)

    def predict_scores(self, X):
        return expit(self.decision_function(X))


class LinearSVM(_LinearGD):
    """Linear SVM by full-batch subgradient descent on the primal.

    Objective per column: ``lambda/2 ||w||^2 + mean(max(0, 1 - y(w.x + b)))``
    with ``lambda = 1 / (C n)`` and labels mapped to -1/+1.  The step size
    decays as ``lr / (1 + decay * epoch)``.
    """

    kind = "svm"

    def __init__(self, lr=0.1, epochs=500, C=1.0, decay=0.0, seed=0):
        self.lr = lr
        self.epochs = epochs
        self.C = C
        self.decay = decay
        self.seed = seed

    def _learning_rate(self, epoch):
        return self.lr / (1.0 + self.decay * epoch)

    def _loss_and_grad(self, X, Y):
        if self.C <= 0:
            raise ValidationError(f"C must be positive, got {self.C}")
        n = X.shape[0]
        lam = 1.0 / (self.C * n)
        s = 2.0 * Y - 1.0
        margins = s * (np.asarray(X @ self.coef_.T) + self.intercept_)
        hinge = np.maximum(0.0, 1.0 - margins)
        loss = float(np.sum(hinge) / n + 0.5 * lam * np.sum(self.coef_ ** 2))
        # subgradient: -y x on samples inside the margin
        active = -(s * (margins < 1.0)) / n
        grad_w = np.asarray(X.T @ active).T + lam * self.coef_
        return loss, grad_w, active.sum(axis=0)

    def margins(self, X, Y):
        """``y (w.x + b)`` per cell with labels mapped to -1/+1."""
        Y = _labels(Y, X.shape[0])
        return (2.0 * Y - 1.0) * self.decision_function(X)

    def predict_scores(self, X):
        return self.decision_function(X)

    def predict(self, X, threshold=0.0):
        return (self.decision_function(X) >= threshold).astype(np.int64)


# ---------------------------------------------------------------------------
# feedforward network
# ---------------------------------------------------------------------------

class MLPClassifier(_Baseline):
    """ReLU feedforward net with one sigmoid output per label column.

    The final layer starts at zero, so an untrained net outputs 0.5.
    """

    kind = "mlp"

    def __init__(self, hidden_sizes=(512, 256, 128), lr=1e-3, epochs=200, batch_size=32,
                 dropout=0.2, l2=1e-4, optimizer="adam", seed=0):
        self.hidden_sizes = hidden_sizes
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.dropout = dropout
        self.l2 = l2
        self.optimizer = optimizer
        self.seed = seed

    @property
    def layer_sizes(self):
        self._check_trained()
        return list(self.net_.sizes)

    def initialize(self, n_features, n_outputs):
        rng = np.random.default_rng(self.seed)
        self.net_ = MLP([int(n_features), *self.hidden_sizes, int(n_outputs)], rng, zero_output=True, prefix="mlp")
        self.n_features_in_ = int(n_features)
        self.n_outputs_ = int(n_outputs)
        self.loss_curve_ = []
        return self

    def fit(self, X, Y):
        X = _dense(_features(X))
        Y = _labels(Y, X.shape[0])
        self.initialize(X.shape[1], Y.shape[1])
        opt = make_optimizer(self.optimizer, list(self.net_.params.values()), self.lr, self.l2)
        rng = np.random.default_rng([int(self.seed), 3])
        bs = X.shape[0] if self.batch_size is None else int(self.batch_size)
        for _ in range(int(self.epochs)):
            order = rng.permutation(X.shape[0])
            total = 0.0
            for lo in range(0, len(order), bs):
                idx = order[lo:lo + bs]
                loss = self.loss(X[idx], Y[idx], training=True, rng=rng)
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
            self.loss_curve_.append(total / X.shape[0])
        return self

    def loss(self, X, Y, training=False, rng=None):
        return T.binary_cross_entropy(self.forward(X, training, rng), Y)

    def forward(self, X, training=False, rng=None):
        self._check_trained()
        X = _dense(_features(X))
        self._check_width(X)
        return T.sigmoid(self.net_.forward(X, self.dropout, training, rng))

    def predict_scores(self, X):
        with T.no_grad():
            return self.forward(X).data

    def get_arrays(self):
        self._check_trained()
        return {k: v.data for k, v in self.net_.params.items()}

    def set_arrays(self, arrays):
        self._check_trained()
        for name, p in self.net_.params.items():
            a = np.asarray(arrays[name], dtype=np.float64)
            if a.shape != p.shape:
                raise ShapeError(f"{name}: stored {a.shape} != {p.shape}")
            p.data = a.copy()


def _dense(X):
    return X.toarray() if sp.issparse(X) else X


# ---------------------------------------------------------------------------
# functional wrappers
# ---------------------------------------------------------------------------

def train_naive_bayes(X, y, alpha=1.0):
    return MultinomialNaiveBayes(alpha=alpha).fit(X, y)


def train_logistic(X, y, lr=0.1, epochs=500, l2=0.0, seed=0):
    return LogisticRegression(lr=lr, epochs=epochs, l2=l2, seed=seed).fit(X, y)


def train_svm(X, y, lr=0.1, epochs=500, C=1.0, seed=0, decay=0.0):
    return LinearSVM(lr=lr, epochs=epochs, C=C, decay=decay, seed=seed).fit(X, y)


def train_mlp(X, y, schema=None, config=None):
    config = dict(config or {})
    Y = np.asarray(y)
    if schema is not None:
        width = 1 if Y.ndim == 1 else Y.shape[1]
        if width != schema.n_classes:
            raise ShapeError(f"{width} label columns for schema {schema.name!r} with {schema.n_classes} classes")
    return MLPClassifier(**config).fit(X, y)


def predict_scores(model, X):
    return model.predict_scores(X)


BASELINES = {
    "naive_bayes": MultinomialNaiveBayes,
    "logistic": LogisticRegression,
    "svm": LinearSVM,
    "mlp": MLPClassifier,
}


# ---------------------------------------------------------------------------
# external embeddings
# ---------------------------------------------------------------------------

def load_embeddings(path):
    """Read ``{"id", "vector"}`` JSON lines into ``(ids, matrix)``."""
    ids, rows, seen = [], [], set()
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict) or "id" not in rec or "vector" not in rec:
                raise ValidationError(f"{path}:{lineno}: expected an object with 'id' and 'vector'")
            rid = str(rec["id"])
            if rid in seen:
                raise ValidationError(f"{path}:{lineno}: duplicate id {rid!r}")
            vec = np.asarray(rec["vector"], dtype=np.float64)
            if vec.ndim != 1:
                raise ValidationError(f"{path}:{lineno}: vector must be a flat list of numbers")
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise ShapeError(f"{path}:{lineno}: vector has dimension {vec.size}, expected {dim}")
            if not np.all(np.isfinite(vec)):
                raise ValidationError(f"{path}:{lineno}: vector contains non-finite values")
            seen.add(rid)
            ids.append(rid)
            rows.append(vec)
    if not rows:
        raise ValidationError(f"{path}: no embeddings found")
    return ids, np.vstack(rows)


def align_embeddings(ids, matrix, wanted_ids):
    """Rows of ``matrix`` reordered to ``wanted_ids``; a missing id is an error."""
    pos = {rid: i for i, rid in enumerate(ids)}
    missing = [rid for rid in wanted_ids if rid not in pos]
    if missing:
        raise ValidationError(f"{len(missing)} report id(s) have no embedding, e.g. {missing[:5]}")
    return matrix[[pos[rid] for rid in wanted_ids]]


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

SWEEP_COLUMNS = ("model", "features", "micro_auc", "micro_f1", "note")


def sweep(feature_sets, Y_train, Y_test, classes, models=None, params=None):
    """Train every model on every feature source and score it on the test split.

    ``feature_sets`` maps a feature-source name to ``(X_train, X_test)``.
    A model that rejects a feature source (e.g. Naive Bayes on negative
    weights) yields a row with empty metrics and the error in ``note``.
    Returns ``(rows, fitted)``; ``fitted`` maps ``(model, features)`` to the
    trained estimator.
    """
    models = list(BASELINES) if models is None else list(models)
    params = params or {}
    Y_test = np.asarray(Y_test)
    if Y_test.ndim == 1:
        Y_test = Y_test[:, None]
    rows, fitted = [], {}
    for name in models:
        if name not in BASELINES:
            raise ValidationError(f"unknown baseline {name!r}; choose from {sorted(BASELINES)}")
        for source, (X_train, X_test) in feature_sets.items():
            est = BASELINES[name](**params.get(name, {}))
            try:
                est.fit(X_train, Y_train)
            except ValidationError as exc:
                rows.append({"model": name, "features": source, "micro_auc": None, "micro_f1": None, "note": str(exc)})
                continue
            scores = est.predict_scores(X_test)
            if name == "svm":
                # monotone map of margins; margin 0 lands on the 0.5 threshold
                scores = expit(scores)
            report = evaluate(scores, Y_test, classes, threshold=0.5)
            fitted[(name, source)] = est
            rows.append({
                "model": name,
                "features": source,
                "micro_auc": report.micro["auc"],
                "micro_f1": report.micro["f1"],
                "note": "",
            })
    return rows, fitted

