"""TFIDF document vectors, cosine similarity and truncated SVD projection.

``idf(t) = ln(|D| / (1 + df(t)))`` is used verbatim, so a term present in
every document gets a (slightly) negative weight.  Such terms trigger a
:class:`CorpusQualityWarning` at fit time instead of being clamped.
"""

from __future__ import annotations

import math
import warnings
from collections import Counter

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .corpus import SPECIALS
from .exceptions import ShapeError, ValidationError

__all__ = [
    "CorpusQualityWarning",
    "TfidfVectorizer",
    "CountVectorizer",
    "fit_tfidf",
    "transform_tfidf",
    "cosine",
    "TruncatedSVD",
    "fit_truncated_svd",
    "project",
]

_DEFAULT_IGNORE = frozenset(SPECIALS)


class CorpusQualityWarning(UserWarning):
    pass


def _check_documents(documents):
    docs = list(documents)
    if not docs:
        raise ValidationError("cannot fit on an empty corpus")
    for i, d in enumerate(docs):
        if isinstance(d, str):
            raise ValidationError(f"document {i} is a raw string; pass token sequences")
    return docs


class CountVectorizer(BaseEstimator, TransformerMixin):
    """Raw term counts over token-sequence documents (CSR output)."""

    def __init__(self, ignore_tokens=_DEFAULT_IGNORE, min_df=1):
        self.ignore_tokens = ignore_tokens
        self.min_df = min_df

    def _terms(self, doc):
        ignore = self.ignore_tokens or ()
        return Counter(t for t in doc if t not in ignore)

    def fit(self, documents, y=None):
        docs = _check_documents(documents)
        df = Counter()
        for d in docs:
            df.update(self._terms(d).keys())
        terms = sorted(t for t, c in df.items() if c >= self.min_df)
        self.vocabulary_ = {t: i for i, t in enumerate(terms)}
        self.terms_ = terms
        self.document_frequency_ = np.array([df[t] for t in terms], dtype=np.int64)
        self.n_documents_ = len(docs)
        return self

    def _counts(self, documents):
        check_is_fitted(self, "vocabulary_")
        rows, cols, vals = [], [], []
        n = 0
        for i, d in enumerate(documents):
            n += 1
            for t, c in self._terms(d).items():
                j = self.vocabulary_.get(t)
                if j is not None:
                    rows.append(i)
                    cols.append(j)
                    vals.append(float(c))
        m = sp.csr_matrix((vals, (rows, cols)), shape=(n, len(self.terms_)), dtype=np.float64)
        m.sort_indices()
        return m

    def transform(self, documents):
        return self._counts(documents)


class TfidfVectorizer(CountVectorizer):
    """Raw-count tf times ``ln(|D| / (1 + df))`` idf."""

    def fit(self, documents, y=None):
        super().fit(documents)
        self.idf_ = np.log(self.n_documents_ / (1.0 + self.document_frequency_))
        negative = [t for t, v in zip(self.terms_, self.idf_) if v < 0]
        if negative:
            warnings.warn(
                f"{len(negative)} term(s) occur in every document and get negative idf "
                f"(e.g. {negative[:5]})",
                CorpusQualityWarning,
                stacklevel=2,
            )
        return self

    def idf(self, term) -> float:
        """idf of any term; unseen terms have df = 0."""
        check_is_fitted(self, "idf_")
        j = self.vocabulary_.get(term)
        if j is not None:
            return float(self.idf_[j])
        return math.log(self.n_documents_)

    def transform(self, documents):
        counts = self._counts(documents)
        return counts @ sp.diags(self.idf_, format="csr")

    def transform_one(self, document) -> dict:
        """Sparse ``{term: weight}`` map for one document, zero-count terms omitted."""
        check_is_fitted(self, "idf_")
        return {t: c * self.idf_[self.vocabulary_[t]] for t, c in self._terms(document).items() if t in self.vocabulary_}


def fit_tfidf(corpus, ignore_tokens=_DEFAULT_IGNORE) -> TfidfVectorizer:
    return TfidfVectorizer(ignore_tokens=ignore_tokens).fit(corpus)


def transform_tfidf(model: TfidfVectorizer, document) -> dict:
    return model.transform_one(document)


def _dense_or_dict(x):
    if isinstance(x, dict):
        return x
    if sp.issparse(x):
        x = x.toarray()
    return np.asarray(x, dtype=np.float64).ravel()


def cosine(x, y) -> float:
    """Cosine similarity of two dense vectors or two ``{key: weight}`` maps."""
    x, y = _dense_or_dict(x), _dense_or_dict(y)
    if isinstance(x, dict) or isinstance(y, dict):
        if not (isinstance(x, dict) and isinstance(y, dict)):
            raise ValidationError("cosine: mix of sparse map and dense vector")
        dot = math.fsum(v * y[k] for k, v in x.items() if k in y)
        nx = math.sqrt(math.fsum(v * v for v in x.values()))
        ny = math.sqrt(math.fsum(v * v for v in y.values()))
    else:
        if x.shape != y.shape:
            raise ShapeError(f"cosine: vectors of length {x.size} and {y.size}")
        dot = float(x @ y)
        nx, ny = float(np.linalg.norm(x)), float(np.linalg.norm(y))
    if nx == 0.0 or ny == 0.0:
        raise ValidationError("cosine similarity is undefined for a zero vector")
    return max(-1.0, min(1.0, dot / (nx * ny)))


# ---------------------------------------------------------------------------
# truncated SVD
# ---------------------------------------------------------------------------

class TruncatedSVD(BaseEstimator, TransformerMixin):
    """Top-k singular directions by block power (subspace) iteration.

    The block carries ``oversample`` extra columns to speed convergence; each
    iteration applies ``AᵀA`` implicitly, re-orthonormalises with QR and
    performs a Rayleigh-Ritz rotation.  Iteration stops once the leading-k
    subspace rotates by less than ``tol`` or after ``max_iter`` sweeps.

    With ``center=True`` (default) the columns are mean-centred first, which
    makes the projection equivalent to PCA.  Sparse input is centred
    implicitly and never densified.
    """

    def __init__(self, n_components=2, center=True, oversample=10, tol=1e-10, max_iter=1000, seed=0):
        self.n_components = n_components
        self.center = center
        self.oversample = oversample
        self.tol = tol
        self.max_iter = max_iter
        self.seed = seed

    def fit(self, X, y=None):
        sparse = sp.issparse(X)
        A = X.tocsr().astype(np.float64) if sparse else np.asarray(X, dtype=np.float64)
        if A.ndim != 2:
            raise ShapeError(f"expected a 2-D matrix, got shape {A.shape}")
        n, d = A.shape
        k = self.n_components
        if not 1 <= k <= min(n, d):
            raise ValidationError(f"n_components must lie in [1, {min(n, d)}], got {k}")
        mu = np.asarray(A.mean(axis=0)).ravel() if self.center else np.zeros(d)

        def apply(V):  # A_c @ V
            return A @ V - np.outer(np.ones(n), mu @ V)

        def apply_t(U):  # A_cᵀ @ U
            return A.T @ U - np.outer(mu, U.sum(axis=0))

        p = min(d, k + self.oversample)
        rng = np.random.default_rng(self.seed)
        V, _ = np.linalg.qr(rng.standard_normal((d, p)))
        prev = None
        self.n_iter_ = 0
        for it in range(1, self.max_iter + 1):
            W, _ = np.linalg.qr(apply_t(apply(V)))
            # Rayleigh-Ritz: rotate the block onto the singular directions of A_c W
            _, s, vt = np.linalg.svd(apply(W), full_matrices=False)
            V = W @ vt.T
            lead = V[:, :k]
            self.n_iter_ = it
            if prev is not None:
                rotation = np.linalg.norm(lead - prev @ (prev.T @ lead))
                if rotation < self.tol:
                    break
            prev = lead
            if p == d:
                break  # the block spans the whole space; the Ritz step is exact

        components = V[:, :k].T.copy()
        # sign convention: largest-magnitude entry of each direction is positive
        for row in components:
            j = np.argmax(np.abs(row))
            if row[j] < 0:
                row *= -1.0
        self.components_ = components
        self.singular_values_ = s[:k].copy()
        self.mean_ = mu
        self.n_samples_ = n
        self.n_features_in_ = d
        total = float(A.multiply(A).sum()) if sparse else float((A * A).sum())
        total -= n * float(mu @ mu)
        self.total_squared_norm_ = total
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        if sp.issparse(X):
            if X.shape[1] != self.n_features_in_:
                raise ShapeError(f"expected {self.n_features_in_} columns, got {X.shape[1]}")
            return np.asarray(X @ self.components_.T) - self.mean_ @ self.components_.T
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features_in_:
            raise ShapeError(f"expected {self.n_features_in_} columns, got {X.shape[1]}")
        return (X - self.mean_) @ self.components_.T

    def reconstruction_error(self) -> float:
        """Frobenius norm of (centred) ``A - A_k``."""
        check_is_fitted(self, "components_")
        return math.sqrt(max(0.0, self.total_squared_norm_ - float(self.singular_values_ @ self.singular_values_)))


def fit_truncated_svd(matrix, k, seed=0, center=True) -> TruncatedSVD:
    return TruncatedSVD(n_components=k, center=center, seed=seed).fit(matrix)


def project(model: TruncatedSVD, vectors):
    return model.transform(vectors)
