"""Bidirectional LSTM language model and document encoder.

The model is two causally separate LSTM language models sharing one
embedding table: the forward stack predicts token ``t+1`` from tokens
``<= t`` and the backward stack reads the reversed report and predicts the
preceding token.  Neither direction ever sees its own target.  A document
encoding is the concatenation of the two top-layer hidden-state sequences,
each pooled over time (mean by default), giving ``2 * hidden_dim`` values.
"""

from __future__ import annotations

import csv
import time

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import tensor as T
from .exceptions import NotTrainedError, ShapeError, ValidationError
from .nn import LSTMLayer, params_hash, parameter
from .optim import make_optimizer

__all__ = ["LanguageModel", "count_parameters", "write_metrics_csv", "METRICS_COLUMNS"]

METRICS_COLUMNS = ("epoch", "split", "loss", "accuracy", "elapsed_seconds")
POOLINGS = ("mean", "last", "max")


def _check_sequences(X, vocab_size, min_len=1):
    seqs = []
    for i, seq in enumerate(X):
        arr = np.asarray(seq, dtype=np.int64).ravel()
        if arr.size and (arr.min() < 0 or arr.max() >= vocab_size):
            raise ValidationError(f"sequence {i} has token ids outside [0, {vocab_size})")
        seqs.append(arr)
    return seqs


def _time_major(seqs):
    """Right-padded ``(T, B)`` index array plus lengths."""
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    out = np.zeros((int(lengths.max()), len(seqs)), dtype=np.int64)
    for b, s in enumerate(seqs):
        out[: len(s), b] = s
    return out, lengths


class LanguageModel(BaseEstimator, TransformerMixin):
    """Embedding + forward/backward LSTM stacks + per-direction word classifiers.

    ``fit`` trains on index sequences (next- and previous-token prediction
    with truncated backpropagation every ``bptt`` tokens); ``transform`` maps
    sequences to fixed-size encodings.  Reports are independent: no hidden
    state is carried across documents.
    """

    def __init__(
        self,
        vocab_size=2000,
        embedding_dim=64,
        hidden_dim=200,
        num_layers=2,
        dropout=0.1,
        bptt=64,
        batch_size=32,
        epochs=10,
        learning_rate=1e-3,
        optimizer="adam",
        l2=0.0,
        pooling="mean",
        restore_best=True,
        seed=0,
        verbose=False,
    ):
        self.vocab_size = vocab_size
        self.embedding_dim = embedding_dim
        self.hidden_dim = hidden_dim
        self.num_layers = num_layers
        self.dropout = dropout
        self.bptt = bptt
        self.batch_size = batch_size
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.optimizer = optimizer
        self.l2 = l2
        self.pooling = pooling
        self.restore_best = restore_best
        self.seed = seed
        self.verbose = verbose

    # ------------------------------------------------------------------
    # parameters
    # ------------------------------------------------------------------
    @property
    def encoding_dim(self):
        return 2 * self.hidden_dim

    def _validate_config(self):
        for name in ("vocab_size", "embedding_dim", "hidden_dim", "num_layers", "bptt", "batch_size"):
            if int(getattr(self, name)) < 1:
                raise ValidationError(f"{name} must be a positive integer")
        if self.pooling not in POOLINGS:
            raise ValidationError(f"pooling must be one of {POOLINGS}, got {self.pooling!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError(f"dropout must lie in [0, 1), got {self.dropout}")

    def initialize(self):
        """Allocate freshly initialised weights (seeded); returns ``self``."""
        self._validate_config()
        rng = np.random.default_rng(self.seed)
        V, E, H, L = self.vocab_size, self.embedding_dim, self.hidden_dim, self.num_layers
        self.embedding_ = parameter(rng.normal(0.0, 0.1, (V, E)), "embedding")
        self.layers_ = {}
        for direction in ("fwd", "bwd"):
            self.layers_[direction] = [
                LSTMLayer(E if i == 0 else H, H, rng, f"{direction}.lstm.{i}") for i in range(L)
            ]
        bound = 1.0 / np.sqrt(H)
        self.heads_ = {
            d: (
                parameter(rng.uniform(-bound, bound, (H, V)), f"{d}.out.weight"),
                parameter(np.zeros(V), f"{d}.out.bias"),
            )
            for d in ("fwd", "bwd")
        }
        self.history_ = []
        self.epochs_trained_ = 0
        self.n_skipped_ = 0
        return self

    def _check_ready(self):
        if not hasattr(self, "embedding_"):
            raise NotTrainedError("language model has no weights; call fit() or initialize() first")

    def named_parameters(self):
        self._check_ready()
        out = {"embedding": self.embedding_}
        for direction in ("fwd", "bwd"):
            for layer in self.layers_[direction]:
                out.update(layer.params)
            w, b = self.heads_[direction]
            out[w.name] = w
            out[b.name] = b
        return out

    def encoder_parameters(self):
        """Parameters feeding the document encoding (everything but the word classifiers)."""
        return {k: v for k, v in self.named_parameters().items() if ".out." not in k}

    def parameter_counts(self):
        self._check_ready()
        counts = {"embedding": self.embedding_.size}
        for direction in ("fwd", "bwd"):
            counts[f"{direction}.lstm"] = sum(layer.n_parameters() for layer in self.layers_[direction])
            counts[f"{direction}.out"] = sum(p.size for p in self.heads_[direction])
        return counts

    def parameter_hash(self, encoder_only=False):
        return params_hash(self.encoder_parameters() if encoder_only else self.named_parameters())

    def get_arrays(self):
        return {k: v.data for k, v in self.named_parameters().items()}

    def set_arrays(self, arrays):
        params = self.named_parameters()
        missing = sorted(set(params) - set(arrays))
        if missing:
            raise ValidationError(f"missing parameter arrays: {missing[:5]}")
        for name, p in params.items():
            a = np.asarray(arrays[name], dtype=np.float64)
            if a.shape != p.shape:
                raise ShapeError(f"parameter {name}: stored shape {a.shape} != model shape {p.shape}")
            p.data = a.copy()

    # ------------------------------------------------------------------
    # forward passes
    # ------------------------------------------------------------------
    def _run_stack(self, direction, idx, training, rng, states=None):
        """Top-layer outputs ``(T*B, H)`` and final per-layer states for one direction."""
        n_steps, batch = idx.shape
        x = T.take_rows(self.embedding_, idx.reshape(-1))
        x = T.dropout(x, self.dropout, training, rng)
        new_states = []
        for i, layer in enumerate(self.layers_[direction]):
            x, state = layer.forward(x, n_steps, batch, None if states is None else states[i])
            new_states.append(state)
            x = T.dropout(x, self.dropout, training, rng)
        return x, new_states

    def _direction_batches(self, seqs):
        fwd = [s for s in seqs]
        bwd = [s[::-1] for s in seqs]
        return {"fwd": fwd, "bwd": bwd}

    def _window_losses(self, seqs, training, rng, bptt):
        """Yield ``(loss, n_tokens, n_correct)`` per truncated-BPTT window of a batch.

        The loss of a window is the token-weighted mean cross-entropy of both
        directions; recurrent state crosses windows detached.
        """
        arrays = {}
        for d, ss in self._direction_batches(seqs).items():
            idx, lengths = _time_major(ss)
            inputs = idx[:-1]
            targets = idx[1:]
            mask = (np.arange(inputs.shape[0])[:, None] < (lengths - 1)[None, :]).astype(np.float64)
            arrays[d] = (inputs, targets, mask)
        n_steps = arrays["fwd"][0].shape[0]
        states = {"fwd": None, "bwd": None}
        for start in range(0, n_steps, bptt):
            stop = min(n_steps, start + bptt)
            losses = []
            n_tok = 0
            correct = 0
            for d in ("fwd", "bwd"):
                inputs, targets, mask = arrays[d]
                w_mask = mask[start:stop].reshape(-1)
                if w_mask.sum() == 0:
                    continue
                out, st = self._run_stack(d, inputs[start:stop], training, rng, states[d])
                states[d] = [(h.detach(), c.detach()) for h, c in st]
                w, b = self.heads_[d]
                logits = T.add_bias(T.matmul(out, w), b)
                tgt = targets[start:stop].reshape(-1)
                k = w_mask.sum()
                losses.append((T.softmax_cross_entropy(logits, tgt, w_mask), k))
                pred = logits.data.argmax(axis=1)
                correct += int(((pred == tgt) * w_mask).sum())
                n_tok += int(k)
            if not losses:
                continue
            loss = losses[0][0] * (losses[0][1] / n_tok)
            for extra, k in losses[1:]:
                loss = loss + extra * (k / n_tok)
            yield loss, n_tok, correct

    def _lm_windows(self, seqs, training, rng, optimizer=None):
        """Loss/accuracy over a batch, stepping the optimizer once per BPTT window."""
        total_loss = 0.0
        total_correct = 0
        total_tokens = 0
        for loss, n_tok, correct in self._window_losses(seqs, training, rng, int(self.bptt)):
            total_loss += loss.item() * n_tok
            total_tokens += n_tok
            total_correct += correct
            if optimizer is not None:
                loss.backward()
                optimizer.step()
        return total_loss, total_correct, total_tokens

    def loss(self, seqs, training=False, rng=None):
        """Untruncated mean next/previous-token cross-entropy of a batch, as a graph node."""
        self._check_ready()
        seqs = [s for s in _check_sequences(seqs, self.vocab_size) if len(s) >= 2]
        if not seqs:
            raise ValidationError("loss needs a sequence with at least 2 tokens")
        span = max(len(s) for s in seqs)
        (loss, _, _), = self._window_losses(seqs, training, rng, span)
        return loss

    def _make_optimizer(self, params=None):
        params = list(self.named_parameters().values()) if params is None else params
        return make_optimizer(self.optimizer, params, self.learning_rate, self.l2)

    # ------------------------------------------------------------------
    # estimator API
    # ------------------------------------------------------------------
    def fit(self, X, y=None, validation=None, resume_from=None, epoch_callback=None):
        """Train on index sequences.

        ``validation`` is an optional held-out list of sequences evaluated after
        every epoch.  ``resume_from`` takes a state produced by
        :meth:`checkpoint_state` and continues from its epoch.
        ``epoch_callback(model, row_list)`` runs after each epoch.
        """
        self._validate_config()
        seqs = _check_sequences(X, self.vocab_size)
        usable = [s for s in seqs if len(s) >= 2]
        if not usable:
            raise ValidationError("no training sequence has at least 2 tokens")
        valid = None
        if validation is not None:
            valid = [s for s in _check_sequences(validation, self.vocab_size) if len(s) >= 2]
            valid = valid or None

        self.initialize()
        self.n_skipped_ = len(seqs) - len(usable)
        opt = self._make_optimizer()
        rng = np.random.default_rng([int(self.seed), 1])
        best = (np.inf, None)
        start_epoch = 0
        if resume_from is not None:
            start_epoch = self._resume(resume_from, opt, rng)
            best = (resume_from.get("best_loss", np.inf), resume_from.get("best_arrays"))
        self._optimizer_state = opt
        self._rng_state = rng

        t0 = time.perf_counter()
        for epoch in range(start_epoch, int(self.epochs)):
            order = rng.permutation(len(usable))
            loss_sum, correct, tokens = 0.0, 0, 0
            for lo in range(0, len(order), int(self.batch_size)):
                batch = [usable[j] for j in order[lo:lo + int(self.batch_size)]]
                l, c, n = self._lm_windows(batch, True, rng, opt)
                loss_sum += l
                correct += c
                tokens += n
            elapsed = time.perf_counter() - t0
            rows = [{"epoch": epoch, "split": "train", "loss": loss_sum / tokens,
                     "accuracy": correct / tokens, "elapsed_seconds": elapsed}]
            if valid is not None:
                ev = self.evaluate(valid)
                rows.append({"epoch": epoch, "split": "valid", "loss": ev["loss"],
                             "accuracy": ev["top1_accuracy"], "elapsed_seconds": time.perf_counter() - t0})
                if ev["loss"] < best[0]:
                    best = (ev["loss"], {k: v.copy() for k, v in self.get_arrays().items()})
            self.history_.extend(rows)
            self.epochs_trained_ = epoch + 1
            self._best = best
            if self.verbose:
                print("  ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for r in rows for k, v in r.items()))
            if epoch_callback is not None:
                epoch_callback(self, rows)
        if self.restore_best and best[1] is not None:
            self.set_arrays(best[1])
        self.best_validation_loss_ = None if best[1] is None else float(best[0])
        return self

    def checkpoint_state(self):
        """Everything needed to resume training after the last completed epoch."""
        opt = self._optimizer_state
        arrays = dict(self.get_arrays())
        arrays.update({f"optim.{k}": v for k, v in opt.state_arrays().items()})
        best_loss, best_arrays = getattr(self, "_best", (np.inf, None))
        return {
            "epoch": self.epochs_trained_,
            "step_count": opt.step_count,
            "rng_state": self._rng_state.bit_generator.state,
            "history": list(self.history_),
            "arrays": arrays,
            "best_loss": float(best_loss),
            "best_arrays": best_arrays,
        }

    def _resume(self, state, opt, rng):
        arrays = state["arrays"]
        self.set_arrays(arrays)
        opt.load_state_arrays({k[len("optim."):]: v for k, v in arrays.items() if k.startswith("optim.")},
                              state["step_count"])
        rng.bit_generator.state = state["rng_state"]
        self.history_ = list(state["history"])
        self.epochs_trained_ = int(state["epoch"])
        return self.epochs_trained_

    def evaluate(self, X, batch_size=None):
        """Mean next/previous-token cross-entropy and top-1 accuracy; no updates."""
        self._check_ready()
        seqs = [s for s in _check_sequences(X, self.vocab_size) if len(s) >= 2]
        if not seqs:
            raise ValidationError("evaluation set has no sequence with at least 2 tokens")
        bs = int(batch_size or self.batch_size)
        loss_sum, correct, tokens = 0.0, 0, 0
        with T.no_grad():
            for lo in range(0, len(seqs), bs):
                l, c, n = self._lm_windows(seqs[lo:lo + bs], False, None)
                loss_sum += l
                correct += c
                tokens += n
        return {"loss": loss_sum / tokens, "top1_accuracy": correct / tokens, "n_tokens": tokens}

    def score(self, X, y=None):
        return -self.evaluate(X)["loss"]

    def _pool(self, out, lengths, n_steps, batch):
        if self.pooling == "max":
            segments = [np.arange(int(L)) * batch + b for b, L in enumerate(lengths)]
            return T.segment_max(out, segments)
        P = np.zeros((batch, n_steps * batch))
        for b, L in enumerate(lengths):
            L = int(L)
            if self.pooling == "mean":
                P[b, np.arange(L) * batch + b] = 1.0 / L
            else:
                P[b, (L - 1) * batch + b] = 1.0
        return T.matmul(T.Tensor(P), out)

    def encode_tensor(self, seqs, training=False, rng=None):
        """Encodings ``(B, 2H)`` for a batch, as a graph node (used for fine-tuning)."""
        self._check_ready()
        if any(len(s) == 0 for s in seqs):
            raise ValidationError("cannot encode an empty sequence")
        pooled = []
        for d, ss in self._direction_batches(seqs).items():
            idx, lengths = _time_major(ss)
            out, _ = self._run_stack(d, idx, training, rng)
            pooled.append(self._pool(out, lengths, idx.shape[0], idx.shape[1]))
        return T.concat(pooled, axis=1)

    def transform(self, X, batch_size=64):
        """Fixed-size encodings, one row per sequence, in input order."""
        self._check_ready()
        seqs = _check_sequences(X, self.vocab_size)
        for i, s in enumerate(seqs):
            if len(s) == 0:
                raise ValidationError(f"sequence {i} is empty and cannot be encoded")
        out = np.empty((len(seqs), self.encoding_dim))
        order = sorted(range(len(seqs)), key=lambda i: (-len(seqs[i]), i))
        with T.no_grad():
            for lo in range(0, len(order), batch_size):
                chunk = order[lo:lo + batch_size]
                out[chunk] = self.encode_tensor([seqs[i] for i in chunk]).data
        return out

    def encode_document(self, sequence):
        return self.transform([sequence])[0]

    def predict_next(self, sequence):
        """Forward-direction distribution over the token after ``sequence``."""
        self._check_ready()
        seq = _check_sequences([sequence], self.vocab_size)[0]
        with T.no_grad():
            out, _ = self._run_stack("fwd", seq[:, None], False, None)
            w, b = self.heads_["fwd"]
            logits = out.data[-1] @ w.data + b.data
        return T.softmax(logits)


def count_parameters(model: LanguageModel) -> int:
    return int(sum(model.parameter_counts().values()))


def write_metrics_csv(rows, path, timing=True):
    """Write per-epoch metric rows; ``timing=False`` blanks wall-clock values."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_COLUMNS)
        for r in rows:
            w.writerow([
                r["epoch"],
                r["split"],
                repr(float(r["loss"])),
                "" if r.get("accuracy") is None else repr(float(r["accuracy"])),
                repr(round(float(r["elapsed_seconds"]), 3)) if timing else "",
            ])
