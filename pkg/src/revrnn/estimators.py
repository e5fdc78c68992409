"""scikit-learn style wrappers around the reversible training engine.

:class:`SequenceTagger` maps token sequences to per-step labels (the repeat
task is one example) and :class:`Seq2SeqTranslator` maps token lists to token
lists.  Both follow the usual ``fit`` / ``predict`` / ``score`` contract and
expose constructor arguments through ``get_params``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .fixedpoint import FixedFormat, bits_limit_to_floor
from .revcells import make_cell
from .revgrad import AdamState, SequenceModel, predict, run_forward, train_step
from .tasks import BOS, EOS, Vocabulary


def _check_tokens(X, name="X"):
    X = check_array(X, dtype=np.int64, ensure_2d=True, input_name=name)
    if X.min() < 0:
        raise ValueError(f"{name} must hold non-negative token ids")
    return X


class SequenceTagger(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Per-step classifier over integer token sequences of equal length.

    ``y`` has the same shape as ``X``; entries ``< 0`` are not scored.
    ``transform`` returns the final readout features ``[h1; h2]``.
    """

    def __init__(
        self,
        cell="revgru",
        hidden=16,
        bits_limit=None,
        rh=23,
        rz=10,
        steps=500,
        batch_size=64,
        lr=3e-3,
        clip=None,
        vocab_size=None,
        random_state=0,
    ):
        self.cell = cell
        self.hidden = hidden
        self.bits_limit = bits_limit
        self.rh = rh
        self.rz = rz
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.clip = clip
        self.vocab_size = vocab_size
        self.random_state = random_state

    def _one_hot(self, X):
        if X.max() >= self.n_features_in_:
            raise ValueError(f"token id {X.max()} outside the fitted vocabulary of {self.n_features_in_}")
        return np.eye(self.n_features_in_)[X.T]

    def fit(self, X, y):
        X = _check_tokens(X)
        y = check_array(y, dtype=np.int64, input_name="y")
        if y.shape != X.shape:
            raise ValueError(f"y shape {y.shape} does not match X shape {X.shape}")
        self.n_features_in_ = self.vocab_size or int(X.max()) + 1
        self.classes_ = np.unique(y[y >= 0])
        n_out = int(self.classes_.max()) + 1
        kw = {"fmt": FixedFormat(self.rh, self.rz), "forget_floor": bits_limit_to_floor(self.bits_limit)}
        cell = make_cell(self.cell, self.n_features_in_, self.hidden, seed=self.random_state, **kw)
        self.model_ = SequenceModel(cell, n_out, seed=self.random_state)
        opt = AdamState(lr=self.lr)
        rng = np.random.default_rng(self.random_state)
        self.loss_curve_ = []
        for _ in range(self.steps):
            idx = rng.integers(0, len(X), min(self.batch_size, len(X)))
            r = train_step(self.model_, self._one_hot(X[idx]), y[idx].T, opt, self.clip)
            self.loss_curve_.append(r.loss)
        self.savings_ratio_ = r.savings_ratio
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = _check_tokens(X)
        return predict(self.model_, self._one_hot(X)).T

    def score(self, X, y, sample_weight=None):
        """Token accuracy over scored positions."""
        y = check_array(y, dtype=np.int64, input_name="y")
        pred = self.predict(X)
        mask = y >= 0
        return float(np.sum((pred == y) & mask) / max(mask.sum(), 1))

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = _check_tokens(X)
        tape, _ = run_forward(self.model_, self._one_hot(X))
        cell = self.model_.cell
        return cell.output(cell.decode(tape.final_state) if cell.reversible else tape.final_state)


class Seq2SeqTranslator(BaseEstimator):
    """Token-list to token-list model with a reversible encoder and decoder."""

    def __init__(self, hidden=32, embed=16, attention="emb+slice:8", cell="revgru", steps=500, batch_size=64, lr=3e-3, clip=5.0, random_state=0):
        self.hidden = hidden
        self.embed = embed
        self.attention = attention
        self.cell = cell
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.clip = clip
        self.random_state = random_state

    def fit(self, X, y):
        from .seq2seq_attention import Seq2Seq, make_batch

        if len(X) != len(y) or not len(X):
            raise ValueError("X and y must be non-empty and of equal length")
        pairs = [(list(s), list(t)) for s, t in zip(X, y)]
        self.src_vocab_ = Vocabulary.build(s for s, _ in pairs)
        self.tgt_vocab_ = Vocabulary.build(t for _, t in pairs)
        self.model_ = Seq2Seq(
            len(self.src_vocab_), len(self.tgt_vocab_), self.embed, self.hidden, self.attention, self.cell, seed=self.random_state
        )
        opt = AdamState(lr=self.lr)
        rng = np.random.default_rng(self.random_state)
        for _ in range(self.steps):
            idx = rng.integers(0, len(pairs), min(self.batch_size, len(pairs)))
            info = self.model_.train_step(make_batch([pairs[i] for i in idx], self.src_vocab_, self.tgt_vocab_), opt, self.clip)
        self.encoder_ratio_ = info.enc_ratio
        return self

    def predict(self, X, max_len=None):
        from .seq2seq_attention import make_batch

        check_is_fitted(self, "model_")
        X = [list(s) for s in X]
        max_len = max_len or max(len(s) for s in X) + 1
        b = make_batch([(s, []) for s in X], self.src_vocab_, self.tgt_vocab_)
        ids = self.model_.greedy(b.src, b.src_mask, max_len, self.tgt_vocab_.stoi[BOS])
        eos = self.tgt_vocab_.stoi[EOS]
        out = []
        for n in range(len(X)):
            toks = []
            for i in ids[:, n]:
                if i == eos:
                    break
                toks.append(self.tgt_vocab_.itos[i])
            out.append(toks)
        return out

    def score(self, X, y):
        """Position-wise token accuracy against reference lists."""
        pred = self.predict(X, max_len=max(len(t) for t in y) + 1)
        hit = total = 0
        for p, t in zip(pred, y):
            total += len(t)
            hit += sum(a == b for a, b in zip(p, t))
        return hit / max(total, 1)
