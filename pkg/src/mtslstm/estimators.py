"""scikit-learn style wrappers around the models and the distribution fit.

They follow the usual contract: hyperparameters are stored verbatim by
``__init__`` (so ``get_params``/``set_params``/``clone`` work), learned state
lives in trailing-underscore attributes set by ``fit``.
"""

from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .analysis import (
    DEFAULT_ALPHA_GRID,
    DEFAULT_MU_GRID,
    collect_gate_traces,
    dyck_accuracy_by_timescale,
    evaluate_lm,
    fit_timescale_distribution,
    ks_statistic,
    normal_cdf,
    sequence_correct,
)
from .corpus import CorpusBundle, Vocab
from .mathkernel import log_softmax
from .model import LmConfig, build_dyck_model, build_lm
from .timescale import InverseGammaParams, inv_gamma_cdf
from .train import AdamConfig, SgdAsgdConfig, train_dyck, train_lm
from .validation import check_positive_samples, check_scalar, check_sequences, check_token_ids


class MultiTimescaleLanguageModel(BaseEstimator):
    """Stacked-LSTM word model, optionally with frozen timescale biases.

    Parameters
    ----------
    timescales : {"multi-timescale", "baseline"}
        ``"multi-timescale"`` freezes layer 1 at ``short_timescales`` and layer 2
        at Inverse Gamma(``alpha``) quantiles (with fewer than three layers the
        first layer gets the Inverse Gamma timescales). ``"baseline"`` trains
        every bias.
    hidden_sizes : tuple of int
        Layer widths; the last must equal ``emb_size`` (tied embeddings).
    lr, weight_decay, clip_norm, epochs, nonmono, batch_size
        SGD / averaged-SGD settings, see :class:`mtslstm.train.SgdAsgdConfig`.
    random_state : int
        Seeds initialization and batching.

    Attributes
    ----------
    model_ : LanguageModel
    history_ : list of dict
        Per-epoch training log.
    vocab_size_ : int
    assigned_timescales_ : dict
        Layer index -> assigned per-unit timescales (frozen layers only).
    """

    def __init__(self, vocab_size=None, emb_size=400, hidden_sizes=(1150, 1150, 400), timescales="multi-timescale",
                 alpha=0.56, short_timescales=(3.0, 4.0), lr=20.0, weight_decay=1.2e-6, clip_norm=0.25, epochs=1000,
                 nonmono=5, batch_size=20, eval_batch_size=10, random_state=0):
        self.vocab_size = vocab_size
        self.emb_size = emb_size
        self.hidden_sizes = hidden_sizes
        self.timescales = timescales
        self.alpha = alpha
        self.short_timescales = short_timescales
        self.lr = lr
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.epochs = epochs
        self.nonmono = nonmono
        self.batch_size = batch_size
        self.eval_batch_size = eval_batch_size
        self.random_state = random_state

    def _config(self, V) -> LmConfig:
        if self.timescales == "multi-timescale":
            return LmConfig.multi_timescale(V, self.emb_size, tuple(self.hidden_sizes), alpha=self.alpha,
                                            short=tuple(self.short_timescales))
        if self.timescales == "baseline":
            return LmConfig.baseline(V, self.emb_size, tuple(self.hidden_sizes))
        raise ValueError(f"timescales must be 'multi-timescale' or 'baseline', got {self.timescales!r}")

    def fit(self, X, y=None, X_valid=None):
        """Train on the token stream ``X``; ``X_valid`` (default: last 10% of ``X``) drives the averaging trigger."""
        check_scalar(self.epochs, "epochs", lo=1, integer=True)
        X = check_token_ids(X, self.vocab_size)
        if X_valid is None:
            cut = int(0.9 * X.size)
            X, X_valid = X[:cut], X[cut:]
        X_valid = check_token_ids(X_valid, self.vocab_size, "X_valid")
        V = self.vocab_size or int(max(X.max(), X_valid.max())) + 1
        counts = np.bincount(X, minlength=V)
        vocab = Vocab([str(i) for i in range(V)], counts)
        corpus = CorpusBundle(X, X_valid, X_valid[:2], vocab)
        model = build_lm(self._config(V), seed=self.random_state)
        cfg = SgdAsgdConfig(lr=self.lr, weight_decay=self.weight_decay, clip_norm=self.clip_norm, epochs=self.epochs,
                            nonmono=self.nonmono, batch_size=self.batch_size, eval_batch_size=self.eval_batch_size)
        result = train_lm(model, corpus, cfg, seed=self.random_state)
        self.model_ = result.model
        self.history_ = result.history
        self.vocab_size_ = V
        self.train_counts_ = counts
        self.assigned_timescales_ = {k: s.timescales.copy() for k, s in model.specs.items()}
        return self

    def evaluate(self, X, bins=None):
        """Per-token loss report (stateful, single stream)."""
        check_is_fitted(self, "model_")
        X = check_token_ids(X, self.vocab_size_)
        return evaluate_lm(self.model_, X, batch_size=1, bins=bins)

    def perplexity(self, X) -> float:
        return self.evaluate(X).perplexity()

    def score(self, X, y=None) -> float:
        """Negative mean per-token NLL (higher is better)."""
        return -math.log(self.perplexity(X))

    def predict_log_proba(self, X) -> np.ndarray:
        """Next-token log-probabilities after each prefix of ``X``, shape (len(X), V)."""
        check_is_fitted(self, "model_")
        X = check_token_ids(X, self.vocab_size_)
        m = self.model_
        x = m.embedding[X[:, None]]
        for layer, (h0, c0) in zip(m.layers, m.zero_state(1)):
            layer.reset_cache()
            x, _ = layer.forward(x, h0, c0)
        return log_softmax(x[:, 0, :] @ m.decoder.T)

    def predict(self, X) -> np.ndarray:
        """Most likely next token after each prefix of ``X``."""
        return np.argmax(self.predict_log_proba(X), axis=1)

    def estimated_timescales(self, X, layer: int, K: int = 70) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_token_ids(X, self.vocab_size_)
        return collect_gate_traces(self.model_, X, layer, K=K).estimated_timescales()


class DyckLSTMClassifier(ClassifierMixin, BaseEstimator):
    """Per-step next-closer predictor for Dyck-2 strings.

    ``fit`` takes a list of balanced bracket strings (targets are derived from
    the strings themselves, so ``y`` is ignored). ``predict`` returns a (T, 2)
    0/1 array per sequence; ``score`` is the fraction of sequences predicted
    correctly at every step.
    """

    def __init__(self, hidden_size=256, timescales="baseline", alpha=1.5, lr=1e-4, epochs=2000, batch_size=1,
                 threshold=0.5, random_state=0):
        self.hidden_size = hidden_size
        self.timescales = timescales
        self.alpha = alpha
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.threshold = threshold
        self.random_state = random_state

    def fit(self, X, y=None):
        check_scalar(self.hidden_size, "hidden_size", lo=2, integer=True)
        check_scalar(self.epochs, "epochs", lo=1, integer=True)
        seqs = check_sequences(X)
        if self.timescales not in ("baseline", "inverse-gamma"):
            raise ValueError(f"timescales must be 'baseline' or 'inverse-gamma', got {self.timescales!r}")
        model = build_dyck_model(self.hidden_size, self.timescales, self.alpha, seed=self.random_state)
        cfg = AdamConfig(lr=self.lr, epochs=self.epochs, batch_size=self.batch_size)
        result = train_dyck(model, seqs, cfg, seed=self.random_state)
        self.model_ = result.model
        self.history_ = result.history
        self.classes_ = np.array([0, 1])
        return self

    def predict_proba(self, X) -> list[np.ndarray]:
        check_is_fitted(self, "model_")
        return [self.model_.predict_proba(s.symbols) for s in check_sequences(X)]

    def predict(self, X) -> list[np.ndarray]:
        return [(p > self.threshold).astype(np.int64) for p in self.predict_proba(X)]

    def score(self, X, y=None, sample_weight=None) -> float:
        check_is_fitted(self, "model_")
        correct = sequence_correct(self.model_, check_sequences(X), self.threshold)
        return float(np.average(correct, weights=sample_weight))

    def accuracy_by_timescale(self, X, bucket_edges=(0, 25, 50, 75, 100, 125, 150, 200)):
        check_is_fitted(self, "model_")
        return dyck_accuracy_by_timescale(self.model_, check_sequences(X), bucket_edges, self.threshold)


class TimescaleDistributionFit(BaseEstimator):
    """Grid-search KS fit of unit timescales to Inverse Gamma and narrow Gaussian families.

    Attributes
    ----------
    results_ : dict
        Family name -> :class:`mtslstm.analysis.KsFitResult`.
    best_family_ : str
    alpha_ : float
        Best Inverse Gamma shape (NaN if some sample is non-positive).
    mu_ : float
        Best Gaussian mean.
    ks_ : float
        KS statistic of the winning family.
    """

    def __init__(self, alpha_grid=DEFAULT_ALPHA_GRID, mu_grid=DEFAULT_MU_GRID, sigma=0.1, beta=1.0):
        self.alpha_grid = alpha_grid
        self.mu_grid = mu_grid
        self.sigma = sigma
        self.beta = beta

    def fit(self, X, y=None):
        x = check_positive_samples(X)
        res = fit_timescale_distribution(x, self.alpha_grid, self.mu_grid, self.sigma, self.beta)
        self.best_family_ = res.pop("best")
        self.results_ = res
        self.alpha_ = res["inverse-gamma"].best_param if "inverse-gamma" in res else math.nan
        self.mu_ = res["narrow-gaussian"].best_param
        self.ks_ = res[self.best_family_].best_D
        return self

    def score(self, X=None, y=None) -> float:
        """Negative KS statistic of the winning family on ``X`` (or the fitted data)."""
        check_is_fitted(self, "results_")
        if X is None:
            return -self.ks_
        x = check_positive_samples(X)
        if self.best_family_ == "inverse-gamma":
            return -ks_statistic(x, lambda v: inv_gamma_cdf(v, InverseGammaParams(self.alpha_, self.beta)))
        return -ks_statistic(x, lambda v: normal_cdf(v, self.mu_, self.sigma))
