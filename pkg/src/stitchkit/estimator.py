"""scikit-learn style wrapper: fit a stitch palette on token sequences, predict with any stitch."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .controller import AdaptConfig, make_state, prepare, run_adapt_then_stitch, run_adaptation
from .data import Batch
from .deploy import evaluate_palette, select_deployment
from .stitching import stitch_forward


class StitchableAdapter(ClassifierMixin, BaseEstimator):
    """Adapt a frozen, size-ordered anchor family to a labelled token task.

    ``family`` is a list of pretrained anchors (see ``build_family`` and
    ``pretrain_anchor``). After ``fit`` every stitch in the palette can
    classify; ``predict`` uses the deployed stitch that fits ``flops_budget``,
    or the most expensive deployed stitch when no budget is given.
    """

    def __init__(self, family=None, kernel=2, stride=1, ranks=None, epochs=30, batch_size=64,
                 base_lr=8e-3, weight_decay=1e-4, lr_warmup_epochs=10, eta=0.9, n_intervals=6,
                 warmup_frac=0.2, normalize_scores=True, calib_batches=8, pipeline="one-stage",
                 random_state=0):
        self.family = family
        self.kernel = kernel
        self.stride = stride
        self.ranks = ranks
        self.epochs = epochs
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.weight_decay = weight_decay
        self.lr_warmup_epochs = lr_warmup_epochs
        self.eta = eta
        self.n_intervals = n_intervals
        self.warmup_frac = warmup_frac
        self.normalize_scores = normalize_scores
        self.calib_batches = calib_batches
        self.pipeline = pipeline
        self.random_state = random_state

    def _adapt_config(self) -> AdaptConfig:
        return AdaptConfig(self.epochs, self.batch_size, self.base_lr, self.weight_decay,
                           self.lr_warmup_epochs, self.eta, self.n_intervals, self.warmup_frac,
                           self.normalize_scores, self.random_state).validate()

    def _check_tokens(self, X):
        X = check_array(X, dtype=np.int64)
        cfg = self.family[0].config
        if X.shape[1] != cfg.seq_len:
            raise ValueError(f"expected sequences of length {cfg.seq_len}, got {X.shape[1]}")
        if X.min() < 0 or X.max() >= cfg.vocab_size:
            raise ValueError(f"token ids must lie in [0, {cfg.vocab_size})")
        return X

    def fit(self, X, y):
        if not self.family or len(self.family) < 2:
            raise ValueError("family must hold at least two pretrained anchors")
        if not all(a.frozen for a in self.family):
            raise ValueError("anchors must be pretrained and frozen before adaptation")
        if self.pipeline not in ("one-stage", "adapt-then-stitch"):
            raise ValueError(f"unknown pipeline {self.pipeline!r}")
        X, y = check_X_y(X, y, dtype=np.int64)
        check_classification_targets(y)
        X = self._check_tokens(X)
        self.classes_, codes = np.unique(y, return_inverse=True)
        train = Batch(X, codes)
        cfg = self._adapt_config()
        n_classes = len(self.classes_)

        if self.pipeline == "one-stage":
            palette, overlay = prepare(self.family, train, self.kernel, self.stride, self.ranks, n_classes,
                                       self.calib_batches, self.batch_size, self.random_state)
            state, log = run_adaptation(make_state(palette, overlay, cfg, len(train)), train, cfg)
        else:
            state, log = run_adapt_then_stitch(self.family, train, cfg, self.kernel, self.stride, self.ranks,
                                               n_classes, self.calib_batches)
        self.palette_, self.overlay_, self.tracker_ = state.palette, state.overlay, state.tracker
        self.deployment_ = select_deployment(state.tracker)
        self.log_ = log
        self.n_features_in_ = X.shape[1]
        return self

    def _resolve(self, stitch_id, flops_budget) -> int:
        if stitch_id is not None:
            self.palette_[stitch_id]  # KeyError for an unknown id
            return int(stitch_id)
        if flops_budget is None:
            return self.deployment_[-1].stitch_id
        fits = [d for d in self.deployment_ if d.flops <= flops_budget]
        if not fits:
            raise ValueError(f"no deployed stitch fits within {flops_budget} FLOPs")
        return fits[-1].stitch_id

    def decision_function(self, X, stitch_id=None, flops_budget=None):
        check_is_fitted(self, "palette_")
        X = self._check_tokens(X)
        sid = self._resolve(stitch_id, flops_budget)
        defn = self.palette_[sid]
        batch = Batch(X, np.zeros(len(X), dtype=np.int64))
        return stitch_forward(defn, self.palette_.family, self.palette_.layers, self.overlay_.view(sid), batch).data

    def predict_proba(self, X, stitch_id=None, flops_budget=None):
        z = self.decision_function(X, stitch_id, flops_budget)
        e = np.exp(z - z.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X, stitch_id=None, flops_budget=None):
        z = self.decision_function(X, stitch_id, flops_budget)
        return self.classes_[z.argmax(axis=1)]

    def evaluate(self, X, y, n_jobs=1):
        """Accuracy of every stitch on ``(X, y)`` as a list of EvalRow."""
        check_is_fitted(self, "palette_")
        X, y = check_X_y(X, y, dtype=np.int64)
        X = self._check_tokens(X)
        if not np.isin(y, self.classes_).all():
            raise ValueError("y holds labels unseen during fit")
        codes = np.searchsorted(self.classes_, y)
        return evaluate_palette(self.palette_, self.overlay_, Batch(X, codes), n_jobs)
