"""scikit-learn style front end for training an adapter on arrays.

    >>> clf = PetalClassifier(epochs=2).fit(X, y)          # doctest: +SKIP
    >>> clf.predict(X[:5])                                  # doctest: +SKIP

``X`` holds vision tokens shaped ``(n, Tv, H_v)``; labels may be any
hashable values and are mapped to class indices internally.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.metrics import accuracy_score
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import Split
from .errors import DimensionError
from .former import MiniFormerConfig
from .model import PetalModel
from .trainer import TrainConfig, fit as fit_model


class PetalClassifier(ClassifierMixin, BaseEstimator):
    def __init__(self, method="petal", ablation="none", task_kind="caption-like", rank=4, experts=3,
                 expert_middle=4, expert_form="bottleneck", lora_rank=4, mu=0.1, eta=0.01, temperature=0.1,
                 layers=2, H_t=32, heads=4, num_query_tokens=8, num_questions=8, init_std=0.08,
                 epochs=5, batch=32, lr_start=1e-4, lr_peak=1e-2, warmup_steps=10, weight_decay=0.02,
                 seed=0, backbone_seed=0):
        self.method = method
        self.ablation = ablation
        self.task_kind = task_kind
        self.rank = rank
        self.experts = experts
        self.expert_middle = expert_middle
        self.expert_form = expert_form
        self.lora_rank = lora_rank
        self.mu = mu
        self.eta = eta
        self.temperature = temperature
        self.layers = layers
        self.H_t = H_t
        self.heads = heads
        self.num_query_tokens = num_query_tokens
        self.num_questions = num_questions
        self.init_std = init_std
        self.epochs = epochs
        self.batch = batch
        self.lr_start = lr_start
        self.lr_peak = lr_peak
        self.warmup_steps = warmup_steps
        self.weight_decay = weight_decay
        self.seed = seed
        self.backbone_seed = backbone_seed

    def _validate_X(self, X, reset: bool):
        flat = check_array(X, allow_nd=True, dtype=np.float64)
        if flat.ndim != 3:
            raise DimensionError(f"X must be shaped (n, tokens, width), got {flat.shape}")
        if not reset and flat.shape[2] != self.n_features_in_:
            raise DimensionError(f"X has width {flat.shape[2]}, estimator was fitted with {self.n_features_in_}")
        return flat

    def _questions(self, question_ids, n):
        if self.task_kind != "vqa-like":
            return None
        if question_ids is None:
            raise DimensionError("vqa-like estimators need question_ids")
        q = np.asarray(question_ids, dtype=np.int64)
        if q.shape != (n,):
            raise DimensionError(f"question_ids must have shape ({n},), got {q.shape}")
        return q

    def fit(self, X, y, question_ids=None):
        X = self._validate_X(X, reset=True)
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64)
        check_classification_targets(y)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes to fit")
        self.n_features_in_ = X.shape[2]
        cfg = MiniFormerConfig(layers=self.layers, H_t=self.H_t, H_v=X.shape[2], heads=self.heads,
                               num_query_tokens=self.num_query_tokens, vocab=len(self.classes_),
                               num_questions=self.num_questions, init_std=self.init_std)
        tc = TrainConfig(epochs=self.epochs, batch=self.batch, lr_start=self.lr_start, lr_peak=self.lr_peak,
                         warmup_steps=self.warmup_steps, weight_decay=self.weight_decay, seed=self.seed,
                         backbone_seed=self.backbone_seed, method=self.method, ablation=self.ablation,
                         rank=self.rank, experts=self.experts, expert_middle=self.expert_middle,
                         expert_form=self.expert_form, lora_rank=self.lora_rank, mu=self.mu, eta=self.eta,
                         temperature=self.temperature)
        train = Split(X, encoded.astype(np.int64), self._questions(question_ids, len(X)))
        empty = train.take(np.arange(0))
        self.model_ = PetalModel(cfg, tc.adapter_spec(), self.task_kind)
        self.report_ = fit_model(self.model_, train, empty, tc)
        return self

    def decision_function(self, X, question_ids=None):
        check_is_fitted(self, "model_")
        X = self._validate_X(X, reset=False)
        return self.model_.predict_logits(X, self._questions(question_ids, len(X)))

    def predict_proba(self, X, question_ids=None):
        logits = self.decision_function(X, question_ids)
        shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
        return shifted / shifted.sum(axis=1, keepdims=True)

    def predict(self, X, question_ids=None):
        scores = self.decision_function(X, question_ids)
        return self.classes_[np.argmax(scores, axis=1)]

    def score(self, X, y, question_ids=None, sample_weight=None):
        return accuracy_score(y, self.predict(X, question_ids), sample_weight=sample_weight)
