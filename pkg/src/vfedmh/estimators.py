"""Scikit-learn style front ends for the federated training engine.

These estimators simulate the whole multi-party session in process: ``fit``
splits the columns of X into contiguous party shards, runs the protocol, and
keeps every party's trained network.  ``predict`` rebuilds the global
embedding from all shards (plain float averaging at inference time) and
applies one party's decision stack.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import nn
from .baselines import run_aggvfl, run_local
from .data import shard_ranges
from .optim import OptimizerConfig
from .protocol import PartyConfig, SessionConfig, run_training


def _per_party(value, n_parties, name):
    if isinstance(value, (str, float, int)):
        return [value] * n_parties
    value = list(value)
    if len(value) != n_parties:
        raise ValueError(f"{name} must have one entry per party ({n_parties}), got {len(value)}")
    return value


def _split_columns(X, ranges):
    return [X[:, r.lo : r.hi] for r in ranges]


class _VerticalBase(BaseEstimator, ClassifierMixin):
    def _prepare(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        self.n_features_in_ = X.shape[1]
        n_parties = self.n_passive + 1
        self.shard_ranges_ = shard_ranges(X.shape[1], n_parties)
        return X, y_idx

    def _session(self) -> SessionConfig:
        n_parties = self.n_passive + 1
        models = _per_party(self.models, n_parties, "models")
        optimizers = _per_party(self.optimizers, n_parties, "optimizers")
        lrs = _per_party(self.lr, n_parties, "lr")
        parties = [
            PartyConfig(model=m, optimizer=o, lr=float(lr))
            for m, o, lr in zip(models, optimizers, lrs)
        ]
        return SessionConfig(
            n_passive=self.n_passive,
            epochs=self.epochs,
            batch_size=self.batch_size,
            d_emb=self.d_emb,
            seed=self.seed,
            parties=parties,
            secure_mode="masked" if self.mask else "plain",
        )


class VFedMHClassifier(_VerticalBase):
    """Embedding-aggregation vertical FL over a simulated party split.

    Parameters mirror the session configuration; ``models``, ``optimizers``
    and ``lr`` accept either a single value or one per party (active first).
    """

    def __init__(
        self,
        n_passive: int = 3,
        models="mlp3",
        optimizers="sgd",
        lr=0.05,
        epochs: int = 20,
        batch_size: int = 128,
        d_emb: int = 64,
        mask: bool = True,
        predict_party: int = 0,
        seed: int = 0,
    ):
        self.n_passive = n_passive
        self.models = models
        self.optimizers = optimizers
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.d_emb = d_emb
        self.mask = mask
        self.predict_party = predict_party
        self.seed = seed

    def fit(self, X, y):
        X, y_idx = self._prepare(X, y)
        session = self._session()
        result = run_training(
            session,
            _split_columns(X, self.shard_ranges_),
            y_idx,
            n_classes=len(self.classes_),
        )
        self.models_ = result.models
        self.result_ = result
        return self

    def _global_embedding(self, X):
        shards = _split_columns(X, self.shard_ranges_)
        total = None
        for k, model in sorted(self.models_.items()):
            emb, _ = nn.forward_embedding(model.state, model.spec, shards[k])
            total = emb if total is None else total + emb
        return total / float(len(self.models_))

    def decision_function(self, X):
        check_is_fitted(self, "models_")
        X = check_array(X, dtype=np.float64)
        emb = self._global_embedding(X)
        model = self.models_[self.predict_party]
        logits, _ = nn.forward_decision(model.state, model.spec, emb)
        return logits

    def predict(self, X):
        logits = self.decision_function(X)
        return self.classes_[np.argmax(logits, axis=1)]

    def party_scores(self, X, y) -> dict[int, float]:
        """Test accuracy of every party's model on the same global embedding."""
        check_is_fitted(self, "models_")
        X, y = check_X_y(X, y, dtype=np.float64)
        y_idx = np.searchsorted(self.classes_, y)
        emb = self._global_embedding(X)
        scores = {}
        for k, model in sorted(self.models_.items()):
            logits, _ = nn.forward_decision(model.state, model.spec, emb)
            scores[k] = float((np.argmax(logits, axis=1) == y_idx).mean())
        return scores


class AggVFLClassifier(_VerticalBase):
    """Prediction-aggregation baseline: parties average class logits."""

    def __init__(
        self,
        n_passive: int = 3,
        models="mlp3",
        optimizers="sgd",
        lr=0.05,
        epochs: int = 20,
        batch_size: int = 128,
        d_emb: int = 64,
        seed: int = 0,
    ):
        self.n_passive = n_passive
        self.models = models
        self.optimizers = optimizers
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.d_emb = d_emb
        self.seed = seed

    mask = False  # aggVFL exchanges logits in the clear

    def fit(self, X, y):
        X, y_idx = self._prepare(X, y)
        session = self._session()
        result = run_aggvfl(
            session,
            _split_columns(X, self.shard_ranges_),
            y_idx,
            n_classes=len(self.classes_),
        )
        self.models_ = result.models
        self.result_ = result
        return self

    def decision_function(self, X):
        check_is_fitted(self, "models_")
        X = check_array(X, dtype=np.float64)
        shards = _split_columns(X, self.shard_ranges_)
        total = None
        for k, model in sorted(self.models_.items()):
            logits, _ = nn.forward_full(model.state, model.spec, shards[k])
            total = logits if total is None else total + logits
        return total / float(len(self.models_))

    def predict(self, X):
        logits = self.decision_function(X)
        return self.classes_[np.argmax(logits, axis=1)]

    def party_scores(self, X, y) -> dict[int, float]:
        check_is_fitted(self, "models_")
        X, y = check_X_y(X, y, dtype=np.float64)
        y_idx = np.searchsorted(self.classes_, y)
        shards = _split_columns(X, self.shard_ranges_)
        scores = {}
        for k, model in sorted(self.models_.items()):
            logits, _ = nn.forward_full(model.state, model.spec, shards[k])
            scores[k] = float((np.argmax(logits, axis=1) == y_idx).mean())
        return scores


class LocalOnlyClassifier(_VerticalBase):
    """The no-collaboration baseline: the active party trains on its shard.

    X is still the full feature matrix; only the first shard's columns are
    used, matching what the active party would see in a federation of
    ``n_passive + 1`` parties.
    """

    def __init__(
        self,
        n_passive: int = 3,
        model: str = "mlp3",
        optimizer: str = "sgd",
        lr: float = 0.05,
        epochs: int = 20,
        batch_size: int = 128,
        d_emb: int = 64,
        seed: int = 0,
    ):
        self.n_passive = n_passive
        self.model = model
        self.optimizer = optimizer
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.d_emb = d_emb
        self.seed = seed

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        self.n_features_in_ = X.shape[1]
        self.shard_ranges_ = shard_ranges(X.shape[1], self.n_passive + 1)
        r0 = self.shard_ranges_[0]
        spec = nn.spec_from_name(self.model, r0.hi - r0.lo, self.d_emb, len(self.classes_))
        result = run_local(
            X[:, r0.lo : r0.hi],
            y_idx,
            spec,
            OptimizerConfig(kind=self.optimizer, learning_rate=self.lr),
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.seed,
        )
        self.spec_ = result.spec
        self.state_ = result.state
        return self

    def decision_function(self, X):
        check_is_fitted(self, "state_")
        X = check_array(X, dtype=np.float64)
        r0 = self.shard_ranges_[0]
        logits, _ = nn.forward_full(self.state_, self.spec_, X[:, r0.lo : r0.hi])
        return logits

    def predict(self, X):
        logits = self.decision_function(X)
        return self.classes_[np.argmax(logits, axis=1)]
