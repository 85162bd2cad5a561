"""scikit-learn style wrapper so the detector composes with sklearn tooling.

X is an array of raw waveforms, shape (n_clips, 144000), already at
16 kHz; y uses 1 for music, 0 for no-music. The heavy lifting lives in
the model/train modules; this class only adapts the interface.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .audio_io import CLIP_SAMPLES, LABEL_MUSIC, LABEL_NO_MUSIC, TARGET_RATE, AudioClip
from .errors import ContractViolation
from .model import MusicNetModel
from .train import TrainConfig, fit, prepare_dataset


class MusicNetClassifier(BaseEstimator, ClassifierMixin):
    """Binary background-music classifier over 9 s 16 kHz waveforms."""

    def __init__(self, epochs=10, batch_size=32, lr=1e-3, seed=0,
                 early_stop_patience=5, train_featurizer=False, threshold=0.5):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed
        self.early_stop_patience = early_stop_patience
        self.train_featurizer = train_featurizer
        self.threshold = threshold

    def _validate_waveforms(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float32)
        if X.ndim != 2 or X.shape[1] != CLIP_SAMPLES:
            raise ContractViolation(
                f"X must be (n_clips, {CLIP_SAMPLES}) waveforms at {TARGET_RATE} Hz")
        if not np.all(np.isfinite(X)) or np.max(np.abs(X), initial=0.0) > 1.0:
            raise ContractViolation("waveforms must be finite and within [-1, 1]")
        return X

    def fit(self, X, y):
        X = self._validate_waveforms(X)
        y = np.asarray(y).reshape(-1)
        if len(y) != len(X):
            raise ContractViolation("X and y length mismatch")
        if not np.all((y == 0) | (y == 1)):
            raise ContractViolation("y must be binary {0, 1}")
        self.model_ = MusicNetModel.init_random(seed=self.seed)
        clips = [
            AudioClip(x, TARGET_RATE,
                      label=LABEL_MUSIC if yi == 1 else LABEL_NO_MUSIC,
                      source_id=f"X[{i}]")
            for i, (x, yi) in enumerate(zip(X, y))
        ]
        cfg = TrainConfig(
            batch_size=self.batch_size, lr=self.lr, max_epochs=self.epochs,
            early_stop_patience=self.early_stop_patience, seed=self.seed,
            train_featurizer=self.train_featurizer)
        dataset = prepare_dataset(clips, self.model_.feature_plan,
                                  keep_waveforms=self.train_featurizer)
        self.fit_result_ = fit(self.model_, dataset, cfg)
        self.classes_ = np.array([0, 1])
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        X = self._validate_waveforms(X)
        feats = np.stack([
            self.model_.featurize(AudioClip(x, TARGET_RATE)).values for x in X
        ])
        p = self.model_.forward_features(feats)
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= self.threshold).astype(int)
