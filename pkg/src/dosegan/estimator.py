"""scikit-learn style facade over the trainer.

``X`` holds low-dose volumes and ``y`` standard-dose volumes, both shaped
``(n_samples, E, E, E)`` in physical units. ``drf`` gives each sample's dose
reduction factor.

>>> est = DoseEstimator(max_epochs=1, base_channels=4)      # doctest: +SKIP
>>> est.fit(X, y, drf=drf).predict(X).shape                 # doctest: +SKIP
(n_samples, 32, 32, 32)
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from . import metrics
from .dosesim import DRF_LEVELS, Dataset, DatasetManifest, ManifestEntry, drf_class, normalize
from .losses import LossWeights
from .nets import NetConfig
from .rng import Rng
from .tensor import Tensor, no_grad
from .trainer import TrainConfig, fit, predict


def _check_volumes(a, name: str) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float32)
    if arr.ndim != 4 or not arr.shape[1] == arr.shape[2] == arr.shape[3]:
        raise ValueError(f"{name} must have shape (n_samples, E, E, E), got {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains NaN or Inf")
    return arr


def arrays_to_dataset(X, y, drf, val_fraction: float = 0.2, seed: int = 0) -> Dataset:
    """Wrap in-memory volumes as a Dataset with a seeded train/val split."""
    X = _check_volumes(X, "X")
    y = _check_volumes(y, "y")
    if X.shape != y.shape:
        raise ValueError(f"X {X.shape} and y {y.shape} differ in shape")
    drf = np.asarray(drf, dtype=np.int64).reshape(-1)
    if drf.shape[0] != X.shape[0]:
        raise ValueError(f"{drf.shape[0]} DRF labels for {X.shape[0]} samples")
    for d in np.unique(drf):
        drf_class(int(d))
    n = X.shape[0]
    n_val = int(round(val_fraction * n))
    if not 0 < n_val < n:
        raise ValueError(f"val_fraction {val_fraction} leaves an empty train or val split for {n} samples")
    order = Rng(seed).split("holdout").permutation(n)
    val = set(order[:n_val].tolist())
    entries, volumes = [], {}
    for i in range(n):
        split = "val" if i in val else "train"
        s, l = f"vol_{i:04d}_s.raw", f"vol_{i:04d}_l{int(drf[i])}.raw"
        volumes[s], volumes[l] = y[i], X[i]
        entries.append(ManifestEntry(s, "s", i, None, seed, split))
        entries.append(ManifestEntry(l, "l", i, int(drf[i]), seed, split))
    norm_max = float(y.max())
    if norm_max <= 0:
        raise ValueError("y must contain a positive voxel")
    return Dataset(DatasetManifest(X.shape[1], norm_max, 0.0, entries), volumes)


class DoseEstimator(RegressorMixin, BaseEstimator):
    """Low-dose to standard-dose volume regressor.

    Hyperparameters mirror :class:`NetConfig` and :class:`TrainConfig`;
    ``score`` is mean PSNR in dB rather than R^2.
    """

    def __init__(self, variant: str = "full", base_channels: int = 16, refiner_channels: int = 16,
                 batch_size: int = 4, max_epochs: int = 100, lr: float = 2e-4,
                 weights: tuple[float, float, float, float] = (300.0, 10.0, 10.0, 1.0),
                 val_fraction: float = 0.2, seed: int = 0):
        self.variant = variant
        self.base_channels = base_channels
        self.refiner_channels = refiner_channels
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.lr = lr
        self.weights = weights
        self.val_fraction = val_fraction
        self.seed = seed

    def fit(self, X, y, drf=None):
        X = _check_volumes(X, "X")
        if drf is None:
            if self.variant != "baseline":
                raise ValueError("drf labels are required unless variant='baseline'")
            drf = np.full(X.shape[0], DRF_LEVELS[0])
        dataset = arrays_to_dataset(X, y, drf, self.val_fraction, self.seed)
        net = NetConfig(base_channels=self.base_channels, refiner_channels=self.refiner_channels,
                        volume_extent=X.shape[1]).validate()
        train = TrainConfig(batch_size=self.batch_size, max_epochs=self.max_epochs, lr_initial=self.lr,
                            weights=LossWeights(*self.weights), variant=self.variant, seed=self.seed).validate()
        self.state_, self.history_ = fit(dataset, net, train)
        self.norm_max_ = dataset.manifest.norm_max
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def _forward(self, X) -> tuple[np.ndarray, np.ndarray]:
        check_is_fitted(self, "state_")
        X = _check_volumes(X, "X")
        e = self.state_.net_config.volume_extent
        if X.shape[1] != e:
            raise ValueError(f"fitted for extent {e}, got {X.shape[1]}")
        return np.stack([normalize(v, self.norm_max_) for v in X])[:, None], X

    def predict(self, X) -> np.ndarray:
        x, _ = self._forward(X)
        outs = [predict(self.state_, x[i:i + self.batch_size])[1] for i in range(0, len(x), self.batch_size)]
        return np.concatenate(outs)[:, 0] * np.float32(self.norm_max_)

    def predict_drf(self, X) -> np.ndarray:
        """Most likely dose reduction factor per sample from the classification head."""
        x, _ = self._forward(X)
        with no_grad():
            _, logits = self.state_.nets.mlnet(Tensor(x), training=False)
        return np.asarray(DRF_LEVELS)[logits.data.argmax(axis=1)]

    def score(self, X, y, sample_weight=None) -> float:
        pred = self.predict(X)
        y = _check_volumes(y, "y")
        vals = np.array([metrics.psnr(p, g) for p, g in zip(pred, y)])
        return float(np.average(vals, weights=sample_weight))
