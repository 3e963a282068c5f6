"""scikit-learn style wrapper around the network and training loop."""

import numpy as np
from sklearn.base import BaseEstimator

from .data import SPECIES, LabeledPatch
from .exceptions import NotFittedError, ValidationError
from .metrics import dice
from .network import NetworkConfig, init_params
from .training import TrainConfig, binarize, fit, predict_proba, validate
from .validation import check_class_id, check_image, check_mask


def _class_ids(class_ids, n, num_classes):
    ids = np.broadcast_to(np.asarray(class_ids), (n,))
    return [check_class_id(int(i), num_classes) for i in ids]


class GLAMSegmenter(BaseEstimator):
    """Class-conditional binary segmenter.

    ``fit(X, y, class_ids=...)`` takes images ``X`` (N, H, W, 3) in [0, 1] (or
    uint8), binary masks ``y`` (N, H, W) and one 1-based lesion class per image.
    ``predict(X, class_ids)`` returns the thresholded masks for the requested
    classes.
    """

    def __init__(
        self,
        num_classes=6,
        base_channels=32,
        depth=5,
        decoder_channels=8,
        head_channels=8,
        epochs=200,
        learning_rate=1e-3,
        batch_size=4,
        pool_capacity=8,
        emit_rule="exceeds",
        leftover="drop",
        threshold=0.5,
        random_state=0,
    ):
        self.num_classes = num_classes
        self.base_channels = base_channels
        self.depth = depth
        self.decoder_channels = decoder_channels
        self.head_channels = head_channels
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.pool_capacity = pool_capacity
        self.emit_rule = emit_rule
        self.leftover = leftover
        self.threshold = threshold
        self.random_state = random_state

    def _network_config(self):
        return NetworkConfig(
            num_classes=self.num_classes,
            base_channels=self.base_channels,
            depth=self.depth,
            decoder_channels=self.decoder_channels,
            head_channels=self.head_channels,
            seed=self.random_state,
        )

    def _train_config(self):
        return TrainConfig(
            epochs=self.epochs,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            pool_capacity=self.pool_capacity,
            emit_rule=self.emit_rule,
            leftover=self.leftover,
            threshold=self.threshold,
            seed=self.random_state,
        )

    def _patches(self, X, y, class_ids, species, spacing_um):
        X = check_image(X, allow_batch=True)
        y = check_mask(y, allow_batch=True)
        if X.ndim != 4 or X.shape[:3] != y.shape:
            raise ValidationError(f"X {X.shape} and y {y.shape} must be (N, H, W, 3) and (N, H, W)")
        ids = _class_ids(class_ids, len(X), self.num_classes)
        species = np.broadcast_to(np.asarray(species, dtype=object), (len(X),))
        spacing = np.broadcast_to(np.asarray(spacing_um, dtype=float), (len(X),))
        return [LabeledPatch(X[i], y[i], ids[i], species[i], spacing[i]) for i in range(len(X))]

    def fit(self, X, y, class_ids=None, species="mouse", spacing_um=1.0, validation_data=None):
        """Train from scratch. ``validation_data`` is an optional (X, y, class_ids) triple."""
        if class_ids is None:
            raise ValidationError("fit needs class_ids: one lesion class per training image")
        if isinstance(species, str) and species not in SPECIES:
            raise ValidationError(f"unknown species {species!r}")
        patches = self._patches(X, y, class_ids, species, spacing_um)
        val_sets = {}
        if validation_data is not None:
            vx, vy, vc = validation_data
            val_sets["val"] = self._patches(vx, vy, vc, species, spacing_um)
        self.model_ = init_params(self._network_config())
        self.history_, _ = fit(self.model_, patches, val_sets, self._train_config())
        self.n_features_in_ = 3
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted yet; call fit first")

    def predict_proba(self, X, class_ids):
        """Foreground probability maps (N, H, W)."""
        self._check_fitted()
        X = check_image(X, allow_batch=True)
        single = X.ndim == 3
        X = X[None] if single else X
        prob = predict_proba(self.model_, X, _class_ids(class_ids, len(X), self.num_classes), self.batch_size)
        return prob[0] if single else prob

    def predict(self, X, class_ids):
        return binarize(self.predict_proba(X, class_ids), self.threshold)

    def score(self, X, y, class_ids):
        """Mean Dice of thresholded predictions."""
        self._check_fitted()
        y = check_mask(y, allow_batch=True)
        pred = self.predict(X, class_ids)
        if pred.ndim == 2:
            return dice(pred, y)
        return float(np.mean([dice(p, g) for p, g in zip(pred, y)]))

    def validation_dice(self, X, y, class_ids):
        """Per-class mean Dice and the mean over classes, as tracked during training."""
        self._check_fitted()
        return validate(self.model_, self._patches(X, y, class_ids, "mouse", 1.0), self.threshold)
