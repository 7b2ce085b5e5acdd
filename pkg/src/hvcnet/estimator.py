"""scikit-learn style wrappers around the network and the augmentation pipeline."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data.augment import AugmentConfig, augment_batch
from .data.idx import ImageSet
from .model import ModelConfig, parse_head
from .rng import StreamFactory
from .train import TrainConfig, predict_logits, swapped_weights, train
from .validation import check_images, check_labels


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class HVCNetClassifier(ClassifierMixin, BaseEstimator):
    """Branching convolutional classifier with vector-capsule heads.

    Predictions use the moving-average weights kept during training.

    Parameters
    ----------
    head : {"hvc-z", "hvc-xy", "fc"}
    branches : {1, 3}
    merge : {"not-learnable", "random-init", "ones-init"} or None
        None picks ones-init for three branches and not-learnable for one.
    augment : {"full", "translate-2px", "translate-margin", "none"}
    epochs, batch_size, base_lr, lr_decay, ema_decay, seed, threads :
        Training settings.
    """

    def __init__(
        self,
        head="hvc-z",
        branches=3,
        merge=None,
        augment="full",
        epochs=300,
        batch_size=120,
        base_lr=0.001,
        lr_decay=0.98,
        ema_decay=0.999,
        seed=0,
        threads=1,
        dtype="float32",
    ):
        self.head = head
        self.branches = branches
        self.merge = merge
        self.augment = augment
        self.epochs = epochs
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.lr_decay = lr_decay
        self.ema_decay = ema_decay
        self.seed = seed
        self.threads = threads
        self.dtype = dtype

    def _train_config(self) -> TrainConfig:
        merge = self.merge or ("ones-init" if self.branches == 3 else "not-learnable")
        model = ModelConfig(**parse_head(self.head), branches=self.branches, merge=merge)
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            base_lr=self.base_lr,
            lr_decay=self.lr_decay,
            ema_decay=self.ema_decay,
            seed=self.seed,
            threads=self.threads,
            dtype=self.dtype,
            augment=AugmentConfig(strategy=self.augment),
            model=model,
        )

    def fit(self, X, y, eval_set=None):
        """Train on images ``X`` and labels 0..9 ``y``.

        ``eval_set=(X_val, y_val)`` is evaluated after every epoch; the
        per-epoch records are kept in ``history_``.
        """
        config = self._train_config()
        images = check_images(X)
        labels = check_labels(y, len(images), config.model.class_count)
        test = None
        if eval_set is not None:
            Xv = check_images(eval_set[0], "X_val")
            test = ImageSet(Xv, check_labels(eval_set[1], len(Xv), config.model.class_count))
        result = train(config, ImageSet(images, labels), test)
        self.model_ = result.model
        self.ema_ = result.state.ema
        self.history_ = result.history
        self.classes_ = np.arange(config.model.class_count)
        self.n_features_in_ = 28 * 28
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        images = check_images(X)
        with swapped_weights(self.model_, self.ema_):
            return predict_logits(self.model_, images)

    def predict_proba(self, X) -> np.ndarray:
        return _softmax(self.decision_function(X).astype(np.float64))

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]

    @property
    def branch_weights_(self):
        """Learned merge weights, or None when the merge is fixed."""
        check_is_fitted(self, "model_")
        return self.model_.merge_weights


class MnistAugmenter(TransformerMixin, BaseEstimator):
    """Stateless label-preserving augmentation of 28x28 digit images.

    ``transform`` is deterministic given ``seed`` and ``epoch``; sample ``i``
    of the input uses the random stream of index ``offset + i``.
    """

    def __init__(self, strategy="full", seed=0, epoch=0, offset=0, threads=1, rotation_prob=0.5, translate_cap=None):
        self.strategy = strategy
        self.seed = seed
        self.epoch = epoch
        self.offset = offset
        self.threads = threads
        self.rotation_prob = rotation_prob
        self.translate_cap = translate_cap

    def _config(self) -> AugmentConfig:
        return AugmentConfig(strategy=self.strategy, rotation_prob=self.rotation_prob, translate_cap=self.translate_cap)

    def fit(self, X, y=None):
        check_images(X)
        self._config()
        self.n_features_in_ = 28 * 28
        return self

    def transform(self, X) -> np.ndarray:
        images = check_images(X)
        factory = StreamFactory(self.seed)

        def streams(epoch, index, op):
            return factory(epoch, index + self.offset, op)

        idx = np.arange(len(images))
        return augment_batch(images, idx, self._config(), self.seed, self.epoch, threads=self.threads, streams=streams)

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.requires_fit = False
        return tags

