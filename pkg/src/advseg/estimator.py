"""scikit-learn style front end for the adversarial segmenter."""
from __future__ import annotations

import logging

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import LabeledSample
from .evaluation import aggregate, evaluate_labels, probmap_to_classes
from .networks import MIN_ESTIMATOR_SIZE
from .trainer import TrainConfig, init_state, predict_proba, prepare_samples, train

log = logging.getLogger(__name__)


def check_images(X, min_size: int = MIN_ESTIMATOR_SIZE) -> list[np.ndarray]:
    """Validate a stack (N x H x W array) or list of 2-D gray-level images."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        raise ValueError("expected a collection of images; wrap a single image in a list")
    images = [np.asarray(x, dtype=np.float64) for x in X]
    if not images:
        raise ValueError("no images given")
    for i, im in enumerate(images):
        if im.ndim != 2:
            raise ValueError(f"image {i} must be 2-D (H x W), got shape {im.shape}")
        if im.shape[0] < min_size or im.shape[1] < min_size:
            raise ValueError(f"image {i} is {im.shape[0]}x{im.shape[1]}; need at least {min_size}x{min_size}")
        if not np.all(np.isfinite(im)):
            raise ValueError(f"image {i} contains NaN or infinite values")
    return images


def check_labels(y, images: list[np.ndarray]) -> list[np.ndarray]:
    """Validate three-class label maps against their images."""
    labels = [np.asarray(l) for l in y]
    if len(labels) != len(images):
        raise ValueError(f"got {len(images)} images but {len(labels)} label maps")
    out = []
    for i, (lab, im) in enumerate(zip(labels, images)):
        if lab.shape != im.shape:
            raise ValueError(f"label {i} has shape {lab.shape}, image has {im.shape}")
        if not np.issubdtype(lab.dtype, np.integer) and not np.all(np.mod(lab, 1) == 0):
            raise ValueError(f"label {i} must hold integer classes")
        if lab.min() < 0 or lab.max() > 2:
            raise ValueError(f"label {i} has classes outside {{0, 1, 2}}")
        out.append(lab.astype(np.uint8))
    return out


class AdversarialSegmenter(BaseEstimator):
    """Three-class cell segmenter trained against a Rib Cage discriminator.

    Parameters
    ----------
    mode : {"adversarial", "cross_entropy"}
        Adversarial min-max training, or the per-pixel cross-entropy baseline
        using the same estimator, data pipeline and optimizer.
    n_steps : int
        Number of training steps.
    batch_size, crop_size : int
        Crops per step and crop side length (the discriminator needs 64).
    lr_e, lr_d, beta1, beta2 : float
        Adam settings for the estimator and discriminator.
    d_steps_per_e_step : int
        Discriminator updates per estimator update.
    bn_momentum : float
        Weight of the old value in the batch-norm running statistics.
    lr_decay_from : int
        Step after which both learning rates fall linearly to 0 at ``n_steps``;
        0 keeps them constant.
    random_state : int
        Seeds initialization and the augmentation stream.

    Attributes
    ----------
    state_ : TrainState
        Networks, optimizer moments and loss history after ``fit``.
    history_ : list of LossRecord
    """

    def __init__(self, mode="adversarial", n_steps=2000, batch_size=1, crop_size=64,
                 lr_e=1e-4, lr_d=1e-4, beta1=0.5, beta2=0.999, d_steps_per_e_step=1,
                 bn_momentum=0.9, lr_decay_from=0, random_state=0):
        self.mode = mode
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.crop_size = crop_size
        self.lr_e = lr_e
        self.lr_d = lr_d
        self.beta1 = beta1
        self.beta2 = beta2
        self.d_steps_per_e_step = d_steps_per_e_step
        self.bn_momentum = bn_momentum
        self.lr_decay_from = lr_decay_from
        self.random_state = random_state

    def _config(self, n_train: int) -> TrainConfig:
        return TrainConfig(
            n_train=n_train,
            batch_size=self.batch_size,
            total_steps=self.n_steps,
            d_steps_per_e_step=self.d_steps_per_e_step,
            lr_d=self.lr_d,
            lr_e=self.lr_e,
            beta1=self.beta1,
            beta2=self.beta2,
            crop_size=self.crop_size,
            seed=self.random_state,
            bn_momentum=self.bn_momentum,
            lr_decay_from=self.lr_decay_from,
            mode=self.mode,
        )

    def fit(self, X, y, callback=None):
        images = check_images(X, min_size=self.crop_size)
        labels = check_labels(y, images)
        self.state_ = init_state(self._config(len(images)))
        samples = prepare_samples([LabeledSample(im, lab) for im, lab in zip(images, labels)])
        train(self.state_, samples, callback=callback)
        self.history_ = self.state_.history
        return self

    @classmethod
    def from_state(cls, state) -> "AdversarialSegmenter":
        cfg = state.config
        seg = cls(mode=cfg.mode, n_steps=cfg.total_steps, batch_size=cfg.batch_size, crop_size=cfg.crop_size,
                  lr_e=cfg.lr_e, lr_d=cfg.lr_d, beta1=cfg.beta1, beta2=cfg.beta2,
                  d_steps_per_e_step=cfg.d_steps_per_e_step, bn_momentum=cfg.bn_momentum,
                  lr_decay_from=cfg.lr_decay_from, random_state=cfg.seed)
        seg.state_ = state
        seg.history_ = state.history
        return seg

    def predict_proba(self, X) -> list[np.ndarray]:
        check_is_fitted(self, "state_")
        return [predict_proba(self.state_.estimator, im) for im in check_images(X)]

    def predict(self, X) -> list[np.ndarray]:
        """Per-pixel class maps (0 background, 1 nucleus, 2 contour)."""
        return [probmap_to_classes(p) for p in self.predict_proba(X)]

    def score(self, X, y) -> float:
        """Instance-level F-measure pooled over all frames."""
        images = check_images(X)
        labels = check_labels(y, images)
        matches = [evaluate_labels(p, g) for p, g in zip(self.predict(images), labels)]
        return aggregate(matches).f_measure
