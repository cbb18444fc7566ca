"""scikit-learn style wrappers around the segmentation trainer and the perturbation models.

``AdversarialSegmenter`` follows the estimator protocol (``fit``, ``predict``,
``predict_proba``, ``score``, ``get_params``/``set_params``). The perturbation
classes are transformers: ``transform`` maps an ``(N, H, W)`` image batch to
perturbed images of the same shape.
"""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import transforms as T
from .adversary import AttackConfig, attack_bias, attack_morph
from .data import Sample
from .metrics import mean_dice
from .segnet import SegNet, SegNetConfig
from .trainer import TrainConfig, best_network, predict_masks, train


def check_images(X, name: str = "X") -> np.ndarray:
    """Validate an image batch: finite float64 array of shape (N, H, W) with N >= 1."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[0] == 0 or min(arr.shape[1:]) < 1:
        raise ValueError(f"{name} must have shape (N, H, W) with N >= 1, got {np.shape(X)}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or infinite values")
    return arr


def check_masks(y, images: np.ndarray, n_classes: int = 2) -> np.ndarray:
    arr = np.asarray(y)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.shape != images.shape:
        raise ValueError(f"masks shape {arr.shape} does not match images {images.shape}")
    if not np.all(np.equal(np.mod(arr, 1), 0)):
        raise ValueError("masks must hold integer labels")
    arr = arr.astype(np.int64)
    if arr.min() < 0 or arr.max() >= n_classes:
        raise ValueError(f"mask labels must lie in [0, {n_classes})")
    return arr


def _samples(images, masks=None, prefix="s") -> list[Sample]:
    return [Sample(images[i], None if masks is None else masks[i], f"{prefix}{i:05d}") for i in range(len(images))]


class AdversarialSegmenter(ClassifierMixin, BaseEstimator):
    """U-net segmenter trained with random augmentation, then adversarial consistency finetuning.

    ``fit(X, y)`` trains in supervised mode; passing ``X_unlabelled`` switches
    to semi-supervised mode. ``predict`` returns per-pixel labels, ``score``
    the mean foreground Dice.
    """

    def __init__(self, attack="bias", pretrain_iters=500, finetune_iters=200, pretrain_lr=1e-3,
                 finetune_lr=1e-5, batch_size=8, lambda_l=1.0, lambda_u=0.1, alpha=0.3, beta=2.0, w=0.5,
                 n_steps=1, xi=1.0, k=4, widths=(8, 16, 32), n_classes=2, select_best=False, random_state=0):
        self.attack = attack
        self.pretrain_iters = pretrain_iters
        self.finetune_iters = finetune_iters
        self.pretrain_lr = pretrain_lr
        self.finetune_lr = finetune_lr
        self.batch_size = batch_size
        self.lambda_l = lambda_l
        self.lambda_u = lambda_u
        self.alpha = alpha
        self.beta = beta
        self.w = w
        self.n_steps = n_steps
        self.xi = xi
        self.k = k
        self.widths = widths
        self.n_classes = n_classes
        self.select_best = select_best
        self.random_state = random_state

    def _train_config(self, height: int, width: int, semi: bool) -> TrainConfig:
        seed = int(self.random_state)
        cfg = TrainConfig(
            pretrain_iters=self.pretrain_iters, pretrain_lr=self.pretrain_lr,
            finetune_iters=self.finetune_iters, finetune_lr=self.finetune_lr,
            batch_size=self.batch_size, lambda_l=self.lambda_l, lambda_u=self.lambda_u,
            attack=self.attack, mode="semi" if semi else "supervised", seed=seed,
            net=SegNetConfig(height, width, self.n_classes, tuple(self.widths), seed),
            attack_cfg=AttackConfig(n=self.n_steps, xi=self.xi, alpha=self.alpha, beta=self.beta,
                                    w=self.w, k=self.k, seed=seed),
            randaug=T.RandAugConfig(seed=seed),
        )
        cfg.validate()
        return cfg

    def fit(self, X, y, X_unlabelled=None, X_val=None, y_val=None):
        X = check_images(X)
        y = check_masks(y, X, self.n_classes)
        semi = X_unlabelled is not None
        unl = None
        if semi:
            U = check_images(X_unlabelled, "X_unlabelled")
            if U.shape[1:] != X.shape[1:]:
                raise ValueError("unlabelled images must match the labelled image extents")
            unl = _samples(U, prefix="u")
        val = None
        if X_val is not None:
            Xv = check_images(X_val, "X_val")
            val = _samples(Xv, check_masks(y_val, Xv, self.n_classes), prefix="v")
        cfg = self._train_config(X.shape[1], X.shape[2], semi)
        state, report = train(cfg, _samples(X, y), val, unl)
        self.state_ = state
        self.network_ = best_network(state) if (self.select_best and val) else state.net
        self.train_report_ = report
        self.classes_ = np.arange(self.n_classes)
        self.image_shape_ = X.shape[1:]
        return self

    def _checked(self, X) -> np.ndarray:
        check_is_fitted(self, "network_")
        X = check_images(X)
        if X.shape[1:] != tuple(self.image_shape_):
            raise ValueError(f"expected images of extent {tuple(self.image_shape_)}, got {X.shape[1:]}")
        return X

    def predict_proba(self, X) -> np.ndarray:
        """Per-pixel class probabilities, shape (N, C, H, W)."""
        X = self._checked(X)
        with torch.no_grad():
            return self.network_(torch.from_numpy(X)).numpy()

    def predict(self, X) -> np.ndarray:
        X = self._checked(X)
        return predict_masks(self.network_, X)

    def score(self, X, y, sample_weight=None) -> float:
        X = self._checked(X)
        return mean_dice(self.predict(X), check_masks(y, X, self.n_classes))


class RandomBiasField(TransformerMixin, BaseEstimator):
    """Multiply each image by an independent random smooth bias field bounded by ``alpha``."""

    def __init__(self, alpha=0.3, k=4, random_state=0):
        self.alpha = alpha
        self.k = k
        self.random_state = random_state

    def fit(self, X, y=None):
        check_images(X)
        if not 0 < self.alpha < 1 or self.k < 2:
            raise ValueError("need 0 < alpha < 1 and k >= 2")
        self.rng_ = np.random.default_rng(self.random_state)
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "rng_")
        X = check_images(X)
        n, h, w = X.shape
        phi = T.random_bias(self.rng_, self.alpha, self.k, h, w, n=n)
        self.field_ = phi.numpy()
        return X * self.field_


class _AttackTransformer(TransformerMixin, BaseEstimator):
    def __init__(self, network: SegNet | None = None, n_steps=1, xi=1.0, w=0.5, random_state=0):
        self.network = network
        self.n_steps = n_steps
        self.xi = xi
        self.w = w
        self.random_state = random_state

    def _config(self) -> AttackConfig:
        raise NotImplementedError

    def fit(self, X, y=None):
        if not isinstance(self.network, SegNet):
            raise ValueError("network must be a SegNet (for example AdversarialSegmenter().fit(...).network_)")
        check_images(X)
        self.config_ = self._config()
        self.config_.validate()
        self.rng_ = np.random.default_rng(self.random_state)
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "config_")
        res = self._attack(check_images(X))
        self.result_ = res
        return res.adv_image.numpy()


class AdversarialBiasField(_AttackTransformer):
    """Worst-case smooth multiplicative bias field for a fixed network."""

    def __init__(self, network=None, alpha=0.3, k=4, n_steps=1, xi=1.0, w=0.5, random_state=0):
        super().__init__(network, n_steps, xi, w, random_state)
        self.alpha = alpha
        self.k = k

    def _config(self):
        return AttackConfig(n=self.n_steps, xi=self.xi, alpha=self.alpha, k=self.k, w=self.w,
                            seed=self.random_state)

    def _attack(self, X):
        return attack_bias(self.network, torch.from_numpy(X), self.config_, self.rng_)


class AdversarialMorph(_AttackTransformer):
    """Worst-case small diffeomorphic deformation for a fixed network."""

    def __init__(self, network=None, beta=2.0, n_steps=1, xi=50.0, w=0.5, random_state=0):
        super().__init__(network, n_steps, xi, w, random_state)
        self.beta = beta

    def _config(self):
        return AttackConfig(n=self.n_steps, xi_morph=self.xi, beta=self.beta, w=self.w, seed=self.random_state)

    def _attack(self, X):
        return attack_morph(self.network, torch.from_numpy(X), self.config_, self.rng_)
