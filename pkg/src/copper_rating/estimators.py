"""scikit-learn style wrappers around the three training phases.

``SegmentationEstimator`` covers phase 1, ``PurityRegressor`` phases 2-3 on
precomputed heatmap stacks and ``RatingNetwork`` chains both. Constructor
arguments are plain hyperparameters so ``get_params``/``set_params``/``clone``
work; fitted state lives in trailing-underscore attributes.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .bundle import RatingBundle
from .config import DEFAULT_THRESHOLDS, TrainConfig
from .heatmap import dataset_miou
from .ladder import LevelLadder
from .seg_net import predict_heatmap, seg_forward
from .trainer import StackData, build_stack_data, evaluate_purity, train_phase1, train_phase2, train_phase3
from .validation import check_images, check_masks


def _check_stacks(X) -> np.ndarray:
    X = np.asarray(X)
    if X.ndim != 4:
        raise ValueError(f"expected heatmap stacks of shape (S, n, H, W), got {X.shape}")
    if X.size and not np.isin(X, (0, 1)).all():
        raise ValueError("heatmap stacks must be binary (0 copper, 1 impurity)")
    return X.astype(np.uint8)


def _check_samples(X) -> np.ndarray:
    X = np.asarray(X)
    if X.ndim != 5 or X.shape[-1] != 3:
        raise ValueError(f"expected samples of shape (S, n, H, W, 3), got {X.shape}")
    return X


def _unpack_targets(y, n: int):
    """``y`` rows are ``[area_1 .. area_n, mass, level]``."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2 or y.shape[1] != n + 2:
        raise ValueError(f"targets must have shape (S, {n + 2}) = n area purities + mass + level")
    return y[:, :n], y[:, n], y[:, n + 1].astype(np.int64)


def pack_targets(area, mass, levels) -> np.ndarray:
    return np.column_stack([np.asarray(area, dtype=np.float64), np.asarray(mass, dtype=np.float64),
                            np.asarray(levels, dtype=np.float64)])


class SegmentationEstimator(BaseEstimator, TransformerMixin):
    """Phase 1: pixel classifier copper / impurity.

    ``fit(X, y)`` takes images ``(N, H, W, 3)`` uint8 and masks ``(N, H, W)``
    in {0, 1}. ``predict`` returns heatmaps, ``transform`` the 32-channel
    features of the last layer.
    """

    def __init__(self, epochs=20, batch_size=8, lr=1e-2, momentum=0.9, weight_decay=1e-4, width=16,
                 cutpaste=True, cutpaste_k=(1, 4), cutpaste_prob=0.5, min_patch_area=16,
                 standard_ops=("flip", "rotate", "translate"), random_state=0, deterministic=True,
                 checkpoint_dir=None):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.width = width
        self.cutpaste = cutpaste
        self.cutpaste_k = cutpaste_k
        self.cutpaste_prob = cutpaste_prob
        self.min_patch_area = min_patch_area
        self.standard_ops = standard_ops
        self.random_state = random_state
        self.deterministic = deterministic
        self.checkpoint_dir = checkpoint_dir

    def train_config(self) -> TrainConfig:
        return TrainConfig(seg_epochs=self.epochs, seg_batch_size=self.batch_size, seg_lr=self.lr,
                           seg_momentum=self.momentum, seg_weight_decay=self.weight_decay,
                           seg_width=self.width, cutpaste=self.cutpaste, cutpaste_k=self.cutpaste_k,
                           cutpaste_prob=self.cutpaste_prob, min_patch_area=self.min_patch_area,
                           standard_ops=self.standard_ops)

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_images(X)
        y = check_masks(y, len(X))
        if len(X) != len(y):
            raise ValueError(f"{len(X)} images but {len(y)} masks")
        if X_val is not None:
            X_val = check_images(X_val)
            y_val = check_masks(y_val, len(X_val))
        self.model_, self.record_ = train_phase1(
            X, y, self.train_config(), val_images=X_val, val_masks=y_val, seed=self.random_state,
            ckpt_dir=self.checkpoint_dir, deterministic=self.deterministic)
        self.image_size_ = tuple(X.shape[1:3])
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return seg_forward(self.model_, check_images(X)).probabilities

    def predict(self, X) -> np.ndarray:
        return predict_heatmap(self.predict_proba(X))

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return seg_forward(self.model_, check_images(X)).features

    def score(self, X, y) -> float:
        """Corpus-level mIoU."""
        y = check_masks(y)
        return dataset_miou(list(self.predict(X)), list(y)).miou


class PurityRegressor(BaseEstimator, RegressorMixin):
    """Phases 2 and 3 on heatmap stacks ``(S, n, H, W)``.

    ``y`` packs per-sample targets as ``[area_1 .. area_n, mass, level]``
    (see :func:`pack_targets`). ``predict`` returns mass purities.
    """

    def __init__(self, area_epochs=20, area_lr=1e-3, mass_epochs=30, mass_lr=3e-3, batch_size=8,
                 alpha=0.5, gamma=2.0, correction_lr_scale=0.1, thresholds=DEFAULT_THRESHOLDS,
                 random_state=0, deterministic=True, checkpoint_dir=None):
        self.area_epochs = area_epochs
        self.area_lr = area_lr
        self.mass_epochs = mass_epochs
        self.mass_lr = mass_lr
        self.batch_size = batch_size
        self.alpha = alpha
        self.gamma = gamma
        self.correction_lr_scale = correction_lr_scale
        self.thresholds = thresholds
        self.random_state = random_state
        self.deterministic = deterministic
        self.checkpoint_dir = checkpoint_dir

    def train_config(self) -> TrainConfig:
        return TrainConfig(area_epochs=self.area_epochs, area_lr=self.area_lr, mass_epochs=self.mass_epochs,
                           mass_lr=self.mass_lr, purity_batch_size=self.batch_size, alpha=self.alpha,
                           gamma=self.gamma, correction_lr_scale=self.correction_lr_scale)

    def _data(self, X, y) -> StackData:
        X = _check_stacks(X)
        area, mass, levels = _unpack_targets(y, X.shape[1])
        return StackData(X, area, mass, levels)

    def fit(self, X, y, X_val=None, y_val=None, seg=None):
        """``seg`` (optional) is the frozen segmenter that produced ``X``; it is audited, not trained."""
        train = self._data(X, y)
        val = self._data(X_val, y_val) if X_val is not None else None
        cfg = self.train_config()
        self.model_, self.record_area_ = train_phase2(
            seg, train, cfg, val=val, seed=self.random_state, ckpt_dir=self.checkpoint_dir,
            deterministic=self.deterministic, thresholds=tuple(self.thresholds))
        self.model_, self.record_mass_ = train_phase3(
            seg, self.model_, train, cfg, val=val, seed=self.random_state, ckpt_dir=self.checkpoint_dir,
            deterministic=self.deterministic)
        self.n_ = train.stacks.shape[1]
        return self

    def _outputs(self, X) -> dict:
        check_is_fitted(self, "model_")
        X = _check_stacks(X)
        if X.shape[1] != self.n_:
            raise ValueError(f"model expects n={self.n_} heatmaps per sample, got {X.shape[1]}")
        dummy = StackData(X, np.zeros(X.shape[:2]), np.zeros(len(X)), np.ones(len(X), dtype=np.int64))
        return evaluate_purity(self.model_, dummy)

    def predict(self, X) -> np.ndarray:
        return self._outputs(X)["mass_pred"].astype(np.float64)

    def predict_area(self, X) -> np.ndarray:
        return self._outputs(X)["area_pred"].astype(np.float64)

    def predict_level(self, X) -> np.ndarray:
        return self._outputs(X)["level_pred"]


class RatingNetwork(BaseEstimator):
    """All three phases end to end on raw samples ``(S, n, H, W, 3)``.

    ``fit(X, y, masks)``: ``y`` packs ``[area_1 .. area_n, mass, level]`` per
    sample and ``masks`` ``(S, n, H, W)`` supervises the segmenter.
    """

    def __init__(self, segmenter=None, regressor=None, teacher_forcing=False):
        self.segmenter = segmenter
        self.regressor = regressor
        self.teacher_forcing = teacher_forcing

    def fit(self, X, y, masks, X_val=None, y_val=None, masks_val=None):
        from sklearn.base import clone

        X = _check_samples(X)
        masks = np.asarray(masks)
        S, n = X.shape[:2]
        seg = clone(self.segmenter) if self.segmenter is not None else SegmentationEstimator()
        reg = clone(self.regressor) if self.regressor is not None else PurityRegressor()
        flat_val = None
        if X_val is not None:
            X_val = _check_samples(X_val)
            flat_val = (X_val.reshape(-1, *X_val.shape[2:]), np.asarray(masks_val).reshape(-1, *X_val.shape[2:4]))
        seg.fit(X.reshape(-1, *X.shape[2:]), masks.reshape(-1, *X.shape[2:4]),
                *(flat_val if flat_val else (None, None)))
        self.segmenter_ = seg
        stacks = self._stacks(X, masks, self.teacher_forcing)
        stacks_val = self._stacks(X_val, masks_val, False) if X_val is not None else None
        reg.fit(stacks, y, stacks_val, y_val, seg=seg.model_)
        self.regressor_ = reg
        self.ladder_ = LevelLadder(tuple(reg.thresholds))
        self.n_ = n
        return self

    def _stacks(self, X, masks=None, teacher_forcing=False) -> np.ndarray:
        if teacher_forcing:
            return np.asarray(masks).astype(np.uint8)
        dummy = np.zeros(X.shape[:2])
        data = build_stack_data(self.segmenter_.model_, X, np.zeros(X.shape[:4], dtype=np.uint8),
                                dummy, dummy[:, 0], dummy[:, 0].astype(np.int64))
        return data.stacks

    def transform(self, X) -> np.ndarray:
        """Heatmap stacks ``(S, n, H, W)``."""
        check_is_fitted(self, "segmenter_")
        return self._stacks(_check_samples(X))

    def predict(self, X) -> np.ndarray:
        """Rating levels from the rank branch."""
        return self.regressor_.predict_level(self.transform(X))

    def predict_purity(self, X) -> np.ndarray:
        return self.regressor_.predict(self.transform(X))

    def score(self, X, y) -> float:
        """Level exact-match rate."""
        y = np.asarray(y, dtype=np.float64)
        return float(np.mean(self.predict(X) == y[:, -1].astype(np.int64)))

    def to_bundle(self, config_digest: str = "") -> RatingBundle:
        check_is_fitted(self, "regressor_")
        return RatingBundle(self.segmenter_.model_, self.regressor_.model_, self.ladder_, config_digest)

    def rate(self, images, sample_id: str = ""):
        return self.to_bundle().rate(images, sample_id=sample_id)
