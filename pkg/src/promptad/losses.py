"""Training objectives: reconstruction MSE, restoration MSE, smoothed Dice
segmentation loss, and their weighted total."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from . import tensor as T
from .tensor import Tensor


@dataclass
class LossReport:
    l_rec: float
    l_res: float
    l_seg: float
    total: float
    lam: float

    def csv_row(self, step: int, lr: float) -> str:
        return (f"{step},{self.l_rec:.9g},{self.l_res:.9g},"
                f"{self.l_seg:.9g},{self.total:.9g},{lr:.9g}")


CSV_HEADER = "step,l_rec,l_res,l_seg,total,lr"


def _check_same_shape(a, b, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def rec_loss(f: Tensor | np.ndarray, fhat: Tensor) -> Tensor:
    """Mean squared error between original and reconstructed features."""
    f = T.as_tensor(f)
    _check_same_shape(f, fhat, "rec_loss")
    return T.mean_all(T.square(T.sub(f, fhat)))


def res_loss(f_normal: Tensor | np.ndarray, fhat_anom: Tensor) -> Tensor:
    """MSE pulling the restored anomalous features onto the clean ones."""
    f_normal = T.as_tensor(f_normal)
    _check_same_shape(f_normal, fhat_anom, "res_loss")
    return T.mean_all(T.square(T.sub(f_normal, fhat_anom)))


def dice_loss(mhat: Tensor | np.ndarray, mask: np.ndarray, eps: float = 1.0) -> Tensor:
    """Smoothed Dice loss for one (H, W) probability map against a binary mask.

    The smoothing term keeps the all-empty/all-empty case (normal images)
    well defined and equal to 0.
    """
    mhat = T.as_tensor(mhat)
    mask = np.asarray(mask, dtype=np.float32)
    _check_same_shape(mhat, mask, "dice_loss")
    overlap = T.sum_all(T.mul(mhat, Tensor(mask)))
    denom = T.add(T.sum_all(T.square(mhat)), float((mask * mask).sum()))
    ratio = T.div(T.add(T.mul(overlap, 2.0), eps), T.add(denom, eps))
    return T.sub(1.0, ratio)


def dice_loss_batch(mhat: Tensor, masks: np.ndarray, eps: float = 1.0) -> Tensor:
    """Mean per-sample Dice loss over a (B, H, W) batch."""
    masks = np.asarray(masks, dtype=np.float32)
    _check_same_shape(mhat, masks, "dice_loss_batch")
    m_t = Tensor(masks)
    overlap = T.sum_axes(T.mul(mhat, m_t), (1, 2))
    denom = T.add(T.sum_axes(T.square(mhat), (1, 2)),
                  Tensor((masks * masks).sum(axis=(1, 2))))
    ratio = T.div(T.add(T.mul(overlap, 2.0), eps), T.add(denom, eps))
    return T.mean_all(T.sub(1.0, ratio))


def total_loss(l_rec, l_res, l_seg, lam: float = 0.5) -> Tensor:
    """Weighted sum of the three objectives; the weight must be positive."""
    if lam <= 0.0:
        raise ConfigError(f"loss weight must be > 0, got {lam}")
    return T.add(T.add(T.as_tensor(l_rec), T.as_tensor(l_res)),
                 T.mul(T.as_tensor(l_seg), lam))
