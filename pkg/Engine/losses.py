"""
Функции потерь: L2 реконструкции по замаскированным вокселям (MAE) и
Dice + кросс-энтропия для сегментации. Как и ядра, возвращают
(значение, кэш) и имеют отдельный обратный проход.
"""

from typing import NamedTuple, Tuple

import numpy as np

from BrainMAE.exceptions import LabelError, MaskError, ShapeMismatchError
from Engine.tensor_core import check_tensor5, ensure_finite


DICE_SMOOTH = 1e-5


# === Masked reconstruction loss ===

class MaskedL2Cache(NamedTuple):
    diff: np.ndarray
    selector: np.ndarray
    count: int


def _voxel_selector(voxel_mask: np.ndarray, shape5) -> np.ndarray:
    voxel_mask = np.asarray(voxel_mask, dtype=bool)
    if voxel_mask.ndim == 4:
        voxel_mask = voxel_mask[:, None]
    if voxel_mask.ndim != 5 or voxel_mask.shape[0] != shape5[0] or voxel_mask.shape[2:] != tuple(shape5[2:]) \
            or voxel_mask.shape[1] not in (1, shape5[1]):
        raise MaskError(f"masked_l2_loss: маска {voxel_mask.shape} не совпадает с {tuple(shape5)}")
    return np.broadcast_to(voxel_mask, shape5)


def masked_l2_loss(pred: np.ndarray, target: np.ndarray, voxel_mask: np.ndarray) -> Tuple[float, MaskedL2Cache]:
    """
    Среднее (pred - target)^2 по замаскированным вокселям (и каналам).

    Args:
        pred (np.ndarray): Реконструкция (B, C, D, H, W).
        target (np.ndarray): Исходный вход той же формы.
        voxel_mask (np.ndarray): Маска (B, D, H, W) или (B, C, D, H, W), True = замаскировано.

    Returns:
        Tuple[float, MaskedL2Cache]: Значение потерь и кэш для backward.
    """

    check_tensor5(pred, 'masked_l2_loss.pred')
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"masked_l2_loss: pred {pred.shape} != target {target.shape}")
    selector = _voxel_selector(voxel_mask, pred.shape)
    count = int(np.count_nonzero(selector))
    if count == 0:
        raise MaskError("masked_l2_loss: нет ни одного замаскированного вокселя")
    diff = np.where(selector, pred - target, 0)
    loss = float(np.sum(diff * diff, dtype=np.float64) / count)
    ensure_finite(np.asarray(loss), 'masked_l2_loss')
    return loss, MaskedL2Cache(diff, selector, count)


def masked_l2_loss_backward(cache: MaskedL2Cache, dloss: float = 1.0) -> np.ndarray:
    # на незамаскированных вокселях diff уже равен нулю
    return (cache.diff * (2.0 * dloss / cache.count)).astype(cache.diff.dtype, copy=False)


# === Segmentation loss ===

class DiceCECache(NamedTuple):
    probs: np.ndarray
    onehot: np.ndarray
    numer: np.ndarray
    denom: np.ndarray
    dice: float
    ce: float


def softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=axis, keepdims=True)


def one_hot(labels: np.ndarray, classes: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise LabelError(f"Метки вне диапазона [0, {classes}): min={labels.min()}, max={labels.max()}")
    onehot = np.zeros((labels.shape[0], classes) + labels.shape[1:], dtype=dtype)
    np.put_along_axis(onehot, labels[:, None].astype(np.intp), 1, axis=1)
    return onehot


def dice_ce_loss(logits: np.ndarray, labels: np.ndarray, smooth: float = DICE_SMOOTH) -> Tuple[float, DiceCECache]:
    """
    0.5 * (soft Dice loss + кросс-энтропия). Dice считается для каждого
    образца и каждого класса переднего плана: (2tp + s) / (sum p + sum g + s).

    Args:
        logits (np.ndarray): Логиты (B, C, D, H, W), C >= 2.
        labels (np.ndarray): Целочисленные метки (B, D, H, W).
        smooth (float): Сглаживающий член.

    Returns:
        Tuple[float, DiceCECache]: Значение потерь и кэш.
    """

    check_tensor5(logits, 'dice_ce_loss.logits')
    classes = logits.shape[1]
    if classes < 2:
        raise ShapeMismatchError(f"dice_ce_loss: нужно >= 2 классов, получено {classes}")
    if labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ShapeMismatchError(f"dice_ce_loss: метки {labels.shape} для логитов {logits.shape}")
    onehot = one_hot(labels, classes, logits.dtype)
    probs = softmax(logits)
    voxels = labels.size
    log_probs = np.log(np.clip(probs, np.finfo(probs.dtype).tiny, None))
    ce = float(-np.sum(onehot * log_probs, dtype=np.float64) / voxels)
    axes = (2, 3, 4)
    fg_p, fg_g = probs[:, 1:], onehot[:, 1:]
    numer = 2.0 * np.sum(fg_p * fg_g, axis=axes) + smooth
    denom = np.sum(fg_p, axis=axes) + np.sum(fg_g, axis=axes) + smooth
    dice = float(1.0 - np.mean(numer / denom))
    loss = 0.5 * (dice + ce)
    ensure_finite(np.asarray(loss), 'dice_ce_loss')
    return loss, DiceCECache(probs, onehot, numer, denom, dice, ce)


def dice_ce_loss_backward(cache: DiceCECache, dloss: float = 1.0) -> np.ndarray:
    probs, onehot = cache.probs, cache.onehot
    batch, classes = probs.shape[:2]
    voxels = probs.size // classes
    dprobs = np.zeros_like(probs)
    count = batch * (classes - 1)
    numer = cache.numer[:, :, None, None, None]
    denom = cache.denom[:, :, None, None, None]
    dprobs[:, 1:] = -(2.0 * onehot[:, 1:] * denom - numer) / (denom * denom) / count
    # CE вместе с softmax даёт (p - g) / M
    dlogits_ce = (probs - onehot) / voxels
    dlogits_dice = probs * (dprobs - np.sum(probs * dprobs, axis=1, keepdims=True))
    return (0.5 * dloss * (dlogits_dice + dlogits_ce)).astype(probs.dtype, copy=False)
