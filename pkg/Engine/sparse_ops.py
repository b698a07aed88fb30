"""
Разреженные варианты ядер для MAE-предобучения CNN: свёртка с повторным
наложением маски, нормализация по незамаскированным вокселям и
уплотнение карт признаков mask-токеном с дополнительной свёрткой 3x3x3.

Замаскированные воксели хранятся "в полосе" нулями плюс булева маска
(B, D, H, W) сбоку; отдельного разреженного формата нет.
"""

from enum import Enum
from typing import NamedTuple, Optional, Tuple

import numpy as np

from BrainMAE.exceptions import MaskError, ShapeMismatchError
from Engine.tensor_core import (
    ConvCache,
    ConvSpec,
    DEFAULT_EPS,
    NormCache,
    Parameter,
    conv3d,
    conv3d_backward,
    ensure_finite,
    instance_norm,
    instance_norm_backward,
)


class Sparsification(str, Enum):
    """
    Уровни абляции разреженности, каждый включает предыдущий.
    """

    BASE = 'base'
    SPARSE = 'sparse'
    MASK_TOKEN = 'mask_token'
    DENS_CONV = 'dens_conv'

    @property
    def sparse_encoder(self) -> bool:
        return self is not Sparsification.BASE

    @property
    def uses_mask_token(self) -> bool:
        return self in (Sparsification.MASK_TOKEN, Sparsification.DENS_CONV)

    @property
    def uses_densify_conv(self) -> bool:
        return self is Sparsification.DENS_CONV


def _batch_mask(mask: np.ndarray, shape5: Tuple[int, ...], name: str) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 3:
        mask = np.broadcast_to(mask, (shape5[0],) + mask.shape)
    if mask.shape != (shape5[0],) + tuple(shape5[2:]):
        raise MaskError(f"{name}: маска {mask.shape} не совпадает с картой {shape5}")
    return mask


# === Sparse convolution ===

class SparseConvCache(NamedTuple):
    conv: ConvCache
    mask: np.ndarray


def sparse_conv3d(x: np.ndarray, weights: np.ndarray, bias: Optional[np.ndarray], spec: ConvSpec,
                  stage_mask: np.ndarray) -> Tuple[np.ndarray, SparseConvCache]:
    """
    Плотная свёртка, после которой замаскированные выходные воксели
    принудительно обнуляются (маска не "размывается" рецептивным полем).

    Args:
        x (np.ndarray): Вход (B, C_in, D, H, W).
        weights (np.ndarray): Ядро.
        bias (Optional[np.ndarray]): Смещение.
        spec (ConvSpec): Геометрия.
        stage_mask (np.ndarray): Маска на разрешении ВЫХОДА свёртки, (B, D', H', W').

    Returns:
        Tuple[np.ndarray, SparseConvCache]: Выход и кэш.
    """

    y, cache = conv3d(x, weights, bias, spec)
    mask = _batch_mask(stage_mask, y.shape, 'sparse_conv3d')
    np.copyto(y, 0, where=mask[:, None])
    return y, SparseConvCache(cache, mask)


def sparse_conv3d_backward(dy: np.ndarray, cache: SparseConvCache) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    dy = np.array(dy, copy=True)
    np.copyto(dy, 0, where=cache.mask[:, None])
    return conv3d_backward(dy, cache.conv)


# === Masked instance normalization ===

class MaskedNormCache(NamedTuple):
    dense: Optional[NormCache]
    xhat: Optional[np.ndarray]
    inv_std: Optional[np.ndarray]
    gain: Optional[np.ndarray]
    keep: Optional[np.ndarray]
    count: Optional[np.ndarray]


def masked_instance_norm(x: np.ndarray, gain: np.ndarray, shift: np.ndarray, eps: float,
                         stage_mask: Optional[np.ndarray]) -> Tuple[np.ndarray, MaskedNormCache]:
    """
    Instance norm, статистики которой считаются только по незамаскированным
    вокселям. Замаскированные воксели на выходе равны нулю.

    Args:
        x (np.ndarray): Вход (B, C, D, H, W).
        gain (np.ndarray): Масштаб (C,).
        shift (np.ndarray): Сдвиг (C,).
        eps (float): Стабилизатор дисперсии.
        stage_mask (Optional[np.ndarray]): Маска (B, D, H, W); пустая маска
            сводится к обычной instance_norm.

    Returns:
        Tuple[np.ndarray, MaskedNormCache]: Выход и кэш.
    """

    if stage_mask is None or not np.any(stage_mask):
        y, dense = instance_norm(x, gain, shift, eps)
        return y, MaskedNormCache(dense, None, None, None, None, None)
    if eps <= 0:
        raise ValueError(f"masked_instance_norm: eps должен быть > 0, получено {eps}")
    mask = _batch_mask(stage_mask, x.shape, 'masked_instance_norm')
    keep = (~mask[:, None]).astype(x.dtype)
    count = keep.sum(axis=(2, 3, 4), keepdims=True)
    if np.any(count == 0):
        raise MaskError("masked_instance_norm: в одном из образцов замаскированы все воксели")
    mean = np.sum(x * keep, axis=(2, 3, 4), keepdims=True) / count
    centered = (x - mean) * keep
    var = np.sum(centered * centered, axis=(2, 3, 4), keepdims=True) / count
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    y = gain[None, :, None, None, None] * xhat + shift[None, :, None, None, None]
    np.copyto(y, 0, where=mask[:, None])
    ensure_finite(y, 'masked_instance_norm.output')
    return y, MaskedNormCache(None, xhat, inv_std, gain, keep, count)


def masked_instance_norm_backward(dy: np.ndarray, cache: MaskedNormCache
                                  ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    if cache.dense is not None:
        return instance_norm_backward(dy, cache.dense)
    xhat, inv_std, gain, keep, count = cache.xhat, cache.inv_std, cache.gain, cache.keep, cache.count
    dy = dy * keep
    dgain = np.sum(dy * xhat, axis=(0, 2, 3, 4))
    dshift = dy.sum(axis=(0, 2, 3, 4))
    dxhat = dy * gain[None, :, None, None, None]
    mean_dxhat = dxhat.sum(axis=(2, 3, 4), keepdims=True) / count
    mean_dxhat_xhat = np.sum(dxhat * xhat, axis=(2, 3, 4), keepdims=True) / count
    dx = inv_std * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat) * keep
    return dx, dgain, dshift


# === Densification ===

def new_mask_token(name: str, channels: int, rng: np.random.Generator,
                   dtype=np.float32) -> Parameter:
    """
    Обучаемый mask-токен ступени: по одному значению на канал.
    В weight decay не участвует.
    """

    values = (rng.standard_normal(channels) * 0.02).astype(dtype)
    return Parameter(name, values, 'mask_token', decay=False)


class DensifyCache(NamedTuple):
    mask: np.ndarray


def densify(feature: np.ndarray, stage_mask: np.ndarray, token: np.ndarray) -> Tuple[np.ndarray, DensifyCache]:
    """
    Заполняет замаскированные воксели вектором токена (по каналам).

    Args:
        feature (np.ndarray): Карта признаков (B, C, D, H, W).
        stage_mask (np.ndarray): Маска (B, D, H, W).
        token (np.ndarray): Токен (C,).

    Returns:
        Tuple[np.ndarray, DensifyCache]: Уплотнённая карта и кэш.
    """

    if token.shape != (feature.shape[1],):
        raise ShapeMismatchError(f"densify: токен {token.shape} для {feature.shape[1]} каналов")
    mask = _batch_mask(stage_mask, feature.shape, 'densify')
    y = np.where(mask[:, None], token[None, :, None, None, None], feature).astype(feature.dtype, copy=False)
    return y, DensifyCache(mask)


def densify_backward(dy: np.ndarray, cache: DensifyCache) -> Tuple[np.ndarray, np.ndarray]:
    selector = cache.mask[:, None]
    dtoken = np.sum(dy * selector, axis=(0, 2, 3, 4)).astype(dy.dtype, copy=False)
    dx = np.where(selector, 0, dy).astype(dy.dtype, copy=False)
    return dx, dtoken


def densification_spec(channels: int) -> ConvSpec:
    return ConvSpec(channels, channels, kernel=3, stride=1, has_bias=True)


def densification_conv(feature: np.ndarray, weights: np.ndarray,
                       bias: Optional[np.ndarray]) -> Tuple[np.ndarray, ConvCache]:
    """
    Свёртка 3x3x3 (stride 1, same, число каналов сохраняется) по уже
    уплотнённой карте. Выход плотный, маска повторно не накладывается.
    """

    channels = feature.shape[1]
    spec = densification_spec(channels)
    if weights.shape != spec.weight_shape:
        raise ShapeMismatchError(f"densification_conv: веса {weights.shape}, ожидались {spec.weight_shape}")
    return conv3d(feature, weights, bias, spec)


densification_conv_backward = conv3d_backward
