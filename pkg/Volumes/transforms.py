"""
Предобработка и аугментация: трилинейная передискретизация, z-score,
выборка патчей и пространственные аффинные аугментации.
"""

import math
from dataclasses import dataclass, replace
from typing import NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from BrainMAE.exceptions import VolumeFormatError
from Engine.tensor_core import Triple, as_triple
from Volumes.containers import Volume


# === Resampling and normalization ===

def resample_trilinear(volume: Volume, target_spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> Volume:
    """
    Трилинейная передискретизация на сетку с шагом target_spacing.
    Центры вокселей выравниваются: новый воксель i берётся из точки
    (i + 0.5) * t / s - 0.5 исходной сетки, края продолжаются.

    Args:
        volume (Volume): Исходный объём.
        target_spacing (Sequence[float]): Целевой шаг (sz, sy, sx), мм.

    Returns:
        Volume: Объём с шагом target_spacing.
    """

    target = tuple(float(t) for t in target_spacing)
    if len(target) != 3 or min(target) <= 0:
        raise VolumeFormatError(f"{volume.source}: некорректный целевой шаг {target_spacing}")
    if target == volume.spacing:
        return Volume(volume.data.copy(), target, volume.modality, volume.source)
    shape = tuple(int(round(n * s / t)) for n, s, t in zip(volume.dims, volume.spacing, target))
    if min(shape) < 1:
        raise VolumeFormatError(f"{volume.source}: после передискретизации получен пустой объём {shape}")
    scale = np.array([t / s for s, t in zip(volume.spacing, target)])
    offset = 0.5 * scale - 0.5
    channels = [
        ndimage.affine_transform(channel.astype(np.float64), scale, offset=offset, output_shape=shape,
                                 order=1, mode='nearest')
        for channel in volume.data
    ]
    return Volume(np.stack(channels).astype(np.float32), target, volume.modality, volume.source)


def zscore(volume: Volume) -> Volume:
    """
    (x - mean) / std по всем вокселям каждого канала.
    """

    data = volume.data.astype(np.float64)
    mean = data.mean(axis=(1, 2, 3), keepdims=True)
    std = data.std(axis=(1, 2, 3), keepdims=True)
    if np.any(std == 0):
        raise VolumeFormatError(f"{volume.source}: постоянный объём, z-score не определён")
    return Volume(((data - mean) / std).astype(np.float32), volume.spacing, volume.modality, volume.source)


def center_crop_or_pad(array: np.ndarray, size: Sequence[int]) -> np.ndarray:
    """
    Центральная обрезка / симметричное дополнение нулями последних трёх осей до size.
    """

    size = as_triple(size)
    lead = array.ndim - 3
    pads, slices = [(0, 0)] * lead, [slice(None)] * lead
    for n, p in zip(array.shape[lead:], size):
        if n < p:
            before = (p - n) // 2
            pads.append((before, p - n - before))
            slices.append(slice(None))
        else:
            start = (n - p) // 2
            pads.append((0, 0))
            slices.append(slice(start, start + p))
    return np.pad(array[tuple(slices)], pads)


# === Patch sampling ===

class PatchSample(NamedTuple):
    data: np.ndarray
    offset: Triple
    pad_before: Triple
    padded_shape: Triple


def pad_to_patch(shape: Sequence[int], patch_size: Triple) -> Tuple[Triple, Triple]:
    before = tuple(max(p - n, 0) // 2 for n, p in zip(shape, patch_size))
    padded = tuple(max(n, p) for n, p in zip(shape, patch_size))
    return before, padded


def extract_patch(data: np.ndarray, offset: Triple, patch_size: Triple, pad_before: Triple,
                  padded_shape: Triple) -> np.ndarray:
    lead = data.ndim - 3
    pads = [(0, 0)] * lead + [(b, p - n - b) for n, b, p in zip(data.shape[lead:], pad_before, padded_shape)]
    padded = np.pad(data, pads) if any(b for b in pad_before) or padded_shape != data.shape[lead:] else data
    window = tuple(slice(o, o + p) for o, p in zip(offset, patch_size))
    return np.ascontiguousarray(padded[(Ellipsis,) + window])


def sample_patch(data: np.ndarray, patch_size: Sequence[int], rng: np.random.Generator) -> PatchSample:
    """
    Равномерная случайная вырезка патча. Объёмы меньше патча сначала
    симметрично дополняются нулями.

    Args:
        data (np.ndarray): Воксели (C, D, H, W).
        patch_size (Sequence[int]): Размер патча.
        rng (np.random.Generator): Генератор.

    Returns:
        PatchSample: Патч (C, *patch), смещение в дополненном объёме и геометрия дополнения.
    """

    patch_size = as_triple(patch_size)
    pad_before, padded_shape = pad_to_patch(data.shape[-3:], patch_size)
    offset = tuple(int(rng.integers(0, n - p + 1)) for n, p in zip(padded_shape, patch_size))
    patch = extract_patch(data, offset, patch_size, pad_before, padded_shape)
    return PatchSample(patch, offset, pad_before, padded_shape)


# === Spatial augmentation ===

@dataclass(frozen=True)
class AugmentParams:
    """
    Параметры пространственной аугментации.

    Args:
        mirror (bool): Отражение по каждой оси с вероятностью mirror_prob.
        rotate (bool): Поворот на угол из [-max_rotation_deg, max_rotation_deg] по каждой оси.
        scale (bool): Изотропное масштабирование из scale_range.
    """

    mirror: bool = True
    rotate: bool = True
    scale: bool = True
    mirror_prob: float = 0.5
    max_rotation_deg: float = 15.0
    scale_range: Tuple[float, float] = (0.9, 1.1)

    @property
    def enabled(self) -> bool:
        return self.mirror or self.rotate or self.scale

    @classmethod
    def disabled(cls) -> 'AugmentParams':
        return cls(mirror=False, rotate=False, scale=False)

    def with_(self, **changes) -> 'AugmentParams':
        return replace(self, **changes)


def rotation_matrix(angles_deg: Sequence[float]) -> np.ndarray:
    """
    Поворот вокруг осей z, y, x (в порядке перемножения Rz @ Ry @ Rx).
    """

    az, ay, ax = (math.radians(a) for a in angles_deg)
    # оси массива (z, y, x); каждая матрица вращает плоскость двух других осей
    rz = np.array([[1, 0, 0], [0, math.cos(az), -math.sin(az)], [0, math.sin(az), math.cos(az)]])
    ry = np.array([[math.cos(ay), 0, math.sin(ay)], [0, 1, 0], [-math.sin(ay), 0, math.cos(ay)]])
    rx = np.array([[math.cos(ax), -math.sin(ax), 0], [math.sin(ax), math.cos(ax), 0], [0, 0, 1]])
    return rz @ ry @ rx


def draw_affine(params: AugmentParams, rng: np.random.Generator) -> np.ndarray:
    """
    Разыгрывает матрицу, переводящую выходные координаты во входные
    (относительно центра патча).
    """

    matrix = np.eye(3)
    if params.scale:
        matrix = matrix / rng.uniform(*params.scale_range)
    if params.rotate:
        angles = rng.uniform(-params.max_rotation_deg, params.max_rotation_deg, size=3)
        matrix = rotation_matrix(angles) @ matrix
    if params.mirror:
        flips = np.where(rng.random(3) < params.mirror_prob, -1.0, 1.0)
        matrix = np.diag(flips) @ matrix
    return matrix


def apply_affine(data: np.ndarray, matrix: np.ndarray, order: int = 1) -> np.ndarray:
    """
    Применяет аффинное преобразование вокруг центра к каждому каналу.

    Args:
        data (np.ndarray): Массив (..., D, H, W).
        matrix (np.ndarray): Матрица 3x3 выход -> вход.
        order (int): 1 для изображений, 0 (ближайший сосед) для меток.

    Returns:
        np.ndarray: Преобразованный массив того же dtype.
    """

    spatial = data.shape[-3:]
    center = (np.array(spatial, dtype=np.float64) - 1.0) / 2.0
    offset = center - matrix @ center
    flat = data.reshape((-1,) + spatial)
    out = np.stack([
        ndimage.affine_transform(channel, matrix, offset=offset, order=order, mode='constant', cval=0.0)
        for channel in flat
    ])
    return out.reshape(data.shape).astype(data.dtype, copy=False)


def augment_patch(patch: np.ndarray, params: AugmentParams, rng: np.random.Generator,
                  labels: Optional[np.ndarray] = None):
    """
    Отражение, поворот и масштаб как одно аффинное преобразование.

    Args:
        patch (np.ndarray): Патч (C, D, H, W).
        params (AugmentParams): Параметры.
        rng (np.random.Generator): Генератор.
        labels (Optional[np.ndarray]): Метки (D, H, W), интерполируются ближайшим соседом.

    Returns:
        np.ndarray или (np.ndarray, np.ndarray): Патч (и метки, если переданы).
    """

    if not params.enabled:
        out = patch.copy()
        return out if labels is None else (out, labels.copy())
    matrix = draw_affine(params, rng)
    out = apply_affine(patch, matrix, order=1)
    if labels is None:
        return out
    return out, apply_affine(labels, matrix, order=0)
