"""
Блочные маски, выровненные по боттлнеку сети: выборка на сетке
боттлнека и масштабирование на разрешение каждой ступени.
"""

import math
from dataclasses import dataclass
from typing import Sequence, Tuple, Union

import numpy as np

from BrainMAE.exceptions import MaskError
from Engine.tensor_core import Triple, as_triple


STATIC_RATIO_GRID = (0.3, 0.45, 0.6, 0.75, 0.9)


@dataclass(frozen=True)
class StaticRatio:
    ratio: float

    def __post_init__(self):
        if not 0.0 < self.ratio < 1.0:
            raise MaskError(f"Доля маскирования должна быть в (0, 1), получено {self.ratio}")

    def sample(self, rng: np.random.Generator) -> float:
        return self.ratio

    def describe(self) -> str:
        return f"static({self.ratio:g})"


@dataclass(frozen=True)
class DynamicRatio:
    low: float
    high: float

    def __post_init__(self):
        if not 0.0 < self.low <= self.high < 1.0:
            raise MaskError(f"Нужно 0 < low <= high < 1, получено [{self.low}, {self.high}]")

    def sample(self, rng: np.random.Generator) -> float:
        return float(rng.uniform(self.low, self.high))

    def describe(self) -> str:
        return f"dynamic({self.low:g}, {self.high:g})"


RatioSpec = Union[StaticRatio, DynamicRatio]


def parse_ratio_spec(value) -> RatioSpec:
    """
    Разбирает описание доли маскирования из конфигурации.

    Args:
        value: Число (статическая доля), пара [low, high] или
            словарь {'low': .., 'high': ..} / {'ratio': ..}.

    Returns:
        RatioSpec: StaticRatio или DynamicRatio.
    """

    if isinstance(value, (StaticRatio, DynamicRatio)):
        return value
    if isinstance(value, (int, float)):
        return StaticRatio(float(value))
    if isinstance(value, dict):
        if 'ratio' in value:
            return StaticRatio(float(value['ratio']))
        return DynamicRatio(float(value['low']), float(value['high']))
    if isinstance(value, (list, tuple)) and len(value) == 2:
        return DynamicRatio(float(value[0]), float(value[1]))
    raise MaskError(f"Не удалось разобрать долю маскирования: {value!r}")


def masked_cell_count(ratio: float, total: int) -> int:
    # округление половины вверх
    return int(math.floor(ratio * total + 0.5))


@dataclass(frozen=True, eq=False)
class MaskGrid:
    """
    Булева сетка на разрешении боттлнека (True = замаскировано).
    """

    cells: np.ndarray
    ratio_spec: RatioSpec
    sampled_ratio: float

    @property
    def grid_shape(self) -> Triple:
        return tuple(int(n) for n in self.cells.shape)

    @property
    def masked_count(self) -> int:
        return int(np.count_nonzero(self.cells))

    @property
    def realized_ratio(self) -> float:
        return self.masked_count / self.cells.size

    @property
    def is_empty(self) -> bool:
        return not self.cells.any()


def sample_mask(grid_shape: Sequence[int], ratio_spec: RatioSpec, rng: np.random.Generator) -> MaskGrid:
    """
    Случайная маска: ровно round(r * N) ячеек, выбранных без возвращения.
    Для динамической доли r ~ U[low, high] разыгрывается при каждом вызове.

    Args:
        grid_shape (Sequence[int]): Форма боттлнека (gz, gy, gx).
        ratio_spec (RatioSpec): Статическая или динамическая доля.
        rng (np.random.Generator): Генератор вызывающей стороны.

    Returns:
        MaskGrid: Сетка маски.
    """

    grid_shape = as_triple(grid_shape)
    if min(grid_shape) < 1:
        raise MaskError(f"Вырожденная сетка маски: {grid_shape}")
    total = int(np.prod(grid_shape))
    ratio = ratio_spec.sample(rng)
    count = masked_cell_count(ratio, total)
    flat = np.zeros(total, dtype=bool)
    flat[rng.permutation(total)[:count]] = True
    return MaskGrid(flat.reshape(grid_shape), ratio_spec, ratio)


def empty_mask(grid_shape: Sequence[int]) -> MaskGrid:
    grid_shape = as_triple(grid_shape)
    return MaskGrid(np.zeros(grid_shape, dtype=bool), StaticRatio(0.5), 0.0)


def _factors(grid_shape: Triple, target_shape: Triple) -> Triple:
    if any(t % g for t, g in zip(target_shape, grid_shape)):
        raise MaskError(f"Форма {target_shape} не кратна сетке маски {grid_shape}")
    return tuple(t // g for t, g in zip(target_shape, grid_shape))


def rescale_mask(mask: Union[MaskGrid, np.ndarray], target_shape: Sequence[int]) -> np.ndarray:
    """
    Блочное (nearest-neighbor) увеличение сетки до target_shape.

    Args:
        mask (MaskGrid | np.ndarray): Сетка маски.
        target_shape (Sequence[int]): Пространственная форма ступени или входа.

    Returns:
        np.ndarray: Булев массив формы target_shape, постоянный на блоках.
    """

    cells = mask.cells if isinstance(mask, MaskGrid) else np.asarray(mask, dtype=bool)
    fz, fy, fx = _factors(cells.shape, as_triple(target_shape))
    return cells.repeat(fz, axis=0).repeat(fy, axis=1).repeat(fx, axis=2)


def block_downsample(voxels: np.ndarray, grid_shape: Sequence[int]) -> np.ndarray:
    """
    Обратное к rescale_mask: ячейка замаскирована, если замаскирован весь её блок.
    """

    grid_shape = as_triple(grid_shape)
    fz, fy, fx = _factors(grid_shape, voxels.shape)
    gz, gy, gx = grid_shape
    return voxels.reshape(gz, fz, gy, fy, gx, fx).all(axis=(1, 3, 5))


def stack_stage_masks(masks: Sequence[MaskGrid], target_shape: Sequence[int]) -> np.ndarray:
    """
    Маски батча на одном разрешении: (B, D, H, W).
    """

    return np.stack([rescale_mask(m, target_shape) for m in masks], axis=0)


def batch_masks(masks: Union[MaskGrid, Sequence[MaskGrid]], batch: int) -> Tuple[MaskGrid, ...]:
    if isinstance(masks, MaskGrid):
        return (masks,) * batch
    masks = tuple(masks)
    if len(masks) != batch:
        raise MaskError(f"Число масок {len(masks)} не совпадает с размером батча {batch}")
    return masks
