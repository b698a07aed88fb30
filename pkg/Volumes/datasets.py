"""
Наборы данных поверх манифестов: загрузка и нормализация объёмов,
выборка батчей патчей для предобучения и сегментации.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from BrainMAE.exceptions import DatasetError
from Engine.tensor_core import Triple, as_triple
from Volumes.containers import Volume, read_volume
from Volumes.curation import ManifestRecord
from Volumes.transforms import (
    AugmentParams,
    apply_affine,
    augment_patch,
    center_crop_or_pad,
    draw_affine,
    extract_patch,
    resample_trilinear,
    sample_patch,
    zscore,
)


logger = logging.getLogger(__name__)


def prepare_volume(volume: Volume, target_spacing: Optional[Sequence[float]] = None) -> Volume:
    if target_spacing is not None:
        volume = resample_trilinear(volume, target_spacing)
    return zscore(volume)


def load_pretraining_volumes(records: Sequence[ManifestRecord],
                             target_spacing: Optional[Sequence[float]] = None) -> List[Volume]:
    """
    Загружает объёмы, передискретизирует, нормализует и раскладывает по
    одному каналу (модальности) на элемент.

    Args:
        records (Sequence[ManifestRecord]): Записи манифеста после отбора.
        target_spacing (Optional[Sequence[float]]): Целевой шаг, мм (None -- без передискретизации).

    Returns:
        List[Volume]: Одноканальные z-нормированные объёмы.
    """

    volumes = []
    for record in records:
        volume = prepare_volume(read_volume(record.path, record.modality), target_spacing)
        for channel in volume.data:
            volumes.append(Volume(channel[None], volume.spacing, volume.modality, volume.source))
    if not volumes:
        raise DatasetError("Набор для предобучения пуст")
    logger.info(f"Загружено {len(volumes)} одноканальных объёмов из {len(records)} файлов")
    return volumes


class PatchSampler:
    """
    Батчи патчей для предобучения: объём выбирается равномерно, затем
    равномерно смещение патча; после вырезки -- аугментация.
    """

    def __init__(self, volumes: Sequence[Volume], patch_size: Sequence[int],
                 augment: AugmentParams = AugmentParams()):
        if not volumes:
            raise DatasetError("PatchSampler: пустой список объёмов")
        self.volumes = list(volumes)
        self.patch_size = as_triple(patch_size)
        self.augment = augment

    def __len__(self) -> int:
        return len(self.volumes)

    def draw(self, batch: int, rng: np.random.Generator) -> np.ndarray:
        patches = []
        for _ in range(batch):
            volume = self.volumes[int(rng.integers(len(self.volumes)))]
            patch = sample_patch(volume.data, self.patch_size, rng).data
            patches.append(augment_patch(patch, self.augment, rng))
        return np.stack(patches).astype(np.float32, copy=False)


@dataclass
class SegCase:
    """
    Размеченный случай: изображение (K, D, H, W) и метки (D, H, W).
    """

    image: np.ndarray
    labels: np.ndarray
    case_id: str
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.labels.shape != self.image.shape[1:]:
            raise DatasetError(f"{self.case_id}: метки {self.labels.shape} != изображение {self.image.shape[1:]}")


def load_seg_cases(records: Sequence[ManifestRecord], target_spacing: Optional[Sequence[float]] = None
                   ) -> List[SegCase]:
    cases = []
    for record in records:
        if not record.label:
            raise DatasetError(f"{record.path}: в манифесте нет разметки (колонка label)")
        image = read_volume(record.path, record.modality)
        label_volume = read_volume(record.label)
        if target_spacing is not None:
            image = resample_trilinear(image, target_spacing)
            label_volume = _resample_labels(label_volume, image.dims)
        image = zscore(image)
        labels = np.rint(label_volume.data[0]).astype(np.int64)
        cases.append(SegCase(image.data, labels, record.path, image.spacing))
    if not cases:
        raise DatasetError("Набор сегментации пуст")
    return cases


def _resample_labels(labels: Volume, dims: Triple) -> Volume:
    zoom = [t / n for t, n in zip(dims, labels.dims)]
    data = ndimage.zoom(labels.data[0], zoom, order=0, mode='nearest', grid_mode=True)
    return Volume(center_crop_or_pad(data, dims), labels.spacing, labels.modality, labels.source)


class SegSampler:
    """
    Батчи патчей (изображение, метки) с общим смещением и общей аугментацией.
    """

    def __init__(self, cases: Sequence[SegCase], patch_size: Sequence[int],
                 augment: AugmentParams = AugmentParams()):
        if not cases:
            raise DatasetError("SegSampler: пустой список случаев")
        self.cases = list(cases)
        self.patch_size = as_triple(patch_size)
        self.augment = augment

    def draw(self, batch: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        images, labels = [], []
        for _ in range(batch):
            case = self.cases[int(rng.integers(len(self.cases)))]
            sample = sample_patch(case.image, self.patch_size, rng)
            patch_labels = extract_patch(case.labels, sample.offset, self.patch_size, sample.pad_before,
                                         sample.padded_shape)
            if self.augment.enabled:
                matrix = draw_affine(self.augment, rng)
                images.append(apply_affine(sample.data, matrix, order=1))
                labels.append(apply_affine(patch_labels, matrix, order=0))
            else:
                images.append(sample.data)
                labels.append(patch_labels)
        return np.stack(images).astype(np.float32, copy=False), np.stack(labels)


def crop_case(case: SegCase, patch_size: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    """
    Центральная обрезка / дополнение случая до размера патча.
    """

    return center_crop_or_pad(case.image, patch_size), center_crop_or_pad(case.labels, patch_size)

