"""
Детерминированные синтетические наборы для проверок на игрушечном
масштабе: "textures" (гладкие случайные поля для предобучения) и
"blobs" (эллипсоиды с разметкой для сегментации).
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from BrainMAE.exceptions import ConfigError
from Engine.tensor_core import as_triple
from Volumes.containers import MODALITIES, Volume, write_volume
from Volumes.curation import ManifestRecord, build_manifest, write_manifest


logger = logging.getLogger(__name__)


KINDS = ('textures', 'blobs')


def texture_field(shape: Sequence[int], rng: np.random.Generator) -> np.ndarray:
    """
    Смесь двух сглаженных гауссовских шумов разного масштаба и плавного
    градиента яркости; нормирована к нулевому среднему и единичной дисперсии.
    """

    shape = as_triple(shape)
    coarse = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=rng.uniform(2.5, 4.0), mode='wrap')
    fine = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=rng.uniform(1.0, 1.5), mode='wrap')
    coarse /= coarse.std() + 1e-12
    fine /= fine.std() + 1e-12
    grid = np.stack(np.meshgrid(*[np.linspace(-1.0, 1.0, n) for n in shape], indexing='ij'))
    ramp = np.tensordot(rng.normal(0.0, 0.5, size=3), grid, axes=1)
    field = coarse + rng.uniform(0.3, 0.7) * fine + ramp
    return ((field - field.mean()) / (field.std() + 1e-12)).astype(np.float32)


def ellipsoid_labels(shape: Sequence[int], rng: np.random.Generator, count: int = 2,
                     classes: int = 1) -> np.ndarray:
    shape = as_triple(shape)
    labels = np.zeros(shape, dtype=np.int16)
    grid = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing='ij')
    for index in range(count):
        radii = rng.uniform(0.12, 0.25, size=3) * np.array(shape)
        center = [rng.uniform(r, n - r) for r, n in zip(radii, shape)]
        inside = sum(((g - c) / r) ** 2 for g, c, r in zip(grid, center, radii)) <= 1.0
        labels[inside] = 1 + index % classes
    return labels


@dataclass(frozen=True)
class SynthCase:
    image: Volume
    labels: Optional[np.ndarray]


def make_case(kind: str, index: int, shape: Sequence[int], seed: int, classes: int = 1) -> SynthCase:
    """
    Один синтетический случай; зависит только от (seed, index).
    """

    if kind not in KINDS:
        raise ConfigError(f"Неизвестный тип синтетического набора: {kind}")
    rng = np.random.default_rng([seed, index])
    shape = as_triple(shape)
    modality = MODALITIES[int(rng.integers(len(MODALITIES)))]
    image = texture_field(shape, rng)
    labels = None
    if kind == 'blobs':
        labels = ellipsoid_labels(shape, rng, count=int(rng.integers(1, 3)), classes=classes)
        contrast = rng.uniform(1.5, 2.5)
        # внутри объекта -- сдвиг яркости и более мелкая текстура
        image = 0.5 * image + contrast * (labels > 0) + 0.2 * labels
    return SynthCase(Volume(image, (1.0, 1.0, 1.0), modality, f"{kind}_{index:04d}"), labels)


def generate_dataset(kind: str, count: int, shape: Sequence[int], seed: int, out_dir: Union[str, Path],
                     classes: int = 1) -> Tuple[Path, List[ManifestRecord]]:
    """
    Записывает набор в NVOL и строит manifest.tsv.

    Args:
        kind (str): textures / blobs.
        count (int): Число случаев.
        shape (Sequence[int]): Размер объёма.
        seed (int): Сид набора.
        out_dir (str | Path): Каталог вывода.
        classes (int): Число классов переднего плана (blobs).

    Returns:
        Tuple[Path, List[ManifestRecord]]: Путь манифеста и записи.
    """

    if count < 1:
        raise ConfigError(f"synth.count должен быть >= 1, получено {count}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    logger.info(f"Генерируем набор {kind}: {count} объёмов {as_triple(shape)} в {out_dir}")
    paths, labels = [], []
    for index in range(count):
        case = make_case(kind, index, shape, seed, classes)
        path = write_volume(case.image, out_dir / f"{kind}_{index:04d}.nvol")
        paths.append(path.name)
        label_path = None
        if case.labels is not None:
            label_volume = Volume(case.labels.astype(np.float32), case.image.spacing, 'label', case.image.source)
            label_path = write_volume(label_volume, out_dir / f"{kind}_{index:04d}_seg.nvol").name
        labels.append(label_path)
    records = build_manifest([out_dir / p for p in paths], [out_dir / l if l else None for l in labels])
    # пути в манифесте относительно его каталога
    records = [ManifestRecord(Path(r.path).name, r.dims, r.spacing, r.file_size, r.modality,
                              Path(r.label).name if r.label else None) for r in records]
    manifest = write_manifest(records, out_dir / 'manifest.tsv')
    logger.info(f"Набор {kind} записан: {manifest}")
    return manifest, records
