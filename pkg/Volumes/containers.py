"""
Контейнеры объёмов: собственный формат NVOL (чтение и запись без потерь)
и импорт несжатых NIfTI-1 через nibabel.
"""

import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import nibabel as nib
import numpy as np

from BrainMAE.exceptions import VolumeFormatError


logger = logging.getLogger(__name__)


MODALITIES = ('T1', 'T2', 'T1FLAIR', 'T2FLAIR')
OTHER_MODALITY = 'other'

NVOL_MAGIC = b'NVOL'
NVOL_VERSION = 1
NVOL_DTYPE_F32 = 0
_NVOL_HEADER = struct.Struct('<4sII3I3fBI')

NIFTI_DTYPES = (np.dtype(np.float32), np.dtype(np.int16), np.dtype(np.uint8))


def normalize_modality(tag: Optional[str]) -> str:
    """
    Приводит тег модальности к одному из MODALITIES ('T1 FLAIR',
    't1-flair', 't1_flair' -> 'T1FLAIR'); остальное возвращается как есть.
    """

    if not tag:
        return OTHER_MODALITY
    compact = ''.join(ch for ch in tag.upper() if ch.isalnum())
    return compact if compact in MODALITIES else tag.strip()


@dataclass
class Volume:
    """
    Многоканальный объём.

    Args:
        data (np.ndarray): Воксели (C, D, H, W), float32.
        spacing (Tuple[float, float, float]): Шаг сетки (sz, sy, sx), мм.
        modality (str): Тег модальности.
        source (str): Идентификатор источника (обычно путь).
    """

    data: np.ndarray
    spacing: Tuple[float, float, float]
    modality: str = OTHER_MODALITY
    source: str = ''

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 3:
            data = data[None]
        if data.ndim != 4 or min(data.shape) < 1:
            raise VolumeFormatError(f"{self.source or 'volume'}: ожидался массив (C, D, H, W), получено {data.shape}")
        self.data = np.ascontiguousarray(data, dtype=np.float32)
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise VolumeFormatError(f"{self.source or 'volume'}: некорректный шаг сетки {self.spacing}")
        if not np.all(np.isfinite(self.data)):
            raise VolumeFormatError(f"{self.source or 'volume'}: объём содержит NaN/Inf")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape[1:])

    @property
    def fov(self) -> Tuple[float, float, float]:
        return tuple(n * s for n, s in zip(self.dims, self.spacing))


@dataclass(frozen=True)
class VolumeHeader:
    dims: Tuple[int, int, int]
    spacing: Tuple[float, float, float]
    channels: int
    modality: str
    file_size: int


# === NVOL ===

def _encode_nvol(volume: Volume) -> bytes:
    tag = volume.modality.encode('utf-8')
    header = _NVOL_HEADER.pack(NVOL_MAGIC, NVOL_VERSION, volume.channels, *volume.dims, *volume.spacing,
                               NVOL_DTYPE_F32, len(tag))
    return header + tag + volume.data.astype('<f4', copy=False).tobytes()


def _read_nvol_header(handle, path: Path) -> Tuple[int, Tuple[int, int, int], Tuple[float, float, float], str]:
    raw = handle.read(_NVOL_HEADER.size)
    if len(raw) < _NVOL_HEADER.size:
        raise VolumeFormatError(f"{path}: файл короче заголовка NVOL")
    magic, version, channels, d, h, w, sz, sy, sx, dtype, tag_len = _NVOL_HEADER.unpack(raw)
    if magic != NVOL_MAGIC:
        raise VolumeFormatError(f"{path}: неверная магия {magic!r}")
    if version != NVOL_VERSION:
        raise VolumeFormatError(f"{path}: неподдерживаемая версия NVOL {version}")
    if dtype != NVOL_DTYPE_F32:
        raise VolumeFormatError(f"{path}: неподдерживаемый тип данных {dtype}")
    tag = handle.read(tag_len)
    if len(tag) < tag_len:
        raise VolumeFormatError(f"{path}: обрезан тег модальности")
    try:
        modality = tag.decode('utf-8')
    except UnicodeDecodeError as exc:
        raise VolumeFormatError(f"{path}: тег модальности не в UTF-8") from exc
    return channels, (d, h, w), (sz, sy, sx), modality


def _read_nvol(path: Path) -> Volume:
    with open(path, 'rb') as f:
        channels, dims, spacing, modality = _read_nvol_header(f, path)
        expected = channels * int(np.prod(dims)) * 4
        payload = f.read()
    if len(payload) != expected:
        raise VolumeFormatError(f"{path}: данные {len(payload)} байт, ожидалось {expected}")
    data = np.frombuffer(payload, dtype='<f4').reshape((channels,) + dims).astype(np.float32)
    return Volume(data, spacing, modality, str(path))


def write_volume(volume: Volume, path: Union[str, Path]) -> Path:
    """
    Записывает объём в NVOL.

    Args:
        volume (Volume): Объём.
        path (str | Path): Путь файла.

    Returns:
        Path: Путь записанного файла.
    """

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + '.tmp')
    with open(tmp, 'wb') as f:
        f.write(_encode_nvol(volume))
    os.replace(tmp, path)
    return path


# === NIfTI-1 ===

def _check_nifti_path(path: Path) -> None:
    if path.name.lower().endswith('.gz'):
        raise VolumeFormatError(f"{path}: сжатые NIfTI не поддерживаются")


def _nifti_modality(header, modality: Optional[str]) -> str:
    if modality:
        return normalize_modality(modality)
    descrip = header['descrip'].item()
    if isinstance(descrip, bytes):
        descrip = descrip.split(b'\0', 1)[0].decode('latin-1')
    tag = normalize_modality(descrip)
    return tag if tag in MODALITIES else OTHER_MODALITY


def _load_nifti(path: Path):
    _check_nifti_path(path)
    try:
        image = nib.Nifti1Image.from_filename(str(path))
    except Exception as exc:
        raise VolumeFormatError(f"{path}: не удалось прочитать NIfTI-1 ({exc})") from exc
    dtype = image.header.get_data_dtype()
    if dtype.newbyteorder('=') not in NIFTI_DTYPES:
        raise VolumeFormatError(f"{path}: неподдерживаемый тип данных NIfTI {dtype}")
    return image


def _nifti_geometry(image, path: Path) -> Tuple[int, Tuple[int, int, int], Tuple[float, float, float]]:
    shape = image.shape
    if len(shape) == 3:
        channels = 1
    elif len(shape) == 4:
        channels = shape[3]
    else:
        raise VolumeFormatError(f"{path}: поддерживаются 3D и 4D NIfTI, получено {shape}")
    zooms = image.header.get_zooms()[:3]
    # оси NIfTI (x, y, z) -> (z, y, x)
    return channels, tuple(int(n) for n in shape[2::-1]), tuple(float(z) for z in zooms[::-1])


def _read_nifti(path: Path, modality: Optional[str] = None) -> Volume:
    image = _load_nifti(path)
    channels, dims, spacing = _nifti_geometry(image, path)
    data = np.asarray(image.dataobj, dtype=np.float32)
    if data.ndim == 3:
        data = data[..., None]
    data = np.transpose(data, (3, 2, 1, 0))
    return Volume(data, spacing, _nifti_modality(image.header, modality), str(path))


# === Dispatch ===

def _sniff(path: Path) -> bytes:
    with open(path, 'rb') as f:
        return f.read(4)


def read_volume(path: Union[str, Path], modality: Optional[str] = None) -> Volume:
    """
    Читает объём из NVOL или NIfTI-1 (.nii).

    Args:
        path (str | Path): Путь к файлу.
        modality (Optional[str]): Переопределение модальности для NIfTI.

    Returns:
        Volume: Объём в порядке осей (C, D, H, W).
    """

    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Нет такого файла: {path}")
    if _sniff(path) == NVOL_MAGIC:
        return _read_nvol(path)
    if path.name.lower().endswith(('.nii', '.nii.gz')):
        return _read_nifti(path, modality)
    raise VolumeFormatError(f"{path}: неизвестный контейнер (неверная магия)")


def read_header(path: Union[str, Path], modality: Optional[str] = None) -> VolumeHeader:
    """
    Читает только геометрию и модальность, не загружая воксели.
    """

    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Нет такого файла: {path}")
    size = path.stat().st_size
    if _sniff(path) == NVOL_MAGIC:
        with open(path, 'rb') as f:
            channels, dims, spacing, tag = _read_nvol_header(f, path)
        return VolumeHeader(dims, tuple(float(s) for s in spacing), channels, tag, size)
    if path.name.lower().endswith(('.nii', '.nii.gz')):
        image = _load_nifti(path)
        channels, dims, spacing = _nifti_geometry(image, path)
        return VolumeHeader(dims, spacing, channels, _nifti_modality(image.header, modality), size)
    raise VolumeFormatError(f"{path}: неизвестный контейнер (неверная магия)")
