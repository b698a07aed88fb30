"""
Отбор объёмов для предобучения по манифесту: поле зрения, шаг сетки,
размер файла (пустые изображения) и белый список модальностей.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import pandas as pd

from BrainMAE.exceptions import DatasetError
from Volumes.containers import MODALITIES, normalize_modality, read_header


logger = logging.getLogger(__name__)


MANIFEST_COLUMNS = ['path', 'dims', 'spacing', 'bytes', 'modality']


@dataclass(frozen=True)
class ManifestRecord:
    """
    Строка манифеста.

    Args:
        path (str): Путь к объёму.
        dims (Tuple[int, int, int]): Размер (D, H, W) в вокселях.
        spacing (Tuple[float, float, float]): Шаг сетки (sz, sy, sx), мм.
        file_size (int): Размер файла в байтах.
        modality (str): Тег модальности.
        label (Optional[str]): Путь к разметке (для наборов сегментации).
    """

    path: str
    dims: Tuple[int, int, int]
    spacing: Tuple[float, float, float]
    file_size: int
    modality: str
    label: Optional[str] = None

    @property
    def fov(self) -> Tuple[float, ...]:
        return tuple(n * s for n, s in zip(self.dims, self.spacing))


@dataclass(frozen=True)
class CurationRules:
    min_fov_mm: float = 50.0
    max_spacing_mm: float = 6.5
    min_file_size: int = 200 * 1024
    modalities: Tuple[str, ...] = MODALITIES


@dataclass
class FilterResult:
    kept: List[ManifestRecord] = field(default_factory=list)
    discarded: List[Tuple[ManifestRecord, str]] = field(default_factory=list)


def discard_reason(record: ManifestRecord, rules: CurationRules = CurationRules()) -> Optional[str]:
    """
    Первое сработавшее правило (fov, spacing, file_size, modality) или
    None. Все сравнения строгие: граничные значения сохраняются.
    """

    if min(record.fov) < rules.min_fov_mm:
        return 'fov'
    if max(record.spacing) > rules.max_spacing_mm:
        return 'spacing'
    if record.file_size < rules.min_file_size:
        return 'file_size'
    if normalize_modality(record.modality) not in rules.modalities:
        return 'modality'
    return None


def filter_dataset(records: Iterable[ManifestRecord], rules: CurationRules = CurationRules()) -> FilterResult:
    """
    Разбивает записи на оставленные и отброшенные (с причиной).

    Args:
        records (Iterable[ManifestRecord]): Записи манифеста.
        rules (CurationRules): Пороги.

    Returns:
        FilterResult: Оставленные и отброшенные записи в исходном порядке.
    """

    result = FilterResult()
    for record in records:
        reason = discard_reason(record, rules)
        if reason is None:
            result.kept.append(record)
        else:
            result.discarded.append((record, reason))
    logger.info(f"Отбор: оставлено {len(result.kept)}, отброшено {len(result.discarded)}")
    return result


# === Manifest I/O ===

def _join(values: Sequence) -> str:
    return ','.join(f"{v:g}" if isinstance(v, float) else str(v) for v in values)


def records_to_frame(records: Iterable[ManifestRecord]) -> pd.DataFrame:
    rows = []
    for r in records:
        row = {'path': r.path, 'dims': _join(r.dims), 'spacing': _join(r.spacing),
               'bytes': r.file_size, 'modality': r.modality}
        if r.label is not None:
            row['label'] = r.label
        rows.append(row)
    columns = MANIFEST_COLUMNS + (['label'] if any('label' in row for row in rows) else [])
    return pd.DataFrame(rows, columns=columns)


def write_manifest(records: Iterable[ManifestRecord], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records_to_frame(records).to_csv(path, sep='\t', index=False)
    return path


def _split(value: str, cast, name: str, path: Path) -> tuple:
    parts = [p for p in str(value).replace('x', ',').split(',') if p.strip()]
    if len(parts) != 3:
        raise DatasetError(f"{path}: поле {name} должно содержать три числа, получено {value!r}")
    return tuple(cast(p) for p in parts)


def read_manifest(path: Union[str, Path]) -> List[ManifestRecord]:
    """
    Читает манифест (TSV с заголовком path, dims, spacing, bytes, modality
    и необязательной колонкой label). Относительные пути считаются от
    каталога манифеста.
    """

    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Манифест не найден: {path}")
    frame = pd.read_csv(path, sep='\t', dtype=str, keep_default_na=False)
    missing = [c for c in MANIFEST_COLUMNS if c not in frame.columns]
    if missing:
        raise DatasetError(f"{path}: в манифесте нет колонок {', '.join(missing)}")
    records = []
    for row in frame.itertuples(index=False):
        row = row._asdict()
        label = row.get('label') or None
        try:
            records.append(ManifestRecord(
                path=_resolve(row['path'], path),
                dims=_split(row['dims'], int, 'dims', path),
                spacing=_split(row['spacing'], float, 'spacing', path),
                file_size=int(row['bytes']),
                modality=row['modality'],
                label=_resolve(label, path) if label else None,
            ))
        except ValueError as exc:
            raise DatasetError(f"{path}: некорректная строка {row} ({exc})") from exc
    return records


def _resolve(value: str, manifest: Path) -> str:
    candidate = Path(value)
    return str(candidate if candidate.is_absolute() else manifest.parent / candidate)


def build_manifest(paths: Iterable[Union[str, Path]], labels: Optional[Sequence[Optional[str]]] = None
                   ) -> List[ManifestRecord]:
    """
    Строит записи манифеста по заголовкам файлов.
    """

    records = []
    paths = list(paths)
    labels = list(labels) if labels is not None else [None] * len(paths)
    for path, label in zip(paths, labels):
        header = read_header(path)
        records.append(ManifestRecord(str(path), header.dims, header.spacing, header.file_size,
                                      header.modality, str(label) if label else None))
    return records


def write_filter_report(result: FilterResult, out_dir: Union[str, Path]) -> Tuple[Path, Path]:
    out_dir = Path(out_dir)
    kept_path = write_manifest(result.kept, out_dir / 'kept.tsv')
    frame = records_to_frame([record for record, _ in result.discarded])
    frame['reason'] = [reason for _, reason in result.discarded]
    discarded_path = out_dir / 'discarded.tsv'
    frame.to_csv(discarded_path, sep='\t', index=False)
    return kept_path, discarded_path
