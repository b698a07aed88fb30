"""
Метрики сегментации: Dice (DSC) и нормированное поверхностное
расстояние (NSD) с точным евклидовым преобразованием расстояний.
"""

import logging
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import ndimage

from BrainMAE.exceptions import ShapeMismatchError


logger = logging.getLogger(__name__)


DEFAULT_TOLERANCE_MM = 1.0

# 6-связность: соседи по граням
FACE_CONNECTIVITY = ndimage.generate_binary_structure(3, 1)


def _check_pair(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"Размеры масок не совпадают: {pred.shape} и {gt.shape}")


def dsc(pred: np.ndarray, gt: np.ndarray, label: Optional[int] = None) -> float:
    """
    Коэффициент Дайса 2|P ∩ G| / (|P| + |G|).

    Args:
        pred (np.ndarray): Предсказанные метки или бинарная маска.
        gt (np.ndarray): Эталон той же формы.
        label (Optional[int]): Класс; None -- маски уже бинарные.

    Returns:
        float: DSC; обе маски пусты -- 1, пуста ровно одна -- 0.
    """

    _check_pair(pred, gt)
    p = pred == label if label is not None else pred.astype(bool)
    g = gt == label if label is not None else gt.astype(bool)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / total


def boundary(mask: np.ndarray) -> np.ndarray:
    """
    Граничные воксели: воксель маски, у которого есть сосед фона по грани;
    за пределами объёма считается фон.
    """

    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return mask.copy()
    eroded = ndimage.binary_erosion(mask, structure=FACE_CONNECTIVITY, border_value=0)
    return mask & ~eroded


def surface_distances(source: np.ndarray, target: np.ndarray, spacing: Sequence[float]) -> np.ndarray:
    """
    Расстояния (мм) от каждого граничного вокселя source до ближайшего
    граничного вокселя target.
    """

    source_border = boundary(source)
    target_border = boundary(target)
    if not target_border.any():
        return np.full(int(source_border.sum()), np.inf)
    distance = ndimage.distance_transform_edt(~target_border, sampling=tuple(float(s) for s in spacing))
    return distance[source_border]


def nsd(pred: np.ndarray, gt: np.ndarray, label: Optional[int] = None, tolerance: float = DEFAULT_TOLERANCE_MM,
        spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> float:
    """
    Нормированное поверхностное расстояние: доля граничных вокселей обеих
    масок, лежащих не дальше tolerance от границы другой маски.

    Args:
        pred (np.ndarray): Предсказанные метки или бинарная маска.
        gt (np.ndarray): Эталон.
        label (Optional[int]): Класс; None -- маски уже бинарные.
        tolerance (float): Допуск, мм (> 0).
        spacing (Sequence[float]): Шаг сетки (sz, sy, sx), мм.

    Returns:
        float: NSD в [0, 1]; обе пусты -- 1, пуста одна -- 0.
    """

    _check_pair(pred, gt)
    if tolerance <= 0:
        raise ValueError(f"nsd: допуск должен быть > 0, получено {tolerance}")
    p = pred == label if label is not None else pred.astype(bool)
    g = gt == label if label is not None else gt.astype(bool)
    if not p.any() and not g.any():
        return 1.0
    if not p.any() or not g.any():
        return 0.0
    pred_to_gt = surface_distances(p, g, spacing)
    gt_to_pred = surface_distances(g, p, spacing)
    within = int(np.count_nonzero(pred_to_gt <= tolerance)) + int(np.count_nonzero(gt_to_pred <= tolerance))
    return within / (pred_to_gt.size + gt_to_pred.size)


def evaluate_case(pred: np.ndarray, gt: np.ndarray, labels: Iterable[int], case_id: str = '',
                  spacing: Sequence[float] = (1.0, 1.0, 1.0),
                  tolerance: float = DEFAULT_TOLERANCE_MM) -> pd.DataFrame:
    """
    DSC и NSD по всем классам переднего плана одного случая.

    Returns:
        pd.DataFrame: Колонки case, label, dsc, nsd.
    """

    rows = [
        {'case': case_id, 'label': int(label), 'dsc': dsc(pred, gt, label),
         'nsd': nsd(pred, gt, label, tolerance, spacing)}
        for label in labels
    ]
    return pd.DataFrame(rows, columns=['case', 'label', 'dsc', 'nsd'])


def scores_long_format(frame: pd.DataFrame, method: str, dataset: str) -> pd.DataFrame:
    """
    Переводит таблицу evaluate_case в формат method/dataset/case/metric/value
    (DSC и NSD усредняются по классам случая).
    """

    per_case = frame.groupby('case', sort=True)[['dsc', 'nsd']].mean().reset_index()
    long = per_case.melt(id_vars='case', value_vars=['dsc', 'nsd'], var_name='metric', value_name='value')
    long = long.dropna(subset=['value']).reset_index(drop=True)
    long.insert(0, 'dataset', dataset)
    long.insert(0, 'method', method)
    return long[['method', 'dataset', 'case', 'metric', 'value']]
