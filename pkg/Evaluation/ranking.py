"""
Устойчивость ранжирования методов: бутстрап случаев внутри каждого
набора данных, ранги методов по набору и усреднение рангов по наборам.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Tuple, Union

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from BrainMAE.exceptions import DatasetError


logger = logging.getLogger(__name__)


SCORE_COLUMNS = ['method', 'dataset', 'case', 'metric', 'value']
AGGREGATIONS = ('mean_then_rank', 'rank_then_mean')


@dataclass
class ScoreTable:
    """
    Оценки method x dataset x case для одной метрики.

    Args:
        methods (List[str]): Методы (отсортированы).
        datasets (List[str]): Наборы данных (отсортированы).
        matrices (Dict[str, np.ndarray]): Для каждого набора матрица (методы, случаи).
        cases (Dict[str, List[str]]): Идентификаторы случаев по наборам.
    """

    methods: List[str]
    datasets: List[str]
    matrices: Dict[str, np.ndarray]
    cases: Dict[str, List[str]]

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, metric: str = None) -> 'ScoreTable':
        """
        Строит таблицу из длинного формата (method, dataset, case, [metric,] value).
        Каждый набор должен содержать одни и те же случаи для всех методов.
        """

        if metric is not None and 'metric' in frame.columns:
            frame = frame[frame['metric'] == metric]
        missing = [c for c in ('method', 'dataset', 'case', 'value') if c not in frame.columns]
        if missing:
            raise DatasetError(f"В таблице оценок нет колонок: {', '.join(missing)}")
        methods = sorted(frame['method'].astype(str).unique())
        datasets = sorted(frame['dataset'].astype(str).unique())
        if len(methods) < 2:
            raise DatasetError(f"Для ранжирования нужно >= 2 методов, получено {len(methods)}")
        matrices, cases = {}, {}
        for dataset in datasets:
            part = frame[frame['dataset'].astype(str) == dataset]
            if part.empty:
                raise DatasetError(f"Набор {dataset}: нет случаев")
            if part.duplicated(subset=['method', 'case']).any():
                raise DatasetError(f"Набор {dataset}: повторяющиеся пары (method, case)")
            table = part.pivot(index='method', columns='case', values='value')
            table.index = table.index.astype(str)
            table = table.reindex(methods)
            if table.isna().any().any():
                raise DatasetError(f"Набор {dataset}: таблица не прямоугольная (у методов разные случаи)")
            matrices[dataset] = table.to_numpy(dtype=np.float64)
            cases[dataset] = [str(c) for c in table.columns]
        return cls(methods, datasets, matrices, cases)


def rank_methods(values: np.ndarray, higher_is_better: bool = True) -> np.ndarray:
    """
    Ранги по первой оси (1 -- лучший), ничьи получают средний ранг.
    """

    values = np.asarray(values, dtype=np.float64)
    return rankdata(-values if higher_is_better else values, method='average', axis=0)


@dataclass
class RankResult:
    replicates: pd.DataFrame
    summary: pd.DataFrame

    def mean_ranks(self) -> Dict[str, float]:
        return dict(zip(self.summary['method'], self.summary['mean_rank']))


def bootstrap_ranks(scores: ScoreTable, n_boot: int, rng: np.random.Generator,
                    aggregation: str = 'mean_then_rank', higher_is_better: bool = True) -> RankResult:
    """
    Бутстрап рангов. В каждой реплике для каждого набора (в порядке
    сортировки) случаи выбираются с возвращением rng.integers(0, n, n);
    затем методы ранжируются по среднему (mean_then_rank) либо ранги по
    случаям усредняются (rank_then_mean); ранги наборов усредняются.

    Args:
        scores (ScoreTable): Оценки.
        n_boot (int): Число реплик.
        rng (np.random.Generator): Генератор.
        aggregation (str): mean_then_rank / rank_then_mean.
        higher_is_better (bool): Направление метрики.

    Returns:
        RankResult: Ранги по репликам (replicate, method, rank) и сводка
            (method, mean_rank, std_rank, p_rank1).
    """

    if aggregation not in AGGREGATIONS:
        raise ValueError(f"Неизвестная агрегация: {aggregation}")
    if n_boot < 1:
        raise ValueError(f"n_boot должен быть >= 1, получено {n_boot}")
    n_methods = len(scores.methods)
    per_case_ranks = {}
    if aggregation == 'rank_then_mean':
        per_case_ranks = {d: rank_methods(m, higher_is_better) for d, m in scores.matrices.items()}
    ranks = np.zeros((n_boot, n_methods))
    for replicate in range(n_boot):
        total = np.zeros(n_methods)
        for dataset in scores.datasets:
            matrix = scores.matrices[dataset]
            n = matrix.shape[1]
            if n == 0:
                raise DatasetError(f"Набор {dataset}: нет случаев")
            index = rng.integers(0, n, n)
            if aggregation == 'mean_then_rank':
                total += rank_methods(matrix[:, index].mean(axis=1), higher_is_better)
            else:
                total += per_case_ranks[dataset][:, index].mean(axis=1)
        ranks[replicate] = total / len(scores.datasets)
    replicates = pd.DataFrame({
        'replicate': np.repeat(np.arange(n_boot), n_methods),
        'method': np.tile(scores.methods, n_boot),
        'rank': ranks.reshape(-1),
    })
    summary = pd.DataFrame({
        'method': scores.methods,
        'mean_rank': ranks.mean(axis=0),
        'std_rank': ranks.std(axis=0),
        'p_rank1': (ranks == ranks.min(axis=1, keepdims=True)).mean(axis=0),
    }).sort_values(['mean_rank', 'method'], kind='mergesort').reset_index(drop=True)
    return RankResult(replicates, summary)


def read_scores(paths: Iterable[Union[str, Path]]) -> pd.DataFrame:
    frames = []
    for path in paths:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Таблица оценок не найдена: {path}")
        frames.append(pd.read_csv(path, sep='\t', dtype={'method': str, 'dataset': str, 'case': str}))
    if not frames:
        raise DatasetError("Не передано ни одной таблицы оценок")
    return pd.concat(frames, ignore_index=True)


def write_rank_summary(result: RankResult, out_dir: Union[str, Path]) -> Tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary_path = out_dir / 'rank_summary.tsv'
    replicates_path = out_dir / 'rank_replicates.tsv'
    result.summary.to_csv(summary_path, sep='\t', index=False, float_format='%.6f')
    result.replicates.to_csv(replicates_path, sep='\t', index=False)
    logger.info(f"Сводка рангов сохранена: {summary_path}")
    return summary_path, replicates_path
