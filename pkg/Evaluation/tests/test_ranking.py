import tempfile
import unittest
from pathlib import Path

import numpy as np
import pandas as pd

from BrainMAE.exceptions import DatasetError
from Evaluation.plots import plot_loss_curve, plot_rank_distribution, plot_validation_curve
from Evaluation.ranking import ScoreTable, bootstrap_ranks, rank_methods, read_scores, write_rank_summary


def score_frame(values, datasets=('d1', 'd2'), cases=6, metric='dsc'):
    """
    Длинная таблица оценок из словаря {метод: функция(rng, набор) -> массив случаев}.
    """
    rows = []
    for dataset in datasets:
        for method, scores in values.items():
            for index, value in enumerate(scores(dataset)[:cases]):
                rows.append({'method': method, 'dataset': dataset, 'case': f"{dataset}_{index}",
                             'metric': metric, 'value': float(value)})
    return pd.DataFrame(rows)


def random_scores(seed, methods=('a', 'b', 'c'), cases=6):
    rng = np.random.default_rng(seed)
    table = {(m, d): rng.random(cases) for m in methods for d in ('d1', 'd2')}
    return score_frame({m: (lambda d, m=m: table[(m, d)]) for m in methods}, cases=cases)


def reference_ranks(frame, n_boot, seed):
    """
    Независимая реализация: перебор реплик, наборы по алфавиту, ранги через argsort.
    """
    rng = np.random.default_rng(seed)
    methods = sorted(frame['method'].unique())
    datasets = sorted(frame['dataset'].unique())
    matrices = {}
    for dataset in datasets:
        part = frame[frame['dataset'] == dataset]
        cases = sorted(part['case'].unique())
        matrices[dataset] = np.array([[part[(part['method'] == m) & (part['case'] == c)]['value'].item()
                                       for c in cases] for m in methods])
    totals = np.zeros((n_boot, len(methods)))
    for replicate in range(n_boot):
        for dataset in datasets:
            matrix = matrices[dataset]
            index = rng.integers(0, matrix.shape[1], matrix.shape[1])
            means = matrix[:, index].mean(axis=1)
            ranks = np.empty(len(methods))
            ranks[np.argsort(-means)] = np.arange(1, len(methods) + 1)
            totals[replicate] += ranks
    return dict(zip(methods, (totals / len(datasets)).mean(axis=0)))


class RankMethodsTest(unittest.TestCase):
    """
    Тесты для ранжирования методов.
    """

    def test_ties_get_average_rank(self):
        """
        Проверяет средний ранг при ничьей и направление метрики.
        """
        np.testing.assert_array_equal(rank_methods(np.array([0.9, 0.5, 0.9])), [1.5, 3.0, 1.5])
        np.testing.assert_array_equal(rank_methods(np.array([3.0, 1.0, 2.0]), higher_is_better=False), [3, 1, 2])


class BootstrapTest(unittest.TestCase):
    """
    Тесты для бутстрапа рангов.
    """

    def test_matches_reference_implementation(self):
        """
        Проверяет средние ранги против независимой реализации с тем же генератором.
        """
        frame = random_scores(0)
        result = bootstrap_ranks(ScoreTable.from_frame(frame, 'dsc'), 200, np.random.default_rng(9))
        expected = reference_ranks(frame, 200, 9)
        for method, rank in result.mean_ranks().items():
            self.assertAlmostEqual(rank, expected[method], places=12)
        self.assertEqual(len(result.replicates), 600)

    def test_dominant_method(self):
        """
        Проверяет, что метод, лучший на каждом случае, всегда на первом месте.
        """
        frame = score_frame({'best': lambda d: np.full(6, 0.9), 'mid': lambda d: np.linspace(0.3, 0.8, 6),
                             'low': lambda d: np.full(6, 0.1)})
        result = bootstrap_ranks(ScoreTable.from_frame(frame), 100, np.random.default_rng(0))
        summary = result.summary.set_index('method')
        self.assertEqual(summary.loc['best', 'p_rank1'], 1.0)
        self.assertEqual(summary.loc['best', 'mean_rank'], 1.0)
        self.assertEqual(summary.loc['low', 'mean_rank'], 3.0)
        self.assertEqual(result.summary['method'].iloc[0], 'best')

    def test_rank_then_mean_monotone_invariant(self):
        """
        Проверяет, что rank_then_mean не меняется при монотонном преобразовании оценок.
        """
        frame = random_scores(1)
        transformed = frame.assign(value=np.exp(3 * frame['value']))
        first = bootstrap_ranks(ScoreTable.from_frame(frame), 50, np.random.default_rng(2), 'rank_then_mean')
        second = bootstrap_ranks(ScoreTable.from_frame(transformed), 50, np.random.default_rng(2), 'rank_then_mean')
        pd.testing.assert_frame_equal(first.summary, second.summary)

    def test_lower_is_better(self):
        """
        Проверяет обратное направление метрики.
        """
        frame = score_frame({'a': lambda d: np.full(6, 1.0), 'b': lambda d: np.full(6, 2.0)})
        result = bootstrap_ranks(ScoreTable.from_frame(frame), 10, np.random.default_rng(0), higher_is_better=False)
        self.assertEqual(result.mean_ranks()['a'], 1.0)

    def test_invalid_tables(self):
        """
        Проверяет ошибки: один метод, разные случаи у методов, неизвестная агрегация.
        """
        with self.assertRaises(DatasetError):
            ScoreTable.from_frame(score_frame({'only': lambda d: np.ones(3)}))
        ragged = random_scores(2)
        ragged = ragged.drop(ragged.index[0])
        with self.assertRaises(DatasetError):
            ScoreTable.from_frame(ragged)
        with self.assertRaises(ValueError):
            bootstrap_ranks(ScoreTable.from_frame(random_scores(3)), 5, np.random.default_rng(0), 'median')


class RankOutputTest(unittest.TestCase):
    """
    Тесты для файлов сводки и графиков.
    """

    def test_summary_and_plots(self):
        """
        Проверяет запись сводки, чтение таблиц оценок и графики.
        """
        with tempfile.TemporaryDirectory() as tmp:
            tmp = Path(tmp)
            scores = tmp / 'scores.tsv'
            random_scores(4).to_csv(scores, sep='\t', index=False)
            frame = read_scores([scores])
            result = bootstrap_ranks(ScoreTable.from_frame(frame, 'dsc'), 20, np.random.default_rng(0))
            summary, replicates = write_rank_summary(result, tmp / 'out')
            self.assertEqual(pd.read_csv(summary, sep='\t').shape, (3, 4))
            self.assertTrue(plot_rank_distribution(result.replicates, tmp / 'ranks.png').exists())
            log = tmp / 'loss_log.tsv'
            log.write_text('step\tlr\tloss\n1\t0.01\t1.0\n2\t0.005\t0.5\n', encoding='utf-8')
            self.assertTrue(plot_loss_curve(log, tmp / 'loss.png').exists())
            val = tmp / 'val_log.tsv'
            val.write_text('step\tdice_1\tmean_dice\n10\t0.4\t0.4\n20\t0.6\t0.6\n', encoding='utf-8')
            self.assertTrue(plot_validation_curve(val, tmp / 'val.png').exists())
            with self.assertRaises(FileNotFoundError):
                read_scores([tmp / 'missing.tsv'])


if __name__ == '__main__':
    unittest.main()
