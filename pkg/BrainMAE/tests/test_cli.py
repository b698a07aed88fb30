import io
import tempfile
import unittest
from contextlib import redirect_stderr, redirect_stdout
from dataclasses import replace
from pathlib import Path

import pandas as pd

from BrainMAE.cli import main
from BrainMAE.config import RESOLVED_CONFIG
from Engine.checkpoint import save_checkpoint
from Engine.network import NETWORK_PRESETS, build_network
from Volumes.curation import ManifestRecord, read_manifest, write_manifest


TINY_NETWORK = [
    'network.patch_size=[8, 8, 8]',
    'network.stages=[{width: 2, blocks: 1, stride: [1, 1, 1]}, {width: 4, blocks: 1, stride: [2, 2, 2]}]',
]


def run(*argv):
    """
    Запускает CLI, возвращает (код, stdout, stderr).
    """
    out, err = io.StringIO(), io.StringIO()
    with redirect_stdout(out), redirect_stderr(err):
        code = main(list(argv))
    return code, out.getvalue(), err.getvalue()


def overrides(*items):
    args = []
    for item in items:
        args += ['--set', item]
    return args


class CommandLineTest(unittest.TestCase):
    """
    Тесты для подкоманд и кодов возврата.
    """

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_filter_reports_counts(self):
        """
        Проверяет filter на манифесте из трёх записей: одна отброшена по полю зрения.
        """
        base = ManifestRecord('a.nvol', (100, 100, 100), (1.0, 1.0, 1.0), 300_000, 'T1')
        manifest = write_manifest([base, replace(base, path='b.nvol', modality='T2'),
                                   replace(base, path='c.nvol', dims=(40, 100, 100))], self.dir / 'manifest.tsv')
        code, stdout, _ = run('filter', '--preset', 'toy', '--out', str(self.dir / 'out'),
                              *overrides(f'data.manifest={manifest}'))
        self.assertEqual(code, 0)
        self.assertIn('kept=2 discarded=1', stdout)
        self.assertIn('fov: 1', stdout)
        self.assertEqual(len(read_manifest(self.dir / 'out' / 'kept.tsv')), 2)
        self.assertTrue((self.dir / 'out' / RESOLVED_CONFIG).exists())

    def test_exit_codes(self):
        """
        Проверяет код 2 для ошибок проекта и 1 для прочих ошибок.
        """
        code, _, stderr = run('filter', '--preset', 'toy', '--out', str(self.dir / 'a'))
        self.assertEqual(code, 2)
        self.assertIn('ConfigError', stderr)
        code, _, stderr = run('filter', '--preset', 'toy', '--out', str(self.dir / 'b'),
                              *overrides(f"data.manifest={self.dir / 'missing.tsv'}"))
        self.assertEqual(code, 1)
        self.assertIn('FileNotFoundError', stderr)
        code, _, _ = run('filter', '--preset', 'toy', '--out', str(self.dir / 'c'), *overrides('filter.speed=1'))
        self.assertEqual(code, 2)

    def test_out_dir_must_be_fresh(self):
        """
        Проверяет, что непустой каталог результатов не перезаписывается.
        """
        args = ['synth', '--preset', 'toy', '--out', str(self.dir / 'synth'),
                *overrides('synth.count=2', 'synth.shape=[6, 6, 6]')]
        code, stdout, _ = run(*args)
        self.assertEqual(code, 0)
        self.assertIn('2 volumes', stdout)
        self.assertEqual(run(*args)[0], 2)

    def test_gradcheck_subset(self):
        """
        Проверяет gradcheck на подмножестве ядер и таблицу результатов.
        """
        out = self.dir / 'grad'
        code, stdout, _ = run('gradcheck', '--out', str(out),
                              *overrides('gradcheck.kernels=[conv3d, masked_l2_loss]', 'gradcheck.seeds=2'))
        self.assertEqual(code, 0)
        table = pd.read_csv(out / 'gradcheck.tsv', sep='\t')
        self.assertEqual(list(table['kernel']), ['conv3d', 'masked_l2_loss'])
        self.assertTrue(table['passed'].all())
        self.assertIn('ok', stdout)

    def test_rank_writes_summary(self):
        """
        Проверяет rank на таблице оценок двух методов.
        """
        rows = [{'method': m, 'dataset': 'blobs', 'case': f'c{i}', 'metric': 'dsc', 'value': v + 0.1 * i}
                for i in range(4) for m, v in (('mae', 0.5), ('scratch', 0.3))]
        scores = self.dir / 'scores.tsv'
        pd.DataFrame(rows).to_csv(scores, sep='\t', index=False)
        out = self.dir / 'rank'
        code, stdout, _ = run('rank', '--preset', 'toy', '--out', str(out),
                              *overrides(f'data.scores=[{scores}]', 'rank.n_boot=20'))
        self.assertEqual(code, 0)
        summary = pd.read_csv(out / 'rank_summary.tsv', sep='\t')
        self.assertEqual(summary['method'].iloc[0], 'mae')
        self.assertEqual(summary['p_rank1'].iloc[0], 1.0)
        self.assertIn('mae', stdout)

    def test_synth_then_pretrain(self):
        """
        Проверяет короткое предобучение крошечной сети на синтетических текстурах.
        """
        code, _, _ = run('synth', '--preset', 'toy', '--out', str(self.dir / 'data'),
                         *overrides('synth.count=3', 'synth.shape=[8, 8, 8]'))
        self.assertEqual(code, 0)
        manifest = self.dir / 'data' / 'manifest.tsv'
        out = self.dir / 'pre'
        code, stdout, stderr = run('pretrain', '--preset', 'toy', '--seed', '1', '--out', str(out), *overrides(
            *TINY_NETWORK, f'data.manifest={manifest}', 'pretrain.steps=2', 'pretrain.batch_size=1',
            'pretrain.checkpoint_every=1', 'pretrain.augment.mirror=false', 'pretrain.augment.rotate=false',
            'pretrain.augment.scale=false'))
        self.assertEqual(code, 0, stderr)
        self.assertIn('checkpoint:', stdout)
        self.assertEqual(len(pd.read_csv(out / 'loss_log.tsv', sep='\t')), 2)

    def test_evaluate_without_nsd(self):
        """
        Проверяет, что evaluate с evaluate.with_nsd=false печатает только DSC.
        """
        code, _, _ = run('synth', '--preset', 'toy', '--out', str(self.dir / 'blobs'),
                         *overrides('synth.kind=blobs', 'synth.count=2', 'synth.shape=[8, 8, 8]'))
        self.assertEqual(code, 0)
        manifest = self.dir / 'blobs' / 'manifest.tsv'
        checkpoint = save_checkpoint(build_network(NETWORK_PRESETS['tiny']), self.dir / 'net.s3dc',
                                     {'kind': 'finetune'})
        args = ['evaluate', '--preset', 'toy', *overrides(f'data.checkpoint={checkpoint}', f'data.manifest={manifest}')]
        code, stdout, stderr = run(*args, '--out', str(self.dir / 'dsc'), *overrides('evaluate.with_nsd=false'))
        self.assertEqual(code, 0, stderr)
        self.assertIn('cases=2 dsc=', stdout)
        self.assertNotIn('nsd', stdout)
        scores = pd.read_csv(self.dir / 'dsc' / 'scores.tsv', sep='\t')
        self.assertEqual(set(scores['metric']), {'dsc'})
        code, stdout, _ = run(*args, '--out', str(self.dir / 'both'))
        self.assertEqual(code, 0)
        self.assertIn('nsd=', stdout)
        self.assertNotIn('nan', stdout)

    def test_finetune_resume(self):
        """
        Проверяет finetune --resume: повторный запуск в том же каталоге продолжает прогон с latest.s3dc.
        """
        code, _, _ = run('synth', '--preset', 'toy', '--out', str(self.dir / 'blobs'),
                         *overrides('synth.kind=blobs', 'synth.count=4', 'synth.shape=[8, 8, 8]'))
        self.assertEqual(code, 0)
        out = self.dir / 'ft'
        args = ['finetune', '--preset', 'toy', '--seed', '1', '--out', str(out), *overrides(
            *TINY_NETWORK, f"data.train_manifest={self.dir / 'blobs' / 'manifest.tsv'}", 'data.val_count=1',
            'finetune.schedule=scratch', 'finetune.total_steps=4', 'finetune.warmup_steps=1',
            'finetune.batch_size=1', 'finetune.validate_every=2', 'finetune.checkpoint_every=2',
            'finetune.augment.mirror=false', 'finetune.augment.rotate=false', 'finetune.augment.scale=false')]
        code, stdout, stderr = run(*args)
        self.assertEqual(code, 0, stderr)
        self.assertIn('mean_dice:', stdout)
        self.assertEqual(run(*args)[0], 2)
        code, _, stderr = run(*args, '--resume')
        self.assertEqual(code, 0, stderr)
        self.assertEqual(len(pd.read_csv(out / 'train_log.tsv', sep='\t')), 4)
        self.assertEqual(list(pd.read_csv(out / 'val_log.tsv', sep='\t')['step']), [2, 4])


if __name__ == '__main__':
    unittest.main()
