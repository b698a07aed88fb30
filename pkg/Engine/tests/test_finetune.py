import os
import tempfile
import unittest
from pathlib import Path

import numpy as np

from BrainMAE.exceptions import CheckpointError, ConfigError, DatasetError, ScheduleError
from Engine.checkpoint import checkpoint_from_network, load_checkpoint
from Engine.finetune import (
    DECODER_SET,
    FULL_SET,
    FINETUNE_PRESETS,
    LATEST_CHECKPOINT,
    FineTuner,
    FinetuneConfig,
    ScheduleRow,
    StemPolicy,
    build_schedule,
    evaluate_cases,
    prepare_network,
    run_finetune,
    select_subset,
)
from Engine.network import NETWORK_PRESETS, build_network
from Engine.tensor_core import lr_at
from Volumes.datasets import SegCase, SegSampler
from Volumes.synth import make_case
from Volumes.transforms import AugmentParams


SLOW = os.getenv('BRAINMAE_SLOW_TESTS') == '1'
TINY = NETWORK_PRESETS['tiny']


def blob_cases(count, shape=(8, 8, 8), seed=0, channels=1):
    cases = []
    for index in range(count):
        case = make_case('blobs', index, shape, seed)
        image = np.repeat(case.image.data, channels, axis=0)
        cases.append(SegCase(image, case.labels.astype(np.int64), case.image.source))
    return cases


def short_config(**changes):
    params = dict(total_steps=6, warmup_steps=2, batch_size=1, validate_every=3, checkpoint_every=3,
                  augment=AugmentParams.disabled())
    params.update(changes)
    return FinetuneConfig(**params)


class ScheduleTest(unittest.TestCase):
    """
    Тесты для расписания фаз дообучения.
    """

    def test_default_phases(self):
        """
        Проверяет границы фаз схемы по умолчанию: 12.5k разогрев декодера, 12.5k разогрев всей сети, остальное -- poly.
        """
        schedule = build_schedule('default', 250_000)
        self.assertEqual([(p.name, p.start, p.steps) for p in schedule.phases],
                         [('decoder_warmup', 0, 12_500), ('full_warmup', 12_500, 12_500),
                          ('main', 25_000, 225_000)])
        self.assertEqual(schedule.phases[0].trainable, DECODER_SET)
        self.assertEqual(schedule.phases[1].trainable, FULL_SET)
        self.assertIn('encoder', schedule.frozen(12_499))
        self.assertIn('stem', schedule.frozen(0))
        self.assertNotIn('encoder', schedule.frozen(12_500))

    def test_lr_trace_matches_laws(self):
        """
        Проверяет значения learning rate на границах фаз.
        """
        schedule = build_schedule('default', 250_000)
        self.assertEqual(schedule.lr(0), 0.0)
        self.assertAlmostEqual(schedule.lr(6_250), 5e-4)
        self.assertEqual(schedule.lr(12_500), 0.0)
        self.assertEqual(schedule.lr(25_000), 1e-3)
        self.assertAlmostEqual(schedule.lr(137_500), 1e-3 * 0.5 ** 0.9)
        with self.assertRaises(ScheduleError):
            schedule.lr(250_000)

    def test_scratch_is_single_phase(self):
        """
        Проверяет, что схема с нуля -- одна poly-фаза по всей сети с пиком 1e-2.
        """
        schedule = build_schedule('scratch', 1_000)
        self.assertEqual(len(schedule.phases), 1)
        self.assertEqual(schedule.phases[0].law.kind, 'poly')
        self.assertEqual(schedule.peak_lr, 1e-2)
        self.assertEqual(schedule.transfer, 'none')

    def test_encoder_frozen_row(self):
        """
        Проверяет схему с замороженным энкодером на всём дообучении.
        """
        schedule = build_schedule('encoder_frozen_1e-3', 100, warmup_steps=10)
        for phase in schedule.phases:
            self.assertEqual(phase.trainable, DECODER_SET)

    def test_stem_policy_unfrozen(self):
        """
        Проверяет, что stem можно обучать вместе с декодером на разогреве.
        """
        schedule = build_schedule('default', 100, 10, StemPolicy(freeze_during_decoder_warmup=False))
        self.assertIn('stem', schedule.phases[0].trainable)

    def test_invalid_schedules(self):
        """
        Проверяет ошибки: разогрев декодера без переноса, нехватка бюджета, неизвестная схема.
        """
        with self.assertRaises(ScheduleError):
            build_schedule(ScheduleRow('none', warmup1='decoder'), 100, 10)
        with self.assertRaises(ScheduleError):
            build_schedule('default', 20_000)
        with self.assertRaises(ScheduleError):
            build_schedule('encoder_2e-3', 1_000)

    def test_toy_preset(self):
        """
        Проверяет пресет toy.
        """
        schedule = FINETUNE_PRESETS['toy'].build_schedule()
        self.assertEqual(schedule.total_steps, 1_000)
        self.assertEqual(schedule.phases[-1].start, 250)


class SubsetTest(unittest.TestCase):
    """
    Тесты для выбора подмножества обучающих случаев.
    """

    def test_deterministic_sorted_subset(self):
        """
        Проверяет детерминированность, порядок и размер подмножества.
        """
        cases = list(range(40))
        first = select_subset(cases, 10, seed=3)
        self.assertEqual(first, select_subset(cases, 10, seed=3))
        self.assertEqual(first, sorted(first))
        self.assertEqual(len(set(first)), 10)
        self.assertEqual(select_subset(cases, 'all', seed=3), cases)
        with self.assertRaises(DatasetError):
            select_subset(cases, 41, seed=3)


class PrepareNetworkTest(unittest.TestCase):
    """
    Тесты для построения сети дообучения из чекпоинта.
    """

    def setUp(self):
        """
        Чекпоинт одноканальной предобученной сети.
        """
        self.source = build_network(TINY.replace(seed=7))
        self.checkpoint = checkpoint_from_network(self.source, {'kind': 'pretrain'})

    def test_multichannel_stem_replicated(self):
        """
        Проверяет размножение stem на два канала с делением на K.
        """
        schedule = build_schedule('default', 100, 10)
        network = prepare_network(self.checkpoint, TINY, schedule, 2, StemPolicy(), seed=0)
        weight = network.parameters['stem.conv.weight'].data
        self.assertEqual(weight.shape[1], 2)
        np.testing.assert_allclose(weight[:, :1], self.source.parameters['stem.conv.weight'].data / 2)
        np.testing.assert_array_equal(network.parameters['encoder.1.down.conv.weight'].data,
                                      self.source.parameters['encoder.1.down.conv.weight'].data)

    def test_dense_network_without_mask_tokens(self):
        """
        Проверяет, что сеть дообучения строится на уровне base: без mask-токенов и densification conv.
        """
        self.assertIn('mask_token', {p.component for p in self.source.parameters.values()})
        network = prepare_network(self.checkpoint, TINY, build_schedule('default', 100, 10), 1, StemPolicy(), 0)
        self.assertEqual(network.config.sparsification, 'base')
        components = {p.component for p in network.parameters.values()}
        self.assertFalse(components & {'mask_token', 'densify'})
        np.testing.assert_array_equal(network.parameters['encoder.1.down.conv.weight'].data,
                                      self.source.parameters['encoder.1.down.conv.weight'].data)

    def test_transfer_requires_checkpoint(self):
        """
        Проверяет, что схема с переносом без чекпоинта даёт ошибку, а scratch игнорирует чекпоинт.
        """
        with self.assertRaises(ConfigError):
            prepare_network(None, TINY, build_schedule('default', 100, 10), 1, StemPolicy(), seed=0)
        with self.assertLogs('Engine.finetune', level='WARNING'):
            network = prepare_network(self.checkpoint, TINY, build_schedule('scratch', 100), 1, StemPolicy(), 0)
        self.assertFalse(np.array_equal(network.parameters['stem.conv.weight'].data,
                                        self.source.parameters['stem.conv.weight'].data))


class FineTunerTest(unittest.TestCase):
    """
    Тесты для цикла дообучения.
    """

    def setUp(self):
        """
        Временный каталог, чекпоинт и синтетические случаи.
        """
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)
        self.checkpoint = checkpoint_from_network(build_network(TINY.replace(seed=7)))
        self.train = blob_cases(4)
        self.val = blob_cases(2, seed=1)

    def tearDown(self):
        self.tmp.cleanup()

    def test_encoder_frozen_during_decoder_warmup(self):
        """
        Проверяет, что на разогреве декодера stem и энкодер не меняются, а декодер меняется.
        """
        config = short_config()
        schedule = config.build_schedule()
        network = prepare_network(self.checkpoint, TINY, schedule, 1, config.stem_policy(), config.seed)
        tuner = FineTuner(network, schedule, SegSampler(self.train, TINY.patch_size, config.augment),
                          self.val, config, self.dir)
        before = network.state_dict()
        for step in range(2):
            tuner.train_step(step)
        for name, param in network.parameters.items():
            if param.component in ('stem', 'encoder'):
                np.testing.assert_array_equal(param.data, before[name], err_msg=name)
        self.assertFalse(np.array_equal(network.parameters['decoder.0.up.weight'].data,
                                        before['decoder.0.up.weight']))
        for step in range(2, 4):
            tuner.train_step(step)
        self.assertFalse(np.array_equal(network.parameters['encoder.1.down.conv.weight'].data,
                                        before['encoder.1.down.conv.weight']))

    def test_short_run(self):
        """
        Проверяет полный короткий прогон: фазы, след learning rate, журналы и финальный чекпоинт.
        """
        config = short_config()
        result = run_finetune(self.checkpoint, TINY, config, self.train, self.val, self.dir / 'run')
        schedule = config.build_schedule()
        self.assertEqual([r.phase for r in result.history],
                         ['decoder_warmup'] * 2 + ['full_warmup'] * 2 + ['main'] * 2)
        for index, record in enumerate(result.history):
            phase, local = schedule.phase_at(index)
            self.assertEqual(record.lr, lr_at(phase.law, local))
            self.assertTrue(np.isfinite(record.loss))
        self.assertEqual(list(result.validation['step']), [3, 6])
        self.assertIn('dice_1', result.validation.columns)
        self.assertTrue(result.val_log.exists())
        final = load_checkpoint(result.checkpoint)
        self.assertEqual((final.metadata['kind'], final.metadata['step']), ('finetune', 6))
        self.assertFalse([name for name in final.tensors if name.startswith(('mask_token.', 'densify.'))])

    def tuner(self, out_dir, config=None):
        config = config or short_config()
        schedule = config.build_schedule()
        network = prepare_network(self.checkpoint, TINY, schedule, 1, config.stem_policy(), config.seed)
        return FineTuner(network, schedule, SegSampler(self.train, TINY.patch_size, config.augment),
                         self.val, config, out_dir)

    def test_resume_continues_exactly(self):
        """
        Проверяет, что прогон, прерванный после чекпоинта на шаге 3 и возобновлённый, совпадает с непрерывным.
        """
        full = self.tuner(self.dir / 'full')
        full.run()

        partial = self.tuner(self.dir / 'resumed')
        train_step = partial.train_step

        def interrupted(step):
            if step == 3:
                raise KeyboardInterrupt
            return train_step(step)

        partial.train_step = interrupted
        with self.assertRaises(KeyboardInterrupt):
            partial.run()
        self.assertEqual(load_checkpoint(self.dir / 'resumed' / LATEST_CHECKPOINT).step, 3)

        resumed = self.tuner(self.dir / 'resumed')
        self.assertEqual(resumed.resume(), 3)
        self.assertEqual(len(resumed.history), 3)
        self.assertEqual(resumed.run(), full.history)
        for name, param in full.network.parameters.items():
            np.testing.assert_array_equal(param.data, resumed.network.parameters[name].data, err_msg=name)
        self.assertEqual([row['step'] for row in resumed.validation_rows], [3, 6])
        lines = (self.dir / 'resumed' / 'train_log.tsv').read_text(encoding='utf-8').splitlines()
        self.assertEqual(lines, (self.dir / 'full' / 'train_log.tsv').read_text(encoding='utf-8').splitlines())

    def test_resume_other_run_rejected(self):
        """
        Проверяет отказ возобновления с чекпоинта прогона с другим сидом.
        """
        self.tuner(self.dir / 'other').run()
        with self.assertRaises(CheckpointError):
            self.tuner(self.dir / 'other', short_config(seed=2)).resume()

    def test_run_finetune_resume(self):
        """
        Проверяет resume в run_finetune: повтор с того же каталога даёт ту же историю.
        """
        config = short_config()
        first = run_finetune(self.checkpoint, TINY, config, self.train, self.val, self.dir / 'run')
        again = run_finetune(self.checkpoint, TINY, config, self.train, self.val, self.dir / 'run', resume=True)
        self.assertEqual(again.history, first.history)
        self.assertEqual(list(again.validation['step']), [3, 6])

    def test_same_seed_same_history(self):
        """
        Проверяет побитово одинаковую историю потерь у двух прогонов.
        """
        config = short_config(schedule='scratch', warmup_steps=1)
        first = run_finetune(None, TINY, config, self.train, self.val, self.dir / 'a')
        second = run_finetune(None, TINY, config, self.train, self.val, self.dir / 'b')
        self.assertEqual([r.loss for r in first.history], [r.loss for r in second.history])

    def test_evaluate_cases_with_nsd(self):
        """
        Проверяет таблицу DSC/NSD по случаям.
        """
        network = build_network(TINY)
        frame = evaluate_cases(network, self.val, tolerance=1.0)
        self.assertEqual(list(frame.columns), ['case', 'label', 'dsc', 'nsd'])
        self.assertEqual(len(frame), 2)
        self.assertTrue(((frame['dsc'] >= 0) & (frame['dsc'] <= 1)).all())

    def test_mixed_channels_rejected(self):
        """
        Проверяет ошибку при разном числе каналов в наборе.
        """
        with self.assertRaises(DatasetError):
            run_finetune(self.checkpoint, TINY, short_config(), self.train, blob_cases(1, channels=2), self.dir)


class ToyTransferTest(unittest.TestCase):
    """
    Долгий тест переноса на игрушечном масштабе.
    """

    @unittest.skipUnless(SLOW, "долгий тест: BRAINMAE_SLOW_TESTS=1")
    def test_pretrained_not_worse_than_scratch(self):
        """
        Проверяет на трёх сидах, что средний Dice с предобучением не ниже, чем с нуля (с допуском 0.02).
        """
        from Engine.pretrain import PRETRAIN_PRESETS, run_pretraining

        toy = NETWORK_PRESETS['toy']
        volumes = [make_case('textures', i, (32, 32, 32), seed=0).image for i in range(200)]
        train, val = blob_cases(20, (32, 32, 32)), blob_cases(10, (32, 32, 32), seed=1)
        with tempfile.TemporaryDirectory() as tmp:
            pretrained = run_pretraining(build_network(toy), volumes, PRETRAIN_PRESETS['toy'], Path(tmp) / 'mae')
            checkpoint = load_checkpoint(pretrained.checkpoint)
            gains = []
            for seed in range(3):
                base = dict(FINETUNE_PRESETS['toy'].__dict__, seed=seed)
                transfer = run_finetune(checkpoint, toy, FinetuneConfig(**base), train, val,
                                        Path(tmp) / f"transfer_{seed}")
                scratch = run_finetune(None, toy, FinetuneConfig(**{**base, 'schedule': 'scratch'}), train, val,
                                       Path(tmp) / f"scratch_{seed}")
                gains.append(transfer.validation['mean_dice'].iloc[-1] - scratch.validation['mean_dice'].iloc[-1])
        self.assertGreaterEqual(float(np.mean(gains)), -0.02)


if __name__ == '__main__':
    unittest.main()
