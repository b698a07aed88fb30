import tempfile
import unittest
from pathlib import Path

import yaml

from BrainMAE.config import RESOLVED_CONFIG, build_run_config, parse_override, resolve_preset
from BrainMAE.exceptions import ConfigError
from Engine.masking import DynamicRatio
from Engine.network import NETWORK_PRESETS


class PresetTest(unittest.TestCase):
    """
    Тесты для пресетов масштаба.
    """

    def test_default_and_aliases(self):
        """
        Проверяет пресет по умолчанию и псевдонимы S3D-B / S3D-L.
        """
        self.assertEqual(resolve_preset(None), 'base')
        self.assertEqual(resolve_preset('S3D-B'), 'base')
        config = build_run_config('pretrain', preset='S3D-L')
        self.assertEqual(config.preset, 'large')
        self.assertEqual(config.pretrain.batch_size, 48)
        self.assertEqual(config.pretrain.steps, 1_000_000)
        self.assertEqual(config.network.patch_size, NETWORK_PRESETS['full'].patch_size)

    def test_unknown_preset(self):
        """
        Проверяет ошибку для неизвестного пресета.
        """
        with self.assertRaises(ConfigError):
            build_run_config('pretrain', preset='huge')


class OverrideTest(unittest.TestCase):
    """
    Тесты для переопределений --set и строгих ключей.
    """

    def test_parse_override(self):
        """
        Проверяет разбор скаляров и списков YAML.
        """
        self.assertEqual(parse_override('pretrain.base_lr=0.02'), ('pretrain.base_lr', 0.02))
        self.assertEqual(parse_override('pretrain.ratio=[0.6, 0.9]'), ('pretrain.ratio', [0.6, 0.9]))
        for text in ('pretrain.base_lr', '=1', 'pretrain..steps=3'):
            with self.assertRaises(ConfigError):
                parse_override(text)

    def test_overrides_applied(self):
        """
        Проверяет, что --set меняет вложенные значения, в том числе элемент списка ступеней.
        """
        config = build_run_config('pretrain', preset='toy', overrides=[
            'pretrain.ratio=[0.6, 0.9]', 'pretrain.augment.mirror=false', 'network.stages.0.width=6'])
        self.assertIsInstance(config.pretrain.ratio_spec(), DynamicRatio)
        self.assertFalse(config.pretrain.augment.mirror)
        self.assertEqual(config.network.stages[0].width, 6)

    def test_unknown_keys_rejected(self):
        """
        Проверяет ошибку для неизвестного ключа в --set и в файле.
        """
        with self.assertRaises(ConfigError):
            build_run_config('pretrain', preset='toy', overrides=['pretrain.lerning_rate=0.1'])
        with self.assertRaises(ConfigError):
            build_run_config('pretrain', preset='toy', overrides=['optimizer.lr=0.1'])
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'run.yaml'
            path.write_text('finetune:\n  schedual: default\n', encoding='utf-8')
            with self.assertRaises(ConfigError) as ctx:
                build_run_config('finetune', path, preset='toy')
            self.assertIn('finetune.schedual', str(ctx.exception))

    def test_invalid_values(self):
        """
        Проверяет проверку значений разделов.
        """
        for override in ('rank.aggregation=median', 'evaluate.tolerance_mm=0', 'synth.kind=noise',
                         'gradcheck.kernels=[conv4d]', 'data.val_count=0'):
            with self.assertRaises(ConfigError, msg=override):
                build_run_config('rank', preset='toy', overrides=[override])


class SeedAndRoundTripTest(unittest.TestCase):
    """
    Тесты для сида прогона и сохранённой конфигурации.
    """

    def test_seed_propagates(self):
        """
        Проверяет, что сид верхнего уровня попадает во все разделы, а --seed сильнее --set seed.
        """
        config = build_run_config('finetune', preset='toy', overrides=['seed=3'])
        self.assertEqual((config.seed, config.network.seed, config.pretrain.seed, config.finetune.seed), (3, 3, 3, 3))
        self.assertEqual(build_run_config('finetune', preset='toy', seed=5, overrides=['seed=3']).seed, 5)
        with self.assertRaises(ConfigError):
            build_run_config('finetune', preset='toy', overrides=['seed=-1'])

    def test_resolved_config_round_trip(self):
        """
        Проверяет, что resolved_config.yaml, прочитанный обратно, даёт ту же конфигурацию.
        """
        config = build_run_config('pretrain', preset='toy', seed=11,
                                  overrides=['pretrain.ratio=[0.6, 0.9]', 'data.target_spacing=[1.0, 1.0, 1.5]'])
        with tempfile.TemporaryDirectory() as tmp:
            path = config.write(tmp)
            self.assertEqual(path.name, RESOLVED_CONFIG)
            tree = yaml.safe_load(path.read_text(encoding='utf-8'))
            again = build_run_config('pretrain', path)
        self.assertEqual(tree['seed'], 11)
        self.assertEqual(again.to_dict(), config.to_dict())
        self.assertEqual(again.network.fingerprint(), config.network.fingerprint())


if __name__ == '__main__':
    unittest.main()
