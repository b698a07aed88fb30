import unittest

import numpy as np

from BrainMAE.exceptions import ConfigError, MaskError, ShapeMismatchError
from Engine.checkpoint import checkpoint_from_network
from Engine.gradcheck import gradcheck, network_operation
from Engine.masking import StaticRatio, empty_mask, sample_mask, stack_stage_masks
from Engine.network import (
    COMPONENTS,
    NETWORK_PRESETS,
    NetworkConfig,
    StageSpec,
    adapt_stem,
    apply_stem,
    build_network,
    set_frozen,
    transfer_weights,
)


TINY = NETWORK_PRESETS['tiny']


class NetworkConfigTest(unittest.TestCase):
    """
    Тесты для конфигурации сети.
    """

    def test_round_trip_and_fingerprint(self):
        """
        Проверяет, что from_dict(to_dict()) сохраняет отпечаток, а изменение ширины его меняет.
        """
        restored = NetworkConfig.from_dict(TINY.to_dict())
        self.assertEqual(restored.fingerprint(), TINY.fingerprint())
        self.assertNotEqual(TINY.replace(out_channels=3).fingerprint(), TINY.fingerprint())

    def test_unknown_key(self):
        """
        Проверяет ошибку на неизвестный ключ с точечным именем.
        """
        data = TINY.to_dict()
        data['widht'] = 3
        with self.assertRaisesRegex(ConfigError, 'network.widht'):
            NetworkConfig.from_dict(data)

    def test_indivisible_patch(self):
        """
        Проверяет ошибку, если патч не делится на шаги ступеней.
        """
        with self.assertRaises(ConfigError):
            NetworkConfig(patch_size=(6, 6, 6), stages=(StageSpec(2, 1, 1), StageSpec(4, 1, 4)))

    def test_toy_bottleneck(self):
        """
        Проверяет боттлнек 4^3 для пресета toy (патч 32^3, три понижения).
        """
        self.assertEqual(NETWORK_PRESETS['toy'].bottleneck_shape, (4, 4, 4))


class BuildTest(unittest.TestCase):
    """
    Тесты для построения сети и хранилища параметров.
    """

    def test_same_seed_same_parameters(self):
        """
        Проверяет побитово одинаковые параметры при одинаковом сиде.
        """
        first, second = build_network(TINY), build_network(TINY)
        for name, param in first.parameters.items():
            np.testing.assert_array_equal(param.data, second.parameters[name].data)

    def test_every_parameter_has_component(self):
        """
        Проверяет, что каждый параметр отнесён к одному из компонентов.
        """
        network = build_network(TINY)
        for param in network.parameters.values():
            self.assertIn(param.component, COMPONENTS)
        self.assertIn('stem.conv.weight', network.parameters)
        self.assertEqual(network.parameters['stem.conv.weight'].component, 'stem')

    def test_grid_shape_check(self):
        """
        Проверяет ошибку при несовпадении сетки маски с боттлнеком.
        """
        with self.assertRaises(ConfigError):
            build_network(TINY, grid_shape=(5, 5, 5))

    def test_dense_output_shape(self):
        """
        Проверяет форму логитов и ошибку для входа неверной формы.
        """
        network = build_network(TINY)
        logits = network.forward_dense(np.zeros((2, 1, 8, 8, 8), dtype=np.float32))
        self.assertEqual(logits.shape, (2, 2, 8, 8, 8))
        with self.assertRaises(ShapeMismatchError):
            network.forward_dense(np.zeros((1, 1, 6, 8, 8), dtype=np.float32))


class SparseForwardTest(unittest.TestCase):
    """
    Тесты для разреженного прохода MAE.
    """

    def test_zero_mask_collapse(self):
        """
        Проверяет на 10 входах, что с пустыми масками разреженный энкодер и реконструкция совпадают с плотными.
        """
        network = build_network(TINY)
        rng = np.random.default_rng(0)
        zeros_input = np.zeros((1, 8, 8, 8), dtype=bool)
        zeros_stages = [np.zeros((1,) + shape, dtype=bool) for shape in TINY.stage_shapes]
        for _ in range(10):
            x = rng.standard_normal((1, 1, 8, 8, 8)).astype(np.float32)
            dense = network._encode(x, None, None)
            sparse = network._encode(x, zeros_input, zeros_stages)
            for a, b in zip(dense, sparse):
                np.testing.assert_allclose(a, b, atol=1e-6)
            np.testing.assert_allclose(network.forward_sparse(x, empty_mask((4, 4, 4))),
                                       network.forward_sparse(x, None), atol=1e-6)

    def test_no_leakage(self):
        """
        Проверяет, что признаки энкодера на незамаскированных вокселях не зависят от содержимого замаскированных.
        """
        network = build_network(TINY)
        rng = np.random.default_rng(1)
        for ratio in (0.3, 0.6, 0.75, 0.9):
            mask = sample_mask((4, 4, 4), StaticRatio(ratio), rng)
            voxels = stack_stage_masks([mask], (8, 8, 8))[:, None]
            x1 = rng.standard_normal((1, 1, 8, 8, 8)).astype(np.float32)
            x2 = np.where(voxels, rng.standard_normal(x1.shape).astype(np.float32), x1)
            features1, features2 = network.encode(x1, mask), network.encode(x2, mask)
            for shape, f1, f2 in zip(TINY.stage_shapes, features1, features2):
                keep = ~stack_stage_masks([mask], shape)[:, None].repeat(f1.shape[1], axis=1)
                np.testing.assert_allclose(f1[keep], f2[keep], atol=1e-5)

    def test_reconstruction_shape_and_mask_check(self):
        """
        Проверяет форму реконструкции и ошибку для сетки маски не того размера.
        """
        network = build_network(TINY)
        x = np.zeros((2, 1, 8, 8, 8), dtype=np.float32)
        masks = [sample_mask((4, 4, 4), StaticRatio(0.75), np.random.default_rng(i)) for i in range(2)]
        self.assertEqual(network.forward_sparse(x, masks).shape, x.shape)
        with self.assertRaises(MaskError):
            network.forward_sparse(x, empty_mask((2, 2, 2)))

    def test_sparse_backward_zero_on_masked_input(self):
        """
        Проверяет, что градиент по входу равен нулю в замаскированных вокселях.
        """
        network = build_network(TINY)
        rng = np.random.default_rng(2)
        mask = sample_mask((4, 4, 4), StaticRatio(0.5), rng)
        x = rng.standard_normal((1, 1, 8, 8, 8)).astype(np.float32)
        recon = network.forward_sparse(x, mask)
        dx = network.backward_sparse(np.ones_like(recon))
        voxels = stack_stage_masks([mask], (8, 8, 8))[:, None]
        self.assertTrue((dx[voxels] == 0).all())
        self.assertIsNotNone(network.parameters['mask_token.1'].grad)

    def test_dense_network_gradcheck(self):
        """
        Проверяет градиенты плотного прохода сети в float64 на выборке элементов.
        """
        network = build_network(TINY).astype(np.float64)
        op, tensors = network_operation(network)
        tensors['x'] = np.random.default_rng(3).standard_normal((1, 1, 8, 8, 8))
        error = gradcheck(op, tensors, max_entries=6, wrt=['x', 'stem.conv.weight', 'seg_head.weight',
                                                              'decoder.0.up.weight'])
        self.assertLess(error, 1e-3)


class TransferTest(unittest.TestCase):
    """
    Тесты для переноса весов, адаптации stem и заморозки.
    """

    def setUp(self):
        """
        Предобученная одноканальная сеть и её чекпоинт.
        """
        self.source = build_network(TINY.replace(seed=5))
        self.checkpoint = checkpoint_from_network(self.source)

    def test_encoder_only_policy(self):
        """
        Проверяет, что encoder_only копирует stem и энкодер, а декодер и seg_head остаются свежими.
        """
        target = build_network(TINY.replace(seed=9))
        report = transfer_weights(self.checkpoint, target, 'encoder_only')
        for name, param in target.parameters.items():
            same = np.array_equal(param.data, self.source.parameters[name].data)
            if param.component in ('stem', 'encoder'):
                self.assertTrue(same, name)
                self.assertIn(name, report.copied)
            elif param.component == 'decoder' and name.endswith('weight'):
                self.assertFalse(same, name)

    def test_encoder_and_decoder_policy(self):
        """
        Проверяет, что encoder_and_decoder копирует и декодер, но не seg_head и recon_head.
        """
        target = build_network(TINY.replace(seed=9, out_channels=3))
        report = transfer_weights(self.checkpoint, target, 'encoder_and_decoder')
        self.assertIn('decoder.0.up.weight', report.copied)
        self.assertNotIn('seg_head.weight', report.copied)
        self.assertIn('recon_head.weight', report.skipped)

    def test_shape_mismatch_is_atomic(self):
        """
        Проверяет, что несовместимая ширина вызывает ошибку и не меняет целевую сеть.
        """
        wide = TINY.replace(stages=[{'width': 3, 'blocks': 1, 'stride': [1, 1, 1]},
                                    {'width': 4, 'blocks': 1, 'stride': [2, 2, 2]}])
        target = build_network(wide)
        before = target.state_dict()
        with self.assertRaises(ShapeMismatchError):
            transfer_weights(self.checkpoint, target, 'encoder_only')
        for name, value in before.items():
            np.testing.assert_array_equal(value, target.parameters[name].data)

    def test_replicate_scaled_identity(self):
        """
        Проверяет, что replicate_scaled с K одинаковыми каналами воспроизводит активации одноканального stem.
        """
        for k in (2, 4):
            target = build_network(TINY.replace(in_channels=k))
            transfer_weights(self.checkpoint, target, 'encoder_only')
            apply_stem(target, adapt_stem(self.checkpoint, k, 'replicate_scaled'))
            x = np.random.default_rng(k).standard_normal((1, 1, 8, 8, 8)).astype(np.float32)
            single = self.source.stem.forward(x)
            multi = target.stem.forward(np.repeat(x, k, axis=1))
            np.testing.assert_allclose(single, multi, atol=1e-5)

    def test_random_stem(self):
        """
        Проверяет, что random даёт свежий stem нужной формы с нулевым сдвигом.
        """
        tensors = adapt_stem(self.checkpoint, 3, 'random', np.random.default_rng(0))
        self.assertEqual(tensors['stem.conv.weight'].shape[1], 3)
        np.testing.assert_array_equal(tensors['stem.norm.shift'], 0)
        np.testing.assert_array_equal(tensors['stem.norm.gain'], 1)

    def test_frozen_components_unchanged(self):
        """
        Проверяет, что после 5 шагов SGD замороженные stem и энкодер не меняются.
        """
        from Engine.losses import dice_ce_loss, dice_ce_loss_backward
        from Engine.tensor_core import OptimizerState, sgd_step

        network = build_network(TINY)
        set_frozen(network, ('stem', 'encoder'))
        frozen = {n: p.data.copy() for n, p in network.parameters.items() if p.component in ('stem', 'encoder')}
        state = OptimizerState(lr=1e-2)
        rng = np.random.default_rng(0)
        for _ in range(5):
            network.zero_grad()
            x = rng.standard_normal((1, 1, 8, 8, 8)).astype(np.float32)
            labels = rng.integers(0, 2, size=(1, 8, 8, 8))
            _, cache = dice_ce_loss(network.forward_dense(x), labels)
            network.backward_dense(dice_ce_loss_backward(cache))
            for name in frozen:
                self.assertIsNone(network.parameters[name].grad)
            sgd_step(network.parameters.values(), state)
        for name, value in frozen.items():
            np.testing.assert_array_equal(value, network.parameters[name].data)
        with self.assertRaises(ConfigError):
            set_frozen(network, ('encoderr',))


if __name__ == '__main__':
    unittest.main()
