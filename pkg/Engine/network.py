"""
Residual Encoder U-Net: построение, плотный (сегментация) и разреженный
(MAE-реконструкция) прямые проходы, перенос весов, адаптация stem и
заморозка компонентов.
"""

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from BrainMAE.exceptions import CheckpointError, ConfigError, MaskError, ShapeMismatchError
from Engine.layers import Conv3d, ConvNormAct, DecoderStage, EncoderStage, kaiming_normal
from Engine.masking import MaskGrid, batch_masks, stack_stage_masks
from Engine.sparse_ops import Sparsification, densify, densify_backward, densification_spec, new_mask_token
from Engine.tensor_core import ConvSpec, DEFAULT_EPS, DEFAULT_SLOPE, Parameter, Triple, as_triple, check_tensor5


logger = logging.getLogger(__name__)


COMPONENTS = ('stem', 'encoder', 'decoder', 'seg_head', 'recon_head', 'mask_token', 'densify')
TRANSFER_POLICIES = ('none', 'encoder_only', 'encoder_and_decoder')
STEM_POLICIES = ('replicate_scaled', 'random')
STEM_WEIGHT = 'stem.conv.weight'


@dataclass(frozen=True)
class StageSpec:
    width: int
    blocks: int
    stride: Triple = (2, 2, 2)

    def __post_init__(self):
        object.__setattr__(self, 'stride', as_triple(self.stride))
        if self.width < 1 or self.blocks < 0 or min(self.stride) < 1:
            raise ConfigError(f"Некорректная ступень: width={self.width}, blocks={self.blocks}, stride={self.stride}")


@dataclass(frozen=True)
class NetworkConfig:
    """
    Топология ResEnc U-Net.

    Args:
        patch_size (Triple): Размер входного патча в вокселях.
        stages (Tuple[StageSpec, ...]): Ступени энкодера (ширина, блоки, шаг).
        in_channels (int): Число входных каналов (модальностей).
        out_channels (int): Число классов сегментации вместе с фоном.
        norm_eps (float): eps instance norm.
        slope (float): Наклон leaky ReLU.
        sparsification (str): Уровень абляции: base / sparse / mask_token / dens_conv.
        seed (int): Сид инициализации.
    """

    patch_size: Triple
    stages: Tuple[StageSpec, ...]
    in_channels: int = 1
    out_channels: int = 2
    norm_eps: float = DEFAULT_EPS
    slope: float = DEFAULT_SLOPE
    sparsification: str = Sparsification.DENS_CONV.value
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'patch_size', as_triple(self.patch_size))
        stages = tuple(s if isinstance(s, StageSpec) else StageSpec(**s) for s in self.stages)
        object.__setattr__(self, 'stages', stages)
        try:
            level = Sparsification(self.sparsification)
        except ValueError as exc:
            raise ConfigError(f"Неизвестный уровень sparsification: {self.sparsification}") from exc
        object.__setattr__(self, 'sparsification', level.value)
        if len(stages) < 2:
            raise ConfigError(f"Нужно не менее двух ступеней, получено {len(stages)}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError(f"Некорректное число каналов: in={self.in_channels}, out={self.out_channels}")
        shape = self.patch_size
        for index, stage in enumerate(stages):
            if any(n % s for n, s in zip(shape, stage.stride)):
                raise ConfigError(f"Патч {self.patch_size} не делится на шаги до ступени {index}")
            shape = tuple(n // s for n, s in zip(shape, stage.stride))

    @property
    def level(self) -> Sparsification:
        return Sparsification(self.sparsification)

    @property
    def widths(self) -> Tuple[int, ...]:
        return tuple(s.width for s in self.stages)

    @property
    def stage_shapes(self) -> Tuple[Triple, ...]:
        shapes, shape = [], self.patch_size
        for stage in self.stages:
            shape = tuple(n // s for n, s in zip(shape, stage.stride))
            shapes.append(shape)
        return tuple(shapes)

    @property
    def bottleneck_shape(self) -> Triple:
        return self.stage_shapes[-1]

    def to_dict(self) -> dict:
        data = asdict(self)
        data['patch_size'] = list(self.patch_size)
        data['stages'] = [
            {'width': s.width, 'blocks': s.blocks, 'stride': list(s.stride)} for s in self.stages
        ]
        return data

    @classmethod
    def from_dict(cls, data: dict) -> 'NetworkConfig':
        known = {f for f in cls.__dataclass_fields__}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"Неизвестные ключи конфигурации сети: {', '.join('network.' + k for k in unknown)}")
        return cls(**data)

    def fingerprint(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(payload.encode('utf-8')).hexdigest()[:16]

    def replace(self, **changes) -> 'NetworkConfig':
        data = self.to_dict()
        data.update(changes)
        return NetworkConfig.from_dict(data)


def _stages(widths, blocks, strides) -> Tuple[StageSpec, ...]:
    return tuple(StageSpec(w, b, s) for w, b, s in zip(widths, blocks, strides))


NETWORK_PRESETS: Dict[str, NetworkConfig] = {
    'full': NetworkConfig(
        patch_size=(160, 160, 160),
        stages=_stages((32, 64, 128, 256, 320, 320), (1, 3, 4, 6, 6, 6), (1, 2, 2, 2, 2, 2)),
    ),
    'toy': NetworkConfig(
        patch_size=(32, 32, 32),
        stages=_stages((4, 8, 16, 32), (1, 1, 1, 1), (1, 2, 2, 2)),
    ),
    'tiny': NetworkConfig(
        patch_size=(8, 8, 8),
        stages=_stages((2, 4), (1, 1), (1, 2)),
    ),
}


class Network:
    """
    Сеть и её хранилище параметров. Каждому параметру назначен ровно один
    компонент из COMPONENTS.
    """

    def __init__(self, config: NetworkConfig, rng: np.random.Generator):
        self.config = config
        eps, slope = config.norm_eps, config.slope
        widths = config.widths
        self.stem = ConvNormAct('stem', ConvSpec(config.in_channels, widths[0]), 'stem', rng, eps, slope)
        self.encoder: List[EncoderStage] = []
        channels = widths[0]
        for index, stage in enumerate(config.stages):
            self.encoder.append(EncoderStage(f"encoder.{index}", channels, stage.width, stage.blocks,
                                             stage.stride, rng, eps, slope))
            channels = stage.width
        self.decoder: List[DecoderStage] = [
            DecoderStage(f"decoder.{index}", widths[index + 1], widths[index], config.stages[index + 1].stride,
                         rng, eps, slope)
            for index in range(len(widths) - 1)
        ]
        self.seg_head = Conv3d('seg_head', ConvSpec(widths[0], config.out_channels, kernel=1), 'seg_head', rng)
        self.recon_head = Conv3d('recon_head', ConvSpec(widths[0], config.in_channels, kernel=1), 'recon_head', rng)
        level = config.level
        self.mask_tokens: List[Parameter] = []
        if level.uses_mask_token:
            self.mask_tokens = [new_mask_token(f"mask_token.{i}", w, rng) for i, w in enumerate(widths)]
        self.densify_convs: Dict[int, Conv3d] = {}
        if level.uses_densify_conv:
            # все разрешения, кроме самого высокого
            self.densify_convs = {
                i: Conv3d(f"densify.{i}", densification_spec(w), 'densify', rng)
                for i, w in enumerate(widths) if i > 0
            }
        self.parameters: Dict[str, Parameter] = {}
        for param in self._collect():
            if param.name in self.parameters:
                raise ConfigError(f"Повторяющееся имя параметра: {param.name}")
            self.parameters[param.name] = param
        self._input_mask = None
        self._stage_masks = None
        self._densify_caches = []

    def _collect(self) -> Iterable[Parameter]:
        yield from self.stem.parameters()
        for stage in self.encoder:
            yield from stage.parameters()
        for stage in self.decoder:
            yield from stage.parameters()
        yield from self.seg_head.parameters()
        yield from self.recon_head.parameters()
        yield from self.mask_tokens
        for index in sorted(self.densify_convs):
            yield from self.densify_convs[index].parameters()

    # === Parameter store ===

    def named_parameters(self, components: Optional[Iterable[str]] = None) -> List[Parameter]:
        if components is None:
            return list(self.parameters.values())
        wanted = set(validate_components(components))
        return [p for p in self.parameters.values() if p.component in wanted]

    def zero_grad(self) -> None:
        for param in self.parameters.values():
            param.zero_grad()

    def astype(self, dtype) -> 'Network':
        for param in self.parameters.values():
            param.data = param.data.astype(dtype)
            param.grad = None
        return self

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.parameters.items()}

    def load_state_dict(self, tensors: Dict[str, np.ndarray], strict: bool = True) -> None:
        staged = {}
        for name, param in self.parameters.items():
            if name not in tensors:
                if strict:
                    raise CheckpointError(f"В чекпоинте нет тензора {name}")
                continue
            value = tensors[name]
            if value.shape != param.data.shape:
                raise ShapeMismatchError(f"{name}: форма {value.shape} != {param.data.shape}")
            staged[name] = value
        for name, value in staged.items():
            self.parameters[name].data = np.array(value, dtype=self.parameters[name].data.dtype, copy=True)

    # === Encoder / decoder ===

    def _check_input(self, x: np.ndarray) -> None:
        check_tensor5(x, 'network.input')
        if x.shape[1] != self.config.in_channels or tuple(x.shape[2:]) != self.config.patch_size:
            raise ShapeMismatchError(
                f"Вход {x.shape} не совпадает с (B, {self.config.in_channels}, {self.config.patch_size})")

    def _encode(self, x: np.ndarray, input_mask, stage_masks) -> List[np.ndarray]:
        x = self.stem.forward(x, input_mask)
        skips = []
        for index, stage in enumerate(self.encoder):
            x = stage.forward(x, None if stage_masks is None else stage_masks[index])
            skips.append(x)
        return skips

    def _encode_backward(self, dskips: List[np.ndarray]) -> np.ndarray:
        grad = dskips[-1]
        for index in range(len(self.encoder) - 1, -1, -1):
            grad = self.encoder[index].backward(grad)
            if index > 0:
                grad = grad + dskips[index - 1]
        return self.stem.backward(grad)

    def _decode(self, skips: List[np.ndarray]) -> np.ndarray:
        x = skips[-1]
        for index in range(len(self.decoder) - 1, -1, -1):
            x = self.decoder[index].forward(x, skips[index])
        return x

    def _decode_backward(self, grad: np.ndarray) -> List[np.ndarray]:
        dskips: List[Optional[np.ndarray]] = [None] * len(self.encoder)
        for index, stage in enumerate(self.decoder):
            grad, dskips[index] = stage.backward(grad)
        dskips[-1] = grad
        return dskips

    def _prepare_masks(self, masks, batch: int):
        if masks is None:
            return None, None
        masks = batch_masks(masks, batch)
        for mask in masks:
            if mask.grid_shape != self.config.bottleneck_shape:
                raise MaskError(f"Сетка маски {mask.grid_shape} != боттлнек {self.config.bottleneck_shape}")
        if all(mask.is_empty for mask in masks):
            return None, None
        input_mask = stack_stage_masks(masks, self.config.patch_size)
        stage_masks = [stack_stage_masks(masks, shape) for shape in self.config.stage_shapes]
        return input_mask, stage_masks

    def encode(self, x: np.ndarray, masks=None) -> List[np.ndarray]:
        """
        Признаки энкодера по ступеням. С масками вход обнуляется в
        замаскированных блоках, а энкодер работает разреженно (кроме уровня base).

        Args:
            x (np.ndarray): Вход (B, C, *patch).
            masks (MaskGrid | Sequence[MaskGrid] | None): Маски боттлнека.

        Returns:
            List[np.ndarray]: Выходы всех ступеней, последний -- боттлнек.
        """

        self._check_input(x)
        input_mask, stage_masks = self._prepare_masks(masks, x.shape[0])
        if input_mask is not None:
            x = np.where(input_mask[:, None], 0, x).astype(x.dtype, copy=False)
        if not self.config.level.sparse_encoder:
            return self._encode(x, None, None)
        return self._encode(x, input_mask, stage_masks)

    # === Dense path (fine-tuning, inference) ===

    def forward_dense(self, x: np.ndarray) -> np.ndarray:
        self._check_input(x)
        skips = self._encode(x, None, None)
        return self.seg_head.forward(self._decode(skips))

    def backward_dense(self, dlogits: np.ndarray) -> np.ndarray:
        dfeature = self.seg_head.backward(dlogits)
        return self._encode_backward(self._decode_backward(dfeature))

    # === Sparse path (MAE pretraining) ===

    def forward_sparse(self, x: np.ndarray, masks=None) -> np.ndarray:
        """
        MAE-проход: разреженный энкодер, уплотнение skip-соединений и
        боттлнека mask-токеном, densification conv на всех разрешениях,
        кроме самого высокого, плотный декодер и голова реконструкции.

        Args:
            x (np.ndarray): Вход (B, C, *patch), z-нормированный.
            masks (MaskGrid | Sequence[MaskGrid] | None): Маски боттлнека
                (одна на батч или по одной на образец).

        Returns:
            np.ndarray: Реконструкция той же формы, что и вход.
        """

        self._check_input(x)
        level = self.config.level
        input_mask, stage_masks = self._prepare_masks(masks, x.shape[0])
        self._input_mask, self._stage_masks = input_mask, stage_masks
        if input_mask is not None:
            x = np.where(input_mask[:, None], 0, x).astype(x.dtype, copy=False)
        if level.sparse_encoder:
            skips = self._encode(x, input_mask, stage_masks)
        else:
            skips = self._encode(x, None, None)
        self._densify_caches = []
        dense_skips = []
        for index, skip in enumerate(skips):
            cache = None
            if stage_masks is not None and level.uses_mask_token:
                skip, cache = densify(skip, stage_masks[index], self.mask_tokens[index].data)
            self._densify_caches.append(cache)
            if index in self.densify_convs:
                skip = self.densify_convs[index].forward(skip)
            dense_skips.append(skip)
        return self.recon_head.forward(self._decode(dense_skips))

    def backward_sparse(self, drecon: np.ndarray) -> np.ndarray:
        dskips = self._decode_backward(self.recon_head.backward(drecon))
        for index in range(len(dskips)):
            grad = dskips[index]
            if index in self.densify_convs:
                grad = self.densify_convs[index].backward(grad)
            cache = self._densify_caches[index]
            if cache is not None:
                grad, dtoken = densify_backward(grad, cache)
                self.mask_tokens[index].accumulate(dtoken)
            dskips[index] = grad
        dx = self._encode_backward(dskips)
        if self._input_mask is not None:
            dx = np.where(self._input_mask[:, None], 0, dx).astype(dx.dtype, copy=False)
        return dx


def build_network(config: NetworkConfig, rng: Optional[np.random.Generator] = None,
                  grid_shape: Optional[Sequence[int]] = None) -> Network:
    """
    Строит сеть с детерминированной инициализацией.

    Args:
        config (NetworkConfig): Топология.
        rng (Optional[np.random.Generator]): Генератор; по умолчанию из config.seed.
        grid_shape (Optional[Sequence[int]]): Ожидаемая сетка маски; должна
            совпадать с формой боттлнека.

    Returns:
        Network: Построенная сеть.
    """

    if grid_shape is not None and as_triple(grid_shape) != config.bottleneck_shape:
        raise ConfigError(f"Боттлнек {config.bottleneck_shape} не совпадает с сеткой маски {tuple(grid_shape)}")
    rng = np.random.default_rng(config.seed) if rng is None else rng
    network = Network(config, rng)
    logger.debug(f"Сеть построена: {len(network.parameters)} тензоров, боттлнек {config.bottleneck_shape}")
    return network


def validate_components(components: Iterable[str]) -> Tuple[str, ...]:
    components = tuple(components)
    unknown = sorted(set(components) - set(COMPONENTS))
    if unknown:
        raise ConfigError(f"Неизвестные компоненты: {', '.join(unknown)}")
    return components


def set_frozen(network: Network, components: Iterable[str]) -> None:
    """
    Замораживает ровно перечисленные компоненты, остальные размораживает.

    Args:
        network (Network): Сеть.
        components (Iterable[str]): Имена компонентов.
    """

    frozen = set(validate_components(components))
    for param in network.parameters.values():
        param.frozen = param.component in frozen


# === Weight transfer ===

@dataclass
class TransferReport:
    copied: List[str] = field(default_factory=list)
    initialized: List[str] = field(default_factory=list)
    skipped: List[str] = field(default_factory=list)


def transfer_weights(checkpoint, target: Network, policy: str) -> TransferReport:
    """
    Переносит веса предобученной сети в целевую.

    encoder_only копирует {stem, encoder}, encoder_and_decoder ещё и
    {decoder}; seg_head всегда свежий; recon_head, mask_token, densify не
    переносятся никогда. Stem с другим числом входных каналов пропускается
    и адаптируется отдельно через adapt_stem.

    Args:
        checkpoint (Checkpoint): Источник.
        target (Network): Целевая сеть (меняется на месте).
        policy (str): none / encoder_only / encoder_and_decoder.

    Returns:
        TransferReport: Списки скопированных, инициализированных и пропущенных тензоров.
    """

    if policy not in TRANSFER_POLICIES:
        raise ConfigError(f"Неизвестная политика переноса: {policy}")
    report = TransferReport()
    transferable = {'none': set(), 'encoder_only': {'stem', 'encoder'},
                    'encoder_and_decoder': {'stem', 'encoder', 'decoder'}}[policy]
    staged = {}
    for name, param in target.parameters.items():
        if param.component in ('recon_head', 'mask_token', 'densify'):
            report.skipped.append(name)
            continue
        if param.component not in transferable:
            report.initialized.append(name)
            continue
        if name not in checkpoint.tensors:
            raise CheckpointError(f"В чекпоинте нет тензора {name}")
        source = checkpoint.tensors[name]
        if source.shape != param.data.shape:
            if name == STEM_WEIGHT and source.shape[0] == param.data.shape[0] \
                    and source.shape[2:] == param.data.shape[2:]:
                report.skipped.append(name)
                continue
            raise ShapeMismatchError(f"{name}: в чекпоинте {source.shape}, в сети {param.data.shape}")
        staged[name] = source
    for name, source in staged.items():
        target.parameters[name].data = np.array(source, dtype=target.parameters[name].data.dtype, copy=True)
        report.copied.append(name)
    logger.info(f"Перенос весов ({policy}): скопировано {len(report.copied)}, "
                f"инициализировано {len(report.initialized)}, пропущено {len(report.skipped)}")
    return report


def adapt_stem(checkpoint, target_in_channels: int, policy: str = 'replicate_scaled',
               rng: Optional[np.random.Generator] = None) -> Dict[str, np.ndarray]:
    """
    Адаптирует одноканальный предобученный stem к K входным каналам.

    replicate_scaled повторяет ядро K раз по оси входных каналов и делит
    на K, поэтому K одинаковых каналов дают те же активации, что и один.
    random возвращает свежую инициализацию.

    Args:
        checkpoint (Checkpoint): Источник с одноканальным stem.
        target_in_channels (int): K >= 1.
        policy (str): replicate_scaled / random.
        rng (Optional[np.random.Generator]): Генератор для random.

    Returns:
        Dict[str, np.ndarray]: Тензоры stem по именам.
    """

    if target_in_channels < 1:
        raise ConfigError(f"Число входных каналов должно быть >= 1, получено {target_in_channels}")
    if policy not in STEM_POLICIES:
        raise ConfigError(f"Неизвестная политика stem: {policy}")
    stem = {name: value for name, value in checkpoint.tensors.items()
            if checkpoint.components.get(name) == 'stem'}
    weight_name = STEM_WEIGHT
    if weight_name not in stem:
        raise CheckpointError(f"В чекпоинте нет тензора {weight_name}")
    weight = stem[weight_name]
    if weight.shape[1] != 1:
        raise ShapeMismatchError(f"{weight_name}: ожидался один входной канал, форма {weight.shape}")
    adapted = {name: np.array(value, copy=True) for name, value in stem.items()}
    k = target_in_channels
    if policy == 'replicate_scaled':
        adapted[weight_name] = (np.repeat(weight, k, axis=1) / k).astype(weight.dtype)
        return adapted
    rng = np.random.default_rng() if rng is None else rng
    shape = (weight.shape[0], k) + weight.shape[2:]
    adapted[weight_name] = kaiming_normal(shape, k * int(np.prod(weight.shape[2:])), rng, weight.dtype)
    for name, value in stem.items():
        if name.endswith('.bias') or name.endswith('.shift'):
            adapted[name] = np.zeros_like(value)
        elif name.endswith('.gain'):
            adapted[name] = np.ones_like(value)
    return adapted


def apply_stem(network: Network, tensors: Dict[str, np.ndarray]) -> None:
    for name, value in tensors.items():
        param = network.parameters.get(name)
        if param is None or param.component != 'stem':
            raise CheckpointError(f"{name} не является тензором stem")
        if value.shape != param.data.shape:
            raise ShapeMismatchError(f"{name}: форма {value.shape} != {param.data.shape}")
        param.data = np.array(value, dtype=param.data.dtype, copy=True)
