"""
Конфигурация прогона: YAML-файл, пресеты масштаба и переопределения
--set, собранные в дерево dataclass-ов. Неизвестные ключи -- ошибка.
"""

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import yaml

from BrainMAE.exceptions import ConfigError
from Engine.finetune import FINETUNE_PRESETS, FinetuneConfig
from Engine.gradcheck import KERNEL_CASES
from Engine.network import NETWORK_PRESETS, NetworkConfig
from Engine.pretrain import PRETRAIN_PRESETS, PretrainConfig
from Evaluation.metrics import DEFAULT_TOLERANCE_MM
from Evaluation.ranking import AGGREGATIONS
from Volumes.containers import MODALITIES
from Volumes.curation import CurationRules
from Volumes.synth import KINDS


logger = logging.getLogger(__name__)


RESOLVED_CONFIG = 'resolved_config.yaml'

# пресет -> (сеть, предобучение, дообучение)
PRESETS = {
    'toy': ('toy', 'toy', 'toy'),
    'base': ('full', 'base', 'base'),
    'large': ('full', 'large', 'large'),
}
PRESET_ALIASES = {'S3D-B': 'base', 'S3D-L': 'large'}
DEFAULT_PRESET = 'base'


@dataclass
class DataConfig:
    """
    Пути к входным данным.

    Args:
        manifest (Optional[str]): Манифест для filter / pretrain / evaluate.
        train_manifest (Optional[str]): Размеченный обучающий манифест (finetune).
        val_manifest (Optional[str]): Валидационный манифест; без него откладываются последние val_count случаев.
        val_count (int): Сколько случаев отложить при отсутствии val_manifest.
        checkpoint (Optional[str]): Чекпоинт (finetune -- предобученный, evaluate -- дообученный).
        scores (List[str]): Таблицы оценок для rank.
        target_spacing (Optional[List[float]]): Целевой шаг передискретизации, мм.
    """

    manifest: Optional[str] = None
    train_manifest: Optional[str] = None
    val_manifest: Optional[str] = None
    val_count: int = 2
    checkpoint: Optional[str] = None
    scores: List[str] = field(default_factory=list)
    target_spacing: Optional[List[float]] = None

    def __post_init__(self):
        if self.val_count < 1:
            raise ConfigError(f"data.val_count должен быть >= 1, получено {self.val_count}")
        if self.target_spacing is not None and (len(self.target_spacing) != 3 or min(self.target_spacing) <= 0):
            raise ConfigError(f"data.target_spacing: ожидались три положительных числа, получено {self.target_spacing}")


@dataclass
class EvaluateConfig:
    method: str = 'model'
    dataset: str = 'dataset'
    tolerance_mm: float = DEFAULT_TOLERANCE_MM
    with_nsd: bool = True

    def __post_init__(self):
        if self.tolerance_mm <= 0:
            raise ConfigError(f"evaluate.tolerance_mm должен быть > 0, получено {self.tolerance_mm}")


@dataclass
class RankConfig:
    metric: str = 'dsc'
    n_boot: int = 1000
    aggregation: str = 'mean_then_rank'
    higher_is_better: bool = True

    def __post_init__(self):
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"rank.aggregation: неизвестная агрегация {self.aggregation}")
        if self.n_boot < 1:
            raise ConfigError(f"rank.n_boot должен быть >= 1, получено {self.n_boot}")


@dataclass
class SynthConfig:
    kind: str = 'textures'
    count: int = 200
    shape: List[int] = field(default_factory=lambda: [32, 32, 32])
    classes: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"synth.kind: неизвестный вид {self.kind}, допустимы {', '.join(KINDS)}")
        if self.count < 1 or self.classes < 1 or len(self.shape) != 3 or min(self.shape) < 1:
            raise ConfigError(f"synth: некорректные count={self.count}, classes={self.classes}, shape={self.shape}")


@dataclass
class FilterConfig:
    min_fov_mm: float = 50.0
    max_spacing_mm: float = 6.5
    min_file_size: int = 200 * 1024
    modalities: List[str] = field(default_factory=lambda: list(MODALITIES))

    def rules(self) -> CurationRules:
        return CurationRules(self.min_fov_mm, self.max_spacing_mm, self.min_file_size, tuple(self.modalities))


@dataclass
class GradcheckConfig:
    seeds: int = 20
    tolerance: float = 1e-3
    kernels: List[str] = field(default_factory=lambda: list(KERNEL_CASES))

    def __post_init__(self):
        unknown = sorted(set(self.kernels) - set(KERNEL_CASES))
        if unknown:
            raise ConfigError(f"gradcheck.kernels: неизвестные ядра {', '.join(unknown)}")
        if self.seeds < 1 or self.tolerance <= 0:
            raise ConfigError(f"gradcheck: seeds >= 1 и tolerance > 0, получено {self.seeds}, {self.tolerance}")


SECTIONS = {
    'network': NetworkConfig,
    'pretrain': PretrainConfig,
    'finetune': FinetuneConfig,
    'evaluate': EvaluateConfig,
    'rank': RankConfig,
    'synth': SynthConfig,
    'filter': FilterConfig,
    'data': DataConfig,
    'gradcheck': GradcheckConfig,
}
TOP_LEVEL_KEYS = ('command', 'preset', 'seed')


@dataclass
class RunConfig:
    """
    Полностью разрешённая конфигурация одного прогона.
    """

    command: str
    preset: str
    seed: int
    network: NetworkConfig
    pretrain: PretrainConfig
    finetune: FinetuneConfig
    evaluate: EvaluateConfig
    rank: RankConfig
    synth: SynthConfig
    filter: FilterConfig
    data: DataConfig
    gradcheck: GradcheckConfig

    def to_dict(self) -> dict:
        tree = {'command': self.command, 'preset': self.preset, 'seed': self.seed}
        for name in SECTIONS:
            section = getattr(self, name)
            tree[name] = section.to_dict() if isinstance(section, NetworkConfig) else _plain(dataclasses.asdict(section))
        return tree

    def write(self, out_dir: Union[str, Path]) -> Path:
        path = Path(out_dir) / RESOLVED_CONFIG
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False, allow_unicode=True), encoding='utf-8')
        logger.info(f"Конфигурация прогона сохранена: {path}")
        return path


def _plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def resolve_preset(name: Optional[str]) -> str:
    name = DEFAULT_PRESET if name is None else str(name)
    name = PRESET_ALIASES.get(name, name)
    if name not in PRESETS:
        raise ConfigError(f"preset: неизвестный пресет {name}, допустимы "
                          f"{', '.join(list(PRESETS) + list(PRESET_ALIASES))}")
    return name


def preset_tree(preset: str) -> dict:
    network, pretrain, finetune = PRESETS[resolve_preset(preset)]
    tree = {'network': NETWORK_PRESETS[network].to_dict(),
            'pretrain': _plain(dataclasses.asdict(PRETRAIN_PRESETS[pretrain])),
            'finetune': _plain(dataclasses.asdict(FINETUNE_PRESETS[finetune]))}
    for name in ('evaluate', 'rank', 'synth', 'filter', 'data', 'gradcheck'):
        tree[name] = _plain(dataclasses.asdict(SECTIONS[name]()))
    return tree


def deep_merge(base: dict, update: dict) -> dict:
    """
    Рекурсивное слияние словарей; списки и скаляры заменяются целиком.
    """

    merged = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_yaml(path: Union[str, Path]) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Файл конфигурации не найден: {path}")
    try:
        tree = yaml.safe_load(path.read_text(encoding='utf-8')) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: некорректный YAML: {exc}") from exc
    if not isinstance(tree, dict):
        raise ConfigError(f"{path}: на верхнем уровне ожидался словарь")
    return tree


def parse_override(text: str) -> tuple:
    """
    Разбирает "a.b.c=value"; значение читается как скаляр YAML.
    """

    key, sep, raw = text.partition('=')
    key = key.strip()
    if not sep or not key or any(not part for part in key.split('.')):
        raise ConfigError(f"--set: ожидалось key=value с точечным путём, получено {text!r}")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"--set {key}: некорректное значение {raw!r}") from exc
    return key, value


def apply_override(tree: dict, key: str, value: Any) -> dict:
    tree = deep_merge(tree, {})
    parts = key.split('.')
    node = tree
    for depth, part in enumerate(parts[:-1]):
        nxt = node[int(part)] if isinstance(node, list) and part.isdigit() and int(part) < len(node) \
            else node.get(part) if isinstance(node, dict) else None
        if isinstance(nxt, dict):
            nxt = dict(nxt)
        elif isinstance(nxt, list):
            nxt = list(nxt)
        elif nxt is None and isinstance(node, dict):
            nxt = {}
        else:
            raise ConfigError(f"--set {key}: путь {'.'.join(parts[:depth + 1])} не является разделом")
        if isinstance(node, list):
            node[int(part)] = nxt
        else:
            node[part] = nxt
        node = nxt
    last = parts[-1]
    if isinstance(node, list):
        if not last.isdigit() or int(last) >= len(node):
            raise ConfigError(f"--set {key}: индекс {last} вне списка длины {len(node)}")
        node[int(last)] = value
    else:
        node[last] = value
    return tree


def _build(cls, data: Any, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix}: ожидался словарь, получено {type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"Неизвестные ключи конфигурации: {', '.join(f'{prefix}.{k}' for k in unknown)}")
    kwargs = {}
    for key, value in data.items():
        spec = known[key]
        if dataclasses.is_dataclass(spec.type) and isinstance(spec.type, type):
            value = _build(spec.type, value, f"{prefix}.{key}")
        elif isinstance(value, list) and isinstance(spec.default, tuple):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix}: {exc}") from exc


def _build_network(data: Any) -> NetworkConfig:
    if not isinstance(data, dict):
        raise ConfigError("network: ожидался словарь")
    stages = data.get('stages', [])
    for index, stage in enumerate(stages if isinstance(stages, list) else []):
        if isinstance(stage, dict):
            unknown = sorted(set(stage) - {'width', 'blocks', 'stride'})
            if unknown:
                raise ConfigError(f"Неизвестные ключи конфигурации: "
                                  f"{', '.join(f'network.stages.{index}.{k}' for k in unknown)}")
    try:
        return NetworkConfig.from_dict(data)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"network: {exc}") from exc


def build_run_config(command: str, config_path: Optional[Union[str, Path]] = None, preset: Optional[str] = None,
                     seed: Optional[int] = None, overrides: Sequence[str] = ()) -> RunConfig:
    """
    Собирает конфигурацию: пресет, затем YAML-файл, затем --set, затем --seed.

    Args:
        command (str): Подкоманда.
        config_path (Optional[str | Path]): YAML-файл.
        preset (Optional[str]): Пресет масштаба (toy / base / large, S3D-B / S3D-L).
        seed (Optional[int]): Сид; переопределяет сиды всех разделов.
        overrides (Sequence[str]): Строки key=value.

    Returns:
        RunConfig: Разрешённая конфигурация.
    """

    file_tree = load_yaml(config_path) if config_path else {}
    unknown = sorted(set(file_tree) - set(SECTIONS) - set(TOP_LEVEL_KEYS))
    if unknown:
        raise ConfigError(f"Неизвестные ключи конфигурации: {', '.join(unknown)}")
    if file_tree.get('command') not in (None, command):
        logger.warning(f"Конфигурация записана для команды {file_tree['command']}, запускается {command}")
    preset = resolve_preset(preset if preset is not None else file_tree.get('preset'))
    tree = deep_merge(preset_tree(preset), {k: v for k, v in file_tree.items() if k in SECTIONS})
    top_seed = file_tree.get('seed')
    for text in overrides:
        key, value = parse_override(text)
        if key == 'seed':
            top_seed = value
            continue
        if key.split('.')[0] not in SECTIONS:
            raise ConfigError(f"Неизвестные ключи конфигурации: {key}")
        tree = apply_override(tree, key, value)
    if seed is not None:
        top_seed = seed
    top_seed = 0 if top_seed is None else top_seed
    if not isinstance(top_seed, int) or isinstance(top_seed, bool) or top_seed < 0:
        raise ConfigError(f"seed: ожидалось целое >= 0, получено {top_seed!r}")
    for name in ('network', 'pretrain', 'finetune'):
        tree[name]['seed'] = top_seed
    sections = {name: _build(cls, tree[name], name) for name, cls in SECTIONS.items() if name != 'network'}
    return RunConfig(command=command, preset=preset, seed=top_seed, network=_build_network(tree['network']),
                     **sections)
