"""
Формат чекпоинта: магия "S3DC", версия (u32 LE), длина манифеста (u32 LE),
JSON-манифест (UTF-8) и blob из little-endian float32.

Манифест перечисляет тензоры (имя, форма, компонент, смещение, размер),
конфигурацию сети, её отпечаток и метаданные обучения. Буферы момента
оптимизатора хранятся как тензоры с компонентом "momentum".
"""

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np

from BrainMAE.exceptions import CheckpointError, ShapeMismatchError
from Engine.network import Network, NetworkConfig, build_network
from Engine.tensor_core import OptimizerState


logger = logging.getLogger(__name__)


MAGIC = b'S3DC'
VERSION = 1
MOMENTUM_TAG = 'momentum'
MOMENTUM_PREFIX = 'momentum/'
_HEADER = struct.Struct('<4sII')
_FLOAT = np.dtype('<f4')


@dataclass
class Checkpoint:
    """
    Загруженный (или собранный из сети) чекпоинт.

    Args:
        config (dict): Конфигурация сети (NetworkConfig.to_dict()).
        fingerprint (str): Отпечаток конфигурации.
        tensors (Dict[str, np.ndarray]): Параметры сети по именам.
        components (Dict[str, str]): Компонент каждого параметра.
        momentum (Dict[str, np.ndarray]): Буферы момента по именам параметров.
        metadata (dict): Шаг, сид и прочие сведения об обучении.
    """

    config: dict
    fingerprint: str
    tensors: Dict[str, np.ndarray]
    components: Dict[str, str]
    momentum: Dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def network_config(self) -> NetworkConfig:
        return NetworkConfig.from_dict(self.config)

    @property
    def step(self) -> int:
        return int(self.metadata.get('step', 0))


def checkpoint_from_network(network: Network, metadata: Optional[dict] = None,
                            optimizer: Optional[OptimizerState] = None) -> Checkpoint:
    tensors, components = {}, {}
    for name, param in network.parameters.items():
        tensors[name] = np.asarray(param.data, dtype=np.float32)
        components[name] = param.component
    momentum = {}
    if optimizer is not None:
        momentum = {name: np.asarray(buf, dtype=np.float32) for name, buf in sorted(optimizer.buffers.items())}
    return Checkpoint(network.config.to_dict(), network.config.fingerprint(), tensors, components,
                      momentum, dict(metadata or {}))


def _serialize(checkpoint: Checkpoint) -> bytes:
    entries, chunks, offset = [], [], 0
    items = [(name, value, checkpoint.components[name]) for name, value in checkpoint.tensors.items()]
    items += [(MOMENTUM_PREFIX + name, value, MOMENTUM_TAG) for name, value in checkpoint.momentum.items()]
    for name, value, component in items:
        raw = np.ascontiguousarray(value, dtype=_FLOAT).tobytes()
        entries.append({'name': name, 'shape': list(value.shape), 'component': component,
                        'offset': offset, 'nbytes': len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        'config': checkpoint.config,
        'fingerprint': checkpoint.fingerprint,
        'metadata': checkpoint.metadata,
        'tensors': entries,
    }
    manifest_bytes = json.dumps(manifest, sort_keys=True, separators=(',', ':')).encode('utf-8')
    return _HEADER.pack(MAGIC, VERSION, len(manifest_bytes)) + manifest_bytes + b''.join(chunks)


def save_checkpoint(source: Union[Network, Checkpoint], path: Union[str, Path], metadata: Optional[dict] = None,
                    optimizer: Optional[OptimizerState] = None) -> Path:
    """
    Сохраняет сеть или чекпоинт атомарно (временный файл + переименование).

    Args:
        source (Network | Checkpoint): Что сохранять.
        path (str | Path): Путь файла.
        metadata (Optional[dict]): Метаданные (только для Network).
        optimizer (Optional[OptimizerState]): Состояние оптимизатора (только для Network).

    Returns:
        Path: Путь сохранённого файла.
    """

    checkpoint = source if isinstance(source, Checkpoint) else checkpoint_from_network(source, metadata, optimizer)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = _serialize(checkpoint)
    tmp = path.with_name(path.name + '.tmp')
    try:
        with open(tmp, 'wb') as f:
            f.write(payload)
        os.replace(tmp, path)
    except OSError:
        logger.error(f"Не удалось записать чекпоинт {path}", exc_info=True)
        if tmp.exists():
            tmp.unlink()
        raise
    logger.debug(f"Чекпоинт сохранён: {path} ({len(payload)} байт)")
    return path


def _parse(payload: bytes, path: Path) -> Checkpoint:
    if len(payload) < _HEADER.size:
        raise CheckpointError(f"{path}: файл короче заголовка")
    magic, version, manifest_len = _HEADER.unpack_from(payload)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: неверная магия {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: неподдерживаемая версия {version}")
    start = _HEADER.size
    if start + manifest_len > len(payload):
        raise CheckpointError(f"{path}: манифест обрезан")
    try:
        manifest = json.loads(payload[start:start + manifest_len].decode('utf-8'))
        entries = manifest['tensors']
        config = manifest['config']
        fingerprint = manifest['fingerprint']
        metadata = manifest['metadata']
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: повреждённый манифест ({exc})") from exc
    blob = memoryview(payload)[start + manifest_len:]
    expected_offset = 0
    tensors, components, momentum = {}, {}, {}
    for entry in entries:
        name = entry.get('name')
        shape = tuple(int(n) for n in entry.get('shape', ()))
        nbytes = int(np.prod(shape, dtype=np.int64)) * _FLOAT.itemsize
        if entry.get('offset') != expected_offset or entry.get('nbytes') != nbytes:
            raise CheckpointError(
                f"{path}: тензор {name}: смещение {entry.get('offset')} / размер {entry.get('nbytes')}, "
                f"ожидалось {expected_offset} / {nbytes}")
        if expected_offset + nbytes > len(blob):
            raise CheckpointError(f"{path}: blob обрезан на тензоре {name}")
        value = np.frombuffer(blob[expected_offset:expected_offset + nbytes], dtype=_FLOAT).reshape(shape)
        value = value.astype(np.float32)
        expected_offset += nbytes
        if entry.get('component') == MOMENTUM_TAG:
            momentum[name[len(MOMENTUM_PREFIX):]] = value
        else:
            tensors[name] = value
            components[name] = entry.get('component')
    if expected_offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - expected_offset} лишних байт после последнего тензора")
    try:
        actual = NetworkConfig.from_dict(config).fingerprint()
    except Exception as exc:
        raise CheckpointError(f"{path}: некорректная конфигурация сети ({exc})") from exc
    if actual != fingerprint:
        raise CheckpointError(f"{path}: отпечаток конфигурации {fingerprint} не совпадает с {actual}")
    return Checkpoint(config, fingerprint, tensors, components, momentum, metadata)


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """
    Читает и полностью проверяет чекпоинт; при любой ошибке ничего не
    возвращается частично.

    Args:
        path (str | Path): Путь к файлу.

    Returns:
        Checkpoint: Загруженный чекпоинт.
    """

    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Чекпоинт не найден: {path}")
    checkpoint = _parse(path.read_bytes(), path)
    logger.debug(f"Чекпоинт загружен: {path}, {len(checkpoint.tensors)} тензоров, шаг {checkpoint.step}")
    return checkpoint


def restore_network(checkpoint: Checkpoint) -> Network:
    network = build_network(checkpoint.network_config())
    load_into(network, checkpoint)
    return network


def load_into(network: Network, checkpoint: Checkpoint) -> None:
    if network.config.fingerprint() != checkpoint.fingerprint:
        raise CheckpointError(
            f"Отпечаток сети {network.config.fingerprint()} не совпадает с чекпоинтом {checkpoint.fingerprint}")
    network.load_state_dict(checkpoint.tensors)


def restore_optimizer(checkpoint: Checkpoint, state: OptimizerState, network: Network) -> None:
    buffers = {}
    for name, value in checkpoint.momentum.items():
        param = network.parameters.get(name)
        if param is None:
            raise CheckpointError(f"Буфер момента для неизвестного параметра {name}")
        if value.shape != param.data.shape:
            raise ShapeMismatchError(f"Буфер момента {name}: {value.shape} != {param.data.shape}")
        buffers[name] = value.astype(param.data.dtype)
    state.buffers = buffers
