"""
MAE-предобучение: выборка патчей, маскирование, разреженный прямой
проход, L2 по замаскированным вокселям и SGD по poly-расписанию.

Вся случайность шага k берётся из np.random.default_rng([seed, k]),
поэтому предвыборка батчей и возобновление с чекпоинта не меняют
траекторию потерь.
"""

import logging
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from BrainMAE.exceptions import CheckpointError, ConfigError, NonFiniteError
from Engine.checkpoint import load_checkpoint, load_into, restore_optimizer, save_checkpoint
from Engine.losses import masked_l2_loss, masked_l2_loss_backward
from Engine.masking import MaskGrid, RatioSpec, parse_ratio_spec, sample_mask, stack_stage_masks
from Engine.network import Network
from Engine.tensor_core import LRLaw, OptimizerState, lr_at, sgd_step
from Evaluation.plots import plot_loss_curve, plot_reconstruction
from Volumes.containers import Volume
from Volumes.datasets import PatchSampler
from Volumes.transforms import AugmentParams, center_crop_or_pad


logger = logging.getLogger(__name__)


PRETRAIN_LENGTHS = (62_500, 125_000, 250_000, 500_000, 1_000_000)
TRAINABLE_COMPONENTS = ('stem', 'encoder', 'decoder', 'recon_head', 'mask_token', 'densify')
LOSS_LOG = 'loss_log.tsv'
LATEST_CHECKPOINT = 'latest.s3dc'
FINAL_CHECKPOINT = 'final.s3dc'
EVAL_STREAM = 0x5EED


@dataclass
class PretrainConfig:
    """
    Параметры предобучения.

    Args:
        batch_size (int): Размер батча.
        base_lr (float): Начальный learning rate poly-расписания.
        steps (int): Число шагов.
        ratio (Any): Доля маскирования: число или [low, high].
        weight_decay (float): Weight decay.
        momentum (float): Момент Нестерова.
        augment (AugmentParams): Пространственные аугментации.
        seed (int): Сид.
        checkpoint_every (int): Период сохранения чекпоинта, шаги.
        prefetch (int): Глубина очереди предвыборки (0 -- без потока).
        heldout (int): Сколько объёмов отложить для оценки реконструкции.
    """

    batch_size: int = 6
    base_lr: float = 1e-2
    steps: int = 250_000
    ratio: Any = 0.75
    weight_decay: float = 3e-5
    momentum: float = 0.99
    nesterov: bool = True
    augment: AugmentParams = field(default_factory=AugmentParams)
    seed: int = 0
    checkpoint_every: int = 10_000
    prefetch: int = 0
    heldout: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError(f"pretrain: steps и batch_size должны быть > 0 (steps={self.steps}, "
                              f"batch_size={self.batch_size})")
        if self.checkpoint_every < 1 or self.prefetch < 0 or self.heldout < 0:
            raise ConfigError("pretrain: checkpoint_every >= 1, prefetch >= 0, heldout >= 0")
        self.ratio_spec()

    def ratio_spec(self) -> RatioSpec:
        try:
            return parse_ratio_spec(self.ratio)
        except Exception as exc:
            raise ConfigError(f"pretrain.ratio: {exc}") from exc

    def lr_law(self) -> LRLaw:
        return LRLaw('poly', self.base_lr, self.steps)

    def optimizer(self) -> OptimizerState:
        return OptimizerState(lr=self.base_lr, weight_decay=self.weight_decay, momentum=self.momentum,
                              nesterov=self.nesterov)


PRETRAIN_PRESETS: Dict[str, PretrainConfig] = {
    'base': PretrainConfig(batch_size=6, base_lr=1e-2, steps=250_000),
    'large': PretrainConfig(batch_size=48, base_lr=3e-2, steps=1_000_000),
    'toy': PretrainConfig(batch_size=2, base_lr=1e-2, steps=2_000, checkpoint_every=500),
}


# === Single step ===

class StepResult(NamedTuple):
    loss: float
    lr: float


def step_rng(seed: int, step_index: int) -> np.random.Generator:
    return np.random.default_rng([seed, step_index])


def sample_batch_masks(network: Network, batch: int, ratio_spec: RatioSpec,
                       rng: np.random.Generator) -> List[MaskGrid]:
    # динамическая доля разыгрывается для каждого образца
    return [sample_mask(network.config.bottleneck_shape, ratio_spec, rng) for _ in range(batch)]


def reconstruction_loss(network: Network, batch: np.ndarray, masks: Sequence[MaskGrid]):
    recon = network.forward_sparse(batch, masks)
    voxel_mask = stack_stage_masks(masks, network.config.patch_size)
    loss, cache = masked_l2_loss(recon, batch, voxel_mask)
    return loss, cache, recon


def pretrain_step(network: Network, batch: np.ndarray, ratio_spec: RatioSpec, step_index: int,
                  rng: np.random.Generator, state: OptimizerState, law: LRLaw,
                  masks: Optional[Sequence[MaskGrid]] = None) -> StepResult:
    """
    Один шаг MAE: маски на образец, разреженный проход, masked L2,
    обратный проход и SGD с lr_at(law, step_index).

    Args:
        network (Network): Сеть.
        batch (np.ndarray): Z-нормированные патчи (B, 1, *patch).
        ratio_spec (RatioSpec): Доля маскирования.
        step_index (int): Номер шага (0-based).
        rng (np.random.Generator): Генератор шага.
        state (OptimizerState): Состояние оптимизатора.
        law (LRLaw): Закон learning rate.
        masks (Optional[Sequence[MaskGrid]]): Готовые маски вместо выборки.

    Returns:
        StepResult: Потери до обновления и использованный learning rate.
    """

    if masks is None:
        masks = sample_batch_masks(network, batch.shape[0], ratio_spec, rng)
    lr = lr_at(law, step_index)
    network.zero_grad()
    try:
        loss, cache, _ = reconstruction_loss(network, batch, masks)
    except NonFiniteError as exc:
        raise NonFiniteError(f"Шаг {step_index}: нечисловые потери (lr={lr:g}): {exc}") from exc
    network.backward_sparse(masked_l2_loss_backward(cache))
    sgd_step(network.parameters.values(), state, lr)
    return StepResult(loss, lr)


# === Baselines and evaluation ===

def mean_predictor_mse(batch: np.ndarray, voxel_mask: np.ndarray) -> float:
    """
    MSE на замаскированных вокселях для предсказателя "среднее видимых
    вокселей образца".
    """

    keep = ~np.asarray(voxel_mask, dtype=bool)[:, None]
    visible = np.maximum(keep.sum(axis=(1, 2, 3, 4), keepdims=True), 1)
    mean = np.sum(batch * keep, axis=(1, 2, 3, 4), keepdims=True) / visible
    prediction = np.broadcast_to(mean, batch.shape).astype(batch.dtype)
    loss, _ = masked_l2_loss(prediction, batch, voxel_mask)
    return loss


def evaluate_reconstruction(network: Network, volumes: Sequence[Volume], ratio_spec: RatioSpec,
                            seed: int = 0) -> Dict[str, float]:
    """
    MSE реконструкции на отложенных объёмах с фиксированным набором масок
    (центральный патч каждого объёма) и базовый уровень mean-predictor.

    Returns:
        Dict[str, float]: masked_mse, mean_predictor_mse и их отношение.
    """

    rng = np.random.default_rng([seed, EVAL_STREAM])
    total_sq = total_base = 0.0
    total_count = 0
    for volume in volumes:
        patch = center_crop_or_pad(volume.data, network.config.patch_size)[None].astype(np.float32)
        masks = sample_batch_masks(network, 1, ratio_spec, rng)
        voxel_mask = stack_stage_masks(masks, network.config.patch_size)
        count = int(voxel_mask.sum()) * patch.shape[1]
        if count == 0:
            continue
        loss, _, _ = reconstruction_loss(network, patch, masks)
        total_sq += loss * count
        total_base += mean_predictor_mse(patch, voxel_mask) * count
        total_count += count
    if total_count == 0:
        raise ConfigError("evaluate_reconstruction: нет ни одного замаскированного вокселя")
    masked_mse = total_sq / total_count
    baseline = total_base / total_count
    return {'masked_mse': masked_mse, 'mean_predictor_mse': baseline, 'ratio_to_baseline': masked_mse / baseline}


def reconstruct_preview(network: Network, volume: Volume, ratio_spec: RatioSpec,
                        seed: int = 0) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Центральный патч объёма, он же с обнулёнными замаскированными блоками
    и реконструкция сети (первый канал каждого).
    """

    rng = np.random.default_rng([seed, EVAL_STREAM])
    patch = center_crop_or_pad(volume.data, network.config.patch_size)[None].astype(np.float32)
    masks = sample_batch_masks(network, 1, ratio_spec, rng)
    voxel_mask = stack_stage_masks(masks, network.config.patch_size)
    recon = network.forward_sparse(patch, masks)
    return patch[0, 0], np.where(voxel_mask[0], 0, patch[0, 0]), recon[0, 0]


# === Prefetch ===

class BatchPrefetcher:
    """
    Фоновая выборка батчей на ограниченное число шагов вперёд. Батч шага k
    зависит только от (seed, k), поэтому порядок потоков не влияет на результат.
    """

    _DONE = object()

    def __init__(self, sampler: PatchSampler, batch_size: int, seed: int, start: int, stop: int, depth: int):
        self._queue: queue.Queue = queue.Queue(maxsize=depth)
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, args=(sampler, batch_size, seed, start, stop),
                                        daemon=True)
        self._thread.start()

    def _run(self, sampler, batch_size, seed, start, stop):
        try:
            for index in range(start, stop):
                if self._stop.is_set():
                    return
                rng = step_rng(seed, index)
                self._queue.put((index, sampler.draw(batch_size, rng), rng))
        except Exception as exc:
            logger.error(f"Ошибка предвыборки батча: {exc}", exc_info=True)
            self._queue.put(exc)
            return
        self._queue.put(self._DONE)

    def __iter__(self):
        while True:
            item = self._queue.get()
            if item is self._DONE:
                return
            if isinstance(item, Exception):
                raise item
            yield item

    def close(self) -> None:
        self._stop.set()
        while self._thread.is_alive():
            try:
                self._queue.get_nowait()
            except queue.Empty:
                self._thread.join(timeout=0.05)


def _inline_batches(sampler: PatchSampler, batch_size: int, seed: int, start: int, stop: int):
    for index in range(start, stop):
        rng = step_rng(seed, index)
        yield index, sampler.draw(batch_size, rng), rng


# === Loop ===

@dataclass
class PretrainResult:
    checkpoint: Path
    loss_log: Path
    losses: List[float]
    evaluation: Optional[Dict[str, float]] = None


class Pretrainer:
    """
    Цикл предобучения с журналом потерь, периодическими чекпоинтами и
    возобновлением.
    """

    def __init__(self, network: Network, sampler: PatchSampler, config: PretrainConfig,
                 out_dir: Union[str, Path]):
        self.network = network
        self.sampler = sampler
        self.config = config
        self.out_dir = Path(out_dir)
        self.state = config.optimizer()
        self.law = config.lr_law()
        self.ratio_spec = config.ratio_spec()
        self.step = 0
        self.losses: List[float] = []
        self.log_path = self.out_dir / LOSS_LOG

    def _metadata(self) -> dict:
        return {
            'kind': 'pretrain',
            'step': self.step,
            'steps': self.config.steps,
            'seed': self.config.seed,
            'base_lr': self.config.base_lr,
            'ratio': self.ratio_spec.describe(),
        }

    def save(self, name: str = LATEST_CHECKPOINT) -> Path:
        return save_checkpoint(self.network, self.out_dir / name, self._metadata(), self.state)

    def resume(self) -> int:
        """
        Восстанавливает сеть, момент и номер шага из latest.s3dc и обрезает
        журнал потерь до сохранённого шага.

        Returns:
            int: Число уже выполненных шагов.
        """

        path = self.out_dir / LATEST_CHECKPOINT
        checkpoint = load_checkpoint(path)
        metadata = checkpoint.metadata
        if metadata.get('kind') != 'pretrain' or metadata.get('seed') != self.config.seed \
                or metadata.get('steps') != self.config.steps:
            raise CheckpointError(f"{path}: чекпоинт от другого прогона ({metadata})")
        load_into(self.network, checkpoint)
        restore_optimizer(checkpoint, self.state, self.network)
        self.step = checkpoint.step
        self.losses = self._truncate_log(self.step)
        logger.info(f"Возобновляем предобучение с шага {self.step}")
        return self.step

    def _truncate_log(self, step: int) -> List[float]:
        kept, losses = ['step\tlr\tloss'], []
        if self.log_path.exists():
            for line in self.log_path.read_text(encoding='utf-8').splitlines()[1:]:
                fields = line.split('\t')
                if len(fields) == 3 and int(fields[0]) <= step:
                    kept.append(line)
                    losses.append(float(fields[2]))
        self.log_path.write_text('\n'.join(kept) + '\n', encoding='utf-8')
        return losses

    def _batches(self):
        start, stop = self.step, self.config.steps
        if self.config.prefetch > 0:
            return BatchPrefetcher(self.sampler, self.config.batch_size, self.config.seed, start, stop,
                                   self.config.prefetch)
        return _inline_batches(self.sampler, self.config.batch_size, self.config.seed, start, stop)

    def run(self) -> List[float]:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        if not self.log_path.exists():
            self.log_path.write_text('step\tlr\tloss\n', encoding='utf-8')
        logger.info(f"Начинаем предобучение: шаги {self.step + 1}..{self.config.steps}, "
                    f"батч {self.config.batch_size}, маска {self.ratio_spec.describe()}")
        batches = self._batches()
        try:
            with open(self.log_path, 'a', encoding='utf-8') as log:
                for index, batch, rng in batches:
                    result = pretrain_step(self.network, batch, self.ratio_spec, index, rng, self.state, self.law)
                    self.step = index + 1
                    self.losses.append(result.loss)
                    log.write(f"{self.step}\t{result.lr!r}\t{result.loss!r}\n")
                    if self.step % self.config.checkpoint_every == 0 or self.step == self.config.steps:
                        log.flush()
                        self.save()
                        logger.info(f"Шаг {self.step}/{self.config.steps}: loss {result.loss:.5f}, lr {result.lr:.3e}")
        except Exception as e:
            logger.error(f"Ошибка предобучения на шаге {self.step + 1}: {e}", exc_info=True)
            raise
        finally:
            if isinstance(batches, BatchPrefetcher):
                batches.close()
        logger.info("Предобучение завершено")
        return self.losses


def read_loss_log(path: Union[str, Path]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Читает журнал потерь: (шаги, lr, потери).
    """

    rows = [line.split('\t') for line in Path(path).read_text(encoding='utf-8').splitlines()[1:] if line]
    if not rows:
        return np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros(0)
    steps, lrs, losses = zip(*rows)
    return np.array(steps, dtype=np.int64), np.array(lrs, dtype=np.float64), np.array(losses, dtype=np.float64)


def run_pretraining(network: Network, volumes: Sequence[Volume], config: PretrainConfig,
                    out_dir: Union[str, Path], resume: bool = False, plots: bool = False) -> PretrainResult:
    """
    Полный прогон: отложенные объёмы, цикл, финальный чекпоинт, оценка
    реконструкции и (по желанию) графики.

    Args:
        network (Network): Сеть (уровень sparsification задан в её конфигурации).
        volumes (Sequence[Volume]): Одноканальные z-нормированные объёмы.
        config (PretrainConfig): Параметры.
        out_dir (str | Path): Каталог прогона.
        resume (bool): Продолжить с latest.s3dc.
        plots (bool): Сохранять loss.png и превью реконструкции.

    Returns:
        PretrainResult: Путь финального чекпоинта, журнал и оценка.
    """

    out_dir = Path(out_dir)
    volumes = list(volumes)
    if len(volumes) <= config.heldout:
        raise ConfigError(f"pretrain.heldout={config.heldout} не оставляет объёмов для обучения "
                          f"(всего {len(volumes)})")
    split = len(volumes) - config.heldout
    train, heldout = volumes[:split], volumes[split:]
    sampler = PatchSampler(train, network.config.patch_size, config.augment)
    trainer = Pretrainer(network, sampler, config, out_dir)
    if resume:
        trainer.resume()
    losses = trainer.run()
    final = trainer.save(FINAL_CHECKPOINT)
    evaluation = None
    if heldout:
        evaluation = evaluate_reconstruction(network, heldout, trainer.ratio_spec, config.seed)
        logger.info(f"Отложенные объёмы: masked MSE {evaluation['masked_mse']:.5f}, "
                    f"mean-predictor {evaluation['mean_predictor_mse']:.5f}")
    if plots:
        plot_loss_curve(trainer.log_path, out_dir / 'loss.png')
        preview = reconstruct_preview(network, (heldout or train)[0], trainer.ratio_spec, config.seed)
        plot_reconstruction(*preview, out_dir / 'reconstruction.png')
    return PretrainResult(final, trainer.log_path, losses, evaluation)
