"""
Дообучение на сегментацию по фазам: необязательный разогрев только
декодера, необязательный разогрев всей сети, основная фаза с poly LR,
заморозка компонентов и политика stem для многоканального входа.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from BrainMAE.exceptions import CheckpointError, ConfigError, DatasetError, ScheduleError
from Engine.checkpoint import Checkpoint, load_checkpoint, load_into, restore_optimizer, save_checkpoint
from Engine.losses import dice_ce_loss, dice_ce_loss_backward
from Engine.network import (
    COMPONENTS,
    STEM_POLICIES,
    STEM_WEIGHT,
    Network,
    NetworkConfig,
    adapt_stem,
    apply_stem,
    build_network,
    set_frozen,
    transfer_weights,
)
from Engine.pretrain import step_rng
from Engine.sparse_ops import Sparsification
from Engine.tensor_core import LRLaw, OptimizerState, lr_at, sgd_step
from Evaluation.metrics import DEFAULT_TOLERANCE_MM, dsc, evaluate_case
from Evaluation.plots import plot_loss_curve, plot_validation_curve
from Volumes.datasets import SegCase, SegSampler, crop_case
from Volumes.transforms import AugmentParams


logger = logging.getLogger(__name__)


WARMUP_STEPS = 12_500
VALIDATE_EVERY = 2_500
PEAK_LRS = (1e-2, 1e-3, 1e-4)
FINETUNE_LENGTHS = (25_000, 37_500, 50_000, 75_000, 150_000, 275_000)
LOW_DATA_SIZES = (10, 20, 30, 40, 'all')

DECODER_SET = frozenset({'decoder', 'seg_head'})
FULL_SET = frozenset({'stem', 'encoder', 'decoder', 'seg_head'})

TRAIN_LOG = 'train_log.tsv'
VAL_LOG = 'val_log.tsv'
FINAL_CHECKPOINT = 'final.s3dc'
LATEST_CHECKPOINT = 'latest.s3dc'


@dataclass(frozen=True)
class ScheduleRow:
    """
    Описание схемы дообучения в терминах переноса весов и фаз.

    Args:
        transfer (str): none / encoder_only / encoder_and_decoder.
        warmup1 (Optional[str]): Первый разогрев: 'decoder' или None.
        warmup2 (Optional[str]): Второй разогрев: 'decoder', 'all' или None.
        train_stage (str): Что обучается в основной фазе: 'all' или 'decoder'.
        peak_lr (float): Максимальный learning rate.
    """

    transfer: str
    warmup1: Optional[str] = None
    warmup2: Optional[str] = None
    train_stage: str = 'all'
    peak_lr: float = 1e-3


SCHEDULE_ROWS: Dict[str, ScheduleRow] = {
    'scratch': ScheduleRow('none', peak_lr=1e-2),
    'all_1e-2': ScheduleRow('encoder_and_decoder', peak_lr=1e-2),
    'all_1e-3': ScheduleRow('encoder_and_decoder', peak_lr=1e-3),
    'all_warmup_1e-2': ScheduleRow('encoder_and_decoder', warmup2='all', peak_lr=1e-2),
    'all_warmup_1e-3': ScheduleRow('encoder_and_decoder', warmup2='all', peak_lr=1e-3),
    'all_warmup_1e-4': ScheduleRow('encoder_and_decoder', warmup2='all', peak_lr=1e-4),
    'encoder_1e-2': ScheduleRow('encoder_only', peak_lr=1e-2),
    'encoder_1e-3': ScheduleRow('encoder_only', peak_lr=1e-3),
    'encoder_frozen_1e-2': ScheduleRow('encoder_only', warmup2='decoder', train_stage='decoder', peak_lr=1e-2),
    'encoder_frozen_1e-3': ScheduleRow('encoder_only', warmup2='decoder', train_stage='decoder', peak_lr=1e-3),
    'encoder_double_warmup_1e-2': ScheduleRow('encoder_only', warmup1='decoder', warmup2='all', peak_lr=1e-2),
    'encoder_double_warmup_1e-3': ScheduleRow('encoder_only', warmup1='decoder', warmup2='all', peak_lr=1e-3),
    'encoder_double_warmup_1e-4': ScheduleRow('encoder_only', warmup1='decoder', warmup2='all', peak_lr=1e-4),
}
SCHEDULE_ROWS['default'] = SCHEDULE_ROWS['encoder_double_warmup_1e-3']


@dataclass(frozen=True)
class StemPolicy:
    """
    Инициализация stem (replicate_scaled / random) и его заморозка на
    фазах, где обучается только декодер.
    """

    init: str = 'replicate_scaled'
    freeze_during_decoder_warmup: bool = True

    def __post_init__(self):
        if self.init not in STEM_POLICIES:
            raise ConfigError(f"finetune.stem_init: неизвестная политика {self.init}")


@dataclass(frozen=True)
class Phase:
    name: str
    start: int
    steps: int
    trainable: FrozenSet[str]
    law: LRLaw

    @property
    def stop(self) -> int:
        return self.start + self.steps


@dataclass(frozen=True)
class FinetuneSchedule:
    transfer: str
    phases: Tuple[Phase, ...]
    peak_lr: float
    total_steps: int

    def phase_at(self, step: int) -> Tuple[Phase, int]:
        if not 0 <= step < self.total_steps:
            raise ScheduleError(f"Шаг {step} вне расписания [0, {self.total_steps})")
        for phase in self.phases:
            if step < phase.stop:
                return phase, step - phase.start
        raise ScheduleError(f"Шаг {step} не покрыт фазами")

    def lr(self, step: int) -> float:
        phase, local = self.phase_at(step)
        return lr_at(phase.law, local)

    def frozen(self, step: int) -> FrozenSet[str]:
        phase, _ = self.phase_at(step)
        return frozenset(COMPONENTS) - phase.trainable


def _trainable(kind: str, stem_policy: StemPolicy) -> FrozenSet[str]:
    if kind == 'all':
        return FULL_SET
    if stem_policy.freeze_during_decoder_warmup:
        return DECODER_SET
    return DECODER_SET | {'stem'}


def build_schedule(row: Union[str, ScheduleRow], total_steps: int, warmup_steps: int = WARMUP_STEPS,
                   stem_policy: StemPolicy = StemPolicy(), peak_lr: Optional[float] = None) -> FinetuneSchedule:
    """
    Строит расписание фаз по описанию схемы.

    Разогревы -- linear_warmup до peak_lr длиной warmup_steps; основная
    фаза -- poly от peak_lr на оставшиеся шаги.

    Args:
        row (str | ScheduleRow): Имя из SCHEDULE_ROWS или описание.
        total_steps (int): Общее число шагов.
        warmup_steps (int): Длина каждого разогрева.
        stem_policy (StemPolicy): Политика stem (влияет на наборы "только декодер").
        peak_lr (Optional[float]): Переопределение максимального LR.

    Returns:
        FinetuneSchedule: Расписание.
    """

    if isinstance(row, str):
        if row not in SCHEDULE_ROWS:
            raise ScheduleError(f"Неизвестная схема дообучения: {row}")
        row = SCHEDULE_ROWS[row]
    peak = row.peak_lr if peak_lr is None else float(peak_lr)
    if row.transfer not in ('none', 'encoder_only', 'encoder_and_decoder'):
        raise ScheduleError(f"Неизвестная политика переноса: {row.transfer}")
    if row.warmup1 not in (None, 'decoder'):
        raise ScheduleError(f"Первый разогрев может быть только 'decoder', получено {row.warmup1}")
    if row.warmup2 not in (None, 'decoder', 'all') or row.train_stage not in ('all', 'decoder'):
        raise ScheduleError(f"Некорректные фазы: warmup2={row.warmup2}, train_stage={row.train_stage}")
    decoder_only = 'decoder' in (row.warmup1, row.warmup2, row.train_stage)
    if decoder_only and row.transfer == 'none':
        raise ScheduleError("Разогрев/обучение только декодера требует перенесённого энкодера")
    plan = []
    if row.warmup1:
        plan.append(('decoder_warmup', row.warmup1))
    if row.warmup2:
        plan.append(('full_warmup' if row.warmup2 == 'all' else 'decoder_warmup_2', row.warmup2))
    main_steps = total_steps - warmup_steps * len(plan)
    if main_steps < 1:
        raise ScheduleError(f"Бюджет {total_steps} шагов не покрывает {len(plan)} разогрева по {warmup_steps}")
    phases, start = [], 0
    for name, kind in plan:
        phases.append(Phase(name, start, warmup_steps, _trainable(kind, stem_policy),
                            LRLaw('linear_warmup', peak, warmup_steps)))
        start += warmup_steps
    phases.append(Phase('main', start, main_steps, _trainable(row.train_stage, stem_policy),
                        LRLaw('poly', peak, main_steps)))
    return FinetuneSchedule(row.transfer, tuple(phases), peak, total_steps)


# === Data ===

def select_subset(cases: Sequence[SegCase], size: Union[int, str], seed: int) -> List[SegCase]:
    """
    Детерминированное подмножество из size обучающих случаев; 'all'
    возвращает весь набор без изменений.
    """

    cases = list(cases)
    if size == 'all':
        return cases
    size = int(size)
    if not 1 <= size <= len(cases):
        raise DatasetError(f"Нельзя выбрать {size} случаев из {len(cases)}")
    index = np.sort(np.random.default_rng(seed).permutation(len(cases))[:size])
    return [cases[i] for i in index]


# === Prediction and validation ===

def predict_case(network: Network, image: np.ndarray) -> np.ndarray:
    """
    Метки для изображения размера патча (K, *patch).
    """

    logits = network.forward_dense(image[None].astype(np.float32))
    return np.argmax(logits[0], axis=0)


def evaluate_cases(network: Network, cases: Sequence[SegCase], tolerance: float = DEFAULT_TOLERANCE_MM,
                   with_nsd: bool = True) -> pd.DataFrame:
    """
    DSC (и NSD) по классам переднего плана для каждого случая после
    центральной обрезки до размера патча.

    Returns:
        pd.DataFrame: Колонки case, label, dsc, nsd.
    """

    labels = range(1, network.config.out_channels)
    frames = []
    for case in cases:
        image, gt = crop_case(case, network.config.patch_size)
        pred = predict_case(network, image)
        if with_nsd:
            frames.append(evaluate_case(pred, gt, labels, case.case_id, case.spacing, tolerance))
        else:
            frames.append(pd.DataFrame([{'case': case.case_id, 'label': c, 'dsc': dsc(pred, gt, c), 'nsd': np.nan}
                                        for c in labels]))
    return pd.concat(frames, ignore_index=True)


# === Loop ===

@dataclass
class FinetuneConfig:
    """
    Параметры дообучения.

    Args:
        schedule (str): Имя схемы из SCHEDULE_ROWS.
        total_steps (int): Общий бюджет шагов.
        warmup_steps (int): Длина каждого разогрева.
        peak_lr (Optional[float]): Переопределение максимального LR схемы.
        train_cases (Union[int, str]): Размер обучающей выборки или 'all'.
        out_channels (int): Число классов вместе с фоном.
        stem_init (str): replicate_scaled / random.
        freeze_stem_during_decoder_warmup (bool): Замораживать stem на фазах "только декодер".
        validate_every (int): Период валидации, шаги.
    """

    schedule: str = 'default'
    total_steps: int = 250_000
    warmup_steps: int = WARMUP_STEPS
    peak_lr: Optional[float] = None
    batch_size: int = 2
    weight_decay: float = 3e-5
    momentum: float = 0.99
    nesterov: bool = True
    augment: AugmentParams = field(default_factory=AugmentParams)
    seed: int = 0
    train_cases: Union[int, str] = 'all'
    out_channels: int = 2
    stem_init: str = 'replicate_scaled'
    freeze_stem_during_decoder_warmup: bool = True
    validate_every: int = VALIDATE_EVERY
    checkpoint_every: int = 25_000
    tolerance_mm: float = DEFAULT_TOLERANCE_MM

    def __post_init__(self):
        if self.total_steps < 1 or self.batch_size < 1 or self.validate_every < 1 or self.checkpoint_every < 1:
            raise ConfigError("finetune: total_steps, batch_size, validate_every, checkpoint_every должны быть > 0")
        if self.out_channels < 2:
            raise ConfigError(f"finetune.out_channels должен быть >= 2, получено {self.out_channels}")
        if self.train_cases != 'all' and int(self.train_cases) < 1:
            raise ConfigError(f"finetune.train_cases: {self.train_cases}")
        self.stem_policy()

    def stem_policy(self) -> StemPolicy:
        return StemPolicy(self.stem_init, self.freeze_stem_during_decoder_warmup)

    def build_schedule(self) -> FinetuneSchedule:
        return build_schedule(self.schedule, self.total_steps, self.warmup_steps, self.stem_policy(), self.peak_lr)

    def optimizer(self, peak_lr: float) -> OptimizerState:
        return OptimizerState(lr=peak_lr, weight_decay=self.weight_decay, momentum=self.momentum,
                              nesterov=self.nesterov)


FINETUNE_PRESETS: Dict[str, FinetuneConfig] = {
    'base': FinetuneConfig(),
    'large': FinetuneConfig(),
    'toy': FinetuneConfig(total_steps=1_000, warmup_steps=125, validate_every=250, checkpoint_every=500),
}


class StepRecord(NamedTuple):
    step: int
    phase: str
    lr: float
    loss: float


def prepare_network(checkpoint: Optional[Checkpoint], network_config: NetworkConfig, schedule: FinetuneSchedule,
                    in_channels: int, stem_policy: StemPolicy, seed: int) -> Network:
    """
    Строит сеть для дообучения и переносит веса согласно расписанию.

    Архитектура тела сети берётся из чекпоинта (если он есть); меняются
    только число входных каналов и классов. Дообучение идёт плотным
    проходом, поэтому сеть строится без mask-токенов и densification conv.
    """

    base = checkpoint.network_config() if checkpoint is not None else network_config
    config = base.replace(in_channels=in_channels, out_channels=network_config.out_channels, seed=seed,
                          sparsification=Sparsification.BASE.value)
    network = build_network(config)
    if schedule.transfer == 'none':
        if checkpoint is not None:
            logger.warning("Схема без переноса весов: чекпоинт игнорируется")
        return network
    if checkpoint is None:
        raise ConfigError(f"Схема с переносом {schedule.transfer} требует чекпоинт")
    transfer_weights(checkpoint, network, schedule.transfer)
    source_in = checkpoint.tensors[STEM_WEIGHT].shape[1]
    if stem_policy.init == 'random':
        apply_stem(network, adapt_stem(checkpoint, in_channels, 'random', np.random.default_rng([seed, 1])))
    elif source_in != in_channels:
        apply_stem(network, adapt_stem(checkpoint, in_channels, 'replicate_scaled'))
    return network


@dataclass
class FinetuneResult:
    checkpoint: Path
    train_log: Path
    val_log: Path
    history: List[StepRecord]
    validation: pd.DataFrame


class FineTuner:
    """
    Цикл дообучения по фазам с журналами обучения и валидации.
    """

    def __init__(self, network: Network, schedule: FinetuneSchedule, sampler: SegSampler,
                 val_cases: Sequence[SegCase], config: FinetuneConfig, out_dir: Union[str, Path]):
        if not val_cases:
            raise DatasetError("Пустая валидационная выборка")
        self.network = network
        self.schedule = schedule
        self.sampler = sampler
        self.val_cases = list(val_cases)
        self.config = config
        self.out_dir = Path(out_dir)
        self.state = config.optimizer(schedule.peak_lr)
        self.step = 0
        self.history: List[StepRecord] = []
        self.validation_rows: List[dict] = []

    def train_step(self, step: int) -> StepRecord:
        phase, local = self.schedule.phase_at(step)
        lr = lr_at(phase.law, local)
        set_frozen(self.network, frozenset(COMPONENTS) - phase.trainable)
        rng = step_rng(self.config.seed, step)
        images, labels = self.sampler.draw(self.config.batch_size, rng)
        self.network.zero_grad()
        logits = self.network.forward_dense(images)
        loss, cache = dice_ce_loss(logits, labels)
        self.network.backward_dense(dice_ce_loss_backward(cache))
        sgd_step(self.network.parameters.values(), self.state, lr)
        return StepRecord(step + 1, phase.name, lr, loss)

    def validate(self, step: int) -> dict:
        frame = evaluate_cases(self.network, self.val_cases, self.config.tolerance_mm, with_nsd=False)
        per_class = frame.groupby('label')['dsc'].mean()
        row = {'step': step}
        row.update({f"dice_{label}": float(value) for label, value in per_class.items()})
        row['mean_dice'] = float(per_class.mean())
        self.validation_rows.append(row)
        logger.info(f"Валидация на шаге {step}: mean Dice {row['mean_dice']:.4f}")
        return row

    def resume(self) -> int:
        """
        Восстанавливает сеть, момент и номер шага из latest.s3dc; журналы
        обучения и валидации обрезаются до сохранённого шага.

        Returns:
            int: Число уже выполненных шагов.
        """

        path = self.out_dir / LATEST_CHECKPOINT
        checkpoint = load_checkpoint(path)
        metadata = checkpoint.metadata
        if metadata.get('kind') != 'finetune' or metadata.get('seed') != self.config.seed \
                or metadata.get('schedule') != self.config.schedule \
                or metadata.get('total_steps') != self.schedule.total_steps:
            raise CheckpointError(f"{path}: чекпоинт от другого прогона ({metadata})")
        load_into(self.network, checkpoint)
        restore_optimizer(checkpoint, self.state, self.network)
        self.step = checkpoint.step
        self.history = self._truncate_log(self.step)
        val_log = self.out_dir / VAL_LOG
        if val_log.exists():
            frame = pd.read_csv(val_log, sep='\t')
            self.validation_rows = frame[frame['step'] <= self.step].to_dict('records')
            self._write_validation()
        logger.info(f"Возобновляем дообучение с шага {self.step}")
        return self.step

    def _truncate_log(self, step: int) -> List[StepRecord]:
        path = self.out_dir / TRAIN_LOG
        kept, history = ['step\tphase\tlr\tloss'], []
        if path.exists():
            for line in path.read_text(encoding='utf-8').splitlines()[1:]:
                fields = line.split('\t')
                if len(fields) == 4 and int(fields[0]) <= step:
                    kept.append(line)
                    history.append(StepRecord(int(fields[0]), fields[1], float(fields[2]), float(fields[3])))
        path.write_text('\n'.join(kept) + '\n', encoding='utf-8')
        return history

    def run(self) -> List[StepRecord]:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        train_log = self.out_dir / TRAIN_LOG
        if self.step == 0 or not train_log.exists():
            train_log.write_text('step\tphase\tlr\tloss\n', encoding='utf-8')
        logger.info(f"Начинаем дообучение: шаги {self.step + 1}..{self.schedule.total_steps}, фазы "
                    f"{[(p.name, p.steps) for p in self.schedule.phases]}")
        try:
            with open(train_log, 'a', encoding='utf-8') as log:
                for step in range(self.step, self.schedule.total_steps):
                    record = self.train_step(step)
                    self.history.append(record)
                    self.step = record.step
                    log.write(f"{record.step}\t{record.phase}\t{record.lr!r}\t{record.loss!r}\n")
                    if record.step % self.config.validate_every == 0 or record.step == self.schedule.total_steps:
                        log.flush()
                        self.validate(record.step)
                        self._write_validation()
                    if record.step % self.config.checkpoint_every == 0:
                        log.flush()
                        self.save(LATEST_CHECKPOINT, record.step)
        except Exception as e:
            logger.error(f"Ошибка дообучения на шаге {self.step + 1}: {e}", exc_info=True)
            raise
        set_frozen(self.network, ())
        logger.info("Дообучение завершено")
        return self.history

    def _write_validation(self) -> Path:
        path = self.out_dir / VAL_LOG
        pd.DataFrame(self.validation_rows).to_csv(path, sep='\t', index=False, float_format='%.6f')
        return path

    def save(self, name: str, step: int) -> Path:
        metadata = {'kind': 'finetune', 'step': step, 'seed': self.config.seed,
                    'schedule': self.config.schedule, 'transfer': self.schedule.transfer,
                    'total_steps': self.schedule.total_steps}
        return save_checkpoint(self.network, self.out_dir / name, metadata, self.state)


def run_finetune(checkpoint: Optional[Checkpoint], network_config: NetworkConfig, config: FinetuneConfig,
                 train_cases: Sequence[SegCase], val_cases: Sequence[SegCase], out_dir: Union[str, Path],
                 plots: bool = False, resume: bool = False) -> FinetuneResult:
    """
    Полный прогон дообучения.

    Args:
        checkpoint (Optional[Checkpoint]): Предобученный чекпоинт (None -- с нуля).
        network_config (NetworkConfig): Конфигурация сети без чекпоинта; из неё берётся out_channels.
        config (FinetuneConfig): Параметры.
        train_cases (Sequence[SegCase]): Обучающие случаи (до выбора подмножества).
        val_cases (Sequence[SegCase]): Валидационные случаи.
        out_dir (str | Path): Каталог прогона.
        plots (bool): Сохранять графики.
        resume (bool): Продолжить прогон из latest.s3dc в out_dir.

    Returns:
        FinetuneResult: Чекпоинт, журналы, история и таблица валидации.
    """

    if not train_cases:
        raise DatasetError("Пустая обучающая выборка")
    out_dir = Path(out_dir)
    schedule = config.build_schedule()
    subset = select_subset(train_cases, config.train_cases, config.seed)
    in_channels = subset[0].image.shape[0]
    if any(case.image.shape[0] != in_channels for case in list(subset) + list(val_cases)):
        raise DatasetError("Случаи с разным числом каналов в одном наборе")
    network_config = network_config.replace(out_channels=config.out_channels)
    network = prepare_network(checkpoint, network_config, schedule, in_channels, config.stem_policy(), config.seed)
    sampler = SegSampler(subset, network.config.patch_size, config.augment)
    tuner = FineTuner(network, schedule, sampler, val_cases, config, out_dir)
    logger.info(f"Обучающих случаев: {len(subset)} из {len(train_cases)}, схема {config.schedule}")
    if resume:
        tuner.resume()
    tuner.run()
    final = tuner.save(FINAL_CHECKPOINT, schedule.total_steps)
    if plots:
        plot_loss_curve(out_dir / TRAIN_LOG, out_dir / 'loss.png')
        plot_validation_curve(out_dir / VAL_LOG, out_dir / 'val_dice.png')
    return FinetuneResult(final, out_dir / TRAIN_LOG, out_dir / VAL_LOG, tuner.history,
                          pd.DataFrame(tuner.validation_rows))
