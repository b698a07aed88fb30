"""
Точка входа командной строки: filter, synth, pretrain, finetune,
evaluate, rank, gradcheck.
"""

import argparse
import logging
import sys
from datetime import datetime
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd

from BrainMAE import settings
from BrainMAE.config import RunConfig, build_run_config
from BrainMAE.exceptions import BrainMAEError, ConfigError, DatasetError
from Engine.checkpoint import load_checkpoint, restore_network
from Engine.finetune import evaluate_cases, run_finetune
from Engine.gradcheck import run_kernel_suite
from Engine.network import build_network
from Engine.pretrain import run_pretraining
from Evaluation.metrics import scores_long_format
from Evaluation.plots import plot_rank_distribution
from Evaluation.ranking import ScoreTable, bootstrap_ranks, read_scores, write_rank_summary
from Volumes.curation import filter_dataset, read_manifest, write_filter_report
from Volumes.datasets import load_pretraining_volumes, load_seg_cases
from Volumes.synth import generate_dataset


logger = logging.getLogger(__name__)


COMMANDS = ('filter', 'synth', 'pretrain', 'finetune', 'evaluate', 'rank', 'gradcheck')
RESUMABLE = ('pretrain', 'finetune')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='manage.py', description="Разреженное 3D MAE-предобучение и дообучение")
    subparsers = parser.add_subparsers(dest='command', required=True)
    for command in COMMANDS:
        sub = subparsers.add_parser(command)
        sub.add_argument('--config', type=str, help="YAML-файл конфигурации")
        sub.add_argument('--seed', type=int, help="Сид прогона")
        sub.add_argument('--out', type=str, help="Каталог результатов (должен быть новым)")
        sub.add_argument('--preset', type=str, help="Пресет масштаба: toy / base / large (S3D-B, S3D-L)")
        sub.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                         help="Переопределение по точечному пути, значение -- скаляр YAML")
        if command in RESUMABLE:
            sub.add_argument('--resume', action='store_true', help="Продолжить прогон из --out")
    return parser


def prepare_out_dir(command: str, out: Optional[str], resume: bool = False) -> Path:
    """
    Каталог результатов: новый (или пустой), кроме возобновления.
    """

    if out is None:
        if resume:
            raise ConfigError("--resume требует --out с каталогом прерванного прогона")
        out = Path(settings.DEFAULT_OUT_DIR) / f"{command}-{datetime.now():%Y%m%d-%H%M%S-%f}"
    out_dir = Path(out)
    if resume:
        if not out_dir.is_dir():
            raise FileNotFoundError(f"Каталог прогона для --resume не найден: {out_dir}")
        return out_dir
    if out_dir.exists() and any(out_dir.iterdir()):
        raise ConfigError(f"--out {out_dir}: каталог уже существует и не пуст")
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def _require(value: Optional[str], key: str) -> str:
    if not value:
        raise ConfigError(f"{key}: путь не задан")
    return value


# === Commands ===

def cmd_filter(config: RunConfig, out_dir: Path) -> int:
    records = read_manifest(_require(config.data.manifest, 'data.manifest'))
    result = filter_dataset(records, config.filter.rules())
    write_filter_report(result, out_dir)
    reasons = pd.Series([reason for _, reason in result.discarded], dtype=object).value_counts()
    print(f"kept={len(result.kept)} discarded={len(result.discarded)}")
    for reason, count in reasons.items():
        print(f"  {reason}: {count}")
    return 0


def cmd_synth(config: RunConfig, out_dir: Path) -> int:
    synth = config.synth
    manifest, records = generate_dataset(synth.kind, synth.count, synth.shape, config.seed, out_dir, synth.classes)
    print(f"{synth.kind}: {len(records)} volumes -> {manifest}")
    return 0


def cmd_pretrain(config: RunConfig, out_dir: Path, resume: bool = False) -> int:
    if config.network.in_channels != 1:
        raise ConfigError(f"network.in_channels: предобучение одноканальное, получено {config.network.in_channels}")
    records = read_manifest(_require(config.data.manifest, 'data.manifest'))
    volumes = load_pretraining_volumes(records, config.data.target_spacing)
    network = build_network(config.network)
    result = run_pretraining(network, volumes, config.pretrain, out_dir, resume=resume,
                             plots=settings.PLOTS_ENABLED)
    print(f"checkpoint: {result.checkpoint}")
    print(f"final loss: {result.losses[-1]!r}" if result.losses else "final loss: n/a")
    if result.evaluation:
        for key, value in result.evaluation.items():
            print(f"{key}: {value!r}")
    return 0


def _split_validation(config: RunConfig, cases: List) -> tuple:
    if config.data.val_manifest:
        return cases, load_seg_cases(read_manifest(config.data.val_manifest), config.data.target_spacing)
    if len(cases) <= config.data.val_count:
        raise DatasetError(f"data.val_count={config.data.val_count} не оставляет обучающих случаев "
                           f"(всего {len(cases)})")
    return cases[:-config.data.val_count], cases[-config.data.val_count:]


def cmd_finetune(config: RunConfig, out_dir: Path, resume: bool = False) -> int:
    cases = load_seg_cases(read_manifest(_require(config.data.train_manifest, 'data.train_manifest')),
                           config.data.target_spacing)
    train, val = _split_validation(config, cases)
    checkpoint = load_checkpoint(config.data.checkpoint) if config.data.checkpoint else None
    result = run_finetune(checkpoint, config.network, config.finetune, train, val, out_dir,
                          plots=settings.PLOTS_ENABLED, resume=resume)
    print(f"checkpoint: {result.checkpoint}")
    if not result.validation.empty:
        print(f"mean_dice: {result.validation['mean_dice'].iloc[-1]:.6f}")
    return 0


def cmd_evaluate(config: RunConfig, out_dir: Path) -> int:
    network = restore_network(load_checkpoint(_require(config.data.checkpoint, 'data.checkpoint')))
    cases = load_seg_cases(read_manifest(_require(config.data.manifest, 'data.manifest')),
                           config.data.target_spacing)
    frame = evaluate_cases(network, cases, config.evaluate.tolerance_mm, config.evaluate.with_nsd)
    frame.to_csv(out_dir / 'metrics.tsv', sep='\t', index=False, float_format='%.6f')
    scores = scores_long_format(frame, config.evaluate.method, config.evaluate.dataset)
    scores.to_csv(out_dir / 'scores.tsv', sep='\t', index=False, float_format='%.6f')
    summary = f"cases={frame['case'].nunique()} dsc={frame['dsc'].mean():.6f}"
    if config.evaluate.with_nsd:
        summary += f" nsd={frame['nsd'].mean():.6f}"
    print(summary)
    return 0


def cmd_rank(config: RunConfig, out_dir: Path) -> int:
    if not config.data.scores:
        raise ConfigError("data.scores: не задано ни одной таблицы оценок")
    table = ScoreTable.from_frame(read_scores(config.data.scores), config.rank.metric)
    result = bootstrap_ranks(table, config.rank.n_boot, np.random.default_rng(config.seed),
                             config.rank.aggregation, config.rank.higher_is_better)
    write_rank_summary(result, out_dir)
    if settings.PLOTS_ENABLED:
        plot_rank_distribution(result.replicates, out_dir / 'rank_distribution.png')
    print(result.summary.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    return 0


def cmd_gradcheck(config: RunConfig, out_dir: Path) -> int:
    table = run_kernel_suite(config.gradcheck.seeds, config.gradcheck.tolerance, config.gradcheck.kernels)
    table.to_csv(out_dir / 'gradcheck.tsv', sep='\t', index=False)
    for row in table.itertuples(index=False):
        print(f"{row.kernel:24s} {row.max_rel_error:.3e} {'ok' if row.passed else 'FAIL'}")
    if not table['passed'].all():
        logger.error(f"gradcheck: не прошли {', '.join(table.loc[~table['passed'], 'kernel'])}")
        return 1
    return 0


HANDLERS = {
    'filter': cmd_filter,
    'pretrain': cmd_pretrain,
    'synth': cmd_synth,
    'finetune': cmd_finetune,
    'evaluate': cmd_evaluate,
    'rank': cmd_rank,
    'gradcheck': cmd_gradcheck,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Разбирает аргументы, собирает конфигурацию и запускает подкоманду.

    Returns:
        int: 0 -- успех, 2 -- ошибка проекта (BrainMAEError), 1 -- прочие ошибки.
    """

    args = build_parser().parse_args(argv)
    settings.configure_logging()
    try:
        resume = getattr(args, 'resume', False)
        config = build_run_config(args.command, args.config, args.preset, args.seed, args.overrides)
        out_dir = prepare_out_dir(args.command, args.out, resume)
        config.write(out_dir)
        logger.info(f"Запуск {args.command}: пресет {config.preset}, сид {config.seed}, каталог {out_dir}")
        if args.command in RESUMABLE:
            return HANDLERS[args.command](config, out_dir, resume)
        return HANDLERS[args.command](config, out_dir)
    except BrainMAEError as e:
        logger.debug("Ошибка проекта", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        logger.error(f"Критическая ошибка в main: {str(e)}", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
