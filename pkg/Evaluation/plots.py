import logging
from pathlib import Path
from typing import Optional, Union

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd


logger = logging.getLogger(__name__)


def moving_average(values: np.ndarray, window: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if window <= 1 or values.size < window:
        return values
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode='valid')


def plot_loss_curve(log_path: Union[str, Path], output_file: Union[str, Path], window: int = 500) -> Path:
    """
    Строит график потерь и learning rate по журналу step/lr/loss.

    Args:
        log_path (str | Path): Журнал (TSV с заголовком).
        output_file (str | Path): Путь PNG/SVG.
        window (int): Окно скользящего среднего.

    Returns:
        Path: Путь сохранённого графика.
    """

    frame = pd.read_csv(log_path, sep='\t')
    output_file = Path(output_file)
    try:
        fig, ax_loss = plt.subplots(figsize=(8, 4))
        ax_loss.plot(frame['step'], frame['loss'], color='lightgray', linewidth=0.8, label='loss')
        smooth = moving_average(frame['loss'].to_numpy(), min(window, max(len(frame) // 10, 1)))
        if smooth.size != len(frame):
            ax_loss.plot(frame['step'].to_numpy()[len(frame) - smooth.size:], smooth, color='tab:blue',
                         label='moving average')
        ax_loss.set_xlabel('step')
        ax_loss.set_ylabel('loss')
        ax_lr = ax_loss.twinx()
        ax_lr.plot(frame['step'], frame['lr'], color='tab:orange', linewidth=0.8)
        ax_lr.set_ylabel('lr')
        ax_loss.legend(loc='upper right')
        fig.tight_layout()
        fig.savefig(output_file, dpi=150)
        plt.close(fig)
        logger.info(f"Сохранён график потерь: {output_file}")
    except Exception as e:
        logger.error(f"Ошибка построения графика потерь: {e}", exc_info=True)
        raise
    return output_file


def _normalize(slice_data: np.ndarray) -> np.ndarray:
    min_val, max_val = np.min(slice_data), np.max(slice_data)
    if max_val != min_val:
        return (slice_data - min_val) / (max_val - min_val)
    return np.zeros_like(slice_data)


def plot_reconstruction(original: np.ndarray, masked: np.ndarray, reconstruction: np.ndarray,
                        output_file: Union[str, Path], slice_index: Optional[int] = None) -> Path:
    """
    Сохраняет центральный срез: исход, вход с маской и реконструкция.

    Args:
        original (np.ndarray): Патч (D, H, W).
        masked (np.ndarray): Патч с обнулёнными замаскированными блоками.
        reconstruction (np.ndarray): Реконструкция (D, H, W).
        output_file (str | Path): Путь PNG.
        slice_index (Optional[int]): Номер среза по оси z (по умолчанию центральный).

    Returns:
        Path: Путь сохранённого изображения.
    """

    output_file = Path(output_file)
    index = original.shape[0] // 2 if slice_index is None else slice_index
    if not 0 <= index < original.shape[0]:
        logger.warning(f"Срез {index} превышает размерность {original.shape[0]}")
        index = original.shape[0] // 2
    fig, axes = plt.subplots(1, 3, figsize=(9, 3))
    for ax, data, title in zip(axes, (original, masked, reconstruction), ('input', 'masked', 'reconstruction')):
        ax.imshow(_normalize(data[index]), cmap='gray', origin='lower')
        ax.set_title(title)
        ax.axis('off')
    fig.savefig(output_file, bbox_inches='tight', pad_inches=0, dpi=150)
    plt.close(fig)
    logger.info(f"Сохранён срез реконструкции: {output_file}")
    return output_file


def plot_validation_curve(val_log: Union[str, Path], output_file: Union[str, Path]) -> Path:
    frame = pd.read_csv(val_log, sep='\t')
    output_file = Path(output_file)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(frame['step'], frame['mean_dice'], marker='o')
    ax.set_xlabel('step')
    ax.set_ylabel('mean Dice')
    ax.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(output_file, dpi=150)
    plt.close(fig)
    return output_file


def plot_rank_distribution(replicates: pd.DataFrame, output_file: Union[str, Path]) -> Path:
    """
    Box plot распределений рангов методов по бутстрап-репликам
    (колонки: replicate, method, rank).
    """

    output_file = Path(output_file)
    methods = sorted(replicates['method'].unique(), key=lambda m: replicates.loc[replicates['method'] == m, 'rank'].mean())
    data = [replicates.loc[replicates['method'] == m, 'rank'].to_numpy() for m in methods]
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(methods)), 4))
    ax.boxplot(data)
    ax.set_xticks(range(1, len(methods) + 1))
    ax.set_xticklabels(methods, rotation=30, ha='right')
    ax.set_ylabel('rank')
    ax.invert_yaxis()
    fig.tight_layout()
    fig.savefig(output_file, dpi=150)
    plt.close(fig)
    logger.info(f"Сохранён график рангов: {output_file}")
    return output_file
