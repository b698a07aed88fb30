"""
Плотные тензоры формы (B, C, D, H, W) и дифференцируемые ядра:
3D-свёртка, транспонированная свёртка, instance norm, leaky ReLU,
а также SGD с моментом Нестерова и законы изменения learning rate.

Каждое ядро -- пара функций: прямой проход возвращает (выход, кэш),
обратный проход принимает градиент выхода и кэш. Ядра сохраняют
dtype входа (float32 при обучении, float64 внутри gradcheck).
"""

from dataclasses import dataclass, field
from typing import Dict, Iterable, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from BrainMAE.exceptions import NonFiniteError, ScheduleError, ShapeMismatchError


Triple = Tuple[int, int, int]

DEFAULT_SLOPE = 0.01
DEFAULT_EPS = 1e-5
POLY_EXPONENT = 0.9


def as_triple(value) -> Triple:
    """
    Приводит скаляр или последовательность из трёх чисел к кортежу (z, y, x).

    Args:
        value (int | Sequence[int]): Значение по всем осям или по каждой оси.

    Returns:
        Triple: Кортеж из трёх целых.
    """

    if isinstance(value, (int, np.integer)):
        return (int(value),) * 3
    items = tuple(int(v) for v in value)
    if len(items) != 3:
        raise ShapeMismatchError(f"Ожидалось три значения по осям, получено {items}")
    return items


def check_tensor5(x: np.ndarray, name: str) -> None:
    if x.ndim != 5:
        raise ShapeMismatchError(f"{name}: ожидался тензор (B, C, D, H, W), форма {x.shape}")


def ensure_finite(x: np.ndarray, name: str) -> np.ndarray:
    """
    Проверяет, что в тензоре нет NaN/Inf.

    Args:
        x (np.ndarray): Проверяемый массив.
        name (str): Имя для сообщения об ошибке.

    Returns:
        np.ndarray: Тот же массив.
    """

    if not np.isfinite(x).all():
        bad = int(x.size - np.count_nonzero(np.isfinite(x)))
        raise NonFiniteError(f"{name}: {bad} неконечных значений из {x.size}")
    return x


@dataclass(frozen=True)
class ConvSpec:
    """
    Геометрия свёртки. Паддинг по умолчанию -- "same": p = (k - 1) // 2,
    тот же закон используется и для свёрток с шагом.

    Для транспонированной свёртки in_channels/out_channels относятся к
    самому транспонированному слою, веса имеют форму (in, out, kz, ky, kx).
    """

    in_channels: int
    out_channels: int
    kernel: Triple = (3, 3, 3)
    stride: Triple = (1, 1, 1)
    padding: Optional[Triple] = None
    has_bias: bool = True

    def __post_init__(self):
        kernel = as_triple(self.kernel)
        stride = as_triple(self.stride)
        padding = tuple((k - 1) // 2 for k in kernel) if self.padding is None else as_triple(self.padding)
        if min(kernel) < 1 or min(stride) < 1 or min(padding) < 0:
            raise ShapeMismatchError(f"Некорректная геометрия свёртки: k={kernel}, s={stride}, p={padding}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeMismatchError(f"Число каналов должно быть положительным: {self.in_channels}->{self.out_channels}")
        object.__setattr__(self, 'kernel', kernel)
        object.__setattr__(self, 'stride', stride)
        object.__setattr__(self, 'padding', padding)

    @property
    def weight_shape(self) -> Tuple[int, ...]:
        return (self.out_channels, self.in_channels) + self.kernel

    @property
    def transpose_weight_shape(self) -> Tuple[int, ...]:
        return (self.in_channels, self.out_channels) + self.kernel

    def output_shape(self, spatial: Sequence[int]) -> Triple:
        out = tuple(
            (n + 2 * p - k) // s + 1
            for n, k, s, p in zip(spatial, self.kernel, self.stride, self.padding)
        )
        if min(out) < 1:
            raise ShapeMismatchError(f"Пустой выход свёртки для входа {tuple(spatial)}: {out}")
        return out

    def transposed_output_shape(self, spatial: Sequence[int]) -> Triple:
        out = tuple(
            (n - 1) * s - 2 * p + k
            for n, k, s, p in zip(spatial, self.kernel, self.stride, self.padding)
        )
        if min(out) < 1:
            raise ShapeMismatchError(f"Пустой выход транспонированной свёртки для {tuple(spatial)}: {out}")
        return out


@dataclass(eq=False)
class Parameter:
    """
    Обучаемый тензор сети с тегом компонента.

    Args:
        name (str): Уникальное имя в сети.
        data (np.ndarray): Значения.
        component (str): stem / encoder / decoder / seg_head / recon_head / mask_token / densify.
        decay (bool): Участвует ли в weight decay.
        frozen (bool): Заморожен ли (градиент не копится, шаг оптимизатора его пропускает).
    """

    name: str
    data: np.ndarray
    component: str
    decay: bool = True
    frozen: bool = False
    grad: Optional[np.ndarray] = None

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, grad: np.ndarray) -> None:
        if self.frozen:
            return
        if grad.shape != self.data.shape:
            raise ShapeMismatchError(f"{self.name}: градиент {grad.shape} != параметр {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype, copy=True)
        else:
            self.grad += grad


# === Convolution ===

class ConvCache(NamedTuple):
    windows: np.ndarray
    weights: np.ndarray
    padded_shape: Tuple[int, ...]
    spec: ConvSpec


def _pad(x: np.ndarray, padding: Triple) -> np.ndarray:
    if not any(padding):
        return x
    pz, py, px = padding
    return np.pad(x, ((0, 0), (0, 0), (pz, pz), (py, py), (px, px)))


def _unpad(x: np.ndarray, padding: Triple) -> np.ndarray:
    if not any(padding):
        return x
    pz, py, px = padding
    d, h, w = x.shape[2:]
    return np.ascontiguousarray(x[:, :, pz:d - pz, py:h - py, px:w - px])


def _windows(xp: np.ndarray, kernel: Triple, stride: Triple, out_spatial: Triple) -> np.ndarray:
    # (B, C, od, oh, ow, kz, ky, kx) -- представление без копирования
    win = sliding_window_view(xp, kernel, axis=(2, 3, 4))
    (sz, sy, sx), (od, oh, ow) = stride, out_spatial
    return win[:, :, :od * sz:sz, :oh * sy:sy, :ow * sx:sx]


def _contract(windows: np.ndarray, weights: np.ndarray) -> np.ndarray:
    out = np.tensordot(windows, weights, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    return np.ascontiguousarray(np.moveaxis(out, -1, 1))


def _scatter(cols: np.ndarray, padded_shape: Tuple[int, ...], stride: Triple) -> np.ndarray:
    """
    col2im: суммирует вклады окон (B, C, od, oh, ow, kz, ky, kx)
    в массив формы padded_shape.
    """

    out = np.zeros(padded_shape, dtype=cols.dtype)
    od, oh, ow, kz, ky, kx = cols.shape[2:]
    sz, sy, sx = stride
    for i in range(kz):
        for j in range(ky):
            for k in range(kx):
                out[:, :, i:i + sz * od:sz, j:j + sy * oh:sy, k:k + sx * ow:sx] += cols[..., i, j, k]
    return out


def conv3d(x: np.ndarray, weights: np.ndarray, bias: Optional[np.ndarray],
           spec: ConvSpec) -> Tuple[np.ndarray, ConvCache]:
    """
    Прямая 3D-свёртка с нулевым паддингом.

    Args:
        x (np.ndarray): Вход (B, C_in, D, H, W).
        weights (np.ndarray): Ядро (C_out, C_in, kz, ky, kx).
        bias (Optional[np.ndarray]): Смещение (C_out,) или None.
        spec (ConvSpec): Геометрия свёртки.

    Returns:
        Tuple[np.ndarray, ConvCache]: Выход (B, C_out, ...) и кэш для обратного прохода.
    """

    check_tensor5(x, 'conv3d.input')
    if x.shape[1] != spec.in_channels or weights.shape != spec.weight_shape:
        raise ShapeMismatchError(
            f"conv3d: вход {x.shape}, веса {weights.shape}, ожидались C_in={spec.in_channels} "
            f"и веса {spec.weight_shape}")
    out_spatial = spec.output_shape(x.shape[2:])
    xp = _pad(x, spec.padding)
    windows = _windows(xp, spec.kernel, spec.stride, out_spatial)
    y = _contract(windows, weights)
    if bias is not None:
        if bias.shape != (spec.out_channels,):
            raise ShapeMismatchError(f"conv3d: смещение {bias.shape}, ожидалось ({spec.out_channels},)")
        y += bias[None, :, None, None, None]
    ensure_finite(y, 'conv3d.output')
    return y, ConvCache(windows, weights, xp.shape, spec)


def conv3d_backward(dy: np.ndarray, cache: ConvCache) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Точные градиенты conv3d.

    Args:
        dy (np.ndarray): Градиент выхода.
        cache (ConvCache): Кэш прямого прохода.

    Returns:
        Tuple: (градиент входа, градиент весов, градиент смещения).
    """

    windows, weights, padded_shape, spec = cache
    if dy.shape[1] != spec.out_channels or dy.shape[2:] != windows.shape[2:5]:
        raise ShapeMismatchError(f"conv3d_backward: градиент {dy.shape} не совпадает с выходом")
    db = dy.sum(axis=(0, 2, 3, 4))
    dw = np.tensordot(dy, windows, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
    cols = np.moveaxis(np.tensordot(dy, weights, axes=([1], [0])), 4, 1)
    dx = _unpad(_scatter(cols, padded_shape, spec.stride), spec.padding)
    return dx, dw.astype(weights.dtype, copy=False), db


class ConvTransposeCache(NamedTuple):
    x: np.ndarray
    weights: np.ndarray
    spec: ConvSpec


def conv3d_transpose(x: np.ndarray, weights: np.ndarray, spec: ConvSpec,
                     bias: Optional[np.ndarray] = None) -> Tuple[np.ndarray, ConvTransposeCache]:
    """
    Транспонированная свёртка: сопряжённый к conv3d оператор с той же
    геометрией (градиент по входу conv3d, применённый к x).

    Args:
        x (np.ndarray): Вход (B, C_in, d, h, w).
        weights (np.ndarray): Веса (C_in, C_out, kz, ky, kx).
        spec (ConvSpec): Геометрия; stride совпадает со stride ступени энкодера.
        bias (Optional[np.ndarray]): Смещение (C_out,).

    Returns:
        Tuple[np.ndarray, ConvTransposeCache]: Выход (B, C_out, D, H, W) и кэш.
    """

    check_tensor5(x, 'conv3d_transpose.input')
    if x.shape[1] != spec.in_channels or weights.shape != spec.transpose_weight_shape:
        raise ShapeMismatchError(
            f"conv3d_transpose: вход {x.shape}, веса {weights.shape}, ожидались "
            f"C_in={spec.in_channels} и веса {spec.transpose_weight_shape}")
    out_spatial = spec.transposed_output_shape(x.shape[2:])
    padded = (x.shape[0], spec.out_channels) + tuple(n + 2 * p for n, p in zip(out_spatial, spec.padding))
    cols = np.moveaxis(np.tensordot(x, weights, axes=([1], [0])), 4, 1)
    y = _unpad(_scatter(cols, padded, spec.stride), spec.padding)
    if bias is not None:
        y += bias[None, :, None, None, None]
    ensure_finite(y, 'conv3d_transpose.output')
    return y, ConvTransposeCache(x, weights, spec)


def conv3d_transpose_backward(dy: np.ndarray, cache: ConvTransposeCache
                              ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    x, weights, spec = cache
    dyp = _pad(dy, spec.padding)
    windows = _windows(dyp, spec.kernel, spec.stride, x.shape[2:])
    if windows.shape[2:5] != x.shape[2:]:
        raise ShapeMismatchError(f"conv3d_transpose_backward: градиент {dy.shape} не совпадает с выходом")
    dx = _contract(windows, weights)
    dw = np.tensordot(x, windows, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
    db = dy.sum(axis=(0, 2, 3, 4))
    return dx, dw.astype(weights.dtype, copy=False), db


# === Normalization and activation ===

class NormCache(NamedTuple):
    xhat: np.ndarray
    inv_std: np.ndarray
    gain: np.ndarray


def _channel(v: np.ndarray) -> np.ndarray:
    return v[None, :, None, None, None]


def instance_norm(x: np.ndarray, gain: np.ndarray, shift: np.ndarray,
                  eps: float = DEFAULT_EPS) -> Tuple[np.ndarray, NormCache]:
    """
    Instance normalization по всем вокселям каждой пары (batch, channel).

    Args:
        x (np.ndarray): Вход (B, C, D, H, W).
        gain (np.ndarray): Масштаб (C,).
        shift (np.ndarray): Сдвиг (C,).
        eps (float): Стабилизатор дисперсии, > 0.

    Returns:
        Tuple[np.ndarray, NormCache]: Нормированный выход и кэш.
    """

    check_tensor5(x, 'instance_norm.input')
    if eps <= 0:
        raise ValueError(f"instance_norm: eps должен быть > 0, получено {eps}")
    if gain.shape != (x.shape[1],) or shift.shape != (x.shape[1],):
        raise ShapeMismatchError(f"instance_norm: gain {gain.shape}/shift {shift.shape} для {x.shape[1]} каналов")
    mean = x.mean(axis=(2, 3, 4), keepdims=True)
    centered = x - mean
    var = np.mean(centered * centered, axis=(2, 3, 4), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    y = _channel(gain) * xhat + _channel(shift)
    ensure_finite(y, 'instance_norm.output')
    return y, NormCache(xhat, inv_std, gain)


def instance_norm_backward(dy: np.ndarray, cache: NormCache) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    xhat, inv_std, gain = cache
    n = xhat.shape[2] * xhat.shape[3] * xhat.shape[4]
    dgain = np.sum(dy * xhat, axis=(0, 2, 3, 4))
    dshift = dy.sum(axis=(0, 2, 3, 4))
    dxhat = dy * _channel(gain)
    mean_dxhat = dxhat.sum(axis=(2, 3, 4), keepdims=True) / n
    mean_dxhat_xhat = np.sum(dxhat * xhat, axis=(2, 3, 4), keepdims=True) / n
    dx = inv_std * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
    return dx, dgain, dshift


def leaky_relu(x: np.ndarray, slope: float = DEFAULT_SLOPE) -> Tuple[np.ndarray, np.ndarray]:
    positive = x > 0
    y = np.where(positive, x, x * slope).astype(x.dtype, copy=False)
    return y, positive


def leaky_relu_backward(dy: np.ndarray, positive: np.ndarray, slope: float = DEFAULT_SLOPE) -> np.ndarray:
    return np.where(positive, dy, dy * slope).astype(dy.dtype, copy=False)


# === Optimization ===

@dataclass
class OptimizerState:
    """
    Состояние SGD: буферы момента по именам параметров и гиперпараметры.
    """

    lr: float = 1e-2
    weight_decay: float = 3e-5
    momentum: float = 0.99
    nesterov: bool = True
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(params: Iterable[Parameter], state: OptimizerState, lr: Optional[float] = None) -> None:
    """
    Один шаг SGD: weight decay добавляется к градиенту, затем момент
    Нестерова. Замороженные параметры и параметры без градиента не
    меняются, их момент не накапливается.

    Args:
        params (Iterable[Parameter]): Параметры сети.
        state (OptimizerState): Буферы момента и гиперпараметры.
        lr (Optional[float]): Learning rate шага (по умолчанию state.lr).
    """

    lr = state.lr if lr is None else lr
    for param in params:
        if param.frozen or param.grad is None:
            continue
        grad = param.grad
        if grad.shape != param.data.shape:
            raise ShapeMismatchError(f"{param.name}: градиент {grad.shape} != параметр {param.data.shape}")
        if state.weight_decay and param.decay:
            grad = grad + state.weight_decay * param.data
        if state.momentum:
            buf = state.buffers.get(param.name)
            if buf is None:
                buf = np.array(grad, copy=True)
            elif buf.shape != grad.shape:
                raise ShapeMismatchError(f"{param.name}: буфер момента {buf.shape} != {grad.shape}")
            else:
                buf *= state.momentum
                buf += grad
            state.buffers[param.name] = buf
            grad = grad + state.momentum * buf if state.nesterov else buf
        param.data -= (lr * grad).astype(param.data.dtype, copy=False)


@dataclass(frozen=True)
class LRLaw:
    """
    Закон изменения learning rate на отрезке [0, total_steps].

    Args:
        kind (str): 'poly', 'linear_warmup' или 'constant'.
        base_lr (float): Базовый (пиковый) learning rate.
        total_steps (int): Длина отрезка.
        exponent (float): Показатель poly.
    """

    kind: str
    base_lr: float
    total_steps: int
    exponent: float = POLY_EXPONENT

    KINDS = ('poly', 'linear_warmup', 'constant')

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ScheduleError(f"Неизвестный закон LR: {self.kind}")
        if self.total_steps < 1 or self.base_lr < 0:
            raise ScheduleError(f"Некорректный закон LR: total_steps={self.total_steps}, base_lr={self.base_lr}")


def lr_at(law: LRLaw, step: int) -> float:
    """
    Значение learning rate на шаге step.

    Args:
        law (LRLaw): Закон.
        step (int): Номер шага, 0 <= step <= total_steps.

    Returns:
        float: Learning rate.
    """

    if not 0 <= step <= law.total_steps:
        raise ScheduleError(f"Шаг {step} вне диапазона [0, {law.total_steps}]")
    if law.kind == 'poly':
        return law.base_lr * (1.0 - step / law.total_steps) ** law.exponent
    if law.kind == 'linear_warmup':
        return law.base_lr * (step / law.total_steps)
    return law.base_lr
