"""
Проверка аналитических обратных проходов центральными конечными
разностями и набор проверок всех дифференцируемых ядер.
"""

import logging
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np
import pandas as pd

from Engine.losses import dice_ce_loss, dice_ce_loss_backward, masked_l2_loss, masked_l2_loss_backward
from Engine.sparse_ops import (
    densification_conv,
    densification_conv_backward,
    densify,
    densify_backward,
    masked_instance_norm,
    masked_instance_norm_backward,
    sparse_conv3d,
    sparse_conv3d_backward,
)
from Engine.tensor_core import (
    ConvSpec,
    conv3d,
    conv3d_backward,
    conv3d_transpose,
    conv3d_transpose_backward,
    instance_norm,
    instance_norm_backward,
    leaky_relu,
    leaky_relu_backward,
)


logger = logging.getLogger(__name__)


# op(inputs) -> (выход, backward); backward(dout) -> {имя входа: градиент}
Operation = Callable[[Dict[str, np.ndarray]], Tuple[np.ndarray, Callable[[np.ndarray], Dict[str, np.ndarray]]]]

RELATIVE_FLOOR = 1e-4


def gradcheck(op: Operation, inputs: Dict[str, np.ndarray], tolerance: float = 1e-3, eps: float = 1e-6,
              seed: int = 0, max_entries: Optional[int] = None, wrt: Optional[Iterable[str]] = None) -> float:
    """
    Сравнивает аналитический градиент скалярной функции sum(op(x) * R)
    со случайной проекцией R с центральными конечными разностями.

    Входы приводятся к float64, поэтому ошибка определяется ядром, а не
    округлением float32.

    Args:
        op (Operation): Проверяемая операция.
        inputs (Dict[str, np.ndarray]): Входы и параметры операции.
        tolerance (float): Порог, попадающий в лог.
        eps (float): Шаг конечных разностей.
        seed (int): Сид проекции R и выборки элементов.
        max_entries (Optional[int]): Проверять не более стольких элементов каждого входа.
        wrt (Optional[Iterable[str]]): Какие входы проверять (по умолчанию все).

    Returns:
        float: Максимальная относительная ошибка по всем проверенным элементам.
    """

    rng = np.random.default_rng(seed)
    values = {name: np.array(value, dtype=np.float64) for name, value in inputs.items()}
    out, backward = op(values)
    projection = rng.standard_normal(np.shape(out))
    analytic = backward(projection)

    def objective() -> float:
        return float(np.sum(np.asarray(op(values)[0], dtype=np.float64) * projection))

    worst = 0.0
    for name in (wrt if wrt is not None else analytic):
        x = values[name]
        grad = analytic.get(name)
        grad = np.zeros_like(x) if grad is None else np.asarray(grad, dtype=np.float64)
        indices = np.arange(x.size)
        if max_entries is not None and x.size > max_entries:
            indices = rng.choice(x.size, size=max_entries, replace=False)
        flat = x.reshape(-1)
        for index in indices:
            original = flat[index]
            flat[index] = original + eps
            plus = objective()
            flat[index] = original - eps
            minus = objective()
            flat[index] = original
            numeric = (plus - minus) / (2.0 * eps)
            exact = grad.reshape(-1)[index]
            error = abs(exact - numeric) / max(abs(exact), abs(numeric), RELATIVE_FLOOR)
            worst = max(worst, error)
    if worst >= tolerance:
        logger.warning(f"gradcheck: максимальная относительная ошибка {worst:.3e} >= {tolerance:g}")
    return worst


# === Kernel cases ===

def _conv_case(rng):
    spec = ConvSpec(2, 3)
    inputs = {'x': rng.standard_normal((1, 2, 3, 3, 3)), 'w': rng.standard_normal(spec.weight_shape),
              'b': rng.standard_normal(3)}

    def op(v):
        y, cache = conv3d(v['x'], v['w'], v['b'], spec)
        return y, lambda dy: dict(zip(('x', 'w', 'b'), conv3d_backward(dy, cache)))
    return op, inputs


def _strided_conv_case(rng):
    spec = ConvSpec(2, 2, stride=2)
    inputs = {'x': rng.standard_normal((1, 2, 4, 4, 4)), 'w': rng.standard_normal(spec.weight_shape),
              'b': rng.standard_normal(2)}

    def op(v):
        y, cache = conv3d(v['x'], v['w'], v['b'], spec)
        return y, lambda dy: dict(zip(('x', 'w', 'b'), conv3d_backward(dy, cache)))
    return op, inputs


def _transpose_case(rng):
    spec = ConvSpec(2, 2, kernel=2, stride=2, padding=0)
    inputs = {'x': rng.standard_normal((1, 2, 2, 2, 2)), 'w': rng.standard_normal(spec.transpose_weight_shape),
              'b': rng.standard_normal(2)}

    def op(v):
        y, cache = conv3d_transpose(v['x'], v['w'], spec, v['b'])
        return y, lambda dy: dict(zip(('x', 'w', 'b'), conv3d_transpose_backward(dy, cache)))
    return op, inputs


def _norm_case(rng):
    inputs = {'x': rng.standard_normal((2, 2, 3, 3, 3)), 'gain': rng.standard_normal(2),
              'shift': rng.standard_normal(2)}

    def op(v):
        y, cache = instance_norm(v['x'], v['gain'], v['shift'])
        return y, lambda dy: dict(zip(('x', 'gain', 'shift'), instance_norm_backward(dy, cache)))
    return op, inputs


def _relu_case(rng):
    x = rng.standard_normal((1, 2, 3, 3, 3))
    # точки излома держим вдали от нуля
    x = np.where(np.abs(x) < 0.05, 0.1, x)

    def op(v):
        y, positive = leaky_relu(v['x'], 0.01)
        return y, lambda dy: {'x': leaky_relu_backward(dy, positive, 0.01)}
    return op, {'x': x}


def _random_mask(rng, shape, ratio=0.5):
    mask = rng.random(shape) < ratio
    mask.reshape(shape[0], -1)[:, 0] = False
    return mask


def _sparse_conv_case(rng):
    spec = ConvSpec(2, 2)
    mask = _random_mask(rng, (1, 4, 4, 4))
    inputs = {'x': rng.standard_normal((1, 2, 4, 4, 4)) * ~mask[:, None], 'w': rng.standard_normal(spec.weight_shape),
              'b': rng.standard_normal(2)}

    def op(v):
        y, cache = sparse_conv3d(v['x'], v['w'], v['b'], spec, mask)
        return y, lambda dy: dict(zip(('x', 'w', 'b'), sparse_conv3d_backward(dy, cache)))
    return op, inputs


def _masked_norm_case(rng):
    mask = _random_mask(rng, (2, 3, 3, 3))
    inputs = {'x': rng.standard_normal((2, 2, 3, 3, 3)), 'gain': rng.standard_normal(2),
              'shift': rng.standard_normal(2)}

    def op(v):
        y, cache = masked_instance_norm(v['x'], v['gain'], v['shift'], 1e-5, mask)
        return y, lambda dy: dict(zip(('x', 'gain', 'shift'), masked_instance_norm_backward(dy, cache)))
    return op, inputs


def _densify_case(rng):
    mask = _random_mask(rng, (2, 3, 3, 3))
    inputs = {'x': rng.standard_normal((2, 3, 3, 3, 3)), 'token': rng.standard_normal(3)}

    def op(v):
        y, cache = densify(v['x'], mask, v['token'])
        return y, lambda dy: dict(zip(('x', 'token'), densify_backward(dy, cache)))
    return op, inputs


def _densification_conv_case(rng):
    inputs = {'x': rng.standard_normal((1, 2, 3, 3, 3)), 'w': rng.standard_normal((2, 2, 3, 3, 3)),
              'b': rng.standard_normal(2)}

    def op(v):
        y, cache = densification_conv(v['x'], v['w'], v['b'])
        return y, lambda dy: dict(zip(('x', 'w', 'b'), densification_conv_backward(dy, cache)))
    return op, inputs


def _masked_l2_case(rng):
    mask = rng.random((2, 4, 4, 4)) < 0.7
    mask[0, 0, 0, 0] = True
    target = rng.standard_normal((2, 1, 4, 4, 4))

    def op(v):
        loss, cache = masked_l2_loss(v['pred'], target, mask)
        return np.asarray(loss), lambda d: {'pred': masked_l2_loss_backward(cache, float(d))}
    return op, {'pred': rng.standard_normal((2, 1, 4, 4, 4))}


def _dice_ce_case(rng):
    labels = rng.integers(0, 2, size=(1, 4, 4, 4))

    def op(v):
        loss, cache = dice_ce_loss(v['logits'], labels)
        return np.asarray(loss), lambda d: {'logits': dice_ce_loss_backward(cache, float(d))}
    return op, {'logits': rng.standard_normal((1, 2, 4, 4, 4))}


KERNEL_CASES = {
    'conv3d': _conv_case,
    'conv3d_strided': _strided_conv_case,
    'conv3d_transpose': _transpose_case,
    'instance_norm': _norm_case,
    'leaky_relu': _relu_case,
    'sparse_conv3d': _sparse_conv_case,
    'masked_instance_norm': _masked_norm_case,
    'densify': _densify_case,
    'densification_conv': _densification_conv_case,
    'masked_l2_loss': _masked_l2_case,
    'dice_ce_loss': _dice_ce_case,
}


def run_kernel_suite(seeds: int = 20, tolerance: float = 1e-3, kernels: Optional[Iterable[str]] = None) -> pd.DataFrame:
    """
    Прогоняет gradcheck для каждого ядра на нескольких случайных сидах.

    Args:
        seeds (int): Число сидов на ядро.
        tolerance (float): Порог относительной ошибки.
        kernels (Optional[Iterable[str]]): Подмножество KERNEL_CASES.

    Returns:
        pd.DataFrame: Колонки kernel, seeds, max_rel_error, passed.
    """

    rows: List[dict] = []
    for name in (kernels if kernels is not None else KERNEL_CASES):
        worst = 0.0
        for seed in range(seeds):
            op, inputs = KERNEL_CASES[name](np.random.default_rng(seed))
            worst = max(worst, gradcheck(op, inputs, tolerance=tolerance, seed=seed))
        rows.append({'kernel': name, 'seeds': seeds, 'max_rel_error': worst, 'passed': worst < tolerance})
        logger.info(f"gradcheck {name}: max rel error {worst:.3e}")
    return pd.DataFrame(rows, columns=['kernel', 'seeds', 'max_rel_error', 'passed'])


def network_operation(network, components: Iterable[str] = ('stem', 'encoder', 'decoder', 'seg_head')
                      ) -> Tuple[Operation, Dict[str, np.ndarray]]:
    """
    Оборачивает плотный проход сети в Operation. Параметры сети
    подменяются массивами из словаря входов, поэтому возмущения
    конечных разностей видны сети напрямую.

    Args:
        network (Network): Сеть, уже приведённая к float64.
        components (Iterable[str]): Компоненты, чьи параметры проверяются.

    Returns:
        Tuple[Operation, Dict[str, np.ndarray]]: Операция и словарь параметров (без 'x').
    """

    params = network.named_parameters(components)
    tensors = {p.name: p.data for p in params}

    def op(values):
        for param in params:
            param.data = values[param.name]
        network.zero_grad()
        logits = network.forward_dense(values['x'])

        def backward(dlogits):
            dx = network.backward_dense(dlogits)
            grads = {p.name: p.grad for p in params}
            grads['x'] = dx
            return grads
        return logits, backward
    return op, tensors
