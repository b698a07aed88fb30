import logging.config
import os
from pathlib import Path

from dotenv import load_dotenv


load_dotenv()  # загружает переменные из .env в окружение

BASE_DIR = Path(__file__).resolve().parent.parent

DEFAULT_OUT_DIR = os.getenv('BRAINMAE_OUT_DIR', 'runs')

LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO').upper()

PLOTS_ENABLED = os.getenv('BRAINMAE_PLOTS', 'True').lower() in ('true', '1', 't')

# Число потоков BLAS; 1 даёт побитово воспроизводимые прогоны
NUM_THREADS = int(os.getenv('BRAINMAE_NUM_THREADS', '1'))

THREAD_ENV_VARS = (
    'OMP_NUM_THREADS',
    'OPENBLAS_NUM_THREADS',
    'MKL_NUM_THREADS',
)

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'plain': {
            'format': '%(asctime)s %(levelname)s %(name)s: %(message)s',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'plain',
        },
    },
    'root': {
        'handlers': ['console'],
        'level': LOG_LEVEL,
    },
    'loggers': {
        'matplotlib': {
            'level': 'WARNING',
        },
    },
}


def configure_threads():
    """
    Экспортирует ограничение числа потоков BLAS до импорта numpy.
    """

    for name in THREAD_ENV_VARS:
        os.environ.setdefault(name, str(NUM_THREADS))


def configure_logging():
    """
    Применяет конфигурацию логирования LOGGING.
    """

    logging.config.dictConfig(LOGGING)
