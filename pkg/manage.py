#!/usr/bin/env python
"""Командная утилита проекта: предобучение, дообучение, оценка."""
import sys

from BrainMAE import settings


def main():
    """Запускает подкоманду."""
    settings.configure_threads()
    # numpy импортируется только после настройки числа потоков
    from BrainMAE.cli import main as cli_main

    return cli_main(sys.argv[1:])


if __name__ == '__main__':
    sys.exit(main())
