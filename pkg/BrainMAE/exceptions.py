class BrainMAEError(Exception):
    """
    Базовое исключение проекта. Сообщение всегда называет
    проблемный тензор, ключ конфигурации или путь.
    """


class ShapeMismatchError(BrainMAEError, ValueError):
    pass


class NonFiniteError(BrainMAEError, FloatingPointError):
    pass


class MaskError(BrainMAEError, ValueError):
    pass


class CheckpointError(BrainMAEError):
    pass


class VolumeFormatError(BrainMAEError):
    pass


class ConfigError(BrainMAEError, ValueError):
    pass


class ScheduleError(BrainMAEError, ValueError):
    pass


class DatasetError(BrainMAEError):
    pass


class LabelError(BrainMAEError, ValueError):
    pass
