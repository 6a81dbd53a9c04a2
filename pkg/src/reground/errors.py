"""Exception types shared across the package."""


class ReGroundError(Exception):
    """Base class for all package errors."""


class InvalidBoxError(ReGroundError, ValueError):
    pass


class VocabularyError(ReGroundError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "unknown label"


class ShapeError(ReGroundError, ValueError):
    pass


class CapacityError(ReGroundError, ValueError):
    pass


class ScheduleError(ReGroundError, ValueError):
    pass


class GrammarError(ReGroundError, ValueError):
    pass


class GenerationError(ReGroundError, RuntimeError):
    pass


class TrainingError(ReGroundError, RuntimeError):
    pass


class FrozenParameterError(TrainingError):
    pass


class ConfigError(ReGroundError, ValueError):
    pass
