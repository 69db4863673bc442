from typing import Iterable, List, Union


class TensorGraphError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 1


class ValidationError(TensorGraphError, ValueError):
    """Invalid arguments. Collects one or more messages like a form error."""

    exit_code = 2

    def __init__(self, message: Union[str, Iterable[str]]):
        if isinstance(message, str):
            self.messages: List[str] = [message]
        else:
            self.messages = list(message)
        super().__init__("; ".join(self.messages))


class ShapeMismatchError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class DataError(TensorGraphError):
    exit_code = 3


class NumericalError(TensorGraphError):
    exit_code = 4
