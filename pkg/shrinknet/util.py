import contextlib
import sys
import threading
import time
import traceback
from typing import Generic, Optional, Type, TypeVar

_DEBUG = False


def set_debug(debug: bool):
    global _DEBUG
    _DEBUG = debug


def in_debug() -> bool:
    global _DEBUG
    return _DEBUG


def debug(*a):
    """
    Print debugging information in shrinknet's nested log output.

    Arguments are serialized with ``str()`` and printed (to stderr) only when
    running in verbose mode. Each line carries a monotonic timestamp and is
    indented by stack depth, so nested work reads as a tree.
    """
    if not _DEBUG:
        return
    stack = traceback.extract_stack()
    frame = stack[-2]
    indent = len(stack) - 3
    print(
        "{:06.3f}|{}|{}() {}".format(
            time.monotonic(), " " * indent, frame.name, " ".join(map(str, a))
        ),
        file=sys.stderr,
    )


def warn(*a):
    """
    Display a warning to the user.

    It currently does not do more than printing `WARNING:`, followed by the arguments
    serialized with `str` to the `stderr` stream.
    """
    print("WARNING:", " ".join(map(str, a)), file=sys.stderr)


class ShrinkNetError(Exception):
    """Base class of every error shrinknet raises on purpose."""

    # The process exit code used by the command line when this error escapes.
    exit_code = 1


class ConfigurationError(ShrinkNetError):
    exit_code = 2

    def __init__(self, field: str, problem: str):
        super().__init__(f'Invalid configuration field "{field}": {problem}')
        self.field = field


class ContractError(ShrinkNetError, ValueError):
    # A precondition of a library call does not hold.
    exit_code = 2


class DimensionError(ContractError):
    pass


class DataError(ShrinkNetError):
    exit_code = 3


class RecordingParseError(DataError):
    def __init__(self, path: str, line: int, problem: str):
        super().__init__(f"{path}:{line}: {problem}")
        self.path = path
        self.line = line


class StratificationError(DataError):
    pass


class CheckpointError(DataError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    def __init__(self, tensor_name: str, problem: str):
        super().__init__(f'Tensor "{tensor_name}": {problem}')
        self.tensor_name = tensor_name


class DivergenceError(ShrinkNetError):
    exit_code = 4

    def __init__(
        self,
        message: str,
        parameter: Optional[str] = None,
        last_good_epoch: Optional[int] = None,
    ):
        super().__init__(message)
        self.parameter = parameter
        self.last_good_epoch = last_good_epoch
        self.checkpoint_path: Optional[str] = None


_T = TypeVar("_T")


class DynamicScopeVar(Generic[_T]):
    """
    A thread-local value visible to everything called inside ``open``.

    Holds the recording tape, the kink monitor and the threshold override.

    >>> _EPOCH = DynamicScopeVar(int, "epoch")
    >>> with _EPOCH.open(3):
    ...   _EPOCH.get()
    3
    """

    def __init__(self, typ: Type[_T], name_for_debugging: str = ""):
        self._local = threading.local()
        self._name = name_for_debugging

    @contextlib.contextmanager
    def open(self, value: _T, reentrant: bool = True):
        _local = self._local
        old_value = getattr(_local, "value", None)
        if not reentrant:
            assert old_value is None, f"Already in a {self._name} context"
        _local.value = value
        try:
            yield value
        finally:
            assert getattr(_local, "value", None) is value
            _local.value = old_value

    def get(self, default: Optional[_T] = None) -> _T:
        ret = getattr(self._local, "value", None)
        if ret is not None:
            return ret
        if default is not None:
            return default
        assert False, f"Not in a {self._name} context"

    def get_if_in_scope(self) -> Optional[_T]:
        return getattr(self._local, "value", None)
