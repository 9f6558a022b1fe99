"""Exception hierarchy shared by every module.

Each class carries a stable ``code`` used by the CLI to choose an exit status
and to print a machine-parsable error line.
"""


class BlockLoraError(Exception):
    code = "error"
    exit_status = 1


class ContractError(BlockLoraError, ValueError):
    """A precondition of an operation was violated."""

    code = "contract"
    exit_status = 2


class ShapeError(ContractError):
    code = "shape"


class ConfigError(ContractError):
    code = "config"


class StateError(BlockLoraError, RuntimeError):
    code = "state"


class DeterminismError(BlockLoraError, RuntimeError):
    code = "determinism"


class NumericError(BlockLoraError, ArithmeticError):
    """Non-finite values appeared in a forward pass, a backward pass or a sampler."""

    code = "numeric"
    exit_status = 4


class CompatibilityError(BlockLoraError):
    """An adapter does not belong to the model it is being applied to."""

    code = "compatibility"
    exit_status = 3


class FormatError(BlockLoraError):
    """A container file is malformed. ``offset`` is the byte where parsing failed."""

    code = "format"

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset
