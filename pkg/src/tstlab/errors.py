"""Exception hierarchy shared by every tstlab module.

Each class that can terminate a CLI run carries the process exit code used
for it, so callers never have to keep a second mapping in sync.
"""


class TSTError(Exception):
    exit_code = 1


class ContractError(TSTError, ValueError):
    """A caller violated an operation's precondition."""

    exit_code = 2


class DimensionError(ContractError):
    """Operand shapes are incompatible."""


class ConfigError(TSTError, ValueError):
    exit_code = 2

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class DataError(TSTError):
    exit_code = 3


class NumericError(TSTError, ArithmeticError):
    """A non-finite value appeared where finite values are required."""

    exit_code = 4


class CheckpointError(TSTError, OSError):
    exit_code = 5
