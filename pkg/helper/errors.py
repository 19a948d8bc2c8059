class SurfError(Exception):
    exit_code = 1


class ConfigError(SurfError, ValueError):
    exit_code = 2


class InvalidArgumentError(ConfigError):
    pass


class CalibrationError(ConfigError):
    pass


class StorageError(SurfError, OSError):
    exit_code = 3


class FormatError(StorageError):
    """Malformed LGR1 data. ``offset`` is the byte position where parsing stopped."""

    def __init__(self, message, offset=0, expected=None, actual=None):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset
        self.expected = expected
        self.actual = actual


class ContractError(SurfError):
    exit_code = 4


class ShapeError(ContractError):
    pass


class ModelContractError(ContractError):
    pass
