"""Exception hierarchy. Each class carries the CLI exit code it maps to."""
from typing import Optional


class FedRetinaError(Exception):
    exit_code = 1


class ConfigError(FedRetinaError):
    exit_code = 2


class ShapeError(ConfigError):
    """Tensor or layer shapes do not line up."""


class UsageError(FedRetinaError):
    exit_code = 2


class DataError(FedRetinaError):
    exit_code = 2


class EmptyDatasetError(DataError):
    pass


class ImbalanceError(DataError):
    pass


class StratificationError(DataError):
    pass


class IngestionError(DataError):
    def __init__(self, message: str, row: Optional[int] = None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class NumericError(FedRetinaError):
    exit_code = 4

    def __init__(self, message: str, layer: Optional[int] = None, kind: Optional[str] = None):
        if layer is not None:
            message = f"layer {layer} ({kind}): {message}"
        super().__init__(message)
        self.layer = layer
        self.kind = kind


class CheckpointError(FedRetinaError):
    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class ProtocolError(FedRetinaError):
    exit_code = 3


class DecodeError(ProtocolError):
    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class HandshakeRejected(ProtocolError):
    pass


class RoundTimeoutError(ProtocolError):
    """A round missed its deadline and partial aggregation is off."""


class NoParticipantsError(ProtocolError):
    pass


class AggregationError(FedRetinaError):
    exit_code = 3


class UndefinedMetricError(UsageError):
    """A metric has no value for the given labels (e.g. ROC AUC with one class)."""
