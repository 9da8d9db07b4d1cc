"""Exception types shared across fedmesh."""


class FedMeshError(Exception):
    """Base class for all fedmesh errors."""


class ShapeError(FedMeshError, ValueError):
    pass


class NumericError(FedMeshError, ArithmeticError):
    pass


class IoError(FedMeshError, OSError):
    pass


class FormatError(FedMeshError, ValueError):
    pass


class PartitionError(FedMeshError, ValueError):
    pass


class FusionError(FedMeshError):
    pass


class ConfigError(FedMeshError, ValueError):
    pass


class ProtocolError(FedMeshError):
    pass


class QuorumError(ProtocolError):
    pass


class TransportError(FedMeshError, ConnectionError):
    pass


class DecodeError(TransportError):
    pass


class TerminationSignal(Exception):
    """Raised by a query generator when the session should stop training.

    Not an error: the aggregator reacts by moving on to SYNC.
    """

    def __init__(self, reason: str = "max_rounds"):
        super().__init__(reason)
        self.reason = reason
