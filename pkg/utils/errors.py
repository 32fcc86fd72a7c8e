"""
Exception hierarchy shared by all modules
"""


class FocusError(Exception):
    """Base class for every error raised by this project"""


class ConfigurationError(FocusError):
    """Invalid scene, task or experiment configuration"""


class ProtocolError(FocusError):
    """Environment used out of order (step before reset, step after done)"""


class ContractError(FocusError, ValueError):
    """An operation received inputs that violate its preconditions"""


class NumericalFailure(FocusError, FloatingPointError):
    """A tensor that must be finite is not"""

    def __init__(self, component, message=None):
        self.component = component
        super().__init__(message or f"non-finite values in {component}")


class NotReadyError(FocusError):
    """Replay buffer cannot serve a batch yet; retry after more data is added"""


class CheckpointError(FocusError):
    """Checkpoint cannot be loaded"""
