from __future__ import annotations


class AvFlowError(Exception):
    """Base class for every error raised by av_flow."""


class NonConvergenceError(AvFlowError, RuntimeError):
    pass


class DimensionError(AvFlowError, ValueError):
    pass


class OperatorError(AvFlowError, ValueError):
    """Raised when a boundary/trace operation meets an operator without traces."""


class InadmissibleFieldError(AvFlowError, ValueError):
    def __init__(self, message: str, *, cell: int, where: str = "interior") -> None:
        super().__init__(f"{message} ({where} cell {cell})")
        self.cell = cell
        self.where = where


class ScenarioError(AvFlowError, ValueError):
    def __init__(self, path: str, message: str) -> None:
        super().__init__(f"{path}: {message}")
        self.path = path


class ArtifactError(AvFlowError, OSError):
    def __init__(self, path: str, message: str) -> None:
        super().__init__(f"{path}: {message}")
        self.path = path
