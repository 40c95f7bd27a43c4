from __future__ import annotations

from typing import Any


class BlockselError(Exception):
    """
    Base class for every error raised by blocksel.
    """


class ConfigurationError(BlockselError, ValueError):
    pass


class ContractViolation(BlockselError, ValueError):
    pass


class ProtocolError(BlockselError):
    pass


class FitnessEvaluationError(BlockselError):
    """
    A fitness evaluation failed or returned a value outside [0, 1].

    The genotype that failed is kept on the exception so the GA
    can report which individual aborted the generation.
    """

    def __init__(self, message: str, genotype: Any) -> None:
        super().__init__(f"{message} (genotype {genotype})")
        self.genotype = genotype


class AdapterUnsupportedError(BlockselError):
    pass


class TrainingDivergedError(BlockselError):
    def __init__(
        self,
        message: str,
        diagnostics: dict[str, Any],
    ) -> None:
        super().__init__(message)
        self.diagnostics = diagnostics


class DatasetError(BlockselError):
    pass


class StratificationError(BlockselError, ValueError):
    pass


class MomentError(BlockselError, ValueError):
    def __init__(self, message: str, label: int) -> None:
        super().__init__(message)
        self.label = label


class NumericalDomainError(BlockselError, ValueError):
    pass


class DimensionMismatchError(BlockselError, ValueError):
    pass


class SolverCapacityError(BlockselError, ValueError):
    pass


class RunLockedError(BlockselError):
    pass


class NoRunsFoundError(BlockselError):
    pass


class StageError(BlockselError):
    """
    Wraps a failure inside a harness command, per block where there is one.
    """

    def __init__(
        self,
        block_id: int | None,
        cause: BaseException,
        *,
        stage: str | None = None,
    ) -> None:
        where = f"block {block_id}" if block_id is not None else (stage or "stage")
        super().__init__(f"{where} failed: {cause}")
        self.block_id = block_id
        self.stage = stage
        self.cause = cause


class SinkhornConvergenceWarning(UserWarning):
    pass
