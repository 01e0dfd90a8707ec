from typing import Any, Dict, Optional


class VQProfilesError(Exception):
    """Base class for every failure raised by the toolkit"""

    def __init__(self, message: str, **details: Any):
        super().__init__(message)
        self.message = message
        self.details: Dict[str, Any] = details

    def __str__(self) -> str:
        if not self.details:
            return self.message
        extra = ", ".join(f"{k}={v}" for k, v in self.details.items())
        return f"{self.message} ({extra})"


class ConfigurationError(VQProfilesError):
    pass


class ShapeMismatchError(VQProfilesError):
    def __init__(self, layer: str, expected: Any, got: Any):
        super().__init__(
            f"Shape mismatch in layer {layer}: expected {expected}, got {got}",
            layer=layer,
            expected=str(expected),
            got=str(got),
        )


class BackwardError(VQProfilesError):
    pass


class NonFiniteGradientError(VQProfilesError):
    def __init__(self, parameter: str):
        super().__init__(f"Non-finite gradient in parameter {parameter}", parameter=parameter)


class DataValidationError(VQProfilesError):
    pass


class UnknownVariableError(DataValidationError):
    def __init__(self, variable: str, known: Optional[list] = None):
        super().__init__(f"Unknown variable {variable}", variable=variable, known=known or [])


class ScalerMismatchError(DataValidationError):
    pass


class TrainingDivergedError(VQProfilesError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(
            f"Non-finite loss at epoch {epoch}, batch {batch}",
            epoch=epoch,
            batch=batch,
            loss=loss,
        )


class PredictiveError(VQProfilesError):
    def __init__(self, hypothesis: int, value: float):
        super().__init__(
            f"Non-finite predictive probability for run-length hypothesis {hypothesis}",
            hypothesis=hypothesis,
            value=value,
        )


class OracleLimitError(VQProfilesError):
    pass


class EventRangeError(VQProfilesError):
    pass


class InsufficientClassesError(VQProfilesError):
    pass


class MissingArtifactError(VQProfilesError):
    pass


class VerificationError(VQProfilesError):
    pass
