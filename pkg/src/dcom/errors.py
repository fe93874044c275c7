"""Exception types shared across the package."""


class DcomError(Exception):
    """Base class for all errors raised by this package."""

    kind = "error"

    def to_dict(self) -> dict:
        return {"error": self.kind, "message": str(self)}


class ShapeError(DcomError, ValueError):
    kind = "shape_error"


class ValidationError(DcomError, ValueError):
    kind = "validation_error"


class ParameterError(DcomError, ValueError):
    kind = "parameter_error"


class DecompositionError(DcomError):
    """A per-prompt decomposition failure; carries the prompt index."""

    kind = "decomposition_error"

    def __init__(self, prompt: int, cause: Exception):
        super().__init__(f"prompt {prompt}: {cause}")
        self.prompt = prompt
        self.cause = cause

    def to_dict(self) -> dict:
        d = super().to_dict()
        d["prompt"] = self.prompt
        return d


class CalibrationError(DcomError):
    kind = "calibration_error"


class InfeasibleMappingError(DcomError, ValueError):
    kind = "infeasible_mapping"


class PlanError(DcomError, ValueError):
    """Invalid decomposition plan; ``layer_ids`` lists the offending layers."""

    kind = "plan_error"

    def __init__(self, message: str, layer_ids=()):
        super().__init__(message)
        self.layer_ids = list(layer_ids)

    def to_dict(self) -> dict:
        d = super().to_dict()
        d["layer_ids"] = self.layer_ids
        return d
