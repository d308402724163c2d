class SDFlowError(Exception):
    pass


class ShapeError(SDFlowError, ValueError):
    pass


class ParameterError(SDFlowError, ValueError):
    pass


class NonFiniteError(SDFlowError, ValueError):
    pass


class OracleError(SDFlowError, ArithmeticError):
    """A finite-difference oracle produced a non-finite value."""


class DegenerateLayerError(SDFlowError, ArithmeticError):
    """A layer is (numerically) non-invertible."""


class TrainingDivergenceError(SDFlowError, ArithmeticError):
    def __init__(self, message, iteration=None, phase=None):
        if iteration is not None:
            message = f"{message} (iteration {iteration}, phase {phase})"
        super().__init__(message)
        self.iteration = iteration
        self.phase = phase


class ConfigError(SDFlowError, ValueError):
    pass


class CheckpointError(SDFlowError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass
