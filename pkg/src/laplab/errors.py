class LapError(Exception):
    """Base class for errors raised by laplab."""


class InvalidNetworkError(LapError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class InfeasibleLPError(LapError):
    pass


class DegenerateOptimumError(LapError):
    pass


class Assumption3Error(LapError):
    """The equilibrium does not use every activity, or its slack pool is full."""


class ZeroRateError(LapError):
    pass


class InsufficientDataError(LapError):
    pass


class StateSpaceTooLargeError(LapError):
    pass


class InvalidStateError(LapError):
    pass


class StepUnderflowError(LapError):
    pass


class HorizonExceededError(LapError):
    pass


class NonDecayingSpectrumError(LapError):
    pass


class UnsupportedExperimentError(LapError):
    """Experiment preconditions (underload, all activities used) do not hold."""


class DegenerateRegressionError(LapError):
    pass
