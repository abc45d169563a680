"""Exception hierarchy shared by every module."""


class FedUnlearnError(Exception):
    """Base class; ``stage`` is filled in by the experiment harness."""

    stage = None

    def with_stage(self, stage):
        self.stage = stage
        return self

    def __str__(self):
        msg = super().__str__()
        if self.stage:
            return f"[{self.stage}] {msg}"
        return msg


class DimensionError(FedUnlearnError, ValueError):
    pass


class WeightError(FedUnlearnError, ValueError):
    pass


class ConfigError(FedUnlearnError, ValueError):
    pass


class SingularSystemError(FedUnlearnError, ArithmeticError):
    pass


class SamplingError(FedUnlearnError, RuntimeError):
    pass


class DivergenceError(FedUnlearnError, ArithmeticError):
    pass


class UnsupportedError(FedUnlearnError, NotImplementedError):
    pass
