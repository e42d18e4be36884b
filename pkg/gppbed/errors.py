"""Exception hierarchy for the grouped pooled-posterior design library."""

from typing import Optional


class GppBedError(Exception):
    """Base class for every error raised by the library."""

    def __init__(self, message: str, *, member_index: Optional[int] = None,
                 sample_index: Optional[int] = None):
        super().__init__(message)
        self.member_index = member_index
        self.sample_index = sample_index

    def to_dict(self) -> dict:
        """Serializable diagnostic used by the orchestrator's failure report."""
        return {
            "error": type(self).__name__,
            "message": str(self),
            "member_index": self.member_index,
            "sample_index": self.sample_index,
        }


class DegenerateEnsemble(GppBedError):
    pass


class SingularCovariance(GppBedError):
    pass


class FactorizationFailure(GppBedError):
    pass


class OutOfDomain(GppBedError):
    pass


class UnstableStep(GppBedError):
    pass


class WeightSumError(GppBedError):
    pass


class SingularNoise(GppBedError):
    pass


class ZeroWeight(GppBedError):
    pass


class GainSolveFailure(GppBedError):
    pass


class AllWeightsUnderflow(GppBedError):
    pass


class EmptyGroup(GppBedError):
    pass


class ZeroPosteriorMass(GppBedError):
    pass


class SingularInnovation(GppBedError):
    pass


class ConfigError(GppBedError):
    pass
