"""Exception hierarchy shared by all admpc modules."""


class AdmpcError(Exception):
    """Base class for every error raised by this package."""


class DimensionMismatch(AdmpcError, ValueError):
    pass


class NotControllable(AdmpcError, ValueError):
    pass


class OriginNotInterior(AdmpcError, ValueError):
    pass


class CostNotPD(AdmpcError, ValueError):
    pass


class CouplingClosureViolated(AdmpcError, ValueError):
    """A subsystem's dynamics, constraints or cost reach outside its neighbor set."""


class BuildError(AdmpcError):
    """Malformed optimization problem (shapes, non-symmetric PSD block, bad index)."""


class SynthesisInfeasible(AdmpcError):
    pass


class StructuredSynthesisInfeasible(SynthesisInfeasible):
    pass


class IllConditionedDesign(AdmpcError):
    pass


class NotStable(AdmpcError, ValueError):
    pass


class IterationCapExceeded(AdmpcError):
    pass


class StepInfeasible(AdmpcError):
    """Receding-horizon step without a usable solution.

    ``trace`` holds the partial closed-loop log up to (not including) step ``t``.
    """

    def __init__(self, t, status, trace=None):
        super().__init__(f"MPC problem infeasible at step {t} (status={status})")
        self.t = t
        self.status = status
        self.trace = trace


class MaxRoundsExceeded(AdmpcError):
    def __init__(self, rounds, consensus=None):
        super().__init__(f"ADMM did not converge within {rounds} rounds")
        self.rounds = rounds
        self.consensus = consensus


class LocalSolveFailed(AdmpcError):
    """An ADMM agent's (or the coordinator's) local problem was not solved."""

    def __init__(self, agent, status):
        super().__init__(f"local problem of {agent!r} ended with status {getattr(status, 'value', status)}")
        self.agent = agent
        self.status = status
