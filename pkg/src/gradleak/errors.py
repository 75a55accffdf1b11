"""Exception hierarchy shared by every gradleak module."""


class GradLeakError(Exception):
    """Base class for all library errors."""


class NonFinite(GradLeakError, ValueError):
    pass


class ShapeMismatch(GradLeakError, ValueError):
    pass


class NonSquare(ShapeMismatch):
    pass


class LengthMismatch(ShapeMismatch):
    pass


class EmptyBatch(GradLeakError, ValueError):
    pass


class AlreadyLinear(GradLeakError, ValueError):
    pass


class NegativeMse(GradLeakError, ValueError):
    pass


class DidNotConverge(GradLeakError):
    """LSMR hit its iteration cap; the best iterate is kept on the exception."""

    def __init__(self, solution, residual_norm, iterations):
        super().__init__(
            f"lsmr stopped after {iterations} iterations (residual {residual_norm:.3e})"
        )
        self.solution = solution
        self.residual_norm = residual_norm
        self.iterations = iterations


class CurationFailed(GradLeakError):
    def __init__(self, trials):
        super().__init__(f"no insecure batch found in {trials} trials")
        self.trials = trials


class PreconditionFailed(GradLeakError, ValueError):
    pass


class DegenerateWeights(PreconditionFailed):
    pass


class EmptySubspace(GradLeakError):
    pass


class AttackStageError(GradLeakError):
    """Raised by an individual attack stage; ``stage`` names it."""

    stage = "unknown"


class NoGroups(AttackStageError):
    stage = "loss_profile"


class GroupOverlap(AttackStageError):
    stage = "loss_profile"


class PatternAmbiguous(AttackStageError):
    stage = "activation_patterns"

    def __init__(self, layer, sample):
        super().__init__(f"sample {sample} has no exclusive neuron above layer {layer}")
        self.layer = layer
        self.sample = sample


class SubsetSumAmbiguous(AttackStageError):
    stage = "activation_patterns"

    def __init__(self, neuron, n_candidates):
        super().__init__(f"neuron {neuron}: {n_candidates} membership assignments fit")
        self.neuron = neuron
        self.n_candidates = n_candidates


class NotApplicable(GradLeakError):
    """The deterministic attack cannot run on this gradient."""

    def __init__(self, stage, reason):
        super().__init__(f"attack not applicable at stage '{stage}': {reason}")
        self.stage = stage
        self.reason = reason
