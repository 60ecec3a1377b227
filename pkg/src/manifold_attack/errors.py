"""Exception types shared across the package."""


class ManifoldAttackError(Exception):
    """Base class for all package errors."""


# --- AU space ---

class DimensionMismatch(ManifoldAttackError):
    pass


class OutOfRange(ManifoldAttackError):
    pass


class UnknownExpression(ManifoldAttackError):
    pass


class EmptyLabelPool(ManifoldAttackError):
    pass


# --- data io ---

class MissingImage(ManifoldAttackError):
    pass


class MalformedRow(ManifoldAttackError):
    pass


class NoSurvivors(ManifoldAttackError):
    pass


class FitFailed(ManifoldAttackError):
    pass


class MissingLandmarks(ManifoldAttackError):
    pass


# --- networks ---

class ShapeMismatch(ManifoldAttackError):
    pass


class DegenerateEmbedding(ManifoldAttackError):
    pass


class CheckpointLoadError(ManifoldAttackError):
    pass


# --- losses ---

class NonDifferentiableCritic(ManifoldAttackError):
    pass


class MissingRegion(ManifoldAttackError):
    pass


# --- attack ---

class EmptyEnsemble(ManifoldAttackError):
    pass


class EmptyStateSet(ManifoldAttackError):
    pass


class MissingState(ManifoldAttackError):
    pass


# --- training ---

class DatasetTooSmall(ManifoldAttackError):
    pass


class NonFiniteLoss(ManifoldAttackError):
    pass


# --- evaluation ---

class TooFewPairs(ManifoldAttackError):
    pass


class EmptyInput(ManifoldAttackError):
    pass


# --- manifold verification ---

class DegeneratePair(ManifoldAttackError):
    pass


# --- cli ---

class UnknownCommand(ManifoldAttackError):
    pass


class ConfigError(ManifoldAttackError):
    def __init__(self, key, reason):
        super().__init__(f"config key {key!r}: {reason}")
        self.key = key
        self.reason = reason
