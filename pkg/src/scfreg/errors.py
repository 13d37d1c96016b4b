"""Exception types shared across the toolkit."""


class ScfregError(Exception):
    """Base class for all toolkit errors."""


# --- tensor file format ---

class TensorIOError(ScfregError):
    """Base class for .scft container errors."""


class BadMagicError(TensorIOError):
    pass


class VersionMismatchError(TensorIOError):
    pass


class UnsupportedDtypeError(TensorIOError):
    pass


class TruncatedError(TensorIOError):
    pass


class DimsOverflowError(TensorIOError):
    pass


# --- embeddings / conditioning ---

class LabelOutOfRangeError(ScfregError):
    pass


class LabelCountMismatchError(ScfregError):
    pass


class ZeroNormRowError(ScfregError):
    pass


# --- autodiff ---

class StaleGraphError(ScfregError):
    """Backward invoked twice on the same recorded graph."""


class NonFiniteFieldError(ScfregError):
    """A displacement entering an interpolation op contains NaN/inf."""


# --- metrics ---

class DegenerateSweepError(ScfregError):
    """Correlation sweep with zero variance on an axis."""


# --- synthetic data ---

class CrowdedError(ScfregError):
    """Could not place the requested regions without overlap."""


class TooRoughError(ScfregError):
    """Random velocity field kept folding after bounded retries."""


# --- training ---

class TrainingDivergedError(ScfregError):
    """NaN loss encountered; carries epoch and learning rate context."""
