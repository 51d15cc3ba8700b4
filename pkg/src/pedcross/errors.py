"""Exception types shared across the package.

Grouped roughly by the layer that raises them; everything derives from
PedcrossError so callers can catch the package as a whole.
"""


class PedcrossError(Exception):
    pass


# --- tensor / autodiff ---

class DimMismatch(PedcrossError):
    """Operand extents are incompatible for the requested operation."""


class NotScalar(PedcrossError):
    """backward() requires a single-element output tensor."""


class DisconnectedGraph(PedcrossError):
    """The output tensor was not produced on the given tape."""


# --- layers ---

class BadRate(PedcrossError):
    """Dropout rate outside [0, 1)."""


# --- feature pipeline ---

class InsufficientHistory(PedcrossError):
    """Not enough frames behind the decisive moment to build a sequence."""


class DegenerateBox(PedcrossError):
    """Zero-area bounding box cannot be cropped."""


class UnknownClass(PedcrossError):
    """Semantic class name outside the fixed 19-class set."""


class EmptyMask(PedcrossError):
    """Instance mask covers no pixels."""


class MissingFeature(PedcrossError):
    """A feature toggle is enabled but the sample does not carry the tensor."""


# --- multicam ---

class BadConfig(PedcrossError):
    """Invalid configuration value (camera count, overlap, schedule...)."""


class OutOfKeptRange(PedcrossError):
    """Coordinate falls outside the camera's kept column range."""


class BadIndex(PedcrossError):
    """Camera index out of range."""


# --- training ---

class EmptyDataset(PedcrossError):
    pass


class DivergedLoss(PedcrossError):
    """NaN/Inf appeared in the loss or parameters; training aborted."""


class IoError(PedcrossError):
    """Dataset/checkpoint file missing or malformed."""


# --- synthdata ---

class OffCanvas(PedcrossError):
    """Pedestrian projects outside every camera view."""


# --- evaluation ---

class LengthMismatch(PedcrossError):
    pass


class OneClassOnly(PedcrossError):
    """AUC needs at least one positive and one negative label."""


class BadVariant(PedcrossError):
    """Unknown ablation variant id."""


class UnknownFeature(PedcrossError):
    """Permutation probe asked for a feature samples do not have."""
