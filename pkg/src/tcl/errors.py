"""Exception types raised across the toolkit."""


class TCLError(Exception):
    """Base class for every error raised by :mod:`tcl`."""


# taxonomy
class TaxonomyError(TCLError, ValueError):
    pass


class MalformedDocument(TaxonomyError):
    pass


class DuplicateClass(TaxonomyError):
    pass


class EmptyLeaf(TaxonomyError):
    pass


class GroupReassignment(TaxonomyError):
    pass


class UnknownClass(TaxonomyError, KeyError):
    pass


class EmptyLabelList(TaxonomyError):
    pass


# feature memory
class TooFewSamples(TCLError, ValueError):
    pass


class DegenerateFeaturesWarning(UserWarning):
    pass


# relation
class DimensionMismatch(TCLError, ValueError):
    pass


class SpaceMismatch(TCLError, ValueError):
    pass


class DuplicateClassInMatrix(TCLError, ValueError):
    pass


class NonpositiveTemperature(TCLError, ValueError):
    pass


# losses
class NoPositive(TCLError, ValueError):
    pass


class GroupMismatch(TCLError, ValueError):
    pass


class ShapeMismatch(TCLError, ValueError):
    pass


# model / trainer / inference
class TaskOutOfRange(TCLError, IndexError):
    pass


class NoTasksTrained(TCLError, RuntimeError):
    pass


class EmptyClass(TCLError, ValueError):
    pass


class MissingMemory(TCLError, KeyError):
    pass


class MissingRelationEntry(TCLError, KeyError):
    pass


class DivergedLoss(TCLError, FloatingPointError):
    pass


class DataRevokedError(TCLError, PermissionError):
    """Raised when a task's raw training data is touched after finalization."""


# metrics
class IncompleteMatrix(TCLError, ValueError):
    pass


class SingleTask(TCLError, ValueError):
    pass


class MissingProbe(TCLError, KeyError):
    pass


# harness
class ValidationError(TCLError, ValueError):
    """Config validation failure; ``path`` names the offending field."""

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}")
