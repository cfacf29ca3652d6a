"""Exception types shared across the package."""


class MaldetError(Exception):
    """Base class for all maldet errors."""


# --- report ingestion ---

class MalformedJson(MaldetError):
    """Report is not valid UTF-8 JSON or violates the expected schema."""


class MissingBehaviorSection(MaldetError):
    """Report JSON has no "behavior" object."""


class InvalidApiName(MaldetError):
    """API name contains characters outside [A-Za-z0-9_]."""


class EmptySequence(MaldetError):
    """Report contributed zero API calls."""


class UnlabeledSample(MaldetError):
    """Report hash has no entry in the labels file."""


class DuplicateHash(MaldetError):
    """Two reports share the same sha256."""


class CsvSchemaError(MaldetError):
    """Dataset CSV has a wrong header, column count, or label value."""


# --- text pipeline ---

class EmptyCorpus(MaldetError):
    """Vocabulary fit requested on an empty training set."""


class UnknownId(MaldetError):
    """Integer id outside the vocabulary or embedding table."""


class DegenerateSplit(MaldetError):
    """Train/test split would leave one side empty."""


# --- numeric core ---

class ShapeMismatch(MaldetError):
    """Operands have incompatible shapes."""


class NumericError(MaldetError):
    """A NaN or Inf appeared where all values must be finite."""


class DisconnectedGraph(MaldetError):
    """A tracked parameter is unreachable from the loss."""


# --- model bundle ---

class FormatVersionMismatch(MaldetError):
    """Bundle file was written with an unsupported format version."""


class CorruptBundle(MaldetError):
    """Bundle file is truncated or structurally invalid."""


# --- training / explanation ---

class NonFiniteLoss(MaldetError):
    """Training aborted because the loss computation blew up."""


class SingularSystem(MaldetError):
    """Unregularized surrogate fit hit a singular normal-equations system."""
