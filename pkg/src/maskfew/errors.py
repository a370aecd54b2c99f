"""Exception types shared across the package."""


class MaskFewError(Exception):
    """Base class for all errors raised by maskfew."""


class ShapeError(MaskFewError):
    """Tensor extents do not line up for the requested operation."""


class ContractError(MaskFewError):
    """A documented precondition was violated by the caller."""


class VocabError(MaskFewError):
    """Token id outside the embedding table."""


class ClassError(MaskFewError):
    """Class index outside the label space."""


class DataError(MaskFewError):
    """Dataset content violates an invariant (empty class, bad label, ...)."""


class NumericError(MaskFewError):
    """A value is outside the domain of a numeric operation."""


class ParseError(MaskFewError):
    """A corpus file could not be parsed."""


class SchemaError(MaskFewError):
    """A corpus record is missing a required field."""


class FormatError(MaskFewError):
    """A checkpoint file is malformed."""


class ConfigError(MaskFewError):
    """Invalid configuration value or unknown config key."""
