from typing import List


class WezError(Exception):
    """Base class for all solver-suite errors"""


class ConfigurationError(WezError, ValueError):
    """Inputs are individually valid but inconsistent with each other"""


class DegenerateGeometryError(WezError, ValueError):
    """Relative geometry is undefined (coincident vehicles, r <= 0)"""


class StationaryCellError(WezError, ArithmeticError):
    """All drifts and the diffusion vanish at a cell, so the implicit time step is undefined"""


class FieldFormatError(WezError):
    """A field file could not be decoded"""


class FieldVersionError(FieldFormatError):
    pass


class FieldChecksumError(FieldFormatError):
    pass


class TruncatedPayloadError(FieldFormatError):
    pass


class MissingDependencyError(WezError):
    """A solve needs field files that do not exist yet"""

    def __init__(self, missing: List[str]):
        self.missing = list(missing)
        super().__init__("missing prerequisite fields: " + ", ".join(self.missing))


class OutputExistsError(WezError):
    """Refusing to overwrite an existing artifact"""
