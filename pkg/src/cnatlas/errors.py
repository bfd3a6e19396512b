"""Exception hierarchy shared across the package.

Everything raised on purpose derives from :class:`CnAtlasError` so callers
(and the command line front end) can distinguish our failures from genuine
bugs.  File-format problems get their own branch because readers promise to
reject malformed input with a typed error instead of crashing.
"""


class CnAtlasError(Exception):
    """Base class for all errors raised by this package."""


class InvalidGeometryError(CnAtlasError):
    """Geometry constraint violated (non-finite coordinates, bad shapes)."""


class DegenerateFiberError(InvalidGeometryError):
    """Streamline too short to carry any geometric information."""


class PointCountMismatchError(InvalidGeometryError):
    """Pointwise fiber distance requires equal point counts."""


class SingularTransformError(CnAtlasError):
    """Affine transform with a (near-)singular linear part."""


class TractIOError(CnAtlasError):
    """Base class for file reading and writing failures."""


class FormatError(TractIOError):
    """File does not follow the expected on-disk layout."""


class UnsupportedDatatypeError(TractIOError):
    """File is structurally valid but uses a datatype we do not handle."""


class UnsupportedVariantError(TractIOError):
    """Recognised format family, unsupported flavour (e.g. binary VTK)."""


class TruncatedFileError(TractIOError):
    """File ends before the declared payload is complete."""


class MissingAffineError(TractIOError):
    """Volume carries no usable voxel-to-world transform."""


class CorruptAtlasError(TractIOError):
    """Atlas directory fails checksum or consistency validation."""


class AtlasVersionError(TractIOError):
    """Atlas directory written by an incompatible format version."""


class InvalidConfigError(CnAtlasError):
    """Configuration value out of range, unknown, or missing."""


class InvalidKError(InvalidConfigError):
    """Requested cluster count impossible for the given data."""


class EmptyInputError(CnAtlasError):
    """Operation received no usable data."""


class EmptySubjectError(EmptyInputError):
    """Subject tractogram has no streamlines left after filtering."""


class ArityError(CnAtlasError):
    """Parallel sequences disagree in length."""


class GridMismatchError(CnAtlasError):
    """Voxel grids differ where identical grids are required."""


class ClusterNotFoundError(CnAtlasError):
    """Referenced cluster id does not exist in the atlas."""


class NumericalFailureError(CnAtlasError):
    """Iterative numeric routine failed to produce a usable result."""
