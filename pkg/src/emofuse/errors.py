"""Exception types shared across the pipeline."""


class EmofuseError(Exception):
    """Base class for all pipeline errors."""


class DecodeError(EmofuseError):
    """An input file could not be read or decoded."""


class EmptyInputError(EmofuseError):
    """An input decoded to zero samples or zero frames."""


class TooShortError(EmofuseError):
    """A waveform is shorter than one analysis window."""


class CropError(EmofuseError):
    """A crop rectangle rounded down to zero area."""


class ManifestError(EmofuseError):
    """A dataset root is inconsistent (missing labels or artifacts)."""


class BalanceError(EmofuseError):
    """Class balancing cannot satisfy its targets."""


class SamplingError(EmofuseError):
    """Pair sampling constraints cannot be satisfied."""


class ShapeError(EmofuseError):
    """A tensor does not match the expected shape."""


class LabelError(EmofuseError):
    """A class label index is out of range."""


class ConfigError(EmofuseError):
    """Configuration values are inconsistent with each other or the data."""
