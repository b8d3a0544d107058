"""Exception taxonomy shared by the library and the CLI.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericalError -> 4.
"""


class CbmirError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(CbmirError):
    """Invalid or inconsistent configuration."""


class DataError(CbmirError):
    """Problem with input data or on-disk artifacts."""


class NumericalError(CbmirError):
    """Numerical failure (rank deficiency, PSD violation, non-finite values)."""


class WavReadError(DataError):
    """File is not a readable RIFF/WAVE container."""


class UnsupportedWavError(DataError):
    """WAV file uses a codec or layout outside the supported PCM subset."""


class EmptyAudioError(DataError):
    """WAV file contains no audio samples."""


class ArtifactFormatError(DataError):
    """Binary artifact has a bad magic, version, or truncated payload."""


class LineageError(DataError):
    """Artifact was produced by a different configuration than expected."""
