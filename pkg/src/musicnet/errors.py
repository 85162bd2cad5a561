"""Exception taxonomy shared across the package."""


class MusicNetError(Exception):
    """Base class for all errors raised by this package."""


class DecodeError(MusicNetError):
    """Malformed WAV container."""


class UnsupportedFormat(MusicNetError):
    """WAV codec or channel layout we do not handle."""


class UnsupportedRate(MusicNetError):
    """Sample rate below the supported wideband minimum."""


class EmptyInput(MusicNetError):
    """Zero-length audio where samples are required."""


class ContractViolation(MusicNetError):
    """An operation precondition was violated (shape, range, mode)."""


class FormatError(MusicNetError):
    """Weight file cannot be parsed (bad magic, truncation, unknown dtype)."""


class IntegrityError(MusicNetError):
    """Weight file parsed but its checksum does not match."""


class TopologyError(MusicNetError):
    """Weight file tensors do not match the expected network topology."""


class NonFiniteGradient(MusicNetError):
    """A NaN/Inf gradient was produced; the optimizer step is aborted."""


class EmptyDataset(MusicNetError):
    """Training requested on an empty dataset."""


class SilentStem(MusicNetError):
    """An all-zero stem where a nonzero RMS is required for gain solving."""


class ManifestError(MusicNetError):
    """Manifest construction failed; message lists what is missing."""


class DegenerateSet(MusicNetError):
    """ROC metrics requested on a single-class score set."""
