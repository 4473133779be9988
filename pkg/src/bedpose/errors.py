"""Exception hierarchy shared by every bedpose module.

Library code raises these; only ``bedpose.app.main`` turns them into exit codes.
"""

from __future__ import annotations


class BedposeError(Exception):
    """Base class for all bedpose errors."""

    exit_code: int = 1


# ---------------------------------------------------------------------------
# Configuration (exit 2)
# ---------------------------------------------------------------------------

class ConfigError(BedposeError):
    """Missing or invalid configuration."""

    exit_code = 2


# ---------------------------------------------------------------------------
# Data (exit 3)
# ---------------------------------------------------------------------------

class DataError(BedposeError):
    """Problem with dataset contents, layout or derived artefacts."""

    exit_code = 3


class LoadError(DataError):
    """Malformed dataset layout, unreadable image or bad annotation file."""


class AlignmentError(DataError):
    """Alignment transform missing or not invertible."""


class CropError(DataError):
    """Bounding box cannot be derived (e.g. zero area)."""


class NormalizationError(DataError):
    """Channel standard deviation too small to normalise."""


class PairingError(DataError):
    """Source image has no matching target for translation training."""


class CompositeError(DataError):
    """Bounding box does not fit the compositing canvas."""


class ReportError(DataError):
    """No evaluable samples for a metric report."""


class PlotError(DataError):
    """Loss series missing or empty."""


class ManifestError(DataError):
    """Run manifest references a missing or modified artefact."""


# ---------------------------------------------------------------------------
# Runtime (exit 4)
# ---------------------------------------------------------------------------

class ModelInputError(BedposeError):
    """Tensor shape or range does not match a network's contract."""

    exit_code = 4


class FusionError(BedposeError):
    """Fusion operands disagree in stage, branch count or shape."""

    exit_code = 4


class NumericError(BedposeError):
    """Non-finite loss or probability outside the unit interval."""

    exit_code = 4
