"""bedpose: multimodal in-bed pose estimation with intermediate feature fusion."""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("bedpose")
except PackageNotFoundError:
    __version__ = "0.0.0-dev"
