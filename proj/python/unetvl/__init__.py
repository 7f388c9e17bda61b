"""3D medical segmentation with a ViL encoder and KAN channel projections."""

from ._core import *  # noqa: F401,F403
from ._core import __version__  # noqa: F401
