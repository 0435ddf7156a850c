"""EHR risk prediction with diffusion-based sequence augmentation."""

from ._meddiff import *  # noqa: F401,F403
from ._meddiff import __doc__  # noqa: F401
