"""Object-level image search: class-gated cosine retrieval over segmented objects."""

from ._core import *  # noqa: F401,F403
from ._core import __doc__  # noqa: F401
