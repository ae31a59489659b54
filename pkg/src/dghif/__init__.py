"""Multimodal user risk detection over text and social-interaction graphs."""

import os

from . import tensor

_env_precision = os.environ.get("DGHIF_PRECISION")
if _env_precision:
    tensor.set_precision(_env_precision)

__version__ = "0.1.0"
