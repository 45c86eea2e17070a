"""Backend selection for the SSIM hot loop.

The compiled extension is used when it was built and importable; setting
``FEDCASE_PURE_PYTHON=1`` forces the numpy fallback. Both produce identical
bits, so the choice only affects speed.
"""

import os

from . import _ssim_py

python_ssim_maps = _ssim_py.ssim_maps

try:
    from ._ssim_ext import ssim_maps as compiled_ssim_maps
except ImportError:  # extension not built
    compiled_ssim_maps = None

if compiled_ssim_maps is not None and not os.environ.get("FEDCASE_PURE_PYTHON"):
    BACKEND = "cython"
    ssim_maps = compiled_ssim_maps
else:
    BACKEND = "python"
    ssim_maps = python_ssim_maps
