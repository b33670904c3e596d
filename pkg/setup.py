"""Build script for the optional compiled kernels.

The package works without the extension (a numpy fallback is selected at
import time); set MMHAR_NO_EXT=1 to skip compilation entirely.
"""

import os

from setuptools import Extension, setup

ext_modules = []
include_dirs = []
if not os.environ.get("MMHAR_NO_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "mmhar.kernels._fps_cy",
                    sources=["src/mmhar/kernels/_fps_cy.pyx"],
                    include_dirs=[np.get_include()],
                )
            ],
            language_level="3",
        )
        include_dirs = [np.get_include()]
    except ImportError:
        pass

setup(ext_modules=ext_modules, include_dirs=include_dirs)
