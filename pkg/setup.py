"""Builds the optional compiled kernel extension.

The package works without it: decisionflow.kernels falls back to the numpy
implementation when the extension is absent or fails to import.
"""

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "decisionflow.kernels._core",
                ["src/decisionflow/kernels/_core.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
