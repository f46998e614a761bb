"""Build the optional Cython kernels.

The package works without them: ``xprs.kernels`` falls back to the pure
Python/numpy implementations when the extension is missing.
"""
import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("XPRS_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "xprs._ckernels",
                    ["src/xprs/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3", "-ffp-contract=off"],
                )
            ],
            compiler_directives={
                "language_level": 3,
                "boundscheck": False,
                "wraparound": False,
                "cdivision": True,
            },
        )

setup(ext_modules=ext_modules)
