"""Build script: compiles the optional fast-path kernel extension.

The package works without the extension (pure-Python kernels are selected
at import time), so the build is marked optional and any compiler or
Cython failure degrades to a source-only install.
"""

from setuptools import Extension, setup

ext_modules = []
try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "cospace.kernels._native",
                ["src/cospace/kernels/_native.pyx"],
                optional=True,
            )
        ],
        compiler_directives={
            "language_level": 3,
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )
except ImportError:
    pass

setup(ext_modules=ext_modules)
