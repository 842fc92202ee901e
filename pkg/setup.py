"""Build script: compiles the optional Cython kernel extension.

The package is fully functional without the extension (a numpy fallback is
selected at import time), so any build failure here degrades to a warning
instead of aborting the install.
"""

import warnings

from setuptools import setup

try:
    import numpy
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "attnreg._kernels._core",
                sources=["src/attnreg/_kernels/_core.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": 3, "embedsignature": True},
    )
except Exception as exc:  # Cython/compiler missing: install pure-Python
    warnings.warn(f"skipping compiled kernels, numpy fallback will be used: {exc}")
    ext_modules = []

setup(ext_modules=ext_modules)
