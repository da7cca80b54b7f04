"""Build script: compiles the optional Cython kernels.

If Cython or a C compiler is unavailable the package still installs and
uses the NumPy fallback.
"""

import os

from setuptools import setup

ext_modules = []
if os.environ.get("MIXFLOWLM_NO_EXT", "") != "1":
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "mixflowlm._kernels._ckernels",
                    ["src/mixflowlm/_kernels/_ckernels.pyx"],
                    include_dirs=[numpy.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
