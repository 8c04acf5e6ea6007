"""Build script for the compiled kernel module.

The pure-NumPy fallback in ``earlyloc.tensornn._kernels_py`` is used whenever
the extension is missing, so a failed compile still yields a working package.
"""

import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

extensions = [
    Extension(
        "earlyloc.tensornn._kernels",
        ["src/earlyloc/tensornn/_kernels.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3"],
    )
]

setup(
    ext_modules=cythonize(
        extensions,
        compiler_directives={
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "initializedcheck": False,
            "language_level": "3",
        },
    )
)
