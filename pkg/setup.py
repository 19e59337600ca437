"""Build the optional Cython kernels.

The package works without them; ``pseudoflow.kernels`` falls back to numpy.
"""

import os

from setuptools import setup

# FMA contraction would round the distance sums differently from numpy
FLAGS = ["-O3", "-ffp-contract=off"]
if os.environ.get("PSEUDOFLOW_NO_NATIVE", "") in ("", "0"):
    FLAGS.append("-march=native")

try:
    import numpy as np
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "pseudoflow._kernels",
                sources=["src/pseudoflow/_kernels.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=FLAGS,
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
