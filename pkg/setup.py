"""Build the optional compiled kernels; the package works without them."""
import os
import sys

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("BRINKMAN_LAB_NO_EXT", "") in ("", "0"):
    try:
        import numpy as np
        from Cython.Build import cythonize

        openmp = [] if sys.platform == "darwin" else ["-fopenmp"]
        ext = Extension(
            "brinkman_lab._kernels",
            ["src/brinkman_lab/_kernels.pyx"],
            include_dirs=[np.get_include()],
            define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            extra_compile_args=["-O3", *openmp],
            extra_link_args=openmp,
        )
        ext_modules = cythonize([ext], language_level=3)
    except ImportError:
        print("Cython or numpy missing: installing the pure-Python backend only")

setup(ext_modules=ext_modules)
