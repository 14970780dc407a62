"""Builds the compiled kernel extension. The package works without it
(pure-numpy kernels take over at import), so a failed extension build is
downgraded to a warning rather than failing the install."""

import warnings

from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [Extension(
            "sidlab._speedups",
            sources=["src/sidlab/_speedups.pyx"],
            include_dirs=[numpy.get_include()],
            extra_compile_args=["-O3", "-march=native"],
            define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        )],
        language_level=3,
    )
except Exception as exc:  # pragma: no cover - build-environment dependent
    warnings.warn(f"skipping compiled kernels ({exc}); "
                  "the numpy fallback will be used")

setup(ext_modules=ext_modules)
